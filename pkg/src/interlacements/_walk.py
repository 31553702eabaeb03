"""Numba kernels for simple random walks on Z^d.

Positions are int64 arrays of length d.  All boxes are sup-norm balls
centred at the origin.  A walk outside a box ``B_L`` may be advanced by a
single "box jump": from ``y`` it moves to the exit point of the cube
``y + B_k``, drawn from the exact exit law (see ``lattice.exit_tables``).
This is exact in law for the sequence of positions the walk occupies
*outside* the skipped cube, so it is only used where the cube misses both
the target box and the complement of the guard.
"""

import numpy as np
from numba import njit

from ._rng import digit_params, new_state, next_digit, next_u53

INF = np.inf


@njit(cache=True, inline="always")
def supnorm(pos):
    a = 0
    for i in range(pos.shape[0]):
        v = pos[i] if pos[i] >= 0 else -pos[i]
        if v > a:
            a = v
    return a


@njit(cache=True, inline="always")
def direction(s, dp):
    return next_digit(s, dp[0], dp[1], dp[2], dp[3])


@njit(cache=True, inline="always")
def step(pos, s, dp):
    c = direction(s, dp)
    pos[c >> 1] += 1 - 2 * (c & 1)


@njit(cache=True)
def jump(pos, s, d, dp, ti, cdf, offs, ks):
    k = ks[ti]
    c = direction(s, dp)
    axis = c >> 1
    if c & 1:
        pos[axis] -= k + 1
    else:
        pos[axis] += k + 1
    r = next_u53(s)
    lo = offs[ti]
    hi = offs[ti + 1]
    # first cell whose cumulative threshold exceeds r
    a = lo
    b = hi - 1
    while a < b:
        m = (a + b) >> 1
        if cdf[m] > r:
            b = m
        else:
            a = m + 1
    rem = a - lo
    n = 2 * k + 1
    for i in range(d - 1, -1, -1):
        if i == axis:
            continue
        pos[i] += rem % n - k
        rem //= n


@njit(cache=True)
def excursion(pos, L, M, s, d, dp, accel, cdf, offs, ks, best):
    """Run from ``pos`` (outside B_L) until it enters B_L or leaves B_M.

    Returns True if B_L was hit; ``pos`` then holds the hitting site.
    Otherwise ``pos`` holds the first site outside B_M.
    """
    nbest = best.shape[0]
    while True:
        a = supnorm(pos)
        if a <= L:
            return True
        if a > M:
            return False
        if accel:
            allowed = a - L - 1
            if M - a < allowed:
                allowed = M - a
            if allowed >= 1:
                if allowed >= nbest:
                    allowed = nbest - 1
                ti = best[allowed]
                if ti >= 0:
                    jump(pos, s, d, dp, ti, cdf, offs, ks)
                    continue
        step(pos, s, dp)


@njit(cache=True)
def escape_counts(sites, L, R, start, n, key, accel, cdf, offs, ks, best, a_d):
    """Stratified escape trials from the boundary sites of B_L.

    Trial ``i`` (global index ``start + i``) starts at ``sites[i % m]``.  A
    trial escapes if, after its first step, the walk leaves B_R before
    returning to B_L.  ``tail`` accumulates ``a_d |exit|^(2-d)`` over escapes,
    the asymptotic Green function at the exit point.
    """
    m, d = sites.shape
    dp = digit_params(2 * d)
    s = new_state(key)
    trials = np.zeros(m, np.int64)
    escapes = np.zeros(m, np.int64)
    tail = np.zeros(m, np.float64)
    pos = np.empty(d, np.int64)
    for i in range(start, start + n):
        j = i % m
        for q in range(d):
            pos[q] = sites[j, q]
        trials[j] += 1
        step(pos, s, dp)
        if supnorm(pos) <= L:
            continue
        if excursion(pos, L, R, s, d, dp, accel, cdf, offs, ks, best):
            continue
        escapes[j] += 1
        r2 = 0.0
        for q in range(d):
            r2 += pos[q] * pos[q]
        tail[j] += a_d * r2 ** (0.5 * (2 - d))
    return trials, escapes, tail


@njit(cache=True)
def plain_walk(start, M, key, max_steps):
    """Step-by-step walk from ``start`` until it first leaves B_M.

    Returns the visited positions (including the exit site) and a flag that
    is False if ``max_steps`` ran out first.
    """
    d = start.shape[0]
    dp = digit_params(2 * d)
    s = new_state(key)
    cap = 1024
    out = np.empty((cap, d), np.int64)
    pos = start.copy()
    n = 0
    for q in range(d):
        out[0, q] = pos[q]
    n = 1
    done = supnorm(pos) > M
    while not done and n <= max_steps:
        step(pos, s, dp)
        if n == cap:
            cap *= 2
            bigger = np.empty((cap, d), np.int64)
            bigger[:n] = out[:n]
            out = bigger
        for q in range(d):
            out[n, q] = pos[q]
        n += 1
        done = supnorm(pos) > M
    return out[:n], done


@njit(cache=True)
def soup_traces(entries, labels, key, N, M, accel, record, cdf, offs, ks, best):
    """Forward traces of one soup inside the window B_N.

    Trajectories are processed in the given label order (ascending), so the
    first label written at a site is the smallest label visiting it.  Returns
    the first-visit label map (``inf`` where unvisited) and, when ``record`` is
    set, the distinct visited sites of each trajectory in visit order as a
    flat index array with offsets.
    """
    K, d = entries.shape
    dp = digit_params(2 * d)
    W = 2 * N + 1
    size = W**d
    strides = np.empty(d, np.int64)
    acc = 1
    for q in range(d - 1, -1, -1):
        strides[q] = acc
        acc *= W
    tau = np.full(size, INF)
    stamp = np.zeros(size if record else 1, np.int32)
    cap = 4096 if record else 1
    flat = np.empty(cap, np.int64)
    nflat = 0
    offsets = np.zeros(K + 1, np.int64)
    s = new_state(key)
    pos = np.empty(d, np.int64)
    for t in range(K):
        for q in range(d):
            pos[q] = entries[t, q]
        offsets[t] = nflat
        lab = labels[t]
        while True:
            idx = 0
            for q in range(d):
                idx += (pos[q] + N) * strides[q]
            while True:
                # ascending labels: the first write at a site is its minimum
                tau[idx] = min(tau[idx], lab)
                if record and stamp[idx] != t + 1:
                    stamp[idx] = t + 1
                    if nflat == cap:
                        cap *= 2
                        bigger = np.empty(cap, np.int64)
                        bigger[:nflat] = flat[:nflat]
                        flat = bigger
                    flat[nflat] = idx
                    nflat += 1
                c = direction(s, dp)
                a = c >> 1
                dl = 1 - 2 * (c & 1)
                p = pos[a] + dl
                pos[a] = p
                if p > N or p < -N:
                    break
                idx += dl * strides[a]
            if not excursion(pos, N, M, s, d, dp, accel, cdf, offs, ks, best):
                break
    offsets[K] = nflat
    return tau, flat[:nflat], offsets


@njit(cache=True)
def cluster_radius(tau, u, cap, N, rad, strides, stamp, gen, queue):
    """Sup-norm extent of the origin's cluster in {tau > u}, capped at ``cap``.

    Returns -1 when the origin itself is occupied and ``cap`` as soon as a
    site at sup-distance ``cap`` is reached (``cap <= N``).  Sites of radius
    below ``cap`` are strictly inside the window, so +/- strides never wrap.
    """
    d = strides.shape[0]
    o = 0
    for q in range(d):
        o += N * strides[q]
    if tau[o] <= u:
        return -1
    if cap <= 0:
        return 0
    r = 0
    head = 0
    tail = 1
    queue[0] = o
    stamp[o] = gen
    while head < tail:
        x = queue[head]
        head += 1
        for q in range(d):
            for sg in (-1, 1):
                y = x + sg * strides[q]
                if stamp[y] != gen and tau[y] > u:
                    ry = rad[y]
                    if ry > r:
                        r = ry
                        if r >= cap:
                            return cap
                    stamp[y] = gen
                    queue[tail] = y
                    tail += 1
    return r


@njit(cache=True)
def origin_radii(tau, levels, caps, N, rad, strides):
    """``cluster_radius`` for every (level, cap) pair, independent searches."""
    nl = levels.shape[0]
    nc = caps.shape[0]
    out = np.empty((nl, nc), np.int64)
    stamp = np.zeros(tau.shape[0], np.int32)
    queue = np.empty(tau.shape[0], np.int64)
    gen = 0
    for i in range(nl):
        for j in range(nc):
            gen += 1
            out[i, j] = cluster_radius(tau, levels[i], caps[j], N, rad, strides, stamp, gen, queue)
    return out

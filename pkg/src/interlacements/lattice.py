"""Simple random walk primitives and discrete potential theory on Z^d."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from . import _rng, _walk

log = logging.getLogger(__name__)

DEFAULT_STEP_CAP = 10**9
# box-jump half-widths available to the walk kernels
JUMP_LADDER = (1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48, 56, 64, 80, 96, 112, 128)
_MAX_TABLE_CELLS = 2_000_000


class StepCapExceeded(RuntimeError):
    """A walk ran past its hard step cap."""


def _check_dim(d: int) -> int:
    d = int(d)
    if d < 3:
        raise ValueError(f"dimension must be >= 3 (walk is recurrent for d={d})")
    return d


def asymptotic_green_constant(d: int) -> float:
    """a_d with g(0, x) ~ a_d |x|^(2-d); equals 3/(2 pi) for d = 3."""
    d = _check_dim(d)
    return d * math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2))


@dataclass(frozen=True)
class LatticeBox:
    """Sup-norm ball of integer radius around ``center``."""

    radius: int
    center: tuple = None
    d: int = 3

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        c = tuple(int(x) for x in (self.center if self.center is not None else (0,) * self.d))
        if len(c) != self.d:
            raise ValueError("center has the wrong dimension")
        object.__setattr__(self, "center", c)
        _check_dim(self.d)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def size(self) -> int:
        return self.side**self.d

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.max(np.abs(x - np.asarray(self.center))) <= self.radius)

    def sites(self) -> np.ndarray:
        """All sites in C order (last coordinate fastest)."""
        r = np.arange(-self.radius, self.radius + 1)
        grid = np.stack(np.meshgrid(*([r] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)
        return grid + np.asarray(self.center, dtype=np.int64)

    def boundary(self) -> np.ndarray:
        """Internal boundary: member sites with a neighbour outside the box."""
        s = self.sites()
        rel = np.abs(s - np.asarray(self.center))
        return s[rel.max(axis=1) == self.radius]

    def flat_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64) - np.asarray(self.center)
        idx = np.zeros(x.shape[:-1], dtype=np.int64)
        for q in range(self.d):
            idx = idx * self.side + (x[..., q] + self.radius)
        return idx


def origin_box(radius: int, d: int = 3) -> LatticeBox:
    return LatticeBox(int(radius), None, d)


# --- Green function ---------------------------------------------------------


def _ive0_tail(a: float, d: int) -> float:
    """int_a^inf ive(0, t/d)^d dt from the large-argument expansion of ive."""
    c = (1.0, 1 / 8, 9 / 128, 225 / 3072)
    # ive(0, x)^d = (2 pi x)^(-d/2) * (sum_k c_k x^-k)^d, expanded to order x^-3
    p = np.zeros(4)
    p[0] = 1.0
    for _ in range(d):
        p = np.convolve(p, c)[:4]
    total = 0.0
    for k, pk in enumerate(p):
        e = d / 2 + k  # integrand ~ (t/d)^(-e)
        total += pk * (2 * math.pi) ** (-d / 2) * d**e * a ** (1 - e) / (e - 1)
    return total


@functools.lru_cache(maxsize=None)
def green_origin(d: int = 3) -> float:
    """g(0,0) for the simple random walk on Z^d.

    Uses the continuous-time representation g = int_0^inf (e^{-t/d} I_0(t/d))^d dt,
    which equals the Fourier integral (2 pi)^-d int (1 - d^-1 sum cos)^-1 after
    integrating out the time variable.
    """
    d = _check_dim(d)
    a = 2000.0
    f = lambda t: special.ive(0, t / d) ** d
    head = 0.0
    edges = [0.0, 1.0, 10.0, 100.0, 500.0, a]
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, _ = integrate.quad(f, lo, hi, epsabs=1e-14, epsrel=1e-13, limit=200)
        head += v
    return head + _ive0_tail(a, d)


# --- exact exit law of a cube -------------------------------------------------


@functools.lru_cache(maxsize=None)
def face_distribution(d: int, k: int) -> np.ndarray:
    """Exit law of the walk from the centre of B_k on one face.

    Entry ``H[y']`` (shape ``(2k+1,)*(d-1)``) is the probability that the walk
    started at 0 leaves B_k through the site ``(k+1, y')``.  The 2d faces are
    equally likely, so ``H.sum() == 1/(2d)``.  Computed from the Dirichlet
    Green function of the box via a separable sine transform.
    """
    n = 2 * k + 1
    j = np.arange(1, n + 1)
    x = np.arange(n)
    psi = math.sqrt(2 / (n + 1)) * np.sin(np.pi * np.outer(j, x + 1) / (n + 1))
    cosj = np.cos(np.pi * j / (n + 1))
    p0 = psi[:, k]
    pk = psi[:, n - 1]
    S = np.zeros((n,) * (d - 1))
    for ax in range(d - 1):
        shape = [1] * (d - 1)
        shape[ax] = n
        S = S + cosj.reshape(shape)
    A = np.zeros_like(S)
    for a in range(n):
        w = p0[a] * pk[a]
        if w != 0.0:
            A += w * d / (d - cosj[a] - S)
    for ax in range(d - 1):
        shape = [1] * (d - 1)
        shape[ax] = n
        A = A * p0.reshape(shape)
    # inverse transform along every transverse axis
    for ax in range(d - 1):
        A = np.moveaxis(np.tensordot(psi.T, np.moveaxis(A, ax, 0), axes=(1, 0)), 0, ax)
    H = A / (2 * d)
    return np.clip(H, 0.0, None)


@dataclass(frozen=True)
class JumpTables:
    """Concatenated integer CDFs (out of 2**53) of the face exit laws."""

    d: int
    ks: np.ndarray
    offs: np.ndarray
    cdf: np.ndarray
    best: np.ndarray  # best[a]: index of largest k <= a in ks, -1 if none

    def args(self):
        return self.cdf, self.offs, self.ks, self.best


@functools.lru_cache(maxsize=None)
def jump_tables(d: int = 3) -> JumpTables:
    d = _check_dim(d)
    ks, cdfs = [], []
    for k in JUMP_LADDER:
        if (2 * k + 1) ** (d - 1) > _MAX_TABLE_CELLS:
            break
        H = face_distribution(d, k).ravel()
        c = np.cumsum(H)
        c = np.round(c / c[-1] * 2.0**53).astype(np.uint64)
        c[-1] = np.uint64(2**53)
        ks.append(k)
        cdfs.append(c)
    offs = np.zeros(len(ks) + 1, dtype=np.int64)
    offs[1:] = np.cumsum([len(c) for c in cdfs])
    best = np.full(max(ks) + 1, -1, dtype=np.int64)
    for i, k in enumerate(ks):
        best[k:] = i
    return JumpTables(d, np.asarray(ks, dtype=np.int64), offs, np.concatenate(cdfs), best)


_EMPTY = JumpTables(3, np.zeros(1, np.int64), np.zeros(2, np.int64), np.zeros(1, np.uint64), np.full(1, -1, np.int64))


def _tables(d: int, accelerate: bool) -> JumpTables:
    return jump_tables(d) if accelerate else _EMPTY


# --- walks --------------------------------------------------------------------


def walk_until_exit(start, guard: LatticeBox, rng, max_steps: int = DEFAULT_STEP_CAP) -> np.ndarray:
    """Step-by-step trace from ``start`` up to and including the first site outside ``guard``."""
    start = np.asarray(start, dtype=np.int64)
    if start.shape != (guard.d,):
        raise ValueError("start has the wrong dimension")
    if not guard.contains(start):
        raise ValueError("start must lie inside the guard box")
    c = np.asarray(guard.center, dtype=np.int64)
    path, done = _walk.plain_walk(start - c, guard.radius, _rng.kernel_key(rng), int(max_steps))
    if not done:
        raise StepCapExceeded(f"walk did not leave the guard within {max_steps} steps")
    return path + c


def never_return_estimate(d: int, walks: int, R: int, rng) -> tuple[float, float]:
    """Monte Carlo g(0,0) from escape frequencies, with its standard error.

    Walks from 0 run until they return to 0 or leave B_R.  With escape
    frequency q and mean s of a_d|exit|^(2-d) over escaping walks (zero
    otherwise), g(0,0) ~= (1 + s)/q.  The correction term accounts for walks
    that leave B_R and still come back later.
    """
    sites = np.zeros((1, d), dtype=np.int64)
    t = _EMPTY
    trials, esc, tail = _walk.escape_counts(sites, 0, R, 0, walks, _rng.kernel_key(rng), False, *t.args(), asymptotic_green_constant(d))
    n = trials[0]
    q = esc[0] / n
    s = tail[0] / n
    g = (1 + s) / q
    # delta method; the tail term is small and nearly deterministic given an escape
    se = g * math.sqrt((1 - q) / (n * q))
    return g, se


# --- equilibrium measure ----------------------------------------------------


@dataclass(frozen=True)
class PotentialEstimate:
    """Capacity-type estimate.

    ``value`` is the estimate for Z^d (after the tail correction); the raw
    value for the walk killed on leaving B(0,R) is kept in ``killed_value``.
    """

    value: float
    stderr: float
    samples: int
    escape_radius: int
    killed_value: float = float("nan")
    killed_stderr: float = float("nan")
    bias_bound: float = float("nan")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class EquilibriumMeasure:
    """Escape probabilities on the boundary of a box, killed at exit of B(0,R)."""

    box: LatticeBox
    escape_radius: int
    sites: np.ndarray
    escape: np.ndarray  # e_B(x) for the killed walk
    weights: np.ndarray  # normalized, sums to 1
    trials: np.ndarray
    cdf: np.ndarray = field(repr=False)  # integer CDF over sites, out of 2**53

    @property
    def killed_capacity(self) -> float:
        return float(self.escape.sum())

    def sample(self, rng, k: int) -> np.ndarray:
        """``k`` sites drawn from the normalized measure."""
        r = rng.integers(0, 2**53, size=k, dtype=np.uint64)
        return self.sites[np.searchsorted(self.cdf, r, side="right")]


def _orbit_keys(sites: np.ndarray) -> np.ndarray:
    """Label of each site's orbit under the symmetries of the cube."""
    a = np.sort(np.abs(sites), axis=1)
    _, inv = np.unique(a, axis=0, return_inverse=True)
    return inv.ravel()


def equilibrium_sample(
    box: LatticeBox,
    R: int | None = None,
    n: int | None = None,
    rng=None,
    *,
    seed: int | None = None,
    accelerate: bool = True,
    chunk: int = 1 << 18,
) -> tuple[PotentialEstimate, EquilibriumMeasure]:
    """Estimate cap(B) and the normalized equilibrium measure of a box.

    Trial ``i`` starts at boundary site ``i mod |dB|`` (stratified), takes one
    step, and counts as an escape if it leaves B(0,R) before coming back to B.
    Sites in the same cube-symmetry orbit are pooled.  The resulting
    ``EquilibriumMeasure`` is exact for the walk killed outside B(0,R); the
    capacity for Z^d is recovered as Q/(1+T) where T adds back the
    asymptotic return mass a_d|exit|^(2-d) of escaping walks.

    Either ``rng`` or ``seed`` must be given; with ``seed`` the trials are cut
    into fixed chunks with one stream each, so the result does not depend on
    how chunks are scheduled.
    """
    d = box.d
    if any(box.center):
        raise ValueError("only origin-centred boxes are supported")
    L = box.radius
    R = 8 * max(L, 1) if R is None else int(R)
    if R <= 2 * L:
        raise ValueError(f"escape radius R={R} must exceed 2L={2 * L}")
    sites = box.boundary()
    m = len(sites)
    if m == 0:
        raise ValueError("empty boundary")
    n = 4000 * m if n is None else int(n)
    if n < 1:
        raise ValueError("sample budget must be positive")
    t = _tables(d, accelerate)
    a_d = asymptotic_green_constant(d)
    trials = np.zeros(m, np.int64)
    escapes = np.zeros(m, np.int64)
    tail = np.zeros(m, np.float64)
    if seed is None:
        if rng is None:
            raise ValueError("need rng or seed")
        blocks = [(0, n, _rng.kernel_key(rng))]
    else:
        blocks = []
        for c, start in enumerate(range(0, n, chunk)):
            key = _rng.kernel_key(_rng.stream(seed, _rng.EQUILIBRIUM, d, L, R, c))
            blocks.append((start, min(chunk, n - start), key))
    for start, cnt, key in blocks:
        tr, es, ta = _walk.escape_counts(sites, L, R, start, cnt, key, accelerate, *t.args(), a_d)
        trials += tr
        escapes += es
        tail += ta

    orb = _orbit_keys(sites)
    o_tr = np.bincount(orb, weights=trials)
    o_es = np.bincount(orb, weights=escapes)
    o_ta = np.bincount(orb, weights=tail)
    o_size = np.bincount(orb)
    p = o_es / o_tr  # per-site escape probability of each orbit
    escape = p[orb]
    Q = float(np.sum(p * o_size))
    T = float(np.sum(o_ta / o_tr * o_size))
    # binomial variance per orbit, scaled by orbit size
    q_var = float(np.sum(o_size**2 * p * (1 - p) / o_tr))
    q_se = math.sqrt(q_var)
    cap = Q / (1 + T)
    cap_se = q_se / (1 + T)
    weights = escape / Q
    cdf = np.round(np.cumsum(weights) * 2.0**53).astype(np.uint64)
    cdf[-1] = np.uint64(2**53)
    est = PotentialEstimate(
        value=cap,
        stderr=cap_se,
        samples=n,
        escape_radius=R,
        killed_value=Q,
        killed_stderr=q_se,
        bias_bound=Q * a_d * (R + 1.0) ** (2 - d) * Q,
    )
    meas = EquilibriumMeasure(box, R, sites, escape, weights, trials, cdf)
    log.debug("cap(B_%d) d=%d R=%d: killed %.6g, corrected %.6g +- %.2g", L, d, R, Q, cap, cap_se)
    return est, meas


@functools.lru_cache(maxsize=32)
def window_equilibrium(d: int, N: int, M: int, n: int | None, seed: int, accelerate: bool = True):
    """Cached ``equilibrium_sample`` for a soup window B_N with guard radius M."""
    return equilibrium_sample(origin_box(N, d), M, n, seed=seed, accelerate=accelerate)

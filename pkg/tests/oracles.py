"""Independent reference computations used by the tests.

None of these call into the package; each takes a different route to the
same quantity than the code under test.
"""

import math

import numpy as np

# Richardson extrapolation 2 g(128) - g(64) of the midpoint Fourier rule below,
# frozen from a run of ``green_fourier_midpoint``
GREEN_3D_FOURIER = 1.5163880924215052
GREEN_3D_MIDPOINT_64 = 1.5033458386531011
GREEN_3D_MIDPOINT_128 = 1.5098669655373032


def green_fourier_midpoint(n: int) -> float:
    """g(0,0) in d=3 as the mean of 1/(1 - (cos k1 + cos k2 + cos k3)/3) over a midpoint grid.

    The singularity at k = 0 sits on a cell corner, so the rule converges
    like 1/n; Richardson on (n, 2n) removes the leading term.
    """
    k = -math.pi + (np.arange(n) + 0.5) * (2 * math.pi / n)
    c = np.cos(k)
    s = c[:, None] + c[None, :]
    total = 0.0
    for c3 in c:
        total += np.sum(1.0 / (1.0 - (s + c3) / 3.0))
    return total / n**3


def face_exit_dense(d: int, k: int) -> np.ndarray:
    """Exit law from 0 of B_k through the face x_1 = k+1, by a dense linear solve.

    h(x) = P_x[exit through (k+1, y')] is harmonic inside and equals the
    indicator on the exterior boundary; solved for all y' at once.
    """
    n = 2 * k + 1
    sites = np.stack(np.meshgrid(*([np.arange(-k, k + 1)] * d), indexing="ij"), -1).reshape(-1, d)
    index = {tuple(s): i for i, s in enumerate(sites)}
    m = len(sites)
    A = np.eye(m)
    B = np.zeros((m, n ** (d - 1)))
    for i, s in enumerate(sites):
        for q in range(d):
            for sgn in (-1, 1):
                t = s.copy()
                t[q] += sgn
                j = index.get(tuple(t))
                if j is not None:
                    A[i, j] -= 1.0 / (2 * d)
                elif q == 0 and sgn == 1:
                    col = np.ravel_multi_index(tuple(t[1:] + k), (n,) * (d - 1))
                    B[i, col] += 1.0 / (2 * d)
    H = np.linalg.solve(A, B)
    return H[index[(0,) * d]].reshape((n,) * (d - 1))


def newton_ball(r):
    """G 1_B for the unit ball with G = (3/(4 pi)) 1/|x|: 3 - r^2 inside, 2/r outside."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(r <= 1, 3 - r * r, 2 / np.maximum(r, 1e-300))


NEWTON_PAIRING = 16 * math.pi / 5  # <1_B, G 1_B> for the unit ball


def affine_minimizer(theta_u: float, nu: float, kappa: float):
    """Closed-form (lambda, sup phi, energy) for the affine toy on the unit ball.

    phi = lam kappa G1, constraint theta_u + lam kappa^2 avg G1 with avg G1 = 2.4.
    """
    lam = (nu - theta_u) / (2.4 * kappa**2)
    return lam, 3 * lam * kappa, lam**2 * kappa**2 * NEWTON_PAIRING


def poisson_two_or_more(lam: float) -> float:
    return 1 - math.exp(-lam) - lam * math.exp(-lam)

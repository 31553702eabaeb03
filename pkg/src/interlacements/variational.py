"""Constrained Dirichlet-energy minimization through the Euler-Lagrange fixed point.

Minimize (1/2d) int |grad phi|^2 over phi >= 0 subject to
avg_D eta~(sqrt u + phi) = nu.  Minimizers solve phi = lam G(eta~'(sqrt u + phi) 1_D)
where G is convolution with a_d |x|^(2-d), the inverse of -(1/2d) Laplacian.
The solver runs a damped fixed point for each multiplier lam and bisects on
lam until the constraint holds.

Two discretizations share one interface:

* ``RadialBall`` (d = 3): nodes r_k = k h on [0, r_max].  Densities are
  piecewise linear on [0, R_D] and the Newton potential of each cell is
  integrated exactly, so constant densities reproduce 3 - r^2 and 2/r to
  rounding.  Energies add the exact harmonic tail beyond r_max.
* ``BoxDomain``: uniform Cartesian grid around a sup-norm ball, potential by
  FFT convolution with the analytic self-cell average.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft as sfft
from scipy import integrate

from .lattice import asymptotic_green_constant

log = logging.getLogger(__name__)

# int over the unit cube centred at 0 of 1/|x|
CUBE_SELF_INTEGRAL = 3 * math.log(2 + math.sqrt(3)) - math.pi / 2


class ConvergenceError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class SmallExcessError(ValueError):
    """The target is beyond what the fixed point can reach."""

    def __init__(self, msg, best_constraint=float("nan")):
        super().__init__(msg)
        self.best_constraint = best_constraint


class MeshResolutionError(RuntimeError):
    pass


class MonotonicityError(RuntimeError):
    """The constraint value decreased along the multiplier search."""


@dataclass
class Field:
    values: np.ndarray
    domain: object = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


# --- domains -------------------------------------------------------------------------


class RadialBall:
    """Ball of radius R_D in R^3 on a radial mesh."""

    shape = "ball"

    def __init__(self, radius: float = 1.0, d: int = 3, h: float | None = None, r_max: float | None = None):
        if d != 3:
            raise ValueError("the radial discretization is for d = 3")
        self.d = 3
        self.radius = float(radius)
        h = 1e-3 * self.radius if h is None else float(h)
        r_max = 10 * self.radius if r_max is None else float(r_max)
        self.kd = int(round(self.radius / h))
        self.h = self.radius / self.kd
        self.k = int(round(r_max / self.h))
        if self.k <= self.kd:
            raise ValueError("r_max must exceed the ball radius")
        self.r = np.arange(self.k + 1) * self.h
        self.r[self.kd] = self.radius
        self.r_max = float(self.r[-1])
        self.inside = np.arange(self.k + 1) <= self.kd
        self.volume = 4 * math.pi * self.radius**3 / 3
        a, b = self.r[: self.kd], self.r[1 : self.kd + 1]
        hh = b - a
        # exact moments of the two hat functions on each cell of [0, R_D]
        self._m2 = ((b * (b**3 - a**3) / 3 - (b**4 - a**4) / 4) / hh, ((b**4 - a**4) / 4 - a * (b**3 - a**3) / 3) / hh)
        self._m1 = ((b * (b**2 - a**2) / 2 - (b**3 - a**3) / 3) / hh, ((b**3 - a**3) / 3 - a * (b**2 - a**2) / 2) / hh)
        w = np.zeros(self.k + 1)
        w[: self.kd] += 4 * math.pi * self._m2[0]
        w[1 : self.kd + 1] += 4 * math.pi * self._m2[1]
        self.weights = w  # integral weights over D
        self._g1 = None

    def describe(self) -> dict:
        return {"shape": "ball", "d": 3, "radius": self.radius, "h": self.h, "r_max": self.r_max}

    def zeros(self) -> np.ndarray:
        return np.zeros(self.k + 1)

    def average(self, f) -> float:
        f = np.broadcast_to(np.asarray(f, dtype=np.float64), self.r.shape)
        return float(np.dot(self.weights, f) / self.volume)

    def integrate_d(self, f) -> float:
        return float(np.dot(self.weights, np.broadcast_to(f, self.r.shape)))

    def green(self, rho: np.ndarray) -> np.ndarray:
        rho = np.asarray(rho, dtype=np.float64)
        if np.any(rho[~self.inside] != 0):
            raise ValueError("density must vanish outside D")
        ra, rb = rho[: self.kd], rho[1 : self.kd + 1]
        c2 = ra * self._m2[0] + rb * self._m2[1]
        c1 = ra * self._m1[0] + rb * self._m1[1]
        inner = np.zeros(self.k + 1)
        inner[1 : self.kd + 1] = np.cumsum(c2)
        inner[self.kd + 1 :] = inner[self.kd]
        tail = np.zeros(self.k + 1)
        tail[: self.kd] = np.cumsum(c1[::-1])[::-1]
        out = np.empty(self.k + 1)
        out[0] = 6 * tail[0]
        out[1:] = 6 * (inner[1:] / self.r[1:] + tail[1:])
        return out

    def indicator(self) -> np.ndarray:
        return self.inside.astype(np.float64)

    def g1(self) -> np.ndarray:
        if self._g1 is None:
            self._g1 = self.green(self.indicator())
        return self._g1

    def energy(self, phi: np.ndarray) -> float:
        """(1/6) int |phi'|^2 over R^3, with phi = C/r assumed beyond r_max."""
        phi = np.asarray(phi, dtype=np.float64)
        dphi = np.diff(phi) / np.diff(self.r)
        vol = 4 * math.pi * np.diff(self.r**3) / 3
        tail = 4 * math.pi * phi[-1] ** 2 * self.r_max
        return float((np.dot(dphi**2, vol) + tail) / 6)

    def inner(self, a, b) -> float:
        """int a b over D (a supported in D)."""
        return float(np.dot(self.weights, np.asarray(a) * np.asarray(b)))

    def radius_of_nodes(self) -> np.ndarray:
        return self.r

    def dilate(self, phi: np.ndarray, s: float) -> np.ndarray:
        """phi(r/s) on the same mesh, continued as C/r past r_max."""
        x = self.r / s
        out = np.interp(np.minimum(x, self.r_max), self.r, phi)
        far = x > self.r_max
        out[far] = phi[-1] * self.r_max / x[far]
        return out


class BoxDomain:
    """Sup-norm ball [-a, a]^d on a uniform grid padded to [-pad a, pad a]^d."""

    shape = "box"

    def __init__(self, half_width: float = 1.0, d: int = 3, n: int = 16, pad: int = 3):
        self.d = int(d)
        self.half_width = float(half_width)
        self.n = int(n)
        self.pad = int(pad)
        self.h = self.half_width / self.n
        m = self.pad * self.n
        ax = np.arange(-m, m + 1) * self.h
        self.axis = ax
        self.shape_ = (2 * m + 1,) * self.d
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        self.radius_nodes = np.sqrt(sum(g**2 for g in grids))
        sup = np.max(np.abs(np.stack(grids)), axis=0)
        self.sup_nodes = sup
        self.inside = sup <= self.half_width + 1e-12
        # tensor trapezoid weights on [-a, a]
        w1 = np.where(np.abs(ax) <= self.half_width + 1e-12, self.h, 0.0)
        w1[np.isclose(np.abs(ax), self.half_width)] = self.h / 2
        w = w1
        for _ in range(self.d - 1):
            w = np.multiply.outer(w, w1)
        self.weights = w
        self.volume = (2 * self.half_width) ** self.d
        self._kernel_hat = None
        self._g1 = None

    def describe(self) -> dict:
        return {"shape": "box", "d": self.d, "half_width": self.half_width, "n": self.n, "pad": self.pad, "h": self.h}

    def zeros(self):
        return np.zeros(self.shape_)

    def average(self, f) -> float:
        f = np.broadcast_to(np.asarray(f, dtype=np.float64), self.shape_)
        return float(np.sum(self.weights * f) / self.volume)

    def integrate_d(self, f) -> float:
        return float(np.sum(self.weights * np.broadcast_to(f, self.shape_)))

    def _kernel(self):
        if self._kernel_hat is None:
            m = self.shape_[0]
            size = 2 * m - 1
            off = (np.arange(size) - (m - 1)) * self.h
            grids = np.meshgrid(*([off] * self.d), indexing="ij")
            rr = np.sqrt(sum(g**2 for g in grids))
            a_d = asymptotic_green_constant(self.d)
            with np.errstate(divide="ignore"):
                k = a_d * rr ** (2.0 - self.d)
            c = tuple(m - 1 for _ in range(self.d))
            if self.d == 3:
                k[c] = a_d * CUBE_SELF_INTEGRAL / self.h
            else:
                k[c] = 0.0
            self._fft_shape = tuple(sfft.next_fast_len(2 * m - 1 + m - 1) for _ in range(self.d))
            self._kernel_hat = sfft.rfftn(k, self._fft_shape)
        return self._kernel_hat

    def green(self, rho: np.ndarray) -> np.ndarray:
        rho = np.asarray(rho, dtype=np.float64)
        if np.any(rho[~self.inside] != 0):
            raise ValueError("density must vanish outside D")
        kh = self._kernel()
        m = self.shape_[0]
        src = rho * self.weights
        conv = sfft.irfftn(sfft.rfftn(src, self._fft_shape) * kh, self._fft_shape)
        sl = tuple(slice(m - 1, 2 * m - 1) for _ in range(self.d))
        return conv[sl]

    def indicator(self):
        return self.inside.astype(np.float64)

    def g1(self):
        if self._g1 is None:
            self._g1 = self.green(self.indicator())
        return self._g1

    def energy(self, phi):
        """(1/2d) int |grad phi|^2 by forward differences, plus a monopole tail."""
        phi = np.asarray(phi, dtype=np.float64)
        e = 0.0
        for ax in range(self.d):
            e += np.sum(np.diff(phi, axis=ax) ** 2) * self.h ** (self.d - 2)
        # phi ~ C |x|^(2-d) outside the grid; exact exterior energy of that field
        C = self._monopole(phi)
        tail = (self.d - 2) ** 2 * C * C * _cube_exterior_integral(self.d) * self.axis[-1] ** (2 - self.d)
        return float((e + tail) / (2 * self.d))

    def sup_radius_nodes(self):
        return self.sup_nodes

    def _outer_shell(self):
        return self.sup_nodes >= self.axis[-1] - 1e-12

    def _monopole(self, phi) -> float:
        """C in phi ~ C |x|^(2-d), averaged over the outermost grid layer."""
        sh = self._outer_shell()
        return float(np.mean(phi[sh] * self.radius_nodes[sh] ** (self.d - 2)))

    def inner(self, a, b):
        return float(np.sum(self.weights * np.asarray(a) * np.asarray(b)))

    def radius_of_nodes(self):
        return self.radius_nodes

    def dilate(self, phi, s):
        from scipy.interpolate import RegularGridInterpolator

        it = RegularGridInterpolator((self.axis,) * self.d, phi, bounds_error=False, fill_value=None)
        pts = np.stack(np.meshgrid(*([self.axis / s] * self.d), indexing="ij"), axis=-1)
        inside = np.max(np.abs(pts), axis=-1) <= self.axis[-1]
        out = np.empty(self.shape_)
        out[inside] = it(pts[inside])
        C = self._monopole(phi)
        r = np.sqrt(np.sum(pts[~inside] ** 2, axis=-1))
        out[~inside] = C * r ** (2 - self.d)
        return out


@lru_cache(maxsize=None)
def _cube_exterior_integral(d: int) -> float:
    """int of |x|^(2-2d) outside [-1, 1]^d, summed face by face."""
    f = lambda *y: (1.0 + sum(t * t for t in y)) ** (1 - d)
    val, _ = integrate.nquad(f, [(-1.0, 1.0)] * (d - 1), opts={"epsabs": 1e-13, "epsrel": 1e-12})
    return 2 * d * val / (d - 2)


def make_domain(cfg: dict):
    s = cfg.get("shape", "ball")
    if s == "ball":
        return RadialBall(cfg.get("radius", 1.0), cfg.get("d", 3), cfg.get("h"), cfg.get("r_max"))
    if s == "box":
        return BoxDomain(cfg.get("half_width", 1.0), cfg.get("d", 3), cfg.get("n", 16), cfg.get("pad", 3))
    raise ValueError(f"unknown domain shape {s!r}")


def green_convolve(rho, domain) -> Field:
    return Field(domain.green(getattr(rho, "values", rho)), domain)


# --- fixed point and multiplier search -------------------------------------------------------


def _density(st, u, phi, domain):
    return st.eta_prime(math.sqrt(u) + phi) * domain.inside


STALL_WINDOW = 50


def el_fixed_point(lam: float, u: float, st, domain, omega: float = 1.0, tol: float = 1e-10, max_iter: int = 10_000, phi0=None):
    """Damped iteration phi <- (1-omega) phi + omega lam G(eta~'(sqrt u + phi) 1_D) from phi = 0.

    Returns (phi, iterations, residual), residual = sup |phi - lam G rho(phi)|.
    Gives up early when the update has not shrunk by 10% over the last
    ``STALL_WINDOW`` iterations.
    """
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    if not 0 < omega <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    phi = domain.zeros() if phi0 is None else np.array(phi0, dtype=np.float64)
    if lam == 0:
        return domain.zeros(), 0, 0.0
    hist = []
    for it in range(1, max_iter + 1):
        target = lam * domain.green(_density(st, u, phi, domain))
        new = (1 - omega) * phi + omega * target
        change = float(np.max(np.abs(new - phi)))
        phi = new
        hist.append(change)
        if not math.isfinite(change):
            raise ConvergenceError(f"fixed point diverged at lam={lam}", hist[-1000:])
        if it >= 2 * STALL_WINDOW and change > 0.9 * hist[-1 - STALL_WINDOW]:
            raise ConvergenceError(f"fixed point stalled at lam={lam} after {it} iterations (change {change:.3g})", hist[-1000:])
        if change < tol:
            res = float(np.max(np.abs(phi - lam * domain.green(_density(st, u, phi, domain)))))
            return phi, it, res
    raise ConvergenceError(f"no convergence after {max_iter} iterations at lam={lam} (last change {change:.3g})", hist[-1000:])


def constraint_value(st, u, phi, domain) -> float:
    return domain.average(st.eta(math.sqrt(u) + phi))


@dataclass
class MinimizerResult:
    phi: Field
    lam: float
    energy: float
    energy_dual: float
    constraint: float
    nu: float
    u: float
    theta_u: float
    iterations: int
    residual: float
    omega: float
    tol: float
    profile_digest: str = ""
    properties: dict = field(default_factory=dict)
    regime: str = "small-excess"

    @property
    def dual_gap(self) -> float:
        if self.energy == 0:
            return abs(self.energy_dual)
        return abs(self.energy - self.energy_dual) / self.energy

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "energy": self.energy,
            "energy_dual": self.energy_dual,
            "dual_gap": self.dual_gap,
            "constraint": self.constraint,
            "nu": self.nu,
            "u": self.u,
            "theta_u": self.theta_u,
            "phi_sup": self.phi.sup,
            "iterations": self.iterations,
            "residual": self.residual,
            "omega": self.omega,
            "tol": self.tol,
            "profile_digest": self.profile_digest,
            "regime": self.regime,
            "properties": self.properties,
        }


def energy_pair(phi, lam: float, rho, domain) -> tuple[float, float]:
    """Gradient energy and lam <rho, phi>; raises when they disagree by more than 5%."""
    p = getattr(phi, "values", phi)
    e = domain.energy(p)
    ed = lam * domain.inner(getattr(rho, "values", rho), p)
    if e > 0 and abs(e - ed) / e > 5e-2:
        raise MeshResolutionError(f"energy {e:.6g} and dual energy {ed:.6g} differ by more than 5%")
    return e, ed


def _theta_at(st, u):
    return float(st.theta(u))


def solve_min(
    u: float,
    nu: float,
    st,
    domain,
    *,
    omega: float = 1.0,
    tol: float = 1e-10,
    nu_tol: float = 1e-9,
    max_iter: int = 10_000,
    check: bool = True,
) -> MinimizerResult:
    """Minimizer for target ``nu`` at level ``u``, found by bisection on the multiplier."""
    th = _theta_at(st, u)
    if u <= 0:
        raise ValueError("level must be positive")
    if hasattr(st, "u0") and u >= st.u0:
        raise ValueError(f"level u={u} must lie below u0={st.u0}")
    if nu < th - 1e-15:
        raise ValueError(f"target nu={nu} is below theta(u)={th}")
    if nu >= 1:
        raise ValueError("target must be below 1")
    digest = st.digest() if hasattr(st, "digest") else ""
    if nu - th <= 1e-15:
        z = domain.zeros()
        res = MinimizerResult(Field(z, domain), 0.0, 0.0, 0.0, constraint_value(st, u, z, domain), nu, u, th, 0, 0.0, omega, tol, digest)
        if check:
            res.properties = check_minimizer_props(res, st, domain)
        return res

    return _solve_with(u, nu, st, domain, th, omega, tol, nu_tol, max_iter, digest, check)


DAMPING_STEPS = (1.0, 0.5, 0.25, 0.1)


def _solve_with(u, nu, st, domain, th, omega, tol, nu_tol, max_iter, digest, check):
    track = []
    best = th
    used = [omega]

    def value(lam, warm=None):
        nonlocal best
        err = None
        for f in DAMPING_STEPS:
            try:
                phi, it, res = el_fixed_point(lam, u, st, domain, omega * f, tol, max_iter, warm)
                break
            except ConvergenceError as e:
                err = e
                log.info("lam=%g: %s", lam, e)
        else:
            raise SmallExcessError(
                f"outside small-excess regime: fixed point fails at lam={lam:.6g} for every damping (target nu={nu}, largest constraint reached {best:.6g})", best
            ) from err
        used.append(omega * f)
        a = constraint_value(st, u, phi, domain)
        best = max(best, a)
        track.append((lam, a))
        return phi, it, res, a

    # initial guess from the linearization at phi = 0
    slope = float(st.eta_prime(math.sqrt(u))) ** 2 * domain.average(domain.g1())
    lo, hi = 0.0, max((nu - th) / slope, 1e-12) if slope > 0 else 1e-3
    phi_lo = None
    phi, it, res, a = value(hi)
    while a < nu:
        lo, phi_lo = hi, phi
        hi *= 2
        if hi > 1e12:
            raise SmallExcessError("multiplier search diverged", best)
        phi, it, res, a = value(hi)
    total = it
    for _ in range(200):
        if abs(a - nu) <= nu_tol:
            break
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        phi, it, res, a = value(mid, phi_lo)
        total += it
        if a < nu:
            lo, phi_lo = mid, phi
        else:
            hi = mid
    lam = track[-1][0]
    if abs(a - nu) > max(nu_tol, 1e-6):
        raise SmallExcessError(f"bisection stalled at |A - nu| = {abs(a - nu):.3g}", best)
    pairs = sorted(track)
    for (l1, a1), (l2, a2) in zip(pairs, pairs[1:]):
        if a2 < a1 - 1e-12:
            raise MonotonicityError(f"constraint not monotone in the multiplier: A({l1:.6g})={a1:.9g} > A({l2:.6g})={a2:.9g}")
    rho = _density(st, u, phi, domain)
    e, ed = energy_pair(phi, lam, rho, domain)
    result = MinimizerResult(Field(phi, domain), lam, e, ed, a, nu, u, th, total, res, min(used), tol, digest)
    if check:
        result.properties = check_minimizer_props(result, st, domain)
        if not result.properties["box_constraint"]["ok"]:
            result.regime = "auxiliary problem only"
    return result


# --- property checks ----------------------------------------------------------------------


def _verdict(ok, **kw):
    d = {"ok": bool(ok)}
    d.update({k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in kw.items()})
    return d


def check_minimizer_props(res: MinimizerResult, st, domain, exterior_tol: float = 1e-3) -> dict:
    """Itemized verdicts on a converged solve."""
    phi = res.phi.values
    u = res.u
    rep = {}
    cap = math.sqrt(st.u_star) - math.sqrt(u)
    rep["box_constraint"] = _verdict(phi.min() >= -1e-12 and phi.max() <= cap + 1e-8, phi_min=phi.min(), phi_max=phi.max(), limit=cap)
    rep["saturation"] = _verdict(abs(res.constraint - res.nu) <= 1e-6, gap=abs(res.constraint - res.nu))
    g1 = domain.g1()
    avg_g1 = domain.average(g1)
    sup_g1 = float(g1.max())
    sup_eta = st.eta_prime_sup(0.0)
    inf_eta = st.eta_prime_inf(math.sqrt(u))
    excess = res.nu - res.theta_u
    r = domain.radius_of_nodes()
    if res.phi.sup == 0:
        for k in ("exterior_decay", "sup_attained_near_boundary", "sup_bound", "small_excess_bound", "multiplier_sandwich", "optimality_ratio", "dual_gap", "fixed_point_residual"):
            rep[k] = _verdict(True, trivial=True)
        return rep
    scaled = r ** (domain.d - 2) * phi
    if domain.shape == "ball":
        R = domain.radius
        ext = r > R * (1 + 1e-12)
        far = r >= 2 * R
        vals = scaled[ext]
        C = float(np.median(scaled[far]))
        spread = float(np.max(np.abs(vals - C)) / C)
        rep["exterior_decay"] = _verdict(spread <= exterior_tol, constant=C, spread=spread)
        band = (r >= 0.9 * R) & (r <= 1.1 * R)
    else:
        R = domain.half_width
        far = r >= 2 * R * math.sqrt(domain.d)
        sel = far & (domain.sup_radius_nodes() < domain.axis[-1] - domain.h)
        vals = scaled[sel]
        C = float(np.median(vals))
        spread = float(np.max(np.abs(vals - C)) / C)
        rep["exterior_decay"] = _verdict(spread <= max(exterior_tol, 1e-2), constant=C, spread=spread)
        # 7-point stencil on C/r leaves (h^4/12) sum_i d_i^4 phi <= 6 h^4 |C| / r^5
        lap = sum(np.roll(phi, 1, a) + np.roll(phi, -1, a) for a in range(domain.d)) - 2 * domain.d * phi
        sup = domain.sup_radius_nodes()
        out = (sup >= 2 * R) & (sup < domain.axis[-1] - 1e-12)
        allowed = 6 * domain.h**4 * abs(C) / r[out] ** 5
        worst = float(np.max(np.abs(lap[out]) / allowed))
        rep["exterior_laplacian"] = _verdict(worst <= 1.0, worst_ratio=worst, residual=float(np.max(np.abs(lap[out]))))
        band = (r >= 0.9 * R) & (r <= 1.1 * R * math.sqrt(domain.d))
    top = float(np.max(scaled))
    near = float(np.max(scaled[band]))
    rep["sup_attained_near_boundary"] = _verdict(math.isfinite(top) and near >= top * (1 - 1e-6), sup=top, sup_near_boundary=near)
    bound = res.lam * sup_eta * sup_g1
    rep["sup_bound"] = _verdict(res.phi.sup <= bound * (1 + 1e-9), phi_sup=res.phi.sup, bound=bound)
    c2 = sup_eta * sup_g1 / (inf_eta**2 * avg_g1)
    rep["small_excess_bound"] = _verdict(res.phi.sup <= c2 * excess * (1 + 1e-6), phi_sup=res.phi.sup, c2=c2, bound=c2 * excess)
    lo = excess / (sup_eta**2 * avg_g1)
    hi = excess / (inf_eta**2 * avg_g1)
    rep["multiplier_sandwich"] = _verdict(lo * (1 - 1e-6) <= res.lam <= hi * (1 + 1e-6), lam=res.lam, lower=lo, upper=hi)
    grho = domain.green(_density(st, u, phi, domain))
    mask = phi > 1e-8
    ratio = phi[mask] / grho[mask]
    rspread = float((ratio.max() - ratio.min()) / res.lam)
    rep["optimality_ratio"] = _verdict(rspread <= 1e-3, spread=rspread)
    rep["dual_gap"] = _verdict(res.dual_gap <= 1e-2, gap=res.dual_gap)
    rep["fixed_point_residual"] = _verdict(res.residual <= 10 * res.tol, residual=res.residual)
    return rep


def failed_checks(props: dict) -> list[str]:
    return [k for k, v in props.items() if isinstance(v, dict) and not v.get("ok", True)]


# --- sweeps and structural checks -----------------------------------------------------------


def j_curve(u, st, domain, nus, **kw) -> list[tuple[float, float]]:
    """(nu, J) pairs; J must increase strictly along an increasing grid."""
    nus = sorted(float(v) for v in nus)
    out = []
    for nu in nus:
        r = solve_min(u, nu, st, domain, **kw)
        out.append((nu, r.energy))
    for (n1, j1), (n2, j2) in zip(out, out[1:]):
        if not j2 > j1:
            raise ConvergenceError(f"J not increasing between nu={n1} ({j1}) and nu={n2} ({j2})")
    return out


def continuity_probe(u, st, domain, nu, deltas=(0.02, 0.01, 0.005, 0.0025), **kw) -> list[float]:
    """|J(nu + delta) - J(nu)| for shrinking delta."""
    j0 = solve_min(u, nu, st, domain, **kw).energy
    return [abs(solve_min(u, nu + dl, st, domain, **kw).energy - j0) for dl in deltas]


@dataclass
class ScalingReport:
    slope: float
    intercept: float
    c_lower: float  # min lam/(nu - theta)
    c_upper: float  # max lam/(nu - theta)
    bound_lower: float  # 1/(sup eta'^2 avg G1)
    bound_upper: float  # 1/(inf eta'^2 avg G1)
    lams: list
    excesses: list
    ok: bool

    def to_dict(self):
        return asdict(self)


def lambda_scaling_check(u, st, domain, nus, **kw) -> ScalingReport:
    if len(nus) < 3:
        raise ValueError("need at least three targets")
    th = _theta_at(st, u)
    ex, lams = [], []
    for nu in sorted(nus):
        r = solve_min(u, nu, st, domain, **kw)
        ex.append(nu - th)
        lams.append(r.lam)
    x, y = np.log(ex), np.log(lams)
    slope, icpt = np.polyfit(x, y, 1)
    q = np.asarray(lams) / np.asarray(ex)
    avg = domain.average(domain.g1())
    bl = 1 / (st.eta_prime_sup(0.0) ** 2 * avg)
    bu = 1 / (st.eta_prime_inf(math.sqrt(u)) ** 2 * avg)
    return ScalingReport(float(slope), float(icpt), float(q.min()), float(q.max()), bl, bu, lams, ex, bool(0.9 <= slope <= 1.1))


def dilation_check(res: MinimizerResult, domain, scale: float) -> dict:
    """Energy of phi(./s) against s^(d-2) times the energy of phi, plus saturation."""
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    e0 = domain.energy(res.phi.values)
    e1 = domain.energy(domain.dilate(res.phi.values, scale))
    expect = scale ** (domain.d - 2)
    ratio = e1 / e0 if e0 > 0 else 1.0
    return {
        "scale": scale,
        "energy": e0,
        "energy_dilated": e1,
        "ratio": ratio,
        "expected": expect,
        "ok": abs(ratio - expect) <= 1e-2 * expect and abs(res.constraint - res.nu) <= 1e-6,
    }


def rearrange_radial(phi, domain: RadialBall) -> Field:
    """Symmetric decreasing rearrangement on the radial mesh.

    Node k carries the volume of its shell [r_{k-1/2}, r_{k+1/2}]; values
    are sorted in decreasing order and laid out from the centre by volume.
    """
    v = np.asarray(getattr(phi, "values", phi), dtype=np.float64)
    if np.min(v) < 0:
        raise ValueError("field must be nonnegative")
    vol = shell_volumes(domain)
    order = np.argsort(-v, kind="stable")
    cum = np.cumsum(vol[order])
    # volume of the ball up to the middle of each shell
    mid = np.cumsum(vol) - 0.5 * vol
    idx = np.minimum(np.searchsorted(cum, mid, side="right"), len(v) - 1)
    return Field(v[order][idx], domain)


def shell_volumes(domain: RadialBall) -> np.ndarray:
    r = domain.r
    e = np.concatenate([[0.0], 0.5 * (r[1:] + r[:-1]), [r[-1]]])
    return 4 * math.pi * np.diff(e**3) / 3


def distribution_mismatch(a, b, domain: RadialBall) -> tuple[float, float]:
    """sup_t | |{a > t}| - |{b > t}| | and the largest shell volume."""
    vol = shell_volumes(domain)
    a = np.asarray(getattr(a, "values", a))
    b = np.asarray(getattr(b, "values", b))
    ts = np.unique(np.concatenate([a, b]))
    oa, ob = np.argsort(a), np.argsort(b)
    ca = np.concatenate([[0.0], np.cumsum(vol[oa])])
    cb = np.concatenate([[0.0], np.cumsum(vol[ob])])
    ma = ca[-1] - ca[np.searchsorted(a[oa], ts, side="right")]
    mb = cb[-1] - cb[np.searchsorted(b[ob], ts, side="right")]
    return float(np.max(np.abs(ma - mb))), float(vol.max())


def threshold_scan(u: float, toy, domain) -> dict:
    """Target at which the affine-toy minimizer reaches sqrt(u_star) - sqrt(u).

    With eta~' = kappa on [sqrt u, inf), phi = lam kappa G1_D and
    A - theta = lam kappa^2 avg G1_D, so the threshold is
    theta + kappa (sqrt u_star - sqrt u) avg G1_D / max G1_D.
    """
    if abs(u - toy.u) > 1e-15:
        raise ValueError("the toy profile is built for a different level")
    g1 = domain.g1()
    ratio = domain.average(g1) / float(g1.max())
    gap = math.sqrt(toy.u_star) - math.sqrt(u)
    nu = toy.theta_u + toy.kappa * gap * ratio
    out = {"nu_threshold": nu, "reachable": nu < 1, "avg_over_max_g1": ratio}
    if nu >= 1:
        out["message"] = "threshold unreachable below nu = 1"
    return out


# --- serialization ---------------------------------------------------------------------


def _profile_pairs(res: MinimizerResult):
    dom = res.phi.domain
    if dom.shape == "ball":
        return [[float(a), float(b)] for a, b in zip(dom.r, res.phi.values)]
    return res.phi.values.ravel().tolist()


def result_to_dict(res: MinimizerResult, include_profile: bool = True) -> dict:
    out = res.summary()
    out["mesh"] = res.phi.domain.describe()
    if include_profile:
        out["profile"] = _profile_pairs(res)
    return out


def write_profile_csv(res: MinimizerResult, fh) -> None:
    """Radial profile as ``r,phi`` rows; box grids as ``x,y,z,...,phi``."""
    dom = res.phi.domain
    if dom.shape == "ball":
        fh.write("r,phi\n")
        for a, b in zip(dom.r, res.phi.values):
            fh.write(f"{float(a)!r},{float(b)!r}\n")
        return
    names = ["x", "y", "z", "w"][: dom.d] if dom.d <= 4 else [f"x{i}" for i in range(dom.d)]
    fh.write(",".join(names + ["phi"]) + "\n")
    grids = np.meshgrid(*([dom.axis] * dom.d), indexing="ij")
    for idx in np.ndindex(dom.shape_):
        fh.write(",".join(f"{float(g[idx])!r}" for g in grids) + f",{float(res.phi.values[idx])!r}\n")

"""Smoothed percolation profiles.

``SmoothedTheta`` extends a base profile theta_0 known on [0, u0] to a C^1
function on [0, inf):

* theta~ = theta_0 on [0, u0];
* theta~ = theta_0 + a (v - u0)^2 on [u0, u1], with a fixed by theta~(u1) = 1;
* a monotone cubic Hermite bridge on [u1, u2];
* theta~ = sqrt(v) on [u2, inf), u2 = max(u_star, 4).

eta~(b) = theta~(b^2) is then C^1 on R, equal to b for b >= sqrt(u2).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, optimize

log = logging.getLogger(__name__)

SLOPE_FLOOR = 1e-3
GRID = 10_000


class ProfileError(ValueError):
    """A profile violates one of the required shape properties."""


# --- base profiles ---------------------------------------------------------------


@dataclass(frozen=True)
class LinearBase:
    slope: float

    @property
    def name(self) -> str:
        return f"toy:linear:{self.slope!r}"

    def __call__(self, v):
        return self.slope * np.asarray(v, dtype=np.float64)

    def derivative(self, v):
        return np.full_like(np.asarray(v, dtype=np.float64), self.slope)

    def to_dict(self):
        return {"kind": "linear", "slope": self.slope}


@dataclass(frozen=True)
class ExpBase:
    """theta_0(v) = 1 - exp(-rate v)."""

    rate: float

    @property
    def name(self) -> str:
        return f"toy:exp:{self.rate!r}"

    def __call__(self, v):
        return -np.expm1(-self.rate * np.asarray(v, dtype=np.float64))

    def derivative(self, v):
        return self.rate * np.exp(-self.rate * np.asarray(v, dtype=np.float64))

    def to_dict(self):
        return {"kind": "exp", "rate": self.rate}


@dataclass(frozen=True)
class HermiteBase:
    """C^1 piecewise cubic through knots, extended linearly past the last knot."""

    x: tuple
    y: tuple
    dy: tuple
    source: str = "fit"

    def __post_init__(self):
        object.__setattr__(self, "_spl", interpolate.CubicHermiteSpline(np.asarray(self.x), np.asarray(self.y), np.asarray(self.dy)))

    @property
    def name(self) -> str:
        return self.source

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        x1 = self.x[-1]
        return np.where(v <= x1, self._spl(np.minimum(v, x1)), self.y[-1] + self.dy[-1] * (v - x1))

    def derivative(self, v):
        v = np.asarray(v, dtype=np.float64)
        x1 = self.x[-1]
        return np.where(v <= x1, self._spl(np.minimum(v, x1), 1), self.dy[-1])

    def min_derivative(self) -> float:
        return _hermite_min_slope(np.asarray(self.x), np.asarray(self.y), np.asarray(self.dy))

    def to_dict(self):
        return {"kind": "hermite", "x": list(self.x), "y": list(self.y), "dy": list(self.dy), "source": self.source}


def parse_toy(text: str):
    """``linear:s`` or ``exp:c``."""
    kind, _, val = text.partition(":")
    try:
        p = float(val)
    except ValueError:
        raise ValueError(f"bad toy profile {text!r}") from None
    if kind == "linear":
        return LinearBase(p)
    if kind == "exp":
        return ExpBase(p)
    raise ValueError(f"unknown toy profile kind {kind!r}")


def base_from_dict(d: dict):
    k = d["kind"]
    if k == "linear":
        return LinearBase(float(d["slope"]))
    if k == "exp":
        return ExpBase(float(d["rate"]))
    if k == "hermite":
        return HermiteBase(tuple(map(float, d["x"])), tuple(map(float, d["y"])), tuple(map(float, d["dy"])), d.get("source", "fit"))
    raise ValueError(f"unknown base kind {k!r}")


def _hermite_min_slope(x, y, dy) -> float:
    """Exact minimum of the derivative of a cubic Hermite interpolant."""
    h = np.diff(x)
    s = np.diff(y) / h
    d0, d1 = dy[:-1], dy[1:]
    # p'(t) on [0,1] in units of slope: d0 + (6s - 4d0 - 2d1) t + (3d0 + 3d1 - 6s) t^2
    A = 3 * d0 + 3 * d1 - 6 * s
    B = 6 * s - 4 * d0 - 2 * d1
    m = np.minimum(d0, d1)
    safe = np.where(A > 0, A, 1.0)
    t = np.where(A > 0, -B / (2 * safe), -1.0)
    inner = (A > 0) & (t > 0) & (t < 1)
    val = d0 + B * t + A * t * t
    m = np.where(inner, np.minimum(m, val), m)
    return float(m.min())


def fit_base(levels, estimates, u_max_fit: float | None = None, source: str = "fit") -> HermiteBase:
    """Monotone C^1 profile through noisy theta estimates.

    Isotonic regression first, then every secant is lifted to at least
    ``SLOPE_FLOOR``, then shape-preserving (PCHIP) knot slopes clamped below
    at the same floor.  Past the last level the profile continues linearly.
    """
    x = np.asarray(levels, dtype=np.float64)
    y = np.asarray(estimates, dtype=np.float64)
    if u_max_fit is not None:
        keep = x <= u_max_fit + 1e-12
        x, y = x[keep], y[keep]
    if len(x) < 2 or np.any(np.diff(x) <= 0):
        raise ValueError("need at least two strictly increasing levels")
    y = optimize.isotonic_regression(y).x
    for i in range(1, len(y)):
        y[i] = max(y[i], y[i - 1] + SLOPE_FLOOR * (x[i] - x[i - 1]))
    dy = interpolate.PchipInterpolator(x, y).derivative()(x)
    dy = np.maximum(dy, SLOPE_FLOOR)
    # A cubic whose end slopes both lie in [floor, secant] has derivative >= floor
    # throughout, so pulling the slopes of an undershooting interval into that
    # range fixes it for good; slopes only decrease, so this terminates.
    s = np.diff(y) / np.diff(x)
    for _ in range(len(x)):
        bad = [k for k in range(len(s)) if _hermite_min_slope(x[k : k + 2], y[k : k + 2], dy[k : k + 2]) < SLOPE_FLOOR * (1 - 1e-12)]
        if not bad:
            break
        for k in bad:
            dy[k] = min(dy[k], s[k])
            dy[k + 1] = min(dy[k + 1], s[k])
    return HermiteBase(tuple(x.tolist()), tuple(y.tolist()), tuple(dy.tolist()), source)


# --- the smoothed profile ----------------------------------------------------------


@dataclass(frozen=True)
class ThetaBar:
    """Right-continuous version: the base below u_star (capped at 1), 1 from u_star on."""

    base: object
    u_star: float

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.where(u < self.u_star, np.minimum(self.base(np.maximum(u, 0.0)), 1.0), 1.0)


def _bridge_knots(u1, u2, y1, m0):
    """Knots of the [u1, u2] bridge from (u1, y1, m0) to (u2, sqrt u2, 1/(2 sqrt u2)).

    The derivative is piecewise linear, m0 -> p -> m1 with one interior knot,
    so each cubic piece is in fact quadratic (d0 + d1 = 2 secant).  The knot
    position and p > 0 are fixed by the area condition; p sits in the middle
    of its admissible range, which keeps the curvature as low as the end
    slopes allow.
    """
    y2 = math.sqrt(u2)
    m1 = 0.5 / y2
    rise = y2 - y1
    span = u2 - u1
    if rise <= 0 or m0 <= 0:
        raise ProfileError("bridge needs an increasing target and positive start slope")
    mu = rise / span
    if abs(m0 - m1) <= 1e-12 * max(m0, m1):
        ell = 0.5 * span
        p = 2 * mu - 0.5 * (m0 + m1)
    else:
        lo, hi = sorted((2 * mu - m0, 2 * mu - m1))
        lo = max(lo, 0.0)
        if hi <= lo:
            raise ProfileError("no positive interior slope satisfies the bridge area condition")
        p = 0.5 * (lo + hi)
        ell = (2 * rise - (p + m1) * span) / (m0 - m1)
    if not (p > 0 and 0 < ell < span):
        raise ProfileError("bridge construction failed")
    x = np.array([u1, u1 + ell, u2])
    y = np.array([y1, y1 + 0.5 * (m0 + p) * ell, y2])
    dy = np.array([m0, p, m1])
    return x, y, dy


@dataclass(frozen=True)
class SmoothedTheta:
    base: object
    u0: float
    u1: float
    u_star: float
    u2: float = field(init=False)
    a: float = field(init=False)
    bridge_x: np.ndarray = field(init=False, repr=False)
    bridge_y: np.ndarray = field(init=False, repr=False)
    bridge_dy: np.ndarray = field(init=False, repr=False)
    provenance: str = ""

    def __post_init__(self):
        if not 0 < self.u0 < self.u1 < self.u_star:
            raise ValueError(f"need 0 < u0 < u1 < u_star, got u0={self.u0}, u1={self.u1}, u_star={self.u_star}")
        u2 = max(self.u_star, 4.0)
        b1 = float(self.base(self.u1))
        if b1 >= 1:
            raise ProfileError(f"base reaches {b1} >= 1 at u1; no positive quadratic coefficient")
        a = (1.0 - b1) / (self.u1 - self.u0) ** 2
        m0 = float(self.base.derivative(self.u1)) + 2 * a * (self.u1 - self.u0)
        x, y, dy = _bridge_knots(self.u1, u2, 1.0, m0)
        object.__setattr__(self, "u2", u2)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "bridge_x", x)
        object.__setattr__(self, "bridge_y", y)
        object.__setattr__(self, "bridge_dy", dy)
        object.__setattr__(self, "_bridge", interpolate.CubicHermiteSpline(x, y, dy))
        if not self.provenance:
            object.__setattr__(self, "provenance", self.base.name)

    # theta~ and its derivative in v
    def theta(self, v):
        v = np.asarray(v, dtype=np.float64)
        vc = np.maximum(v, 0.0)
        out = np.where(vc <= self.u0, self.base(np.minimum(vc, self.u0)), 0.0)
        mid = (vc > self.u0) & (vc <= self.u1)
        out = np.where(mid, self.base(np.clip(vc, self.u0, self.u1)) + self.a * (vc - self.u0) ** 2, out)
        br = (vc > self.u1) & (vc < self.u2)
        out = np.where(br, self._bridge(np.clip(vc, self.u1, self.u2)), out)
        return np.where(vc >= self.u2, np.sqrt(vc), out)

    def theta_prime(self, v):
        v = np.asarray(v, dtype=np.float64)
        vc = np.maximum(v, 0.0)
        out = np.where(vc <= self.u0, self.base.derivative(np.minimum(vc, self.u0)), 0.0)
        mid = (vc > self.u0) & (vc <= self.u1)
        out = np.where(mid, self.base.derivative(np.clip(vc, self.u0, self.u1)) + 2 * self.a * (vc - self.u0), out)
        br = (vc > self.u1) & (vc < self.u2)
        out = np.where(br, self._bridge(np.clip(vc, self.u1, self.u2), 1), out)
        return np.where(vc >= self.u2, 0.5 / np.sqrt(np.maximum(vc, self.u2)), out)

    def gamma(self, v):
        """theta~ minus the right-continuous base profile."""
        return self.theta(v) - ThetaBar(self.base, self.u_star)(v)

    def eta(self, b):
        b = np.asarray(b, dtype=np.float64)
        return self.theta(b * b)

    def eta_prime(self, b):
        b = np.asarray(b, dtype=np.float64)
        return 2 * b * self.theta_prime(b * b)

    def eta_prime_sup(self, lo: float = 0.0) -> float:
        """sup of eta~' on [lo, inf); eta~' = 1 beyond sqrt(u2)."""
        b = np.linspace(lo, math.sqrt(self.u2), 100_001)
        return float(max(np.max(self.eta_prime(b)), 1.0))

    def eta_prime_inf(self, lo: float) -> float:
        """inf of eta~' on [lo, inf)."""
        b = np.linspace(lo, math.sqrt(self.u2), 100_001)
        return float(min(np.min(self.eta_prime(b)), 1.0))

    def to_dict(self) -> dict:
        return {
            "type": "smoothed_theta",
            "provenance": self.provenance,
            "base": self.base.to_dict(),
            "u0": self.u0,
            "u1": self.u1,
            "u_star": self.u_star,
            "u2": self.u2,
            "a": self.a,
            "bridge": {"x": self.bridge_x.tolist(), "y": self.bridge_y.tolist(), "dy": self.bridge_dy.tolist()},
        }

    def digest(self) -> str:
        return profile_digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothedTheta":
        if d.get("type") != "smoothed_theta":
            raise ValueError("not a smoothed profile")
        st = cls(base_from_dict(d["base"]), float(d["u0"]), float(d["u1"]), float(d["u_star"]), provenance=d.get("provenance", ""))
        for k in ("u2", "a"):
            if getattr(st, k) != float(d[k]):
                raise ValueError(f"stored {k} does not match the rebuilt profile")
        return st


def profile_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def build_smoothed_theta(base, u0: float, u1: float, u_star: float, provenance: str = "") -> SmoothedTheta:
    """Build the profile and verify its shape properties; raises ProfileError on failure."""
    grid = np.linspace(0.0, u0, GRID)
    if np.any(base.derivative(grid) <= 0):
        raise ProfileError("base derivative must be positive on [0, u0]")
    st = SmoothedTheta(base, float(u0), float(u1), float(u_star), provenance=provenance)
    rep = check_profile(st)
    bad = [k for k, v in rep.items() if isinstance(v, bool) and not v]
    if bad:
        raise ProfileError(f"profile checks failed: {', '.join(bad)}")
    return st


def check_profile(st: SmoothedTheta, eta_lo: float = 1e-2) -> dict:
    """Numerical verification of the shape properties on fine grids."""
    u0, u1, u2 = st.u0, st.u1, st.u2
    v = np.linspace(0.0, u2, GRID)
    lo_v = v[v <= u0]
    hi_v = np.linspace(u0, u2 + 10, GRID)[1:]
    joins = {}
    for name, p in (("u0", u0), ("u1", u1), ("u2", u2)):
        left, right = _one_sided(st, p)
        joins[name] = abs(left - right)
    b = np.linspace(eta_lo, math.sqrt(u2) + 10, 100_000)
    etap = st.eta_prime(b)
    bridge_min = _hermite_min_slope(st.bridge_x, st.bridge_y, st.bridge_dy)
    rep = {
        "theta_u1_is_one": abs(float(st.theta(u1)) - 1.0) <= 1e-12,
        "theta_u2_is_sqrt": abs(float(st.theta(u2)) - math.sqrt(u2)) <= 1e-12,
        "gamma_zero_below_u0": bool(np.all(st.gamma(lo_v) == 0.0) or np.max(np.abs(st.gamma(lo_v))) <= 1e-15),
        "gamma_positive_above_u0": bool(np.all(st.gamma(hi_v) > 0)),
        "c1_joins": max(joins.values()) <= 1e-8,
        "eta_prime_positive": bool(np.min(etap) > 0),
        "bridge_slope_positive": bridge_min > 0,
        "theta_dominates_theta_bar": bool(np.all(st.theta(v) >= ThetaBar(st.base, st.u_star)(v) - 1e-15)),
        "join_mismatch": joins,
        "eta_prime_min": float(np.min(etap)),
        "eta_prime_max": float(np.max(etap)),
        "bridge_slope_min": bridge_min,
    }
    return rep


def _one_sided(st: SmoothedTheta, p: float) -> tuple[float, float]:
    """Left and right derivatives at a join, each from its own piece formula."""
    bd = float(st.base.derivative(p))
    quad = bd + 2 * st.a * (p - st.u0)
    if p == st.u0:
        return bd, bd + 0.0
    if p == st.u1:
        return quad, float(st._bridge(p, 1))
    return float(st._bridge(p, 1)), 0.5 / math.sqrt(p)


# --- affine toy ---------------------------------------------------------------------


@dataclass(frozen=True)
class AffineToy:
    """Profile with eta~(b) = theta_u + kappa (b - sqrt u) for b >= sqrt u.

    Below sqrt u it is a C^1 cubic from (0, theta_u - kappa sqrt(u)/2, slope 0);
    solvers only evaluate eta~ at sqrt u + phi with phi >= 0.
    """

    u: float
    theta_u: float
    kappa: float
    u_star: float

    def __post_init__(self):
        if self.kappa <= 0 or self.u <= 0:
            raise ValueError("need kappa > 0 and u > 0")
        if self.u_star <= self.u:
            raise ValueError("need u_star > u")

    @property
    def provenance(self) -> str:
        return f"toy:affine:{self.kappa!r}"

    def _c(self):
        return math.sqrt(self.u), self.theta_u - 0.5 * self.kappa * math.sqrt(self.u)

    def eta(self, b):
        b = np.abs(np.asarray(b, dtype=np.float64))
        r, c0 = self._c()
        t = np.clip(b / r, 0.0, 1.0)
        # Hermite with values c0, theta_u and slopes 0, kappa*r (in t units)
        low = c0 * (1 - 3 * t**2 + 2 * t**3) + self.theta_u * (3 * t**2 - 2 * t**3) + self.kappa * r * (t**3 - t**2)
        return np.where(b >= r, self.theta_u + self.kappa * (b - r), low)

    def eta_prime(self, b):
        b = np.asarray(b, dtype=np.float64)
        sgn = np.sign(b)
        b = np.abs(b)
        r, c0 = self._c()
        t = np.clip(b / r, 0.0, 1.0)
        low = (c0 * (-6 * t + 6 * t**2) + self.theta_u * (6 * t - 6 * t**2) + self.kappa * r * (3 * t**2 - 2 * t)) / r
        return sgn * np.where(b >= r, self.kappa, low)

    def theta(self, v):
        return self.eta(np.sqrt(np.maximum(np.asarray(v, dtype=np.float64), 0.0)))

    def eta_prime_sup(self, lo: float = 0.0) -> float:
        return self.kappa

    def eta_prime_inf(self, lo: float) -> float:
        return self.kappa if lo >= math.sqrt(self.u) else float(np.min(self.eta_prime(np.linspace(lo, math.sqrt(self.u), 10_001))))

    def to_dict(self) -> dict:
        return {"type": "affine_toy", "u": self.u, "theta_u": self.theta_u, "kappa": self.kappa, "u_star": self.u_star}

    def digest(self) -> str:
        return profile_digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "AffineToy":
        return cls(float(d["u"]), float(d["theta_u"]), float(d["kappa"]), float(d["u_star"]))


def load_profile(d: dict):
    t = d.get("type")
    if t == "smoothed_theta":
        return SmoothedTheta.from_dict(d)
    if t == "affine_toy":
        return AffineToy.from_dict(d)
    raise ValueError(f"unknown profile type {t!r}")


# --- constraint map -------------------------------------------------------------------


def _values(phi):
    return np.asarray(getattr(phi, "values", phi), dtype=np.float64)


def constraint_functional(st, u: float, phi, domain) -> float:
    """Normalized average over D of eta~(sqrt u + phi)."""
    if u <= 0:
        raise ValueError("level must be positive")
    v = _values(phi)
    if np.min(v) < -1e-12:
        raise ValueError("phi must be nonnegative")
    return domain.average(st.eta(math.sqrt(u) + v))


def directional_derivative(st, u: float, phi, psi, domain) -> float:
    """Normalized average over D of eta~'(sqrt u + phi) psi."""
    v = _values(phi)
    return domain.average(st.eta_prime(math.sqrt(u) + v) * _values(psi))

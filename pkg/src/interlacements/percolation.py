"""Estimators on coupled soups: finite-volume percolation function, difference
quotients, finite-cluster decay scans and the derivative checks built on them.

Every estimator works on a ``SoupBatch``: for each soup it keeps the capped
sup-norm extent of the origin's vacant cluster at each requested (level,
radius) pair, computed by an independent search per pair.  Indicators are
read off these integers, so all per-sample monotonicity statements can be
audited exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from . import _rng, _walk
from .interlacement import DEFAULT_GUARD, _draw, first_visit_labels, soup_equilibrium, window_geometry
from .lattice import PotentialEstimate, asymptotic_green_constant, equilibrium_sample, green_origin, origin_box

log = logging.getLogger(__name__)

CHUNK = 64  # soups per task; fixed so results never depend on the worker count
CSV_HEADER = ("u", "theta_hat", "stderr", "L", "N", "n_soups", "seed")
LEVEL_TOL = 1e-9


@dataclass(frozen=True)
class SoupConfig:
    d: int = 3
    N: int = 32
    u_max: float = 2.0
    n_soups: int = 10_000
    seed: int = 0
    guard: int = DEFAULT_GUARD
    eq_samples: int | None = None

    @property
    def guard_radius(self) -> int:
        return self.guard * max(self.N, 1)


@dataclass(frozen=True)
class Probe:
    """Levels and radius caps at which to measure the origin's cluster."""

    levels: tuple
    caps: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(u) for u in self.levels))
        object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))


@dataclass(frozen=True)
class SoupBatch:
    config: SoupConfig
    probes: tuple
    radii: tuple  # per probe: int array (n_soups, n_levels, n_caps); -1 = origin occupied
    counts: np.ndarray  # trajectories per soup
    tau0: np.ndarray  # smallest label visiting the origin (inf if none)
    cap_estimate: PotentialEstimate
    intensity: float  # Poisson mean of the per-soup trajectory count
    killed_green: float = field(default=float("nan"))

    @property
    def n(self) -> int:
        return len(self.counts)

    def level_index(self, u: float, probe: int = 0) -> int:
        lv = np.asarray(self.probes[probe].levels)
        i = int(np.argmin(np.abs(lv - u)))
        if abs(lv[i] - u) > LEVEL_TOL:
            raise KeyError(f"level {u} not measured")
        return i

    def cap_index(self, L: int, probe: int = 0) -> int:
        try:
            return self.probes[probe].caps.index(int(L))
        except ValueError:
            raise KeyError(f"radius {L} not measured") from None

    def crossed(self, u: float, L: int, probe: int = 0) -> np.ndarray:
        """Per-soup indicator of 0 <-> dB_L in the vacant set at level u."""
        r = self.radii[probe][:, self.level_index(u, probe), self.cap_index(L, probe)]
        return r >= L

    def radius(self, u: float, L: int, probe: int = 0) -> np.ndarray:
        return self.radii[probe][:, self.level_index(u, probe), self.cap_index(L, probe)]


def _chunk(args):
    cfg, meas, probes, lo, hi = args
    window = origin_box(cfg.N, cfg.d)
    geo = window_geometry(cfg.N, cfg.d)
    o = int(np.sum(cfg.N * geo.strides))
    out = [np.empty((hi - lo, len(p.levels), len(p.caps)), np.int16) for p in probes]
    arr = [(np.asarray(p.levels, np.float64), np.asarray(p.caps, np.int64)) for p in probes]
    counts = np.empty(hi - lo, np.int64)
    tau0 = np.empty(hi - lo)
    for i in range(lo, hi):
        rng = _rng.stream(cfg.seed, _rng.SOUP, i)
        tau, K = first_visit_labels(meas, window, cfg.u_max, rng)
        counts[i - lo] = K
        tau0[i - lo] = tau[o]
        for p, (lv, cp) in enumerate(arr):
            if len(lv) and len(cp):
                out[p][i - lo] = _walk.origin_radii(tau, lv, cp, cfg.N, geo.rad, geo.strides)
    return out, counts, tau0


def run_soups(cfg: SoupConfig, probes, workers: int = 1, equilibrium=None) -> SoupBatch:
    """Sample ``cfg.n_soups`` soups and measure the origin's cluster at every probe."""
    probes = tuple(probes)
    for p in probes:
        if any(u < 0 or u > cfg.u_max for u in p.levels):
            raise ValueError(f"levels must lie in [0, u_max={cfg.u_max}]")
        if any(c < 0 or c > cfg.N for c in p.caps):
            raise ValueError(f"probe radii must lie in [0, N={cfg.N}]")
    if cfg.n_soups < 1:
        raise ValueError("need at least one soup")
    window = origin_box(cfg.N, cfg.d)
    if equilibrium is None:
        equilibrium = soup_equilibrium(window, cfg.guard, cfg.seed, cfg.eq_samples)
    est, meas = equilibrium
    tasks = [(cfg, meas, probes, lo, min(lo + CHUNK, cfg.n_soups)) for lo in range(0, cfg.n_soups, CHUNK)]
    log.info("sampling %d soups (N=%d, u_max=%g) in %d chunks, %d worker(s)", cfg.n_soups, cfg.N, cfg.u_max, len(tasks), workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_chunk, tasks))
    else:
        results = [_chunk(t) for t in tasks]
    radii = tuple(np.concatenate([r[0][p] for r in results]) for p in range(len(probes)))
    counts = np.concatenate([r[1] for r in results])
    tau0 = np.concatenate([r[2] for r in results])
    M = cfg.guard_radius
    g_killed = green_origin(cfg.d) - asymptotic_green_constant(cfg.d) * (M + 1.0) ** (2 - cfg.d)
    return SoupBatch(cfg, probes, radii, counts, tau0, est, cfg.u_max * meas.killed_capacity, g_killed)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return m, se


# --- theta curves -------------------------------------------------------------


@dataclass(frozen=True)
class ThetaCurve:
    """Estimates of P[0 not connected to dB_L in the vacant set] per level."""

    levels: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    L: int
    N: int
    n_soups: int
    seed: int

    def to_csv(self) -> str:
        return _write_csv(self.levels, self.estimates, self.stderr, [self.L] * len(self.levels), self.N, self.n_soups, self.seed)

    @classmethod
    def from_csv(cls, text: str) -> "ThetaCurve":
        rows = _read_csv(text)
        if not rows:
            raise ValueError("empty curve")
        Ls = {r[3] for r in rows}
        if len(Ls) != 1:
            raise ValueError("a theta curve has a single probe radius")
        return cls(
            np.array([r[0] for r in rows]),
            np.array([r[1] for r in rows]),
            np.array([r[2] for r in rows]),
            rows[0][3],
            rows[0][4],
            rows[0][5],
            rows[0][6],
        )


def _write_csv(u, est, se, L, N, n, seed) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for a, b, c, l in zip(u, est, se, L):
        w.writerow([repr(float(a)), repr(float(b)), repr(float(c)), int(l), int(N), int(n), int(seed)])
    return buf.getvalue()


def _read_csv(text: str):
    r = csv.reader(io.StringIO(text))
    header = next(r)
    if tuple(header) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    return [(float(a), float(b), float(c), int(l), int(N), int(n), int(s)) for a, b, c, l, N, n, s in r]


def theta_curve(batch: SoupBatch, L: int, probe: int = 0) -> ThetaCurve:
    levels = np.asarray(batch.probes[probe].levels)
    est = np.empty(len(levels))
    se = np.empty(len(levels))
    n = batch.n
    j = batch.cap_index(L, probe)
    for i in range(len(levels)):
        p = float(np.mean(batch.radii[probe][:, i, j] < L))
        est[i] = p
        se[i] = math.sqrt(p * (1 - p) / n)
    return ThetaCurve(levels, est, se, int(L), batch.config.N, n, batch.config.seed)


def estimate_theta_curve(levels, L: int, N: int, soups: int, seed: int, *, d: int = 3, u_max=None, workers: int = 1, guard: int = DEFAULT_GUARD):
    """Finite-volume percolation function on coupled soups, one per sample."""
    if L > N:
        raise ValueError(f"probe radius L={L} exceeds window radius N={N}")
    levels = np.asarray(levels, dtype=np.float64)
    if np.any(np.diff(levels) < 0):
        raise ValueError("levels must be ascending")
    u_max = float(levels.max()) if u_max is None else float(u_max)
    cfg = SoupConfig(d=d, N=N, u_max=u_max if u_max > 0 else 1.0, n_soups=soups, seed=seed, guard=guard)
    batch = run_soups(cfg, [Probe(levels, (L,))], workers)
    return theta_curve(batch, L), batch


def coupling_audit(batch: SoupBatch, probe: int = 0) -> dict:
    """Per-sample violations of the monotonicity of {0 not <-> dB_L} in u and in L.

    Levels and caps are sorted first; the indicator must be nondecreasing in
    both directions on every soup.
    """
    p = batch.probes[probe]
    lv = np.argsort(p.levels, kind="stable")
    cp = np.argsort(p.caps, kind="stable")
    caps = np.asarray(p.caps)[cp]
    ind = batch.radii[probe][:, lv][:, :, cp] < caps[None, None, :]
    du = np.diff(ind.astype(np.int8), axis=1)
    dl = np.diff(ind.astype(np.int8), axis=2)
    return {
        "soups": batch.n,
        "levels": len(p.levels),
        "radii": [int(c) for c in caps],
        "u_violations": int(np.sum(du < 0)),
        "L_violations": int(np.sum(dl < 0)),
        "samples_with_violation": int(np.sum(np.any(du < 0, axis=(1, 2)) | np.any(dl < 0, axis=(1, 2)))),
    }


# --- derivative lower bound --------------------------------------------------


def occupation_factor(eps: float, d: int = 3) -> float:
    """P[0 is visited by trajectories with labels in an interval of length eps]."""
    return -math.expm1(-eps / green_origin(d))


@dataclass(frozen=True)
class Lemma11Report:
    u: float
    eps: float
    L: int
    N: int
    n_soups: int
    theta_hat: float
    factor: float  # 1 - exp(-eps/g(0,0))
    joint: float  # P[0 <-> dB_L at u, 0 visited by labels in (u, u+eps]]
    joint_stderr: float
    product: float  # (1 - theta_hat) * factor
    identity_gap: float  # joint - product
    identity_sigma: float
    finite_volume_slack: float
    identity_ok: bool
    quotient: float  # (theta_hat(u+eps) - theta_hat(u))/eps
    quotient_stderr: float
    lower_bound: float  # (1 - theta_hat(u)) * factor / eps
    inequality_ok: bool

    def to_dict(self):
        return asdict(self)


def lemma11_identity_check(batch: SoupBatch, u: float, eps: float, L: int, probe: int = 0) -> Lemma11Report:
    """Compare the joint event with the product form and check the quotient bound.

    In the window the product form is exact with g replaced by the Green
    function of the walk killed outside the guard; ``finite_volume_slack``
    bounds the resulting change of the product.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if u + eps > batch.config.u_max + LEVEL_TOL:
        raise ValueError("u + eps exceeds the soups' u_max")
    d = batch.config.d
    n = batch.n
    conn = batch.crossed(u, L, probe)
    conn_eps = batch.crossed(u + eps, L, probe)
    hit = (batch.tau0 > u) & (batch.tau0 <= u + eps)
    theta = 1.0 - float(conn.mean())
    factor = occupation_factor(eps, d)
    joint, joint_se = _mean_se(conn & hit)
    z = conn * (hit.astype(np.float64) - factor)
    gap, gap_se = _mean_se(z)
    g = green_origin(d)
    gk = batch.killed_green
    slack = (1 - theta) * abs(math.exp(-eps / g) - math.exp(-eps / gk))
    q, q_se = _mean_se(((~conn_eps).astype(np.float64) - (~conn)) / eps)
    lower = (1 - theta) * factor / eps
    return Lemma11Report(
        u=float(u),
        eps=float(eps),
        L=int(L),
        N=batch.config.N,
        n_soups=n,
        theta_hat=theta,
        factor=factor,
        joint=joint,
        joint_stderr=joint_se,
        product=(1 - theta) * factor,
        identity_gap=gap,
        identity_sigma=gap_se,
        finite_volume_slack=slack,
        identity_ok=abs(gap) <= 3 * gap_se + slack,
        quotient=q,
        quotient_stderr=q_se,
        lower_bound=lower,
        inequality_ok=q >= lower - 3 * q_se,
    )


# --- finite-cluster decay -----------------------------------------------------


@dataclass(frozen=True)
class NlfFit:
    c0: float
    gamma: float
    residual: float  # root mean square of log-probability residuals
    radii: tuple  # radii used in the fit

    @property
    def c3(self) -> float:
        return 2.0 / self.c0

    @property
    def L0(self) -> int:
        return int(min(self.radii))


@dataclass(frozen=True)
class NlfScan:
    u: float
    radii: np.ndarray
    outer: np.ndarray
    counts: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    N: int
    n_soups: int
    seed: int
    fit: NlfFit | None
    fit_message: str = ""

    def to_csv(self) -> str:
        return _write_csv([self.u] * len(self.radii), self.estimates, self.stderr, self.radii, self.N, self.n_soups, self.seed)


MIN_COUNTS = 10
MIN_RADII = 4


def fit_stretched_exponential(radii, p) -> NlfFit:
    """Least-squares fit of log p = -c0 L^gamma with c0 > 0 and gamma in (0, 1]."""
    L = np.asarray(radii, dtype=np.float64)
    y = np.log(np.asarray(p, dtype=np.float64))

    def res(x):
        return y + x[0] * L ** x[1]

    x0 = np.array([max(-y[0], 1e-3), 0.5])
    sol = optimize.least_squares(res, x0, bounds=([1e-12, 1e-6], [np.inf, 1.0]), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    r = res(sol.x)
    return NlfFit(float(sol.x[0]), float(sol.x[1]), float(math.sqrt(np.mean(r**2))), tuple(int(v) for v in radii))


def nlf_scan(batch: SoupBatch, u: float, radii, probe: int = 1) -> NlfScan:
    """Estimate P[0 <-> dB_L, 0 not <-> dB_2L] at level u for each radius L.

    The probe must measure level ``u`` with a cap of at least twice the
    largest radius.  The outer radius 2L stands in for infinity, so these
    estimates overstate the finite-cluster probabilities.
    """
    radii = np.asarray(sorted(int(L) for L in radii), dtype=np.int64)
    N = batch.config.N
    if 2 * radii.max() > N:
        raise ValueError(f"outer radius {2 * radii.max()} exceeds window radius {N}")
    caps = batch.probes[probe].caps
    big = max(caps)
    if big < 2 * radii.max():
        raise ValueError("probe cap too small for the requested radii")
    r = batch.radius(u, big, probe)
    n = batch.n
    counts = np.array([int(np.sum((r >= L) & (r < 2 * L))) for L in radii])
    est = counts / n
    se = np.sqrt(est * (1 - est) / n)
    ok = counts >= MIN_COUNTS
    fit = None
    msg = ""
    if ok.sum() >= MIN_RADII:
        fit = fit_stretched_exponential(radii[ok], est[ok])
    else:
        msg = f"fit unavailable: {int(ok.sum())} radii with >= {MIN_COUNTS} counts, need {MIN_RADII}"
        log.warning("NLF scan at u=%g: %s", u, msg)
    return NlfScan(float(u), radii, 2 * radii, counts, est, se, N, n, batch.config.seed, fit, msg)


def lowest_fitted_scan(batch: SoupBatch, lo: float, radii, probe: int = 0) -> NlfScan:
    """First NLF scan, in increasing level order from ``lo``, whose fit is available.

    Finite clusters grow likelier with the level below criticality, so a fit
    taken above the levels of interest gives conservative constants; the
    lowest level with enough counts is the least conservative one.
    Returns the scan at the top level (without a fit) if none qualifies.
    """
    levels = [u for u in batch.probes[probe].levels if u >= lo - 1e-12]
    if not levels:
        raise ValueError(f"probe has no level >= {lo:g}")
    scan = None
    for u in levels:
        scan = nlf_scan(batch, u, radii, probe)
        if scan.fit is not None:
            break
    return scan


# --- difference quotients -------------------------------------------------------


class WindowTooSmall(ValueError):
    pass


def comparison_radius(c3: float, gamma: float, du: float) -> float:
    """(c3 log(1/du))^(1/gamma)."""
    return (c3 * math.log(1.0 / du)) ** (1.0 / gamma)


def quotient_radii(u, u1, u2, fit: NlfFit, N: int) -> tuple[int, int]:
    out = []
    for v in (u1, u2):
        L = max(math.ceil(comparison_radius(fit.c3, fit.gamma, v - u) - 1e-12), fit.L0)
        if L > N:
            raise WindowTooSmall(f"radius {L} for level gap {v - u:g} exceeds window radius {N}")
        out.append(int(L))
    return out[0], out[1]


@dataclass(frozen=True)
class QuotientReport:
    u: float
    u1: float  # u'
    u2: float  # u''
    L1: int
    L2: int
    d1: float  # finite-volume quotient at (u, u') with radius L'
    d1_stderr: float
    d2: float
    d2_stderr: float
    cap: PotentialEstimate  # capacity of B_{L'}
    combined: float  # d1 - exp((u''-u') cap) d2
    combined_stderr: float
    n_soups: int
    fit: NlfFit | None = None

    def to_dict(self):
        d = asdict(self)
        return d


def quotient_probe(u, u1, u2, L1, L2) -> Probe:
    return Probe(sorted({float(u), float(u1), float(u2)}), sorted({int(L1), int(L2)}))


def capacity_of_box(L: int, d: int = 3, seed: int = 0, n: int | None = None) -> PotentialEstimate:
    return equilibrium_sample(origin_box(L, d), 8 * max(L, 1), n, seed=seed)[0]


def difference_quotients(batch: SoupBatch, u, u1, u2, L1: int, L2: int, cap: PotentialEstimate, probe: int = 0, fit=None) -> QuotientReport:
    if not (u < u1 <= u2):
        raise ValueError("need u < u' <= u''")
    if u2 > batch.config.u_max + LEVEL_TOL:
        raise ValueError("u'' exceeds the soups' u_max")
    a = (~batch.crossed(u1, L1, probe)).astype(np.float64) - (~batch.crossed(u, L1, probe))
    b = (~batch.crossed(u2, L2, probe)).astype(np.float64) - (~batch.crossed(u, L2, probe))
    x1 = a / (u1 - u)
    x2 = b / (u2 - u)
    w = math.exp((u2 - u1) * cap.value)
    d1, s1 = _mean_se(x1)
    d2, s2 = _mean_se(x2)
    c, cs = _mean_se(x1 - w * x2)
    return QuotientReport(float(u), float(u1), float(u2), int(L1), int(L2), d1, s1, d2, s2, cap, c, cs, batch.n, fit)


def run_difference_quotients(u, u1, u2, fit: NlfFit, N: int, soups: int, seed: int, *, d: int = 3, workers: int = 1) -> QuotientReport:
    """Choose L', L'' from the fitted decay, sample coupled soups and estimate both quotients."""
    L1, L2 = quotient_radii(u, u1, u2, fit, N)
    cfg = SoupConfig(d=d, N=N, u_max=float(u2), n_soups=soups, seed=seed)
    batch = run_soups(cfg, [quotient_probe(u, u1, u2, L1, L2)], workers)
    cap = capacity_of_box(L1, d, seed)
    return difference_quotients(batch, u, u1, u2, L1, L2, cap, fit=fit)


@dataclass(frozen=True)
class Lemma13Verdict:
    slack: float
    bound: float
    lhs: float
    sigma: float
    tolerance: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def verify_lemma13_bound(rep: QuotientReport) -> Lemma13Verdict:
    """Slack of |D' - e^{(u''-u') cap} D''| <= 3(u''-u)(1+cap^2) e^{(u''-u') cap}.

    Accepted when slack >= -(3 sigma + (u'-u) + e^{...}(u''-u)); the last two
    terms bound the change from infinite-volume to finite-volume quotients.
    """
    c = rep.cap.value
    w = math.exp((rep.u2 - rep.u1) * c)
    bound = 3 * (rep.u2 - rep.u) * (1 + c * c) * w
    lhs = abs(rep.combined)
    slack = bound - lhs
    tol = 3 * rep.combined_stderr + (rep.u1 - rep.u) + w * (rep.u2 - rep.u)
    return Lemma13Verdict(slack, bound, lhs, rep.combined_stderr, tol, slack >= -tol)


# --- sampler checks -------------------------------------------------------------


@dataclass(frozen=True)
class TwoLabelCheck:
    lam: float
    n_soups: int
    frequency: float
    stderr: float
    bound: float  # lam^2 / 2
    exact: float  # 1 - e^-lam - lam e^-lam
    passed: bool


def two_label_frequencies(N: int, lams, soups: int, seed: int, *, u: float = 0.0, d: int = 3, guard: int = DEFAULT_GUARD):
    """Frequency of soups with >= 2 labels in (u, u + lam/cap], per lam.

    Uses the sampler's own count and label draws; ``cap`` is the capacity
    that sets the soup intensity, so the count in the interval is
    Poisson(lam).
    """
    window = origin_box(N, d)
    est, meas = soup_equilibrium(window, guard, seed)
    cap = meas.killed_capacity
    lams = [float(x) for x in lams]
    u_max = u + max(lams) / cap
    hits = np.zeros(len(lams), np.int64)
    for i in range(soups):
        _, labels, _ = _draw(meas, u_max, _rng.stream(seed, _rng.SOUP, i))
        for j, lam in enumerate(lams):
            k = np.count_nonzero((labels > u) & (labels <= u + lam / cap))
            hits[j] += k >= 2
    out = []
    for j, lam in enumerate(lams):
        f = hits[j] / soups
        se = math.sqrt(max(f * (1 - f), 1.0 / soups) / soups)
        out.append(TwoLabelCheck(lam, soups, f, se, lam * lam / 2, -math.expm1(-lam) - lam * math.exp(-lam), f <= lam * lam / 2 + 3 * se))
    return out

"""Verification suites with machine-readable verdicts.

Each suite returns ``{"suite", "seed", "passed", "criteria": [...]}`` where every
criterion carries its own ``passed`` flag and the numbers behind it.  Sample
sizes live in ``Budget``; the defaults are the full acceptance sizes.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import _rng
from .lattice import equilibrium_sample, green_origin, never_return_estimate, origin_box
from .percolation import (
    Probe,
    SoupConfig,
    coupling_audit,
    lemma11_identity_check,
    lowest_fitted_scan,
    run_difference_quotients,
    run_soups,
    theta_curve,
    two_label_frequencies,
    verify_lemma13_bound,
)
from .theta import AffineToy, build_smoothed_theta, fit_base
from .variational import (
    RadialBall,
    dilation_check,
    distribution_mismatch,
    failed_checks,
    j_curve,
    lambda_scaling_check,
    rearrange_radial,
    solve_min,
    threshold_scan,
)

log = logging.getLogger(__name__)

SUITES = ("potential", "sampler", "quotients", "solver", "rearrangement")


@dataclass(frozen=True)
class Budget:
    green_walks: int = 1_000_000
    green_radius: int = 32
    cap_samples: int = 100_000
    cap_radius: int = 64
    marginal_soups: int = 10_000
    marginal_N: int = 16
    poisson_soups: int = 100_000
    poisson_N: int = 16
    coupled_soups: int = 10_000
    coupled_N: int = 32
    coupled_L: int = 16
    quotient_soups: int = 10_000
    rearrangement_fields: int = 100
    workers: int = 1

    def to_dict(self):
        return asdict(self)


QUICK = Budget(
    green_walks=20_000,
    cap_samples=5_000,
    marginal_soups=400,
    marginal_N=8,
    poisson_soups=5_000,
    poisson_N=8,
    coupled_soups=256,
    coupled_N=16,
    coupled_L=8,
    quotient_soups=256,
    rearrangement_fields=10,
)

LEVELS_A = tuple(round(0.1 * i, 10) for i in range(21))
LEMMA11_LEVELS = (0.0, 0.2, 0.5)
QUOTIENT_TRIPLE = (0.1, 0.11, 0.12)

# fitted-profile settings for the solver checks
FIT_U0 = 0.8
FIT_U1 = 1.2
FIT_U_STAR = 3.0
SOLVE_U = 0.3
SWEEP_EXCESS = (0.005, 0.01, 0.02, 0.04, 0.08)
J_EXCESS = (0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08)


def _crit(name: str, passed: bool, **values) -> dict:
    return {"criterion": name, "passed": bool(passed), "values": _plain(values)}


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x


def _suite(name, seed, criteria) -> dict:
    return {"suite": name, "seed": seed, "passed": all(c["passed"] for c in criteria), "criteria": criteria}


# --- potential ----------------------------------------------------------------


def check_green_origin(seed: int, budget: Budget = Budget()) -> dict:
    g = green_origin(3)
    t = time.perf_counter()
    mc, se = never_return_estimate(3, budget.green_walks, budget.green_radius, _rng.stream(seed, _rng.GREEN_MC, 3))
    dt = time.perf_counter() - t
    in_range = 1.51637 <= g <= 1.51640
    agree = abs(mc - g) <= 3 * se
    return _crit("green_origin", in_range and agree and dt <= 60, g=g, monte_carlo=mc, stderr=se, walks=budget.green_walks, seconds=dt)


def check_point_capacity(seed: int, budget: Budget = Budget()) -> dict:
    est, _ = equilibrium_sample(origin_box(0, 3), budget.cap_radius, budget.cap_samples, seed=seed)
    target = 1 / green_origin(3)
    ok = abs(est.value - target) <= 3 * est.stderr
    return _crit("point_capacity", ok, estimate=est.value, stderr=est.stderr, target=target, samples=est.samples, escape_radius=budget.cap_radius)


def check_newton_potential() -> dict:
    t = time.perf_counter()
    D = RadialBall(1.0)
    g = D.g1()
    r = D.r
    inn = r <= 1
    e_in = float(np.max(np.abs(g[inn] - (3 - r[inn] ** 2)) / (3 - r[inn] ** 2)))
    e_out = float(np.max(np.abs(g[~inn] - 2 / r[~inn]) / (2 / r[~inn])))
    pair = D.inner(D.indicator(), g)
    e_pair = abs(pair / (16 * math.pi / 5) - 1)
    dt = time.perf_counter() - t
    ok = e_in <= 1e-3 and e_out <= 1e-3 and e_pair <= 1e-3 and dt <= 10
    return _crit("newton_potential", ok, interior_error=e_in, exterior_error=e_out, pairing=pair, pairing_error=e_pair, seconds=dt)


def suite_potential(seed: int = 0, budget: Budget = Budget()) -> dict:
    return _suite("potential", seed, [check_green_origin(seed, budget), check_point_capacity(seed, budget), check_newton_potential()])


# --- sampler ------------------------------------------------------------------


def check_marginal(seed: int, budget: Budget = Budget()) -> dict:
    t = time.perf_counter()
    cfg = SoupConfig(d=3, N=budget.marginal_N, u_max=1.0, n_soups=budget.marginal_soups, seed=seed)
    batch = run_soups(cfg, [], budget.workers)
    hit = batch.tau0 <= 1.0
    p = float(hit.mean())
    se = math.sqrt(p * (1 - p) / batch.n)
    target = -math.expm1(-1 / green_origin(3))
    dt = time.perf_counter() - t
    mean_k = float(batch.counts.mean())
    k_se = math.sqrt(batch.intensity / batch.n)
    return _crit(
        "site_marginal",
        abs(p - target) <= 3 * se and dt <= 300,
        frequency=p,
        stderr=se,
        target=target,
        soups=batch.n,
        N=cfg.N,
        seconds=dt,
        mean_count=mean_k,
        intensity=batch.intensity,
        count_mean_ok=abs(mean_k - batch.intensity) <= 3 * k_se,
    )


def check_poisson_bound(seed: int, budget: Budget = Budget()) -> dict:
    res = two_label_frequencies(budget.poisson_N, (0.05, 0.1, 0.2), budget.poisson_soups, seed)
    rows = [{"lam": c.lam, "frequency": c.frequency, "stderr": c.stderr, "bound": c.bound, "exact": c.exact, "passed": c.passed} for c in res]
    return _crit("two_label_bound", all(c.passed for c in res), rows=rows, soups=budget.poisson_soups)


def coupled_batch(seed: int, budget: Budget = Budget()):
    """Coupled soups on B_N, levels 0:2:0.1, caps 4, 8, 12 and L."""
    N, L = budget.coupled_N, budget.coupled_L
    caps = sorted({4, 8, 12, L} & set(range(1, N + 1)) | {L})
    cfg = SoupConfig(d=3, N=N, u_max=2.0, n_soups=budget.coupled_soups, seed=seed)
    probes = [Probe(LEVELS_A, caps)]
    return run_soups(cfg, probes, budget.workers)


def check_coupling(batch) -> dict:
    a = coupling_audit(batch)
    ok = a["u_violations"] == 0 and a["L_violations"] == 0
    return _crit("coupling_monotonicity", ok, **a)


def check_lemma11(batch, L: int) -> dict:
    rows = []
    for u in LEMMA11_LEVELS:
        r = lemma11_identity_check(batch, u, 0.1, L)
        rows.append(
            {
                "u": u,
                "quotient": r.quotient,
                "quotient_stderr": r.quotient_stderr,
                "lower_bound": r.lower_bound,
                "theta_hat": r.theta_hat,
                "inequality_ok": r.inequality_ok,
                "identity_gap": r.identity_gap,
                "identity_sigma": r.identity_sigma,
                "identity_ok": r.identity_ok,
            }
        )
    return _crit("derivative_lower_bound", all(r["inequality_ok"] for r in rows), rows=rows, L=L, N=batch.config.N, soups=batch.n)


def suite_sampler(seed: int = 0, budget: Budget = Budget(), batch=None) -> dict:
    batch = coupled_batch(seed, budget) if batch is None else batch
    crit = [check_marginal(seed, budget), check_poisson_bound(seed, budget), check_coupling(batch), check_lemma11(batch, budget.coupled_L)]
    return _suite("sampler", seed, crit)


# --- quotients -----------------------------------------------------------------


def check_quotients(seed: int, budget: Budget = Budget(), batch=None) -> dict:
    batch = coupled_batch(seed, budget) if batch is None else batch
    L = max(batch.probes[0].caps)
    scan = lowest_fitted_scan(batch, QUOTIENT_TRIPLE[2], range(1, L // 2 + 1))
    vals = {"nlf_level": scan.u, "nlf_counts": scan.counts, "nlf_radii": scan.radii}
    if scan.fit is None:
        return _crit("quotient_bound", False, message=scan.fit_message, **vals)
    fit = scan.fit
    vals.update(c0=fit.c0, gamma=fit.gamma, c3=fit.c3, fit_radii=fit.radii, fit_residual=fit.residual)
    t = time.perf_counter()
    try:
        rep = run_difference_quotients(*QUOTIENT_TRIPLE, fit, batch.config.N, budget.quotient_soups, seed + 1, workers=budget.workers)
    except ValueError as e:
        return _crit("quotient_bound", False, message=str(e), **vals)
    v = verify_lemma13_bound(rep)
    dt = time.perf_counter() - t
    vals.update(
        L1=rep.L1,
        L2=rep.L2,
        d1=rep.d1,
        d2=rep.d2,
        cap=rep.cap.value,
        combined=rep.combined,
        combined_stderr=rep.combined_stderr,
        slack=v.slack,
        bound=v.bound,
        tolerance=v.tolerance,
        seconds=dt,
    )
    return _crit("quotient_bound", v.passed and dt <= 600, **vals)


def suite_quotients(seed: int = 0, budget: Budget = Budget(), batch=None) -> dict:
    return _suite("quotients", seed, [check_quotients(seed, budget, batch)])


# --- solver ------------------------------------------------------------------------


def fitted_profile(batch, L: int, u0=FIT_U0, u1=FIT_U1, u_star=FIT_U_STAR):
    curve = theta_curve(batch, L)
    base = fit_base(curve.levels, curve.estimates, u0, source=f"soups:N={batch.config.N}:L={L}:seed={batch.config.seed}")
    return build_smoothed_theta(base, u0, u1, u_star), curve


def check_affine_toy() -> dict:
    toy = AffineToy(0.25, 0.3, 1.0, 1.0)
    D = RadialBall(1.0)
    r = solve_min(0.25, 0.42, toy, D)
    e = 0.05**2 * 16 * math.pi / 5
    errs = {"lambda": abs(r.lam / 0.05 - 1), "phi_sup": abs(r.phi.sup / 0.15 - 1), "energy": abs(r.energy / e - 1)}
    thr = threshold_scan(0.25, toy, D)["nu_threshold"]
    t_err = abs(thr - (0.3 + 0.8 * (math.sqrt(1.0) - math.sqrt(0.25))))
    ok = max(errs.values()) <= 1e-4 and t_err <= 1e-6
    return _crit("affine_toy", ok, lam=r.lam, phi_sup=r.phi.sup, energy=r.energy, errors=errs, threshold=thr, threshold_error=t_err)


def check_minimizer_sweep(st, u=SOLVE_U) -> dict:
    D = RadialBall(1.0)
    th = float(st.theta(u))
    rows = []
    ok = True
    for ex in SWEEP_EXCESS:
        r = solve_min(u, th + ex, st, D)
        p = r.properties
        row = {
            "nu": r.nu,
            "lam": r.lam,
            "energy": r.energy,
            "saturation": abs(r.constraint - r.nu),
            "box_ok": p["box_constraint"]["ok"],
            "exterior_spread": p["exterior_decay"]["spread"],
            "dual_gap": r.dual_gap,
            "failed": failed_checks(p),
        }
        row["passed"] = row["saturation"] <= 1e-6 and row["box_ok"] and row["exterior_spread"] <= 1e-2 and row["dual_gap"] <= 1e-2
        ok &= row["passed"]
        rows.append(row)
    sc = lambda_scaling_check(u, st, D, [th + ex for ex in SWEEP_EXCESS])
    return _crit("minimizer_properties", ok and sc.ok, rows=rows, slope=sc.slope, c_lower=sc.c_lower, c_upper=sc.c_upper, u=u, theta_u=th)


def check_j_curve(st, u=SOLVE_U) -> dict:
    D = RadialBall(1.0)
    th = float(st.theta(u))
    try:
        pts = j_curve(u, st, D, [th + ex for ex in J_EXCESS])
        mono = True
        msg = ""
    except Exception as e:  # non-monotone pair
        pts, mono, msg = [], False, str(e)
    r = solve_min(u, th + 0.04, st, D)
    dil = [dilation_check(r, D, s) for s in (0.5, 0.8)]
    ok = mono and all(x["ok"] for x in dil)
    return _crit("j_curve_and_dilation", ok, j=pts, dilation=dil, message=msg)


def suite_solver(seed: int = 0, budget: Budget = Budget(), batch=None) -> dict:
    crit = [check_affine_toy()]
    batch = coupled_batch(seed, budget) if batch is None else batch
    st, _ = fitted_profile(batch, budget.coupled_L)
    crit += [check_minimizer_sweep(st), check_j_curve(st)]
    out = _suite("solver", seed, crit)
    out["profile"] = st.to_dict()
    return out


# --- rearrangement ---------------------------------------------------------------


def random_radial_field(rng, domain: RadialBall, knots: int = 12) -> np.ndarray:
    """Nonnegative piecewise-linear radial field vanishing beyond 0.8 r_max."""
    xs = np.sort(rng.uniform(0, 0.8 * domain.r_max, knots))
    xs = np.concatenate([[0.0], xs, [0.8 * domain.r_max]])
    ys = rng.uniform(0, 1, len(xs))
    ys[-1] = 0.0
    return np.interp(domain.r, xs, ys, right=0.0)


def check_rearrangement(seed: int, budget: Budget = Budget()) -> dict:
    D = RadialBall(1.0, h=1e-2, r_max=3.0)
    rng = _rng.stream(seed, _rng.TEST, 11)
    worst_mis = 0.0
    worst_ratio = 0.0
    monotone = True
    cell = 0.0
    for _ in range(budget.rearrangement_fields):
        f = random_radial_field(rng, D)
        g = rearrange_radial(f, D).values
        mis, cell = distribution_mismatch(f, g, D)
        worst_mis = max(worst_mis, mis)
        worst_ratio = max(worst_ratio, D.energy(g) / D.energy(f))
        monotone &= bool(np.all(np.diff(g) <= 0))
    ok = worst_mis <= cell and worst_ratio <= 1.01 and monotone
    return _crit("rearrangement", ok, fields=budget.rearrangement_fields, worst_mismatch=worst_mis, cell_volume=cell, worst_energy_ratio=worst_ratio, monotone=monotone)


def suite_rearrangement(seed: int = 0, budget: Budget = Budget()) -> dict:
    return _suite("rearrangement", seed, [check_rearrangement(seed, budget)])


def run_suite(name: str, seed: int = 0, budget: Budget = Budget(), batch=None) -> dict:
    if name == "potential":
        return suite_potential(seed, budget)
    if name == "sampler":
        return suite_sampler(seed, budget, batch)
    if name == "quotients":
        return suite_quotients(seed, budget, batch)
    if name == "solver":
        return suite_solver(seed, budget, batch)
    if name == "rearrangement":
        return suite_rearrangement(seed, budget)
    raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")

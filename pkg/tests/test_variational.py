import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from interlacements.theta import AffineToy, ExpBase, build_smoothed_theta
from interlacements.variational import (
    BoxDomain,
    ConvergenceError,
    Field,
    RadialBall,
    SmallExcessError,
    check_minimizer_props,
    constraint_value,
    dilation_check,
    distribution_mismatch,
    el_fixed_point,
    energy_pair,
    failed_checks,
    green_convolve,
    j_curve,
    lambda_scaling_check,
    make_domain,
    rearrange_radial,
    result_to_dict,
    shell_volumes,
    solve_min,
    threshold_scan,
    write_profile_csv,
)


@pytest.fixture(scope="module")
def ball():
    return RadialBall(1.0)


@pytest.fixture(scope="module")
def coarse():
    return RadialBall(1.0, h=1e-2, r_max=4.0)


@pytest.fixture(scope="module")
def toy():
    return AffineToy(0.25, 0.3, 1.0, 1.0)


@pytest.fixture(scope="module")
def profile():
    return build_smoothed_theta(ExpBase(1.0), 0.8, 1.2, 3.0)


# --- Newton potential ---------------------------------------------------------------


def test_newton_potential_of_unit_ball(ball):
    g = green_convolve(ball.indicator(), ball).values
    ref = oracles.newton_ball(ball.r)
    assert np.max(np.abs(g - ref) / ref) <= 1e-3
    assert ball.inner(ball.indicator(), g) == pytest.approx(oracles.NEWTON_PAIRING, rel=1e-3)
    assert ball.average(g) == pytest.approx(2.4, rel=1e-6)


@given(st.floats(-5, 5), st.integers(0, 1000))
def test_green_is_linear(alpha, seed):
    D = RadialBall(1.0, h=5e-2, r_max=3.0)
    rho = np.random.default_rng(seed).uniform(0, 1, D.r.shape) * D.inside
    a = D.green(alpha * rho)
    b = alpha * D.green(rho)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13)


def test_green_rejects_exterior_support(coarse):
    rho = np.ones_like(coarse.r)
    with pytest.raises(ValueError):
        coarse.green(rho)


def test_weights_give_volume(ball):
    assert ball.weights.sum() == pytest.approx(4 * math.pi / 3, rel=1e-12)
    assert ball.average(1.0) == pytest.approx(1.0)
    b = BoxDomain(1.0, n=6)
    assert b.weights.sum() == pytest.approx(8.0)


def test_box_newton_potential_far_field():
    # far from the cube the potential is a_3 |D| / r = (3/(2 pi)) 8 / r
    D = BoxDomain(1.0, n=8, pad=3)
    g = D.g1()
    far = D.radius_nodes >= 2.5
    ref = 3 / (2 * math.pi) * 8 / D.radius_nodes[far]
    assert np.max(np.abs(g[far] - ref) / ref) <= 2e-2


def test_field_rejects_nonfinite(coarse):
    with pytest.raises(ValueError):
        Field(np.array([1.0, np.nan]), coarse)


def test_make_domain():
    assert make_domain({"shape": "ball", "h": 0.1}).h == pytest.approx(0.1)
    assert make_domain({"shape": "box", "n": 4}).n == 4
    with pytest.raises(ValueError):
        make_domain({"shape": "torus"})


# --- fixed point and solver -------------------------------------------------------------


def test_fixed_point_zero_multiplier(coarse, profile):
    phi, it, res = el_fixed_point(0.0, 0.3, profile, coarse)
    assert np.all(phi == 0)


def test_fixed_point_affine_closed_form(ball, toy):
    lam = 0.03
    phi, _, res = el_fixed_point(lam, 0.25, toy, ball)
    assert phi[0] == pytest.approx(3 * lam, rel=1e-6)
    assert np.allclose(phi, lam * ball.g1(), rtol=1e-9, atol=1e-14)
    assert res <= 1e-9


def test_fixed_point_divergence_reported(coarse, profile):
    with pytest.raises(ConvergenceError) as e:
        el_fixed_point(0.05, 0.3, profile, coarse, max_iter=3)
    assert e.value.history


def test_affine_toy_solve(ball, toy):
    lam, sup, energy = oracles.affine_minimizer(0.3, 0.42, 1.0)
    r = solve_min(0.25, 0.42, toy, ball)
    assert r.lam == pytest.approx(lam, rel=1e-4)
    assert r.phi.sup == pytest.approx(sup, rel=1e-4)
    assert r.energy == pytest.approx(energy, rel=1e-4)
    assert r.energy_dual == pytest.approx(energy, rel=1e-2)
    assert abs(r.constraint - 0.42) <= 1e-6
    # exterior: r phi = 2 lam kappa
    out = ball.r >= 1
    assert np.allclose(ball.r[out] * r.phi.values[out], 2 * r.lam, rtol=1e-8)
    assert failed_checks(r.properties) == []


def test_solve_at_theta_is_zero(coarse, profile):
    th = float(profile.theta(0.3))
    r = solve_min(0.3, th, profile, coarse)
    assert r.lam == 0 and r.energy == 0 and r.phi.sup == 0
    assert failed_checks(r.properties) == []
    assert energy_pair(coarse.zeros(), 0.0, coarse.zeros(), coarse) == (0.0, 0.0)


def test_solve_validation(coarse, profile):
    th = float(profile.theta(0.3))
    with pytest.raises(ValueError):
        solve_min(0.3, th - 0.01, profile, coarse)
    with pytest.raises(ValueError):
        solve_min(0.9, 0.9, profile, coarse)  # above u0
    with pytest.raises(ValueError):
        solve_min(0.3, 1.0, profile, coarse)


def test_large_excess_is_refused(coarse, profile):
    with pytest.raises(SmallExcessError) as e:
        solve_min(0.3, 0.95, profile, coarse)
    assert "outside small-excess regime" in str(e.value)
    assert math.isfinite(e.value.best_constraint) and e.value.best_constraint > 0


def test_minimizer_properties_on_sweep(coarse, profile):
    th = float(profile.theta(0.3))
    for ex in (0.01, 0.02, 0.04):
        r = solve_min(0.3, th + ex, profile, coarse)
        p = r.properties
        assert failed_checks(p) == [], p
        assert abs(r.constraint - r.nu) <= 1e-6
        assert r.dual_gap <= 1e-2
        assert r.residual <= 10 * r.tol
        assert np.min(r.phi.values) >= 0
        assert r.phi.sup <= math.sqrt(3.0) - math.sqrt(0.3)
        # sup-norm bound from the fixed point
        assert r.phi.sup <= r.lam * profile.eta_prime_sup() * coarse.g1().max() * (1 + 1e-9)


def test_dual_gap_halves_with_mesh(profile):
    th = float(profile.theta(0.3))
    gaps = [solve_min(0.3, th + 0.02, profile, RadialBall(1.0, h=h)).dual_gap for h in (4e-2, 2e-2, 1e-2)]
    assert gaps[1] <= gaps[0] / 2 and gaps[2] <= gaps[1] / 2


def test_lambda_scaling_affine(ball):
    for kappa in (1.0, 2.0):
        toy = AffineToy(0.25, 0.3, kappa, 4.0)
        rep = lambda_scaling_check(0.25, toy, ball, [0.31, 0.32, 0.34, 0.38])
        assert rep.slope == pytest.approx(1.0, abs=1e-4)
        assert rep.c_lower == pytest.approx(1 / (2.4 * kappa**2), rel=1e-4)
        assert rep.ok


def test_lambda_scaling_needs_three_points(coarse, toy):
    with pytest.raises(ValueError):
        lambda_scaling_check(0.25, toy, coarse, [0.31, 0.32])


def test_lambda_sandwich(coarse, profile):
    th = float(profile.theta(0.3))
    rep = lambda_scaling_check(0.3, profile, coarse, [th + e for e in (0.005, 0.01, 0.02)])
    assert rep.bound_lower <= rep.c_lower * (1 + 1e-6)
    assert rep.c_upper <= rep.bound_upper * (1 + 1e-6)


def test_j_curve_affine_is_quadratic(ball):
    toy = AffineToy(0.25, 0.3, 1.0, 4.0)
    nus = [0.3, 0.32, 0.35, 0.4]
    pts = j_curve(0.25, toy, ball, nus)
    for nu, J in pts:
        assert J == pytest.approx((nu - 0.3) ** 2 * oracles.NEWTON_PAIRING / 2.4**2, rel=1e-4, abs=1e-15)


def test_j_continuity_under_refinement(coarse, profile):
    th = float(profile.theta(0.3))
    from interlacements.variational import continuity_probe

    gaps = continuity_probe(0.3, profile, coarse, th + 0.02)
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_dilation(ball, toy):
    r = solve_min(0.25, 0.36, toy, ball)
    same = dilation_check(r, ball, 1.0)
    assert same["ratio"] == pytest.approx(1.0)
    for s in (0.5, 0.8):
        rep = dilation_check(r, ball, s)
        assert rep["ok"] and rep["ratio"] == pytest.approx(s, rel=1e-2)
    with pytest.raises(ValueError):
        dilation_check(r, ball, 1.5)


def test_threshold_scan(ball):
    for kappa in (0.5, 1.0, 2.0):
        toy = AffineToy(0.25, 0.3, kappa, 1.0)
        out = threshold_scan(0.25, toy, ball)
        # linear in kappa: the excess is kappa (sqrt u_* - sqrt u) avg G1 / max G1
        assert out["nu_threshold"] == pytest.approx(0.3 + 0.8 * kappa * 0.5, abs=1e-6)
    near = threshold_scan(0.25, AffineToy(0.25, 0.3, 1.0, 0.2500001), ball)
    assert near["nu_threshold"] == pytest.approx(0.3, abs=1e-6)
    far = threshold_scan(0.25, AffineToy(0.25, 0.3, 1.0, 9.0), ball)
    assert not far["reachable"] and "unreachable" in far["message"]


def test_threshold_marks_box_exit(ball):
    toy = AffineToy(0.25, 0.3, 1.0, 1.0)
    thr = threshold_scan(0.25, toy, ball)["nu_threshold"]
    below = solve_min(0.25, thr - 0.01, toy, ball)
    above = solve_min(0.25, thr + 0.01, toy, ball)
    assert below.properties["box_constraint"]["ok"] and below.regime == "small-excess"
    assert not above.properties["box_constraint"]["ok"]
    assert above.regime == "auxiliary problem only"


def test_box_domain_solve():
    toy = AffineToy(0.25, 0.3, 1.0, 1.0)
    D = BoxDomain(1.0, n=8)
    r = solve_min(0.25, 0.32, toy, D)
    assert abs(r.constraint - 0.32) <= 1e-6
    assert r.dual_gap <= 1e-2
    assert failed_checks(r.properties) == []
    assert r.properties["exterior_laplacian"]["ok"]
    # phi is lam G1 exactly in the affine regime
    assert np.allclose(r.phi.values, r.lam * D.g1(), rtol=1e-8, atol=1e-14)
    d = dilation_check(r, D, 0.5)
    assert d["ok"]


def test_props_flag_a_corrupted_result(coarse, profile):
    th = float(profile.theta(0.3))
    r = solve_min(0.3, th + 0.02, profile, coarse)
    r.phi = Field(r.phi.values + 0.01 * r.phi.sup * np.exp(-3 * coarse.r), coarse)
    bad = failed_checks(check_minimizer_props(r, profile, coarse))
    assert "optimality_ratio" in bad


def test_serialization(coarse, toy, tmp_path):
    r = solve_min(0.25, 0.33, toy, coarse)
    d = result_to_dict(r)
    assert d["lambda"] == r.lam and len(d["profile"]) == len(coarse.r)
    assert d["profile_digest"] == toy.digest()
    p = tmp_path / "phi.csv"
    with open(p, "w") as fh:
        write_profile_csv(r, fh)
    rows = p.read_text().splitlines()
    assert rows[0] == "r,phi" and len(rows) == len(coarse.r) + 1
    assert float(rows[1].split(",")[1]) == r.phi.values[0]


def test_constraint_value_matches_average(coarse, profile):
    phi = 0.1 * np.exp(-coarse.r)
    assert constraint_value(profile, 0.3, phi, coarse) == pytest.approx(coarse.average(profile.eta(math.sqrt(0.3) + phi)))


# --- rearrangement ---------------------------------------------------------------------


def _radial_field(seed, D):
    r = np.random.default_rng(seed)
    xs = np.sort(r.uniform(0, 0.8 * D.r_max, 8))
    return np.interp(D.r, np.r_[0, xs, 0.8 * D.r_max], np.r_[r.uniform(0, 1, 9), 0.0], right=0.0)


@given(st.integers(0, 2**32 - 1))
def test_rearrangement_properties(seed):
    D = RadialBall(1.0, h=2e-2, r_max=3.0)
    f = _radial_field(seed, D)
    g = rearrange_radial(f, D).values
    mis, cell = distribution_mismatch(f, g, D)
    assert mis <= cell
    assert np.all(np.diff(g) <= 0)
    assert D.energy(g) <= D.energy(f) * 1.01
    assert g.max() == f.max() and g.min() == f.min()


def test_rearrangement_fixes_decreasing_fields():
    D = RadialBall(1.0, h=2e-2, r_max=3.0)
    f = np.exp(-D.r)
    g = rearrange_radial(f, D).values
    assert np.array_equal(g, f)


@given(st.integers(0, 2**32 - 1))
def test_permuted_shells_share_distribution(seed):
    D = RadialBall(1.0, h=5e-2, r_max=2.0)
    r = np.random.default_rng(seed)
    f = r.uniform(0, 1, D.r.shape)
    g = f.copy()
    vol = shell_volumes(D)
    # swapping values between shells of (almost) equal volume keeps the layer cake
    i = np.argsort(vol)
    g[i[-1]], g[i[-2]] = f[i[-2]], f[i[-1]]
    mis, cell = distribution_mismatch(f, g, D)
    assert mis <= abs(vol[i[-1]] - vol[i[-2]]) + 1e-12
    assert distribution_mismatch(rearrange_radial(f, D), rearrange_radial(g, D), D)[0] <= cell


def test_rearrangement_rejects_negative(coarse):
    with pytest.raises(ValueError):
        rearrange_radial(-np.ones_like(coarse.r), coarse)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from interlacements.lattice import green_origin
from interlacements.percolation import (
    NlfFit,
    Probe,
    SoupConfig,
    ThetaCurve,
    WindowTooSmall,
    comparison_radius,
    coupling_audit,
    difference_quotients,
    fit_stretched_exponential,
    lemma11_identity_check,
    lowest_fitted_scan,
    nlf_scan,
    occupation_factor,
    quotient_radii,
    run_soups,
    theta_curve,
    two_label_frequencies,
    verify_lemma13_bound,
    capacity_of_box,
)

LEVELS = tuple(round(0.25 * i, 10) for i in range(13))


@pytest.fixture(scope="module")
def batch():
    cfg = SoupConfig(d=3, N=8, u_max=3.0, n_soups=640, seed=21)
    return run_soups(cfg, [Probe(LEVELS, (1, 2, 4, 8)), Probe((0.0, 3.0), (8,))])


def test_batch_shapes(batch):
    assert batch.radii[0].shape == (640, len(LEVELS), 4)
    assert batch.n == 640 and batch.counts.min() >= 0
    assert batch.killed_green < green_origin(3)


def test_worker_count_does_not_change_results(batch):
    cfg = SoupConfig(d=3, N=8, u_max=3.0, n_soups=200, seed=21)
    probes = [Probe(LEVELS, (1, 2, 4, 8))]
    a = run_soups(cfg, probes, workers=1)
    b = run_soups(cfg, probes, workers=2)
    assert np.array_equal(a.radii[0], b.radii[0])
    assert np.array_equal(a.tau0, b.tau0)
    # and a prefix of a larger run is the same soups
    assert np.array_equal(a.radii[0], batch.radii[0][:200])


def test_exact_coupling(batch):
    a = coupling_audit(batch)
    assert a["u_violations"] == 0 and a["L_violations"] == 0


def test_theta_curve_basics(batch):
    for L in (1, 2, 4, 8):
        c = theta_curve(batch, L)
        assert c.estimates[0] == 0.0
    curves = np.array([theta_curve(batch, L).estimates for L in (1, 2, 4, 8)])
    # nondecreasing in L on the same soups
    assert np.all(np.diff(curves, axis=0) >= 0)
    c = theta_curve(batch, 4)
    occ = 1 - np.exp(-np.asarray(LEVELS) / green_origin(3))
    assert np.all(c.estimates >= occ - 3 * np.sqrt(occ * (1 - occ) / batch.n) - 1e-12)


def test_theta_curve_csv_roundtrip(batch):
    c = theta_curve(batch, 4)
    text = c.to_csv()
    assert text.splitlines()[0] == "u,theta_hat,stderr,L,N,n_soups,seed"
    back = ThetaCurve.from_csv(text)
    assert np.array_equal(back.levels, c.levels) and np.array_equal(back.estimates, c.estimates)
    assert np.array_equal(back.stderr, c.stderr)
    assert (back.L, back.N, back.n_soups, back.seed) == (c.L, c.N, c.n_soups, c.seed)
    assert back.to_csv() == text


def test_csv_header_enforced():
    with pytest.raises(ValueError):
        ThetaCurve.from_csv("a,b\n1,2\n")


def test_occupation_factor_values():
    assert occupation_factor(0.5) == pytest.approx(0.2809, abs=1e-4)
    assert occupation_factor(1.0) == pytest.approx(0.4829, abs=1e-4)


def test_lemma11_at_zero(batch):
    r = lemma11_identity_check(batch, 0.0, 0.5, 4)
    assert r.theta_hat == 0.0
    assert r.product == pytest.approx(occupation_factor(0.5))
    assert r.identity_ok and r.inequality_ok


@pytest.mark.parametrize("u", [0.0, 0.5, 1.0])
def test_lemma11_inequality(batch, u):
    r = lemma11_identity_check(batch, u, 0.25, 4)
    assert r.inequality_ok
    assert r.identity_ok


def test_lemma11_validation(batch):
    with pytest.raises(ValueError):
        lemma11_identity_check(batch, 0.0, 0.0, 4)
    with pytest.raises(ValueError):
        lemma11_identity_check(batch, 2.9, 0.25, 4)


def test_difference_quotients_degenerate(batch):
    cap = capacity_of_box(4, n=4000)
    rep = difference_quotients(batch, 0.0, 0.5, 0.5, 4, 4, cap)
    th = theta_curve(batch, 4)
    i = list(LEVELS).index(0.5)
    assert rep.d1 == pytest.approx(th.estimates[i] / 0.5)
    assert rep.d2 == rep.d1
    v = verify_lemma13_bound(rep)
    assert v.lhs == 0.0
    assert v.bound == pytest.approx(3 * 0.5 * (1 + cap.value**2))
    assert v.passed
    # occupied origin gives the lower bound
    lo = -math.expm1(-0.5 / green_origin(3)) / 0.5
    assert rep.d1 >= lo - 3 * rep.d1_stderr


def test_difference_quotients_validation(batch):
    cap = capacity_of_box(2, n=1000)
    with pytest.raises(ValueError):
        difference_quotients(batch, 0.5, 0.5, 1.0, 2, 2, cap)


def test_comparison_radius_formula():
    assert comparison_radius(0.5, 0.5, 0.01) == pytest.approx((0.5 * math.log(100)) ** 2)


def test_quotient_radii_clip_and_refuse():
    fit = NlfFit(c0=20.0, gamma=1.0, residual=0.0, radii=(3, 4, 5, 6))
    L1, L2 = quotient_radii(0.1, 0.11, 0.12, fit, 32)
    assert (L1, L2) == (3, 3)  # raw radii below L0 are clipped up
    with pytest.raises(WindowTooSmall):
        quotient_radii(0.1, 0.11, 0.12, NlfFit(1.0, 0.5, 0.0, (1, 2, 3, 4)), 32)


@given(st.floats(0.2, 5.0), st.floats(0.2, 1.0))
def test_stretched_exponential_fit_recovers_parameters(c0, gamma):
    L = np.arange(1, 9, dtype=float)
    p = np.exp(-c0 * L**gamma)
    f = fit_stretched_exponential(L, p)
    assert f.c0 == pytest.approx(c0, rel=1e-5)
    assert f.gamma == pytest.approx(gamma, rel=1e-5)
    assert f.residual < 1e-6
    assert f.c3 == pytest.approx(2 / f.c0)


def test_nlf_scan_zero_level(batch):
    s = nlf_scan(batch, 0.0, [1, 2, 3, 4], probe=1)
    assert np.all(s.estimates == 0)
    assert s.fit is None and "fit unavailable" in s.fit_message
    assert np.array_equal(s.outer, 2 * s.radii)


def test_nlf_scan_nonincreasing_within_noise(batch):
    s = nlf_scan(batch, 3.0, [1, 2, 3, 4], probe=1)
    for a, b, sa, sb in zip(s.estimates, s.estimates[1:], s.stderr, s.stderr[1:]):
        assert b <= a + 3 * math.hypot(sa, sb)


def test_nlf_scan_rejects_large_radii(batch):
    with pytest.raises(ValueError):
        nlf_scan(batch, 3.0, [1, 5], probe=1)


def test_nlf_csv(batch):
    s = nlf_scan(batch, 3.0, [1, 2, 3, 4], probe=1)
    rows = s.to_csv().splitlines()
    assert rows[0] == "u,theta_hat,stderr,L,N,n_soups,seed" and len(rows) == 5


def test_lowest_fitted_scan_order(batch):
    s = lowest_fitted_scan(batch, 0.0, [1, 2, 3, 4], probe=0)
    fitted = [u for u in LEVELS if nlf_scan(batch, u, [1, 2, 3, 4], probe=0).fit is not None]
    if fitted:
        assert s.u == min(fitted) and s.fit is not None
    else:
        assert s.fit is None and s.u == LEVELS[-1]


def test_two_label_frequencies():
    res = two_label_frequencies(4, (0.05, 0.1, 0.2), 4000, 3)
    for r in res:
        assert r.exact == pytest.approx(oracles.poisson_two_or_more(r.lam))
        assert r.exact <= r.bound
        assert r.passed
        assert abs(r.frequency - r.exact) <= 4 * r.stderr
    assert res[1].exact == pytest.approx(0.004679, abs=1e-6)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hagedorn_bohm import ensemble_stats as es
from hagedorn_bohm.bohmian import SemiclassicalBackend, integrate_ensemble
from hagedorn_bohm.classical_flow import ClassicalState, integrate_flow
from hagedorn_bohm.errors import ContractViolation
from hagedorn_bohm.hagedorn import PacketParams, eval_packet
from hagedorn_bohm.potential import PotentialModel

from oracles import admissible_pair, erf


def _pair2d():
    return admissible_pair([[1.1, 0.3], [-0.2, 0.9]], [[0.5, 0.2], [0.2, -0.3]], np.eye(2))


def test_ground_sampling_moments():
    A, B = _pair2d()
    p = PacketParams(0.1, [0.3, -0.2], [1.0, 0.0], A, B)
    N = 100000
    x = es.born_sample(p, (0, 0), N, seed=0)
    cov = 0.05 * (A @ A.conj().T).real
    assert np.all(np.abs(x.mean(axis=0) - p.a) < 5 * np.sqrt(np.diag(cov) / N))
    assert np.max(np.abs(np.cov(x.T) - cov)) < 0.02 * np.max(np.abs(cov))


@pytest.mark.parametrize("k", [1, 2])
def test_excited_sampling_chi2(k):
    p = PacketParams.standard(0.1, [0.5], [1.0])
    x = es.born_sample(p, k, 100000, seed=1)
    xs = np.linspace(0.5 - 3, 0.5 + 3, 20001)
    dens = np.abs(eval_packet(p, k, xs[:, None])) ** 2
    res = es.chi2_against_cdf(x, *es.density_cdf(xs, dens))
    assert res["p_value"] > 0.01


def test_two_dimensional_excited_sampling():
    A, B = _pair2d()
    p = PacketParams(0.2, [0.0, 0.0], [0.0, 0.0], A, B)
    x = es.born_sample(p, (1, 1), 50000, seed=2)
    ax = np.linspace(-4, 4, 401)
    pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    dens = np.abs(eval_packet(p, (1, 1), pts)) ** 2 * (ax[1] - ax[0]) ** 2
    for j in range(2):
        expect = np.sum(dens * pts[:, j] ** 2)
        assert abs(np.mean(x[:, j] ** 2) - expect) < 0.03 * expect


def test_sampling_determinism():
    p = PacketParams.standard(0.1, [0.5], [1.0])
    a = es.born_sample(p, 1, 1000, seed=7)
    b = es.born_sample(p, 1, 1000, seed=np.random.default_rng(7))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, es.born_sample(p, 1, 1000, seed=8))
    assert es.born_sample(p, 0, 0).shape == (0, 1)


def test_ball_tail_oracles():
    p1 = PacketParams.standard(0.1, [0.5], [1.0])
    p2 = PacketParams.standard(0.1, [0.5, 0.0], [1.0, 0.0])
    p3 = PacketParams.standard(0.1, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    for R in (0.5, 1.0, 2.0, 3.0):
        assert abs(es.ball_tail(p1, 0, R) - (1 - erf(R))) < 1e-12
        assert abs(es.ball_tail(p2, (0, 0), R) - math.exp(-R * R)) < 1e-12
        chi3 = 1 - erf(R) + 2 * R * math.exp(-R * R) / math.sqrt(math.pi)
        assert abs(es.ball_tail(p3, (0, 0, 0), R) - chi3) < 1e-10
    # excited state in 1D: |phi_1|^2 = 2 y^2 e^{-y^2} / sqrt(pi)
    R = 1.3
    expect = 1 - erf(R) + 2 * R * math.exp(-R * R) / math.sqrt(math.pi)
    assert abs(es.ball_tail(p1, 1, R) - expect) < 1e-10
    assert abs(es.ball_tail(p1, 0, 0.0) - 1.0) < 1e-12


def _harmonic(eps=0.1, T=2.0):
    V = PotentialModel("harmonic", 1)
    p0 = PacketParams.standard(eps, [0.5], [1.0])
    tr = integrate_flow(ClassicalState.from_packet(p0), V, T, tol=1e-12)
    return p0, tr, SemiclassicalBackend(tr, eps, 0)


def test_flux_vanishes_for_rigid_transport():
    _, tr, b = _harmonic()
    for R in (1.0, 2.0):
        fb = es.flux_bound(b, tr, R, 2.0)
        assert fb["flux"] < 1e-12
        assert abs(fb["bound"] - (1 - erf(R))) < 1e-12


def test_free_flux_bound_is_tight():
    eps = 0.1
    V = PotentialModel("free", 1)
    p0 = PacketParams.standard(eps, [0.5], [1.0])
    tr = integrate_flow(ClassicalState.from_packet(p0), V, 2.0, tol=1e-12)
    b = SemiclassicalBackend(tr, eps, 0)
    # paths move outward only, so crossings equal exits: P(|x0| > R / sqrt(5)) overall
    for R in (1.0, 2.0):
        fb = es.flux_bound(b, tr, R, 2.0)
        assert abs(fb["bound"] - (1 - erf(R / math.sqrt(5)))) < 1e-2 * (1 - erf(R / math.sqrt(5)))
    with pytest.raises(ContractViolation):
        es.flux_bound(b, tr, 0.0, 2.0)


def test_deviation_and_velocity_statistics():
    p0, tr, b = _harmonic()
    x0 = es.born_sample(p0, 0, 500, seed=3)
    ens = integrate_ensemble(b, x0, 2.0)
    dev = es.max_deviation(ens, tr) / math.sqrt(0.1)
    assert np.allclose(dev, np.abs(x0[:, 0] - 0.5) / math.sqrt(0.1), atol=1e-6)
    assert np.max(es.max_velocity_deviation(ens, tr)) < 1e-8
    assert np.max(es.averaged_velocity_stat(ens, tr, 0.25)) < 1e-6
    R = es.calibrate_radius(ens, tr, 0.9)
    assert es.deviation_stat(ens, tr, R)["prob"] >= 0.9
    assert es.deviation_stat(ens, tr, R * (1 - 1e-9))["prob"] < 0.9
    res = es.EnsembleResult.from_ensemble(ens, tr, seed=3)
    assert res.coverage(R) == es.deviation_stat(ens, tr, R)["prob"]
    assert res.scaled_quantile(0.9) == pytest.approx(R)
    with pytest.raises(ContractViolation):
        es.averaged_velocity_stat(ens, tr, 0.013)


def test_wilson_interval():
    lo, hi = es.binomial_interval(50, 100)
    assert lo == pytest.approx(0.4038315, abs=1e-6) and hi == pytest.approx(0.5961685, abs=1e-6)
    lo, hi = es.binomial_interval(100, 100)
    assert hi == 1.0 and lo < 1.0
    assert es.binomial_interval(0, 0) == (0.0, 1.0)


def test_rate_fit_exact_power():
    eps = [0.2, 0.1, 0.05, 0.025]
    fit = es.rate_fit([3 * e ** 0.5 for e in eps], eps)
    assert abs(fit.slope - 0.5) < 1e-12 and abs(fit.intercept - math.log(3)) < 1e-12
    assert fit.stderr < 1e-10 and fit.n == 4
    with pytest.raises(ContractViolation):
        es.rate_fit([1, 2, 3], [0.1, 0.2, 0.3])
    with pytest.raises(ContractViolation):
        es.rate_fit([1, 0, 3, 4], eps)


@settings(max_examples=30, deadline=None)
@given(slope=st.floats(-2, 3), noise=st.floats(0, 0.05), seed=st.integers(0, 1000))
def test_rate_fit_interval_contains_truth(slope, noise, seed):
    rng = np.random.default_rng(seed)
    eps = np.geomspace(0.2, 0.0125, 5)
    vals = eps ** slope * np.exp(noise * rng.uniform(-1, 1, 5))
    fit = es.rate_fit(vals, eps)
    # uniform noise of half-width `noise` shifts the slope by at most 2 noise / log-range
    assert abs(fit.slope - slope) <= 2 * noise / math.log(16) + 1e-9
    assert fit.ci_low <= fit.slope <= fit.ci_high


def test_remainder_norms():
    H = PotentialModel("harmonic", 1)
    C = PotentialModel("cosine", 1)
    prev = math.inf
    for eps in (0.2, 0.1, 0.05):
        p = PacketParams.standard(eps, [0.5], [1.0])
        assert es.remainder_norm(p, H, 3) < 1e-15
        r = es.remainder_norm(p, C, 3, k=1)
        assert r < prev
        prev = r


def test_chi2_detects_wrong_density():
    rng = np.random.default_rng(0)
    xs = np.linspace(-6, 6, 4001)
    cdf = es.density_cdf(xs, np.exp(-xs ** 2 / 2))
    assert es.chi2_against_cdf(rng.normal(size=20000), *cdf)["p_value"] > 0.01
    assert es.chi2_against_cdf(1.1 * rng.normal(size=20000), *cdf)["p_value"] < 1e-6


def test_node_proximity_summary():
    _, tr, _ = _harmonic()
    b = SemiclassicalBackend(tr, 0.1, 1)
    ens = integrate_ensemble(b, [[0.5], [0.8], [0.2]], 1.0)
    s = es.node_proximity_stat(ens)
    assert s["aborted"] == 1 and s["min"] == 0.0
    assert math.isinf(es.max_deviation(ens, tr)[0])


def test_free_coverage_and_zero_radius():
    eps, T = 0.1, 2.0
    V = PotentialModel("free", 1)
    p0 = PacketParams.standard(eps, [0.5], [1.0])
    tr = integrate_flow(ClassicalState.from_packet(p0), V, T, tol=1e-12)
    x0 = es.born_sample(p0, 0, 2000, seed=11)
    ens = integrate_ensemble(SemiclassicalBackend(tr, eps, 0), x0, T)
    for R in (1.0, 2.0, 3.0):
        s = es.deviation_stat(ens, tr, R)
        p = erf(R / math.sqrt(1 + T * T))
        assert abs(s["prob"] - p) <= 3 * math.sqrt(p * (1 - p) / s["n"])
    assert es.deviation_stat(ens, tr, 0.0)["prob"] == 0.0


def test_single_window_average():
    eps = 0.1
    V = PotentialModel("cosine", 1)
    p0 = PacketParams.standard(eps, [0.5], [1.0])
    tr = integrate_flow(ClassicalState.from_packet(p0), V, 2.0, tol=1e-12)
    ens = integrate_ensemble(SemiclassicalBackend(tr, eps, 0), es.born_sample(p0, 0, 20, seed=5), 2.0)
    a = tr.position(ens.t)
    expect = np.abs((ens.Q[-1, :, 0] - ens.Q[0, :, 0]) - (a[-1, 0] - a[0, 0])) / 2.0
    assert np.allclose(es.averaged_velocity_stat(ens, tr, 1.0), expect, rtol=1e-12, atol=1e-15)


def test_rate_fit_constant_statistic():
    eps = [0.2, 0.1, 0.05, 0.025]
    assert abs(es.rate_fit([0.7] * 4, eps).slope) < 1e-12


def test_free_first_remainder_is_zero():
    p = PacketParams.standard(0.1, [0.5, 0.0], [1.0, 0.0])
    assert es.remainder_norm(p, PotentialModel("free", 2), 1, (1, 0)) == 0.0

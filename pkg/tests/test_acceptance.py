"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

import conftest
from hagedorn_bohm import ensemble_stats as es
from hagedorn_bohm.bohmian import SemiclassicalBackend, integrate_ensemble, integrate_exact_ensemble
from hagedorn_bohm.classical_flow import ClassicalState, integrate_flow
from hagedorn_bohm.hagedorn import (PacketParams, PacketTable, eval_gradient, eval_packet, index_set, moments,
                                    quadrature_grid)
from hagedorn_bohm.potential import PotentialModel
from hagedorn_bohm.reference_solver import GridSpec, compare_norms, propagate, wave_from_packet

from oracles import admissible_pair, erf, symbolic_packet

EPS_SWEEP = (0.2, 0.1, 0.05, 0.025)
T_SWEEP = 2.0
A0, ETA0 = 0.5, 1.0
N_PATHS = 2000
SEED = 20261014


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


def _flow(fam, eps, T, d=1):
    V = PotentialModel(fam, d)
    p0 = PacketParams.standard(eps, np.full(d, A0), np.full(d, ETA0))
    return V, p0, integrate_flow(ClassicalState.from_packet(p0), V, T, tol=1e-12)


def _ratio(vals):
    return max(vals) / min(vals)


@pytest.fixture(scope="module")
def cosine_sweep():
    """Exact-backend ensembles and grid errors at T for k = 0, 1 over the eps sweep."""
    out = {}
    for k in (0, 1):
        for i, eps in enumerate(EPS_SWEEP):
            t0 = time.perf_counter()
            V, p0, tr = _flow("cosine", eps, T_SWEEP)
            g = GridSpec.auto(tr, eps, k, dt=1e-3)
            x0 = es.born_sample(p0, k, N_PATHS, np.random.default_rng([SEED, k, i]))
            final = []
            ens = integrate_exact_ensemble(wave_from_packet(g, p0, k), V, eps, T_SWEEP, x0, record_every=5,
                                           on_snapshot=lambda w: final.append(w) if w.t > T_SWEEP - 1e-9 else None)
            norms = compare_norms(final[-1], tr.packet(T_SWEEP, eps), k)
            out[k, eps] = {"ens": ens, "traj": tr, "norms": norms, "wave": final[-1],
                           "seconds": time.perf_counter() - t0}
    return out


def test_criterion_1_quadratic_exactness():
    t0 = time.perf_counter()
    eps, T = 0.1, 2 * math.pi
    worst_l2 = worst_sup = 0.0
    for k in (0, 1, 2):
        V, p0, tr = _flow("harmonic", eps, T)
        g = GridSpec.auto(tr, eps, k, dt=T / 16000)
        w = propagate(wave_from_packet(g, p0, k), V, eps, T)[-1]
        plain = compare_norms(w, tr.packet(T, eps), k)
        aligned = compare_norms(w, tr.packet(T, eps), k, phase_aligned=True)
        worst_l2 = max(worst_l2, plain["L2_diff"])
        worst_sup = max(worst_sup, aligned["Linf_diff"])
    secs = time.perf_counter() - t0
    ok = worst_l2 < 1e-6 and worst_sup < 1e-5 and secs < 120
    report(1, ok, f"max L2 {worst_l2:.2e} (< 1e-6), max aligned sup {worst_sup:.2e} (< 1e-5), {secs:.0f}s")


def test_criterion_2_l2_rate(cosine_sweep):
    slopes = {}
    for k in (0, 1):
        vals = [cosine_sweep[k, e]["norms"]["L2_diff"] for e in EPS_SWEEP]
        slopes[k] = es.rate_fit(vals, EPS_SWEEP).slope
    ok = all(0.4 <= s <= 0.6 for s in slopes.values())
    report(2, ok, "L2 slopes " + ", ".join(f"k={k}: {s:.3f}" for k, s in slopes.items()) + " (in [0.4, 0.6])")


def test_criterion_3_pointwise_scalings(cosine_sweep):
    parts = []
    ok = True
    for k in (0, 1):
        sup = [cosine_sweep[k, e]["norms"]["Linf_diff"] * e ** 0.25 for e in EPS_SWEEP]
        grad = [cosine_sweep[k, e]["norms"]["Linf_grad_diff"] * e ** 1.25 for e in EPS_SWEEP]
        # the dimension-aware weight eps^(d/4 - 1/2) for d = 1, for comparison only
        dim_aware = [cosine_sweep[k, e]["norms"]["Linf_diff"] * e ** -0.25 for e in EPS_SWEEP]
        r_sup, r_grad = _ratio(sup), _ratio(grad)
        ok &= r_sup <= 3 and r_grad <= 3
        parts.append(f"k={k}: eps^1/4 sup ratio {r_sup:.2f}, eps^5/4 grad ratio {r_grad:.2f}"
                     f" [eps^-1/4 sup ratio {_ratio(dim_aware):.2f}]")
    report(3, ok, "; ".join(parts) + " (each <= 3)")


def _calibrated(cosine_sweep, k):
    base = cosine_sweep[k, EPS_SWEEP[0]]
    return es.calibrate_radius(base["ens"], base["traj"], 0.95)


def test_criterion_4_coverage(cosine_sweep):
    parts = []
    ok = True
    secs = sum(v["seconds"] for v in cosine_sweep.values())
    for k in (0, 1):
        R = _calibrated(cosine_sweep, k)
        covs, q95 = [], []
        for e in EPS_SWEEP:
            c = cosine_sweep[k, e]
            s = es.deviation_stat(c["ens"], c["traj"], R)
            covs.append(s["prob"])
            ok &= s["prob"] >= 0.95 - 3 * math.sqrt(0.95 * 0.05 / s["n"])
            q95.append(es.EnsembleResult.from_ensemble(c["ens"], c["traj"]).scaled_quantile(0.95))
        ok &= _ratio(q95) <= 2
        parts.append(f"k={k}: R={R:.3f} coverage " + "/".join(f"{v:.3f}" for v in covs)
                     + f" q95 ratio {_ratio(q95):.2f}")
    ok &= secs < 1800
    report(4, ok, "; ".join(parts) + f" (coverage >= 0.95 - 3 sigma, q95 ratio <= 2), {secs:.0f}s")


def test_criterion_5_closed_form_paths():
    eps = 0.1
    y = math.sqrt(eps) * np.linspace(-3, 3, 13)[:, None]
    errs = {}
    for fam in ("harmonic", "free"):
        _, _, tr = _flow(fam, eps, 2.0)
        ens = integrate_ensemble(SemiclassicalBackend(tr, eps, 0), A0 + y, 2.0, tol=1e-9)
        a = tr.position(ens.t)
        if fam == "harmonic":
            ref = (A0 + y)[None] + (a - A0)[:, None, :]
        else:
            ref = a[:, None, :] + y[None] * np.sqrt(1 + ens.t ** 2)[:, None, None]
        errs[fam] = float(np.max(np.abs(ens.Q - ref)))
    V, p0, tr = _flow("harmonic", eps, 2.0)
    x0 = es.born_sample(p0, 0, N_PATHS, SEED)
    ens = integrate_ensemble(SemiclassicalBackend(tr, eps, 0), x0, 2.0)
    cov_ok = True
    cov = []
    for R in (0.5, 1.0, 2.0):
        s = es.deviation_stat(ens, tr, R)
        p = erf(R)
        cov_ok &= abs(s["prob"] - p) <= 3 * math.sqrt(p * (1 - p) / s["n"])
        cov.append(f"R={R}: {s['prob']:.4f} vs {p:.4f}")
    ok = max(errs.values()) < 1e-6 and cov_ok
    report(5, ok, f"rigid {errs['harmonic']:.1e}, spreading {errs['free']:.1e} (< 1e-6); harmonic coverage "
           + ", ".join(cov) + " (within 3 sigma)")


def test_criterion_6_flux_domination():
    eps = 0.05
    _, p0, tr = _flow("cosine", eps, T_SWEEP)
    b = SemiclassicalBackend(tr, eps, 0)
    x0 = es.born_sample(p0, 0, N_PATHS, np.random.default_rng([SEED, 6]))
    ens = integrate_ensemble(b, x0, T_SWEEP)
    ok = True
    bounds, parts = [], []
    for R in (1, 2, 3, 4, 5):
        fb = es.flux_bound(b, tr, R, T_SWEEP)
        ex = es.exit_stat(ens, tr, R)
        ok &= ex["prob"] <= fb["bound"] + 3 * ex["sigma"]
        bounds.append(fb["bound"])
        parts.append(f"R={R}: exit {ex['prob']:.4f} <= {fb['bound']:.4f}")
    ok &= all(a > b for a, b in zip(bounds, bounds[1:]))
    report(6, ok, "; ".join(parts) + " (within 3 sigma, bound decreasing)")


def test_criterion_7_equivariance():
    eps = 0.1
    parts = []
    ok = True
    for k in (0, 1):
        V, p0, tr = _flow("cosine", eps, T_SWEEP)
        g = GridSpec.auto(tr, eps, k, dt=1e-3)
        x0 = es.born_sample(p0, k, 5000, np.random.default_rng([SEED, 7, k]))
        final = []
        ens = integrate_exact_ensemble(wave_from_packet(g, p0, k), V, eps, T_SWEEP, x0, record_every=50,
                                       on_snapshot=lambda w: final.append(w) if w.t > T_SWEEP - 1e-9 else None)
        Q = ens.Q[-1, ens.completed, 0]
        res = es.chi2_against_cdf(Q, *es.grid_cdf(final[-1]))
        ok &= res["p_value"] > 0.01
        parts.append(f"k={k}: chi2 {res['chi2']:.1f}/{res['dof']} p={res['p_value']:.3f}"
                     f" ({len(Q)} paths)")
    report(7, ok, "; ".join(parts) + " (p > 0.01)")


def test_criterion_8_velocity(cosine_sweep):
    R = _calibrated(cosine_sweep, 0)
    dt_win = 0.25
    vmax, avg_ok, avg = [], True, []
    for e in EPS_SWEEP:
        c = cosine_sweep[0, e]
        ens, tr = c["ens"], c["traj"]
        good = es.max_deviation(ens, tr) <= R * math.sqrt(e)
        vmax.append(float(np.max(es.max_velocity_deviation(ens, tr)[good])) / math.sqrt(e))
        # positions and centre share the record mesh, so the mesh error term is zero
        stat = float(np.max(es.averaged_velocity_stat(ens, tr, dt_win)[good]))
        limit = R / dt_win * math.sqrt(e)
        avg_ok &= stat <= limit
        avg.append(f"{stat:.3f}<={limit:.3f}")
    ok = _ratio(vmax) <= 2 and avg_ok
    report(8, ok, "good-set max |v - eta|/sqrt(eps) " + "/".join(f"{v:.2f}" for v in vmax)
           + f" ratio {_ratio(vmax):.2f} (<= 2); averaged " + ", ".join(avg))


def test_criterion_9_remainder_norms():
    C, H = PotentialModel("cosine", 1), PotentialModel("harmonic", 1)
    slopes, zero = {}, 0.0
    for k in (0, 1, 2):
        vals = []
        for e in EPS_SWEEP:
            p = PacketParams.standard(e, [A0], [ETA0])
            vals.append(es.remainder_norm(p, C, 3, k))
            zero = max(zero, es.remainder_norm(p, H, 3, k))
        slopes[k] = es.rate_fit(vals, EPS_SWEEP).slope
    ok = all(1.35 <= s <= 1.65 for s in slopes.values()) and zero == 0.0
    report(9, ok, "slopes " + ", ".join(f"k={k}: {s:.3f}" for k, s in slopes.items())
           + f" (in [1.35, 1.65]); harmonic max {zero:.1e} (== 0)")


def test_criterion_10_packet_units():
    rng = np.random.default_rng(SEED)
    gram = ladder = grad = mom = 0.0
    cases = [admissible_pair([[0.8]], [[0.6]], [[np.exp(0.3j)]]),
             admissible_pair([[1.1, 0.3], [-0.2, 0.9]], [[0.5, 0.2], [0.2, -0.3]],
                             np.array([[0.6, 0.8], [-0.8, 0.6]]) * np.exp(0.4j))]
    for A, B in cases:
        d = len(A)
        p = PacketParams(0.2, rng.normal(size=d), rng.normal(size=d), A, B)
        ks = index_set(d, 3)
        x, w = quadrature_grid(p, (3,) + (0,) * (d - 1), spacing=0.25, reach=8.0)
        t = PacketTable(p, x, 3)
        Vk = np.stack([t.value(k) for k in ks])
        gram = max(gram, float(np.max(np.abs((Vk.conj() * w) @ Vk.T - np.eye(len(ks))))))
        ev = symbolic_packet(d, 3, p.eps, p.a, p.eta, A, B)
        xs = p.a + math.sqrt(p.eps) * rng.normal(size=(30, d))
        ts = PacketTable(p, xs, 3)
        for k in ks:
            ref = ev(k, xs)
            ladder = max(ladder, float(np.max(np.abs(ts.value(k) - ref)) / np.max(np.abs(ref))))
            g = eval_gradient(p, k, xs)
            h = 1e-6 * math.sqrt(p.eps)
            fd = np.stack([(eval_packet(p, k, xs + h * e) - eval_packet(p, k, xs - h * e)) / (2 * h)
                           for e in np.eye(d)], axis=-1)
            grad = max(grad, float(np.max(np.abs(g - fd)) / np.max(np.abs(g))))
            m = moments(p, k)
            mom = max(mom, abs(m["norm"] - 1), float(np.max(np.abs(m["mean_x"] - p.a))),
                      float(np.max(np.abs(m["mean_p"] - p.eta))))
    ok = gram < 1e-8 and ladder < 1e-10 and grad < 1e-6 and mom < 1e-8
    report(10, ok, f"Gram {gram:.1e} (< 1e-8), ladder {ladder:.1e} (< 1e-10), gradient {grad:.1e} (< 1e-6),"
           f" moments {mom:.1e} (< 1e-8)")


def test_ground_state_node_gap_is_bounded_below(cosine_sweep):
    q05 = [es.node_proximity_stat(cosine_sweep[0, e]["ens"])["q05"] for e in EPS_SWEEP]
    print("node gap q05 " + "/".join(f"{v:.3e}" for v in q05))
    assert min(q05) > 1e-3 and _ratio(q05) < 10


def test_exact_deviation_quantile_rate(cosine_sweep):
    slopes = {}
    for k in (0, 1):
        q95 = [np.quantile(es.max_deviation(cosine_sweep[k, e]["ens"], cosine_sweep[k, e]["traj"]), 0.95,
                           method="inverted_cdf") for e in EPS_SWEEP]
        fit = es.rate_fit(q95, EPS_SWEEP)
        slopes[k] = fit.slope
        print(f"k={k} q95 slope {fit.slope:.3f} [{fit.ci_low:.3f}, {fit.ci_high:.3f}]")
    # the rate is asserted for the ground state; k = 1 is reported as data
    assert 0.4 <= slopes[0] <= 0.6

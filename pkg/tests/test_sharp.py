import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference
from conftest import small_dataset
from sharpjudge import Dataset, SharpConfig, build_grid, fit_frequency, run_sharp_test
from sharpjudge.cli import dumps
from sharpjudge.dgp import FllBinaryConfig, gen_fll_binary
from sharpjudge.propensity import PropensityFit, draw_weights
from sharpjudge.sharp import (
    BootstrapFailure,
    ConfigError,
    SampleSizeError,
    critical_value,
    estimate_nu,
    estimate_sigma,
    gms_constants,
    gms_flags,
    quantile_rank,
    run_bootstrap,
    test_statistic,
)


def _pinned(n, B, seed):
    return draw_weights(n, B, "exp1", seed).w


@pytest.mark.parametrize("Q_Y,Q_P", [(1, 2), (2, 2), (2, 3), (3, 3)])
def test_nu_matches_naive_loops(rng, Q_Y, Q_P):
    ds = small_dataset(rng)
    fit = fit_frequency(ds)
    est = estimate_nu(ds, fit, build_grid(Q_Y, Q_P))
    ref = reference.nu(ds.y, ds.d, fit.p_hat, Q_Y, Q_P)
    np.testing.assert_allclose(est.nu, ref, rtol=0, atol=1e-12)


def test_weighted_nu_matches_naive_loops(rng):
    ds = small_dataset(rng)
    w = rng.exponential(size=ds.n)
    p = reference.freq_propensity(ds.z[:, 0], ds.d, w)
    est = estimate_nu(ds, PropensityFit(p, "freq"), build_grid(3, 3), w=w)
    np.testing.assert_allclose(est.nu, reference.nu(ds.y, ds.d, p, 3, 3, w), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_full_pipeline_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    ds = small_dataset(rng, n=int(rng.integers(8, 21)))
    W = _pinned(ds.n, 20, seed)
    cfg = SharpConfig(B=20, Q_Y=3, Q_P=3, normalize="identity", seed=seed)
    res = run_sharp_test(ds, cfg, weights=W)
    ref = reference.full_test(ds.y, ds.d, ds.z[:, 0], W, 3, 3)
    np.testing.assert_allclose(res.nu, ref["nu"], atol=1e-12)
    np.testing.assert_allclose(res.sigma, ref["sigma"], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(res.T_boot, ref["T_boot"], rtol=1e-12, atol=1e-12)
    assert res.T_hat == pytest.approx(ref["T"], rel=1e-12, abs=1e-12)
    assert res.c_hat == pytest.approx(ref["c"], rel=1e-12, abs=1e-12)
    assert res.p_value == ref["p_value"]


def test_nu_zero_when_propensity_constant():
    ds = Dataset(y=[0.1, 0.9, 0.4, 0.6], d=[0, 1, 1, 0], z=[1, 1, 2, 2])
    est = estimate_nu(ds, fit_frequency(ds), build_grid(2, 3))
    assert np.all(est.nu == 0)


def test_estimate_sigma_alternating():
    a, n = 0.3, 50
    boot = np.array([a, -a] * 10)[:, None]
    assert estimate_sigma(boot, n, 1e-6)[0] == pytest.approx(math.sqrt(n * a * a))


def test_estimate_sigma_floor_on_variance():
    boot = np.zeros((10, 3))
    np.testing.assert_allclose(estimate_sigma(boot, 100, 1e-6), 1e-3)


def test_gms_constants_reference_values():
    a_n, b_n = gms_constants(16)
    assert a_n == pytest.approx(0.15 * math.log(16))
    assert b_n == pytest.approx(2.31099, abs=1e-5)


def test_gms_needs_three_observations():
    with pytest.raises(SampleSizeError):
        gms_constants(2)


def test_gms_flags_threshold():
    a_n, b_n = gms_constants(1000)
    flags = gms_flags(np.array([-a_n - 1e-9, -a_n, 0.0, 5.0]), 1000)
    np.testing.assert_array_equal(flags, [-b_n, 0, 0, 0])


def test_statistic_ignores_negative_moments():
    std = np.array([[-3.0, 2.0], [0.5, -1.0]])
    omega = np.array([0.5, 0.25])
    assert test_statistic(std, omega) == pytest.approx(4 * 0.25 + 0.25 * 0.5)


@pytest.mark.parametrize("tau,B,rank", [(0.95, 20, 19), (0.950001, 20, 20), (0.95, 200, 190),
                                        (1.0, 10, 10), (0.0, 10, 1), (0.3, 10, 3)])
def test_quantile_rank(tau, B, rank):
    assert quantile_rank(tau, B) == rank


def test_critical_value_and_p_value():
    T_boot = np.arange(1.0, 21.0)
    c, p = critical_value(T_boot, 18.5, 0.05, 1e-6)
    assert c == pytest.approx(20.0 + 1e-6)
    assert p == pytest.approx(2 / 20)


def test_p_value_consistent_with_reject(rng):
    ds = gen_fll_binary(FllBinaryConfig(J=5, n=300, lam=0.8), 3)
    res = run_sharp_test(ds, SharpConfig(B=100, seed=1))
    assert 0 <= res.p_value <= 1
    if res.reject:
        assert res.p_value <= 0.05 + 1 / 100


def test_smoke_small_sample(rng):
    ds = small_dataset(rng, n=50, judges=4)
    res = run_sharp_test(ds, SharpConfig(B=50, seed=0))
    assert 0 <= res.p_value <= 1


def test_thread_count_invariance():
    ds = gen_fll_binary(FllBinaryConfig(J=6, n=400, lam=0.4), 11)
    outs = {t: dumps(run_sharp_test(ds, SharpConfig(B=100, seed=5, threads=t)).to_dict())
            for t in (None, 1, 3, 8)}
    assert len(set(outs.values())) == 1


def test_same_seed_same_result_and_seed_recorded():
    ds = gen_fll_binary(FllBinaryConfig(J=4, n=200), 2)
    r1 = run_sharp_test(ds, SharpConfig(B=64))
    r2 = run_sharp_test(ds, SharpConfig(B=64, seed=r1.config["seed"]))
    assert r1.T_hat == r2.T_hat and np.array_equal(r1.T_boot, r2.T_boot)


def test_result_schema_keys():
    ds = gen_fll_binary(FllBinaryConfig(J=4, n=200), 2)
    out = json.loads(dumps(run_sharp_test(ds, SharpConfig(B=40, seed=1)).to_dict()))
    for key in ("statistic", "critical_value", "p_value", "reject", "n", "B", "grid", "cubes"):
        assert key in out
    assert out["grid"] == {"QY": 2, "QP": 5, "count": 3 * 20}
    assert set(out["cubes"][0]) == {"d", "y", "ry", "p1", "p2", "rp", "nu", "sigma", "std", "gms"}
    assert len(out["cubes"]) == 2 * out["grid"]["count"]


def test_judge_relabeling_invariance(rng):
    ds = small_dataset(rng, n=60, judges=5)
    perm = {1: 40.0, 2: 7.0, 3: -2.0, 4: 13.0, 5: 0.5}
    relabeled = ds.replace(z=np.array([perm[v] for v in ds.z[:, 0]]))
    cfg = SharpConfig(B=80, seed=4)
    a, b = run_sharp_test(ds, cfg), run_sharp_test(relabeled, cfg)
    assert (a.T_hat, a.c_hat, a.p_value) == (b.T_hat, b.c_hat, b.p_value)


def test_binary_label_swap_preserves_standardized_moments():
    ds = gen_fll_binary(FllBinaryConfig(J=5, n=500, lam=0.4), 8)
    cfg = SharpConfig(B=50, seed=2, Q_Y=2)
    W = _pinned(ds.n, 50, 1)
    a = run_sharp_test(ds, cfg, weights=W)
    b = run_sharp_test(ds.replace(y=1 - ds.y), cfg, weights=W)
    g = a.grid

    def keyed(res):
        out = {}
        for i in range(len(g)):
            c = g.cube(i)
            for d in (0, 1):
                out[(d, c.y, c.ry, c.p1, c.p2, c.rp)] = res.std[d, i]
        return out

    ka, kb = keyed(a), keyed(b)
    for (d, y, ry, p1, p2, rp), v in ka.items():
        mirror = (d, round(1 - y - ry, 12) + 0.0, ry, p1, p2, rp)
        assert kb[mirror] == pytest.approx(v, abs=1e-9)


def test_pinned_weights_shape_checked(rng):
    ds = small_dataset(rng)
    with pytest.raises(ValueError):
        run_bootstrap(ds, fit_frequency(ds), build_grid(1, 2), 10, 0, weights=np.ones((5, ds.n)))


def test_pinned_degenerate_weights_fail(rng):
    ds = small_dataset(rng)
    W = np.ones((4, ds.n))
    W[2, ds.judge == 0] = 0.0
    with pytest.raises(BootstrapFailure):
        run_bootstrap(ds, fit_frequency(ds), build_grid(1, 2), 4, 0, weights=W)


def test_normal_weights_redraw_on_tiny_judges():
    # a judge with a single case makes its weighted total negative half the time
    z = np.r_[np.repeat([1.0, 2.0], 30), 3.0]
    d = np.r_[np.tile([0.0, 1.0], 30), 1.0]
    y = np.linspace(0, 1, 61)
    ds = Dataset(y=y, d=d, z=z)
    with pytest.raises(BootstrapFailure):
        run_bootstrap(ds, fit_frequency(ds), build_grid(1, 2), 64, 0)


@pytest.mark.parametrize("kwargs", [dict(alpha=0.0), dict(alpha=0.6), dict(B=1), dict(eps=0.0),
                                    dict(eta=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SharpConfig(**kwargs).validate()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(2, 3))
def test_oracle_equivalence_property(seed, Q_Y, Q_P):
    rng = np.random.default_rng(seed)
    ds = small_dataset(rng, n=int(rng.integers(4, 16)), judges=int(rng.integers(2, 5)))
    fit = fit_frequency(ds)
    est = estimate_nu(ds, fit, build_grid(Q_Y, Q_P))
    np.testing.assert_allclose(est.nu, reference.nu(ds.y, ds.d, fit.p_hat, Q_Y, Q_P), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(2, 2000))
def test_quantile_rank_is_empirical_quantile(tau, B):
    r = quantile_rank(tau, B)
    assert 1 <= r <= B
    assert r / B >= tau - 1e-9
    assert r == 1 or (r - 1) / B < tau

import numpy as np
import pytest

from sharpjudge import Dataset, SharpConfig, fit_frequency, fit_propensity, run_sharp_test
from sharpjudge.cli import dumps
from sharpjudge.covariates import (
    ArmError,
    CollinearityError,
    CovariateConfig,
    PartialLinearFit,
    adjust_outcome,
    fit_partial_linear,
    poly_residual,
    run_covariate_test,
    split_by_cells,
)
from sharpjudge.dgp import FllBinaryConfig, GaussianContinuousConfig, gen_fll_binary, gen_gaussian_continuous


def _pl_data(n=5000, beta=1.0, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    d = (rng.standard_normal(n) < z).astype(float)
    x = rng.standard_normal(n) + 0.5 * z
    ds0 = Dataset(y=np.zeros(n), d=d, z=z)
    p = fit_propensity(ds0, "probit").p_hat
    y = beta * x + 2 * p - p**3 + 0.5 * rng.standard_normal(n)
    return ds0.replace(y=y, x=x[:, None], x_names=("x",))


def test_known_coefficient_recovered():
    ds = _pl_data()
    pl = fit_partial_linear(ds, fit_propensity(ds, "probit", include_x=False), 3)
    assert pl.beta1[0] == pytest.approx(1, abs=0.05)
    assert pl.beta0[0] == pytest.approx(1, abs=0.05)


def test_zero_coefficient_within_three_se():
    ds = _pl_data(beta=0.0, seed=3)
    fit = fit_propensity(ds, "probit")
    pl = fit_partial_linear(ds, fit, 3)
    for d, b in ((1, pl.beta1[0]), (0, pl.beta0[0])):
        rows = ds.d == d
        ex = poly_residual(fit.p_hat[rows], ds.x[rows, 0], 3)
        ey = poly_residual(fit.p_hat[rows], ds.y[rows], 3)
        resid = ey - ex * b
        se = np.sqrt(resid @ resid / (rows.sum() - 1) / (ex @ ex))
        assert abs(b) < 3 * se


def test_normal_equations_hold():
    ds = _pl_data(n=2000, seed=1)
    fit = fit_propensity(ds, "probit")
    pl = fit_partial_linear(ds, fit, 3)
    for d in (0, 1):
        rows = ds.d == d
        ex = poly_residual(fit.p_hat[rows], ds.x[rows], 3)
        ey = poly_residual(fit.p_hat[rows], ds.y[rows], 3)
        lhs = ex.T @ (ey - ex @ pl.beta(d))
        assert np.all(np.abs(lhs) <= 1e-8 * np.abs(ex.T @ ey))


def test_no_covariates_is_identity():
    ds = gen_fll_binary(FllBinaryConfig(J=5, n=200), 0)
    pl = fit_partial_linear(ds, fit_frequency(ds))
    assert pl.beta1.size == 0
    np.testing.assert_array_equal(adjust_outcome(ds, pl).y_tilde_raw, ds.y)


def test_no_covariates_pipeline_matches_plain_test():
    ds = gen_fll_binary(FllBinaryConfig(J=5, n=300, lam=0.5), 1)
    sharp = SharpConfig(B=60, seed=9)
    a = run_covariate_test(ds, CovariateConfig(sharp=sharp)).result
    b = run_sharp_test(ds, sharp)
    assert dumps(a.to_dict()) == dumps(b.to_dict())


def test_adjust_arithmetic():
    ds = Dataset(y=[3.0], d=[1], z=[1], x=[[2.0]])
    pl = PartialLinearFit(np.array([0.5]), np.array([0.0]), 3)
    assert adjust_outcome(ds, pl).y_tilde_raw[0] == 2.0
    zero = PartialLinearFit(np.array([0.0]), np.array([0.0]), 3)
    assert adjust_outcome(ds, zero).y_tilde_raw[0] == 3.0


def test_dimension_mismatch():
    ds = Dataset(y=[3.0, 1.0], d=[1, 0], z=[1, 2], x=[[2.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        adjust_outcome(ds, PartialLinearFit(np.array([0.5]), np.array([0.0]), 3))


def test_empty_arm():
    ds = Dataset(y=[1.0, 2.0, 3.0], d=[1, 1, 1], z=[1, 2, 3], x=[[1.0], [2.0], [0.5]])
    with pytest.raises(ArmError):
        fit_partial_linear(ds, fit_frequency(ds))


def test_collinear_column_named():
    rng = np.random.default_rng(4)
    z = rng.standard_normal(300)
    d = (rng.standard_normal(300) < z).astype(float)
    ds0 = Dataset(y=rng.standard_normal(300), d=d, z=z)
    p = fit_propensity(ds0, "probit").p_hat
    x = np.c_[rng.standard_normal(300), p**2]
    ds = ds0.replace(x=x, x_names=("age", "ppoly"))
    with pytest.raises(CollinearityError, match="ppoly"):
        fit_partial_linear(ds, fit_propensity(ds, "probit"), 3)


def test_split_binary_column():
    rng = np.random.default_rng(0)
    ds = Dataset(y=rng.random(100), d=rng.integers(0, 2, 100), z=rng.integers(1, 5, 100),
                 x=np.c_[rng.integers(0, 2, 100)], x_names=("female",))
    cells = split_by_cells(ds, ["female"])
    assert len(cells) == 2
    assert sum(c.data.n for c in cells) == 100


def test_split_constant_column():
    ds = Dataset(y=np.linspace(0, 1, 40), d=np.arange(40) % 2, z=np.arange(40) % 4,
                 x=np.ones((40, 1)), x_names=("c",))
    cells = split_by_cells(ds, ["c"])
    assert len(cells) == 1 and cells[0].data.n == 40


def test_split_small_cells_flagged_and_cap():
    ds = Dataset(y=np.linspace(0, 1, 40), d=np.arange(40) % 2, z=np.arange(40) % 4,
                 x=np.c_[np.r_[np.zeros(35), np.ones(5)]], x_names=("g",))
    cells = split_by_cells(ds, ["g"], min_n=30)
    assert [c.skipped for c in cells] == [False, True]
    with pytest.raises(ValueError):
        split_by_cells(ds, ["g"], max_cells=1)


def test_eight_judge_cells_have_only_within_cell_pairs():
    # judges 1..8, cells by (race, party), two judges per cell
    rng = np.random.default_rng(2)
    judge = np.repeat(np.arange(8), 100)
    race, party = judge // 4, (judge // 2) % 2
    p = np.array([0.2, 0.6, 0.3, 0.7, 0.25, 0.55, 0.35, 0.75])[judge]
    d = (rng.random(800) < p).astype(float)
    y = (rng.random(800) < 0.5).astype(float)
    ds = Dataset(y=y, d=d, z=np.c_[judge, race, party], z_names=("judge", "race", "party"))
    cells = split_by_cells(ds, ["race", "party"])
    assert len(cells) == 4
    pairs = 0
    for c in cells:
        assert c.data.n_judges == 2
        pairs += c.data.n_judges * (c.data.n_judges - 1) // 2
    # one pair per cell, two arms per binary-outcome inequality set
    assert 2 * pairs == 8


def test_cell_conditioning_bonferroni():
    ds = gen_fll_binary(FllBinaryConfig(J=6, n=600), 2)
    grp = (ds.z[:, 0] > 3).astype(float)
    ds = ds.replace(x=grp[:, None], x_names=("grp",))
    res = run_covariate_test(ds, CovariateConfig(sharp=SharpConfig(B=50, seed=1),
                                                 condition_on=("grp",)))
    assert res.alpha_cell == pytest.approx(0.025)
    ps = [c["result"]["p_value"] for c in res.cells]
    assert res.p_value == pytest.approx(min(1, 2 * min(ps)))


def test_reestimate_beta_runs():
    cfg = GaussianContinuousConfig(n=400, with_x=True)
    ds = gen_gaussian_continuous(cfg, 3)
    sharp = SharpConfig(B=40, seed=2, pscore="probit")
    fixed = run_covariate_test(ds, CovariateConfig(sharp=sharp))
    moving = run_covariate_test(ds, CovariateConfig(sharp=sharp, reestimate_beta=True))
    # point moments agree; only the bootstrap law changes
    np.testing.assert_array_equal(fixed.result.nu, moving.result.nu)
    assert not np.array_equal(fixed.result.T_boot, moving.result.T_boot)

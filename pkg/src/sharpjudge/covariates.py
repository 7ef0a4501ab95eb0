"""Covariate filtering by double-residual partial-linear regression, and
conditional testing within discrete covariate cells."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _rng
from .dataset import Dataset, normalize_outcome
from .propensity import PropensityFit, fit_propensity
from .sharp import SharpConfig, TestResult, run_sharp_test


class ArmError(ValueError):
    """A treatment arm has no observations."""


class CollinearityError(ValueError):
    """Residualized covariates are rank deficient."""


@dataclass(frozen=True)
class PartialLinearFit:
    beta1: np.ndarray
    beta0: np.ndarray
    poly_degree: int
    r2: dict = field(default_factory=dict)

    def beta(self, d: int) -> np.ndarray:
        return self.beta1 if d == 1 else self.beta0


@dataclass(frozen=True)
class AdjustedOutcome:
    y_tilde_raw: np.ndarray


def poly_basis(p, degree: int) -> np.ndarray:
    """Columns ``1, p, ..., p**degree``."""
    return np.vander(np.asarray(p, float), degree + 1, increasing=True)


def poly_residual(p, M, degree: int, w=None) -> np.ndarray:
    """Residual of ``M`` after projecting onto a polynomial in ``p``.

    Projection is onto the column space of the basis, so a basis with fewer
    distinct ``p`` values than ``degree + 1`` still gives a valid projection.
    """
    Bm = poly_basis(p, degree)
    M = np.asarray(M, float)
    if w is None:
        coef, *_ = np.linalg.lstsq(Bm, M, rcond=None)
    else:
        Bw = Bm * w[:, None]
        coef = np.linalg.pinv(Bw.T @ Bm) @ (Bw.T @ M)
    return M - Bm @ coef


def _name_collinear(eX, X, names):
    scale = np.linalg.norm(X - X.mean(axis=0), axis=0)
    for j in range(eX.shape[1]):
        if np.linalg.norm(eX[:, j]) <= 1e-8 * max(scale[j], 1e-300):
            return names[j], "is explained by the propensity polynomial"
    rank = 0
    for j in range(eX.shape[1]):
        r = np.linalg.matrix_rank(eX[:, : j + 1])
        if r == rank:
            return names[j], "is a linear combination of earlier residualized covariates"
        rank = r
    return None, None


def fit_partial_linear(
    ds: Dataset, fit: PropensityFit, degree: int = 3, w=None
) -> PartialLinearFit:
    """Per-arm double-residual estimates of the covariate coefficients.

    Within arm ``d`` both the outcome and each covariate are residualized on
    a polynomial in the propensity, and the outcome residual is regressed on
    the covariate residuals without an intercept.

    Raises
    ------
    ArmError
        An arm is empty.
    CollinearityError
        The residualized covariates are rank deficient; the message names
        the first offending column.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if ds.x is None:
        return PartialLinearFit(np.empty(0), np.empty(0), degree)
    betas, r2 = {}, {}
    for d in (0, 1):
        rows = ds.d == d
        if not rows.any():
            raise ArmError(f"no observations with d={d}")
        p = fit.p_hat[rows]
        wd = None if w is None else np.asarray(w, float)[rows]
        Y, X = ds.y[rows], ds.x[rows]
        eP = poly_residual(p, Y, degree, wd)
        eX = poly_residual(p, X, degree, wd)
        if np.linalg.matrix_rank(eX) < X.shape[1]:
            col, why = _name_collinear(eX, X, ds.x_names)
            raise CollinearityError(f"covariate {col!r} {why} in arm d={d}")
        if wd is None:
            beta, *_ = np.linalg.lstsq(eX, eP, rcond=None)
        else:
            A = (eX * wd[:, None]).T
            beta = np.linalg.solve(A @ eX, A @ eP)
        betas[d] = beta
        tss = lambda v: float(np.sum((v - v.mean(axis=0)) ** 2))
        r2[f"y{d}"] = 1 - float(eP @ eP) / tss(Y) if tss(Y) > 0 else 0.0
        r2[f"x{d}"] = [
            1 - float(eX[:, j] @ eX[:, j]) / tss(X[:, j]) if tss(X[:, j]) > 0 else 0.0
            for j in range(X.shape[1])
        ]
    return PartialLinearFit(betas[1], betas[0], degree, r2)


def adjust_outcome(ds: Dataset, plfit: PartialLinearFit) -> AdjustedOutcome:
    """``Y - X'(D beta1 + (1 - D) beta0)``."""
    if ds.x is None:
        if plfit.beta1.size:
            raise ValueError("fit has coefficients but the dataset has no covariates")
        return AdjustedOutcome(ds.y.copy())
    if plfit.beta1.shape != (ds.k,) or plfit.beta0.shape != (ds.k,):
        raise ValueError(f"fit has {plfit.beta1.size} coefficients, dataset has {ds.k} covariates")
    adj = np.where(ds.d == 1, ds.x @ plfit.beta1, ds.x @ plfit.beta0)
    return AdjustedOutcome(ds.y - adj)


@dataclass(frozen=True)
class CovariateConfig:
    """Settings for the covariate-adjusted test.

    ``condition_on`` names discrete columns defining cells; each cell is
    tested at ``alpha / m`` for ``m`` tested cells.
    """

    sharp: SharpConfig = SharpConfig()
    poly_degree: int = 3
    reestimate_beta: bool = False
    condition_on: tuple = ()
    min_cell_n: int = 30
    max_cells: int = 50
    pscore_with_x: bool = True


@dataclass
class CellSplit:
    label: dict
    data: Dataset
    skipped: bool = False
    reason: str = ""


def split_by_cells(
    ds: Dataset, columns, max_cells: int = 50, min_n: int = 30
) -> list[CellSplit]:
    """Partition rows by the joint value of the named discrete columns.

    Cells are ordered by their joint value. Cells smaller than ``min_n``
    are kept in the list but flagged as skipped.
    """
    columns = list(columns)
    if not columns:
        return [CellSplit({}, ds)]
    vals = np.column_stack([ds.column(c) for c in columns])
    keys, inv = np.unique(vals, axis=0, return_inverse=True)
    inv = inv.ravel()
    if keys.shape[0] > max_cells:
        raise ValueError(
            f"conditioning columns define {keys.shape[0]} cells, above the cap of {max_cells}"
        )
    out = []
    for c, key in enumerate(keys):
        rows = np.flatnonzero(inv == c)
        label = {name: float(v) for name, v in zip(columns, key)}
        sub = ds.subset(rows)
        if rows.size < min_n:
            out.append(CellSplit(label, sub, True, f"n={rows.size} below minimum {min_n}"))
        else:
            out.append(CellSplit(label, sub))
    return out


@dataclass
class CovariateResult:
    """Covariate-adjusted test outcome, pooled or per cell."""

    reject: bool
    p_value: float
    result: TestResult | None = None
    plfit: PartialLinearFit | None = None
    cells: list = field(default_factory=list)
    alpha_cell: float | None = None

    def to_dict(self, cubes: bool = True) -> dict:
        out = {"reject": self.reject, "p_value": self.p_value}
        if self.plfit is not None:
            out["beta1"] = self.plfit.beta1.tolist()
            out["beta0"] = self.plfit.beta0.tolist()
            out["poly_degree"] = self.plfit.poly_degree
        if self.result is not None:
            out.update({k: v for k, v in self.result.to_dict(cubes).items()
                        if k not in ("reject", "p_value")})
            out["reject"], out["p_value"] = self.reject, self.p_value
        if self.cells:
            out["alpha_cell"] = self.alpha_cell
            out["cells"] = self.cells
        return out


def _adjusted_test(ds: Dataset, cfg: CovariateConfig, sharp: SharpConfig):
    if ds.x is None:
        return run_sharp_test(ds, sharp), None
    include_x = cfg.pscore_with_x and sharp.pscore != "freq"
    fit = fit_propensity(ds, sharp.pscore, include_x)
    plfit = fit_partial_linear(ds, fit, cfg.poly_degree)
    y_adj = adjust_outcome(ds, plfit).y_tilde_raw
    ds_adj = ds.replace(y=y_adj)
    if not cfg.reestimate_beta:
        return run_sharp_test(ds_adj, sharp, fit=fit), plfit

    # bootstrap replicates also re-estimate the coefficients with their weights
    frozen = normalize_outcome(ds_adj, sharp.normalize, sharp.bounds)

    def y_hook(W, P):
        out = np.empty_like(W)
        for b in range(W.shape[0]):
            fb = PropensityFit(p_hat=P[b], method=fit.method)
            pl_b = fit_partial_linear(ds, fb, cfg.poly_degree, w=W[b])
            out[b] = frozen.apply(adjust_outcome(ds, pl_b).y_tilde_raw)
        return out

    return run_sharp_test(ds_adj, sharp, fit=fit, y_hook=y_hook), plfit


def run_covariate_test(ds: Dataset, cfg: CovariateConfig = CovariateConfig()) -> CovariateResult:
    """Covariate-filtered test, optionally conditional on discrete cells.

    Without ``condition_on`` this residualizes the outcome on the covariates
    and runs the cube test on the result. With cells, each tested cell runs
    independently at a Bonferroni-adjusted level with a seed derived from the
    cell position, and the combined p-value is ``min(1, m * min p)``.
    """
    sharp = cfg.sharp
    if sharp.seed is None:
        sharp = replace(sharp, seed=_rng.fresh_seed())
    if not cfg.condition_on:
        res, plfit = _adjusted_test(ds, cfg, sharp)
        return CovariateResult(res.reject, res.p_value, res, plfit)

    cells = split_by_cells(ds, cfg.condition_on, cfg.max_cells, cfg.min_cell_n)
    tested = [i for i, c in enumerate(cells) if not c.skipped]
    if not tested:
        raise ValueError("every cell is below the minimum size")
    m = len(tested)
    alpha_cell = sharp.alpha / m
    drop = set(cfg.condition_on)
    x_keep = [j for j, nm in enumerate(ds.x_names) if nm not in drop]

    def one(i):
        cell = cells[i].data
        if cell.x is not None:
            cell = cell.replace(
                x=cell.x[:, x_keep] if x_keep else None,
                x_names=tuple(ds.x_names[j] for j in x_keep),
            )
        cs = replace(sharp, alpha=alpha_cell, seed=_rng.child_seed(sharp.seed, _rng.CELL, i), threads=None)
        return _adjusted_test(cell, cfg, cs)

    if sharp.threads and sharp.threads > 1:
        with ThreadPoolExecutor(sharp.threads) as ex:
            results = dict(zip(tested, ex.map(one, tested)))
    else:
        results = {i: one(i) for i in tested}

    rows = []
    for i, c in enumerate(cells):
        row = {"cell": c.label, "n": c.data.n, "skipped": c.skipped}
        if c.skipped:
            row["reason"] = c.reason
        else:
            res, plfit = results[i]
            row["result"] = CovariateResult(res.reject, res.p_value, res, plfit).to_dict(cubes=False)
        rows.append(row)
    pmin = min(results[i][0].p_value for i in tested)
    return CovariateResult(
        reject=any(results[i][0].reject for i in tested),
        p_value=min(1.0, m * pmin),
        cells=rows,
        alpha_cell=alpha_cell,
    )

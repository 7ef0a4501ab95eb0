"""Propensity score estimation: judge frequencies or binary-response MLE.

Every estimator has a weighted counterpart used by the multiplier bootstrap.
The batched entry point :func:`refit_weighted_batch` refits many weight
vectors at once and reports which of them produced a degenerate fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

from . import _rng
from .dataset import Dataset

METHODS = ("freq", "probit", "logit")
WEIGHT_DISTS = ("normal1", "exp1")

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 200
MAX_HALVINGS = 40
SEPARATION_INDEX = 30.0


class ConvergenceError(RuntimeError):
    """The likelihood maximizer failed, typically because of separation."""


class SingularDesignError(ValueError):
    """The propensity design matrix is rank deficient."""


class DegenerateReplicateError(RuntimeError):
    """A weighted refit has no well-defined solution."""


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Fitted propensity scores.

    Attributes
    ----------
    p_hat : ndarray of shape (n,)
        Fitted P(D=1 | Z) per observation.
    method : {"freq", "probit", "logit"}
    theta_hat : ndarray
        MLE coefficients; empty for the frequency method.
    converged : bool
    loglik : float
        Sample log-likelihood (sum, not mean) at ``theta_hat``.
    design : ndarray of shape (n, k) or None
        MLE design matrix, kept so weighted refits reuse it.
    """

    p_hat: np.ndarray
    method: str
    theta_hat: np.ndarray = field(default_factory=lambda: np.empty(0))
    converged: bool = True
    loglik: float = float("nan")
    design: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0


def _bernoulli_loglik(p, d):
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(d == 1, np.log(p), np.log1p(-p))))


def fit_frequency(ds: Dataset) -> PropensityFit:
    """Share of treated cases among cases assigned to the same judge."""
    judge = ds.judge
    counts = np.bincount(judge, minlength=ds.n_judges)
    treated = np.bincount(judge, weights=ds.d, minlength=ds.n_judges)
    p = (treated / counts)[judge]
    return PropensityFit(p_hat=p, method="freq", loglik=_bernoulli_loglik(p, ds.d))


# Symmetric links: log F(x), d/dx log F(x), d2/dx2 log F(x).

def _logit_parts(x):
    logf = -np.logaddexp(0.0, -x)
    lam = expit(-x)
    return logf, lam, -lam * (1.0 - lam)


def _probit_parts(x):
    logf = log_ndtr(x)
    lam = np.exp(-0.5 * x * x - 0.5 * np.log(2 * np.pi) - logf)
    return logf, lam, -lam * (lam + x)


_LINKS = {"logit": (_logit_parts, expit), "probit": (_probit_parts, ndtr)}


def design_matrix(ds: Dataset, include_x: bool = False) -> np.ndarray:
    """Intercept, instrument columns and optionally covariates."""
    cols = [np.ones((ds.n, 1)), ds.z]
    if include_x and ds.x is not None:
        cols.append(ds.x)
    return np.hstack(cols)


def _check_rank(X):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise SingularDesignError(
            f"design matrix has rank {rank} < {X.shape[1]} columns"
        )


def _newton_batch(X, d, W, link):
    """Maximize (1/n) sum_i W[b,i] log F(q_i x_i'theta) for each row b of W.

    Returns theta (m, k), status (m,) with 0 converged, 1 separated,
    2 not concave or line search failure, 3 iteration cap; and iteration counts.
    """
    parts, _ = _LINKS[link]
    n, k = X.shape
    m = W.shape[0]
    q = 2.0 * d - 1.0
    theta = np.zeros((m, k))
    status = np.full(m, -1)
    iters = np.zeros(m, dtype=int)
    last_step = np.full(m, np.inf)
    pos, neg = d == 1, d == 0

    def objective(th, Wa):
        logf, _, _ = parts(q * (th @ X.T))
        return np.sum(Wa * logf, axis=1) / n

    for it in range(MAX_ITER + 1):
        act = np.flatnonzero(status < 0)
        if act.size == 0:
            break
        th, Wa = theta[act], W[act]
        eta = th @ X.T
        qe = q * eta
        sep = np.zeros(act.size, dtype=bool)
        if pos.any():
            sep |= (qe[:, pos] > SEPARATION_INDEX).all(axis=1)
        if neg.any():
            sep |= (qe[:, neg] > SEPARATION_INDEX).all(axis=1)
        logf, lam, dlam = parts(qe)
        grad = ((Wa * lam * q) @ X) / n
        gmax = np.abs(grad).max(axis=1)
        done = (gmax < GRAD_TOL) & (last_step[act] < STEP_TOL)
        status[act[done]] = 0
        status[act[sep & ~done]] = 1
        if it == MAX_ITER:
            status[act[status[act] < 0]] = 3
            break
        live = (status[act] < 0)
        if not live.any():
            continue
        act, th, Wa = act[live], th[live], Wa[live]
        grad, gmax = grad[live], gmax[live]
        negH = np.einsum("mi,ij,il->mjl", -Wa * dlam[live], X, X) / n
        obj0 = np.sum(Wa * logf[live], axis=1) / n
        eig = np.linalg.eigvalsh(negH)
        concave = eig[:, 0] > 1e-14 * np.maximum(eig[:, -1], 1e-300)
        status[act[~concave]] = 2
        if not concave.any():
            continue
        act, th, Wa = act[concave], th[concave], Wa[concave]
        grad, gmax, obj0 = grad[concave], gmax[concave], obj0[concave]
        step = np.linalg.solve(negH[concave], grad[..., None])[..., 0]
        t = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        new = th.copy()
        for _ in range(MAX_HALVINGS):
            todo = ~accepted
            cand = th[todo] + t[todo, None] * step[todo]
            obj = objective(cand, Wa[todo])
            ok = obj >= obj0[todo] - 1e-15 * np.abs(obj0[todo])
            idx = np.flatnonzero(todo)[ok]
            new[idx] = cand[ok]
            accepted[idx] = True
            if accepted.all():
                break
            t[~accepted] *= 0.5
        stalled = ~accepted
        if stalled.any():
            # at numerical precision the objective is flat; accept if nearly stationary
            flat = stalled & (gmax < 1e-6)
            status[act[flat]] = 0
            status[act[stalled & ~flat]] = 2
        moved = accepted
        theta[act[moved]] = new[moved]
        last_step[act[moved]] = np.abs(new[moved] - th[moved]).max(axis=1)
        iters[act] = it + 1
    return theta, status, iters


def fit_mle(
    ds: Dataset,
    link: str = "probit",
    design: np.ndarray | None = None,
    include_x: bool = False,
) -> PropensityFit:
    """Binary-response maximum likelihood propensity.

    Parameters
    ----------
    ds : Dataset
    link : {"probit", "logit"}
    design : ndarray of shape (n, k), optional
        Explicit design matrix. Defaults to ``[1, z]`` (plus ``x`` when
        ``include_x``).

    Raises
    ------
    SingularDesignError
        Design is not of full column rank.
    ConvergenceError
        Perfect separation or failure to reach the gradient tolerance.
    """
    if link not in _LINKS:
        raise ValueError(f"unknown link {link!r}")
    X = design_matrix(ds, include_x) if design is None else np.asarray(design, float)
    if X.ndim != 2 or X.shape[0] != ds.n:
        raise ValueError("design must have one row per observation")
    _check_rank(X)
    theta, status, iters = _newton_batch(X, ds.d, np.ones((1, ds.n)), link)
    if status[0] == 1:
        raise ConvergenceError(
            "perfect separation: every observation of one treatment class has "
            f"linear index beyond {SEPARATION_INDEX:g}"
        )
    if status[0] != 0:
        raise ConvergenceError(
            f"{link} MLE did not converge after {iters[0]} iterations"
        )
    th = theta[0]
    eta = X @ th
    logf, _, _ = _LINKS[link][0]((2 * ds.d - 1) * eta)
    return PropensityFit(
        p_hat=_LINKS[link][1](eta),
        method=link,
        theta_hat=th,
        converged=True,
        loglik=float(logf.sum()),
        design=X,
        iterations=int(iters[0]),
    )


def fit_propensity(ds: Dataset, method: str = "freq", include_x: bool = False) -> PropensityFit:
    if method == "freq":
        return fit_frequency(ds)
    if method in _LINKS:
        return fit_mle(ds, method, include_x=include_x)
    raise ValueError(f"unknown propensity method {method!r}; choose from {METHODS}")


def refit_weighted_batch(ds: Dataset, fit: PropensityFit, W: np.ndarray):
    """Refit the propensity under each row of the weight matrix ``W``.

    Returns
    -------
    p_hat : ndarray of shape (m, n)
    ok : ndarray of shape (m,), bool
        False where the replicate is degenerate (non-positive judge weight,
        separation, non-concave weighted likelihood or non-convergence).
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if fit.method == "freq":
        J = ds.n_judges
        m = W.shape[0]
        flat = (np.arange(m)[:, None] * J + ds.judge[None, :]).ravel()
        tot = np.bincount(flat, weights=W.ravel(), minlength=m * J).reshape(m, J)
        trt = np.bincount(flat, weights=(W * ds.d).ravel(), minlength=m * J).reshape(m, J)
        ok = (tot > 0).all(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            share = np.clip(trt / tot, 0.0, 1.0)
        share[~ok] = np.nan
        return share[:, ds.judge], ok
    theta, status, _ = _newton_batch(fit.design, ds.d, W, fit.method)
    p = _LINKS[fit.method][1](theta @ fit.design.T)
    return p, status == 0


def refit_weighted(ds: Dataset, fit: PropensityFit, w) -> PropensityFit:
    """Weighted refit with a single weight vector.

    Raises
    ------
    DegenerateReplicateError
        If the weighted problem is degenerate.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (ds.n,):
        raise ValueError(f"weights must have shape ({ds.n},)")
    if fit.method == "freq":
        p, ok = refit_weighted_batch(ds, fit, w[None, :])
        if not ok[0]:
            raise DegenerateReplicateError("a judge has non-positive total weight")
        return PropensityFit(p_hat=p[0], method="freq")
    theta, status, iters = _newton_batch(fit.design, ds.d, w[None, :], fit.method)
    if status[0] != 0:
        raise DegenerateReplicateError(
            f"weighted {fit.method} likelihood has no interior maximizer"
        )
    eta = fit.design @ theta[0]
    logf, _, _ = _LINKS[fit.method][0]((2 * ds.d - 1) * eta)
    return PropensityFit(
        p_hat=_LINKS[fit.method][1](eta),
        method=fit.method,
        theta_hat=theta[0],
        converged=True,
        loglik=float(np.sum(w * logf)),
        design=fit.design,
        iterations=int(iters[0]),
    )


@dataclass(frozen=True)
class BootstrapWeights:
    w: np.ndarray
    dist: str


def draw_weight_row(n: int, dist: str, seed: int, b: int, attempt: int = 0) -> np.ndarray:
    """Weight vector for replicate ``b``; depends only on (seed, b, attempt)."""
    rng = _rng.stream(seed, _rng.WEIGHTS, b, attempt)
    if dist == "normal1":
        return 1.0 + rng.standard_normal(n)
    if dist == "exp1":
        return rng.standard_exponential(n)
    raise ValueError(f"unknown weight distribution {dist!r}; choose from {WEIGHT_DISTS}")


def draw_weights(n: int, B: int, dist: str = "normal1", seed: int = 0) -> BootstrapWeights:
    """Draw ``B`` i.i.d. mean-one, variance-one multiplier weight vectors."""
    if n < 1 or B < 1:
        raise ValueError("n and B must be positive")
    if dist not in WEIGHT_DISTS:
        raise ValueError(f"unknown weight distribution {dist!r}; choose from {WEIGHT_DISTS}")
    return BootstrapWeights(
        np.stack([draw_weight_row(n, dist, seed, b) for b in range(B)]), dist
    )

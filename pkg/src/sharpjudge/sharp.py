"""Cube-moment specification test with weighted bootstrap and GMS critical values."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _rng
from .dataset import Dataset, normalize_outcome
from .grid import CubeGrid, build_grid, cell_indicators
from .propensity import (
    PropensityFit,
    draw_weight_row,
    fit_propensity,
    refit_weighted_batch,
)

CHUNK = 32
MAX_REDRAWS = 3
MAX_DEGENERATE_SHARE = 0.05


class BootstrapFailure(RuntimeError):
    """Too many bootstrap replicates had no well-defined propensity refit."""


class SampleSizeError(ValueError):
    """Sample too small for the moment-selection tuning sequences."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SharpConfig:
    """Settings for :func:`run_sharp_test`.

    ``Q_Y=None`` picks 2 for binary outcomes and 5 otherwise. ``seed=None``
    draws fresh entropy, which is recorded in the result.
    """

    alpha: float = 0.05
    B: int = 800
    Q_Y: int | None = None
    Q_P: int = 5
    eps: float = 1e-6
    eta: float = 1e-6
    pscore: str = "freq"
    weights: str = "normal1"
    seed: int | None = None
    threads: int | None = None
    normalize: str = "auto"
    bounds: tuple | None = None
    include_x: bool = False

    def validate(self) -> None:
        if not 0 < self.alpha < 0.5:
            raise ConfigError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if self.eta <= 0 or 1 - self.alpha + self.eta > 1:
            raise ConfigError("need eta > 0 and 1 - alpha + eta <= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.B < 2:
            raise ConfigError("B must be at least 2")


@dataclass
class MomentEstimates:
    """Cube moments; ``nu[d, l]`` for treatment arm ``d`` and cube ``l``."""

    nu: np.ndarray
    m1: np.ndarray
    m0: np.ndarray
    w: np.ndarray


def _outcome_cells(y, grid: CubeGrid) -> np.ndarray:
    return cell_indicators(y, grid.y_lo, grid.y_hi).astype(float)


def _moments_batch(yI, d, P, W, grid: CubeGrid):
    """Cell means and cube moments for a batch of propensity/weight rows.

    ``yI`` is (n, nY), or (m, n, nY) when outcomes vary by replicate;
    ``P`` and ``W`` are (m, n). Returns nu (m, 2, G), m1, m0 (m, nY, nP)
    and w (m, nP).
    """
    J = cell_indicators(P, grid.p_lo, grid.p_hi).astype(float)
    tot = W.sum(axis=1)
    if np.any(tot == 0):
        raise BootstrapFailure("zero total weight")
    yT = yI.T[None, :, :] if yI.ndim == 2 else np.swapaxes(yI, 1, 2)
    m1 = np.matmul(yT * (W * d)[:, None, :], J) / tot[:, None, None]
    m0 = -np.matmul(yT * (W * (1.0 - d))[:, None, :], J) / tot[:, None, None]
    w = np.matmul(W[:, None, :], J)[:, 0, :] / tot[:, None]
    cy, c1, c2 = grid.cube_y, grid.cube_p1, grid.cube_p2
    nu = np.empty((P.shape[0], 2, len(grid)))
    for k, m in ((0, m0), (1, m1)):
        nu[:, k] = m[:, cy, c2] * w[:, c1] - m[:, cy, c1] * w[:, c2]
    return nu, m1, m0, w


def estimate_nu(
    ds: Dataset, fit: PropensityFit, grid: CubeGrid, w=None, y=None
) -> MomentEstimates:
    """Cube moments, optionally with multiplier weights ``w``.

    ``y`` overrides the dataset outcome (for example a normalized version).
    """
    y = ds.y if y is None else np.asarray(y, float)
    W = np.ones((1, ds.n)) if w is None else np.asarray(w, float)[None, :]
    nu, m1, m0, wc = _moments_batch(_outcome_cells(y, grid), ds.d, fit.p_hat[None, :], W, grid)
    return MomentEstimates(nu[0], m1[0], m0[0], wc[0])


@dataclass
class BootstrapTable:
    nu: np.ndarray  # (B, 2, G)
    degenerate: int = 0
    redraws: int = 0


def run_bootstrap(
    ds: Dataset,
    fit: PropensityFit,
    grid: CubeGrid,
    B: int,
    seed: int,
    dist: str = "normal1",
    threads: int | None = None,
    weights: np.ndarray | None = None,
    y=None,
    y_hook=None,
) -> BootstrapTable:
    """Weighted-bootstrap replicates of the cube moments.

    Replicate ``b`` depends only on ``(seed, b)``; work is split into fixed
    chunks whose results land in fixed slots, so the table is identical for
    any thread count. ``weights`` pins the multiplier matrix (B, n).
    ``y_hook(W, P)`` returns per-replicate outcomes (m, n) on the normalized
    scale when the outcome itself depends on the bootstrap weights.

    Raises
    ------
    BootstrapFailure
        More than 5% of replicates degenerate, or a replicate stays
        degenerate after the allowed redraws.
    """
    if B < 2:
        raise ConfigError("B must be at least 2")
    y = ds.y if y is None else np.asarray(y, float)
    yI = _outcome_cells(y, grid)
    out = np.empty((B, 2, len(grid)))
    if weights is not None:
        weights = np.asarray(weights, float)
        if weights.shape != (B, ds.n):
            raise ValueError(f"pinned weights must have shape ({B}, {ds.n})")

    def chunk(start):
        bs = np.arange(start, min(start + CHUNK, B))
        if weights is not None:
            W = weights[bs]
        else:
            W = np.stack([draw_weight_row(ds.n, dist, seed, b) for b in bs])
        P, ok = refit_weighted_batch(ds, fit, W)
        ok &= W.sum(axis=1) != 0
        n_bad = int((~ok).sum())
        redraws = 0
        attempt = 0
        while not ok.all():
            if weights is not None or attempt == MAX_REDRAWS:
                raise BootstrapFailure(
                    f"replicate {int(bs[~ok][0])} degenerate after {attempt} redraws"
                )
            attempt += 1
            bad = np.flatnonzero(~ok)
            Wr = np.stack([draw_weight_row(ds.n, dist, seed, bs[i], attempt) for i in bad])
            Pr, okr = refit_weighted_batch(ds, fit, Wr)
            okr &= Wr.sum(axis=1) != 0
            W[bad], P[bad], ok[bad] = Wr, Pr, okr
            redraws += bad.size
        yb = yI if y_hook is None else _outcome_cells(y_hook(W, P), grid)
        out[bs] = _moments_batch(yb, ds.d, P, W, grid)[0]
        return n_bad, redraws

    starts = range(0, B, CHUNK)
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            stats = list(ex.map(chunk, starts))
    else:
        stats = [chunk(s) for s in starts]
    degenerate = sum(s[0] for s in stats)
    if degenerate > MAX_DEGENERATE_SHARE * B:
        raise BootstrapFailure(
            f"{degenerate} of {B} bootstrap replicates were degenerate"
        )
    return BootstrapTable(out, degenerate, sum(s[1] for s in stats))


def estimate_sigma(nu_boot: np.ndarray, n: int, eps: float) -> np.ndarray:
    """Floored bootstrap standard deviation of ``sqrt(n) * nu``."""
    nu_boot = np.asarray(nu_boot, float)
    B = nu_boot.shape[0]
    if B < 2:
        raise ConfigError("need at least two replicates")
    dev = nu_boot - nu_boot.mean(axis=0)
    var = n / B * np.sum(dev * dev, axis=0)
    return np.sqrt(np.maximum(var, eps))


def gms_constants(n: int) -> tuple[float, float]:
    """Tuning pair ``(a_n, B_n)`` for moment selection."""
    if n < 3:
        raise SampleSizeError(f"moment selection needs n >= 3, got {n}")
    ln = math.log(n)
    return 0.15 * ln, 0.85 * ln / math.log(ln)


def gms_flags(std: np.ndarray, n: int) -> np.ndarray:
    """``-B_n`` where the standardized moment is below ``-a_n``, else 0."""
    a_n, b_n = gms_constants(n)
    return np.where(np.asarray(std) < -a_n, -b_n, 0.0)


def test_statistic(std: np.ndarray, omega: np.ndarray) -> float:
    """Omega-weighted sum of squared positive parts over both arms."""
    pos = np.maximum(np.asarray(std), 0.0)
    return float(np.sum(pos * pos * omega))


test_statistic.__test__ = False


def quantile_rank(tau: float, B: int) -> int:
    """1-based rank ``ceil(tau * B)`` guarded against representation error."""
    return min(max(math.ceil(tau * B - 1e-9), 1), B)


def bootstrap_statistics(
    nu_boot: np.ndarray, nu_hat: np.ndarray, sigma: np.ndarray, psi: np.ndarray,
    n: int, omega: np.ndarray,
) -> np.ndarray:
    z = math.sqrt(n) * (nu_boot - nu_hat) / sigma + psi
    pos = np.maximum(z, 0.0)
    return np.sum(pos * pos * omega, axis=(1, 2))


def critical_value(
    T_boot: np.ndarray, T_hat: float, alpha: float, eta: float
) -> tuple[float, float]:
    """Return ``(c_hat, p_value)`` from bootstrap statistics."""
    tau = 1 - alpha + eta
    if tau > 1:
        raise ConfigError("1 - alpha + eta exceeds 1")
    T_boot = np.asarray(T_boot)
    srt = np.sort(T_boot)
    c = float(srt[quantile_rank(tau, T_boot.size) - 1] + eta)
    return c, float(np.mean(T_boot >= T_hat))


@dataclass
class TestResult:
    """Outcome of the cube-moment test.

    Per-cube arrays are indexed ``[d, l]`` over arms ``d`` and grid cubes ``l``.
    """

    __test__ = False

    T_hat: float
    c_hat: float
    p_value: float
    reject: bool
    n: int
    B_used: int
    grid: CubeGrid = field(repr=False)
    nu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    T_boot: np.ndarray = field(repr=False)
    config: dict = field(default_factory=dict)
    degenerate: int = 0
    redraws: int = 0
    transform: dict | None = None

    def to_dict(self, cubes: bool = True) -> dict:
        g = self.grid
        out = {
            "statistic": self.T_hat,
            "critical_value": self.c_hat,
            "p_value": self.p_value,
            "reject": self.reject,
            "n": self.n,
            "B": self.B_used,
            "grid": {"QY": g.Q_Y, "QP": g.Q_P, "count": len(g)},
            "config": self.config,
            "degenerate_replicates": self.degenerate,
            "redraws": self.redraws,
            "transform": self.transform,
        }
        if cubes:
            rows = []
            for i in range(len(g)):
                c = g.cube(i)
                for d in (0, 1):
                    rows.append({
                        "d": d, "y": c.y, "ry": c.ry, "p1": c.p1, "p2": c.p2,
                        "rp": c.rp, "nu": float(self.nu[d, i]),
                        "sigma": float(self.sigma[d, i]), "std": float(self.std[d, i]),
                        "gms": float(self.psi[d, i]),
                    })
            out["cubes"] = rows
        return out


def run_sharp_test(
    ds: Dataset,
    config: SharpConfig = SharpConfig(),
    fit: PropensityFit | None = None,
    weights: np.ndarray | None = None,
    y_hook=None,
) -> TestResult:
    """Run the full test on ``ds``.

    The outcome is normalized to [0, 1] per ``config.normalize`` before cube
    moments are formed. ``fit`` reuses an existing propensity fit and
    ``weights`` pins the bootstrap multipliers.
    """
    config.validate()
    seed = _rng.fresh_seed() if config.seed is None else int(config.seed)
    a_n, b_n = gms_constants(ds.n)
    norm_out = normalize_outcome(ds, config.normalize, config.bounds)
    y = norm_out.y_tilde
    Q_Y = config.Q_Y or (2 if ds.is_binary_outcome else 5)
    grid = build_grid(Q_Y, config.Q_P)
    if fit is None:
        fit = fit_propensity(ds, config.pscore, config.include_x)

    est = estimate_nu(ds, fit, grid, y=y)
    table = run_bootstrap(
        ds, fit, grid, config.B, seed, config.weights, config.threads, weights,
        y=y, y_hook=y_hook,
    )
    n = ds.n
    sigma = estimate_sigma(table.nu, n, config.eps)
    std = math.sqrt(n) * est.nu / sigma
    psi = gms_flags(std, n)
    omega = grid.omega
    T_hat = test_statistic(std, omega)
    T_boot = bootstrap_statistics(table.nu, est.nu, sigma, psi, n, omega)
    c_hat, p_value = critical_value(T_boot, T_hat, config.alpha, config.eta)
    cfg = asdict(config)
    cfg.update(seed=seed, Q_Y=Q_Y, pscore=fit.method, a_n=a_n, B_n=b_n)
    cfg.pop("threads")
    return TestResult(
        T_hat=T_hat,
        c_hat=c_hat,
        p_value=p_value,
        reject=bool(T_hat >= c_hat),
        n=n,
        B_used=config.B,
        grid=grid,
        nu=est.nu,
        sigma=sigma,
        std=std,
        psi=psi,
        T_boot=T_boot,
        config=cfg,
        degenerate=table.degenerate,
        redraws=table.redraws,
        transform=norm_out.transform,
    )

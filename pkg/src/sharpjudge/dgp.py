"""Synthetic judge-assignment designs and a seeded Monte Carlo harness."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from . import _rng
from .dataset import Dataset


class DGPConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FllBinaryConfig:
    """Binary design with always-takers, never-takers and compliers.

    Judge ``j`` (1-based) has propensity
    ``p_a + (j - 1) / (J - 1) * (1 - p_a - p_n)``. ``lam`` in [0, 1] scales
    how strongly the non-compliers' outcome rate moves with the judge.
    """

    J: int = 20
    n: int = 1000
    p_a: float = 0.2
    p_n: float = 0.2
    lam: float = 0.0

    def propensities(self) -> np.ndarray:
        j = np.arange(self.J)
        return self.p_a + j / (self.J - 1) * (1 - self.p_a - self.p_n)

    def noncomplier_rate(self) -> np.ndarray:
        s = self.p_a + self.p_n
        p = self.propensities()
        return (self.p_a + self.lam * (s * p - self.p_a) / (1 - s)) / s

    def expected_y(self) -> np.ndarray:
        s = self.p_a + self.p_n
        p = self.propensities()
        return (1 - (1 - self.lam) * s) / (1 - s) * p - self.lam / (1 - s) * self.p_a

    def validate(self) -> None:
        if self.J < 2 or self.n < self.J:
            raise DGPConfigError("need J >= 2 and at least one case per judge")
        if not (0 <= self.lam <= 1):
            raise DGPConfigError("lam must lie in [0, 1]")
        if self.p_a <= 0 or self.p_n <= 0 or self.p_a + self.p_n >= 1:
            raise DGPConfigError("need p_a, p_n > 0 and p_a + p_n < 1")
        r = self.noncomplier_rate()
        if r.min() < -1e-12 or r.max() > 1 + 1e-12:
            raise DGPConfigError("non-complier outcome rate leaves [0, 1]")


def _even_split(n, J):
    return np.repeat(np.arange(J), np.diff(np.linspace(0, n, J + 1).round().astype(int)))


def gen_fll_binary(cfg: FllBinaryConfig, seed: int) -> Dataset:
    cfg.validate()
    rng = _rng.stream(seed, _rng.DATA)
    judge = _even_split(cfg.n, cfg.J)
    p = cfg.propensities()[judge]
    s = cfg.p_a + cfg.p_n
    u = rng.random(cfg.n)
    always, never = u < cfg.p_a, (u >= cfg.p_a) & (u < s)
    complier = ~(always | never)
    v = rng.random(cfg.n)
    d = np.where(always, 1.0, np.where(never, 0.0, (v <= (p - cfg.p_a) / (1 - s)).astype(float)))
    r = np.clip(cfg.noncomplier_rate(), 0.0, 1.0)[judge]
    y_nc = (rng.random(cfg.n) < r).astype(float)
    y = np.where(complier, d, y_nc)
    return Dataset(y=y, d=d, z=(judge + 1).astype(float), z_names=("judge",))


@dataclass(frozen=True)
class GaussianContinuousConfig:
    """Gaussian latent design with a discretized judge instrument.

    ``delta1`` correlates the potential outcome errors with the latent
    instrument, ``delta2 != 0`` switches to a two-regime selection rule and
    ``delta3`` lets the instrument enter the outcome directly. Covariates
    enter only when ``with_x`` is set.
    """

    L: int = 21
    n: int = 1000
    delta1: float = 0.0
    delta2: float = 0.0
    delta3: float = 0.0
    beta1: float = 1.0
    beta0: float = 1.0
    with_x: bool = False
    alpha1: float = 1.0
    alpha0: float = 0.0
    cases_per_judge: int | None = None

    def covariance(self) -> np.ndarray:
        d1 = self.delta1
        return np.array([
            [1.0, 0.0, -0.5, d1],
            [0.0, 1.0, 0.5, d1],
            [-0.5, 0.5, 1.0, 0.0],
            [d1, d1, 0.0, 1.0],
        ])

    def validate(self) -> None:
        if self.L < 2:
            raise DGPConfigError("L must be at least 2")
        if np.linalg.eigvalsh(self.covariance()).min() < -1e-12:
            raise DGPConfigError(f"delta1={self.delta1} makes the covariance indefinite")
        if self.cases_per_judge is None and self.n < 1:
            raise DGPConfigError("n must be positive")


def _psd_sqrt(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(S)
        return vecs * np.sqrt(np.clip(vals, 0, None))


def level_bands(L: int) -> np.ndarray:
    """Bounds of the uniform scale mapped to each level 1..L-1."""
    edges = (np.arange(1, L) - 0.5) / L
    edges[0] = 0.0
    return np.append(edges, 1.0)


def draw_latents(cfg: GaussianContinuousConfig, seed: int) -> dict:
    """Latent draws ``u0, u1, u, zstar`` and instrument level ``ell`` (1..L-1)."""
    cfg.validate()
    rng = _rng.stream(seed, _rng.DATA)
    L = cfg.L
    if cfg.cases_per_judge is None:
        n = cfg.n
        zstar = rng.standard_normal(n)
        ell = np.clip(np.rint(norm.cdf(zstar) * L), 1, L - 1)
    else:
        # exactly cases_per_judge draws per level, drawn from Z* given its level
        n = cfg.cases_per_judge * (L - 1)
        ell = np.repeat(np.arange(1, L), cfg.cases_per_judge).astype(float)
        bands = level_bands(L)
        lo, hi = bands[ell.astype(int) - 1], bands[ell.astype(int)]
        zstar = norm.ppf(lo + (hi - lo) * rng.random(n))
    S = cfg.covariance()
    s_uz = S[:3, 3]
    cond = S[:3, :3] - np.outer(s_uz, s_uz)
    u0, u1, u = (zstar[:, None] * s_uz + rng.standard_normal((n, 3)) @ _psd_sqrt(cond).T).T
    x = rng.standard_normal(n) if cfg.with_x else np.zeros(n)
    return {"u0": u0, "u1": u1, "u": u, "zstar": zstar, "ell": ell, "x": x}


def gen_gaussian_continuous(cfg: GaussianContinuousConfig, seed: int) -> Dataset:
    lat = draw_latents(cfg, seed)
    u0, u1, u, x = lat["u0"], lat["u1"], lat["u"], lat["x"]
    n = u.shape[0]
    z = norm.ppf(lat["ell"] / cfg.L)
    if cfg.delta2 == 0:
        d = z > u
    else:
        d = ((z > u) & (u >= u0)) | ((1 - z > u) & (u < u0))
    d = d.astype(float)
    y1 = cfg.alpha1 + cfg.beta1 * x + cfg.delta3 * z + u1
    y0 = cfg.alpha0 + cfg.beta0 * x + cfg.delta3 * z + u0
    y = np.where(d == 1, y1, y0)
    return Dataset(
        y=y, d=d, z=z, x=x if cfg.with_x else None,
        z_names=("z",), x_names=("x",) if cfg.with_x else (),
    )


@dataclass(frozen=True)
class HomogeneousBinaryConfig:
    """Binary design where every judge shares the same treatment and outcome law."""

    J: int = 5
    cases_per_judge: int = 50
    p: float = 0.5
    q: float = 0.5


def gen_homogeneous_binary(cfg: HomogeneousBinaryConfig, seed: int) -> Dataset:
    rng = _rng.stream(seed, _rng.DATA)
    n = cfg.J * cfg.cases_per_judge
    judge = np.repeat(np.arange(1, cfg.J + 1), cfg.cases_per_judge).astype(float)
    d = (rng.random(n) < cfg.p).astype(float)
    y = (rng.random(n) < cfg.q).astype(float)
    return Dataset(y=y, d=d, z=judge, z_names=("judge",))


def binarize_outcome(ds: Dataset, threshold: float = 0.5) -> Dataset:
    return ds.replace(y=(ds.y >= threshold).astype(float))


# Example design: defiers-free but with a discontinuous outcome rule at p = 1/2.

def example1_ey1(p):
    return np.where(np.asarray(p) < 0.5, 1.0, p)


def example1_ey0(p):
    return np.where(np.asarray(p) < 0.5, 0.0, p)


def example1_eyd(p):
    """E[YD | P=p]: ``p`` below one half and ``p**2`` above."""
    p = np.asarray(p, dtype=float)
    return example1_ey1(p) * p


def example1_ey1md(p):
    p = np.asarray(p, dtype=float)
    return example1_ey0(p) * (1 - p)


@dataclass(frozen=True)
class Example1Values:
    W_Y: float
    W_YD: float
    W_Y1mD: float
    EYD_p: float
    EYD_p_prime: float


def example1_oracle(p: float, p_prime: float) -> Example1Values:
    """Closed-form slopes of E[Y|P], E[YD|P] and E[Y(1-D)|P] between two propensities.

    Within one side of 1/2 the slopes simplify algebraically and are returned
    in simplified form; across 1/2 they are plain difference quotients.
    E[Y|P=p] equals ``p`` on both sides, so its slope is exactly one.
    """
    if not (0 < p < 1 and 0 < p_prime < 1):
        raise ValueError("propensities must lie in (0, 1)")
    if p == p_prime:
        raise ValueError("slope undefined for p == p_prime")
    lo, lo_prime = p < 0.5, p_prime < 0.5
    eyd = example1_eyd([p, p_prime])
    if lo and lo_prime:
        w_yd, w_y1md = 1.0, 0.0
    elif not lo and not lo_prime:
        w_yd, w_y1md = p + p_prime, 1.0 - p - p_prime
    else:
        dp = p_prime - p
        ey1md = example1_ey1md([p, p_prime])
        w_yd = float((eyd[1] - eyd[0]) / dp)
        w_y1md = float((ey1md[1] - ey1md[0]) / dp)
    return Example1Values(
        W_Y=1.0,
        W_YD=float(w_yd),
        W_Y1mD=float(w_y1md),
        EYD_p=float(eyd[0]),
        EYD_p_prime=float(eyd[1]),
    )


def gen_example1(n: int, seed: int, levels=(0.2, 0.4, 0.6, 0.8)) -> Dataset:
    """Draw cases from the example design at the given judge propensities."""
    rng = _rng.stream(seed, _rng.DATA)
    levels = np.asarray(levels, float)
    judge = _even_split(n, levels.size)
    p = levels[judge]
    d = (rng.random(n) < p).astype(float)
    mean = np.where(d == 1, example1_ey1(p), example1_ey0(p))
    y = (rng.random(n) < mean).astype(float)
    return Dataset(y=y, d=d, z=(judge + 1).astype(float), z_names=("judge",))


@dataclass
class SimReport:
    """Monte Carlo rejection summary with every per-replication decision."""

    dgp: dict
    test: dict
    reps: int
    seed: int
    decisions: list
    p_values: list
    failures: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def rejections(self) -> int:
        return int(sum(1 for x in self.decisions if x))

    @property
    def rate(self) -> float:
        ok = [x for x in self.decisions if x is not None]
        return self.rejections / len(ok) if ok else float("nan")

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp,
            "test": self.test,
            "reps": self.reps,
            "seed": self.seed,
            "rejections": self.rejections,
            "rejection_rate": self.rate,
            "decisions": self.decisions,
            "p_values": self.p_values,
            "failures": self.failures,
            "metadata": self.metadata,
        }


GENERATORS = {
    FllBinaryConfig: gen_fll_binary,
    GaussianContinuousConfig: gen_gaussian_continuous,
    HomogeneousBinaryConfig: gen_homogeneous_binary,
}


def generate(cfg, seed: int) -> Dataset:
    try:
        gen = GENERATORS[type(cfg)]
    except KeyError:
        raise TypeError(f"no generator for {type(cfg).__name__}") from None
    return gen(cfg, seed)


def run_monte_carlo(
    dgp_config,
    test_config,
    reps: int,
    seed: int,
    threads: int | None = None,
    binarize: float | None = None,
) -> SimReport:
    """Generate ``reps`` datasets and run the configured test on each.

    Replication ``r`` uses data and test seeds derived from ``(seed, r)``,
    so reports are identical across thread counts. Failed replications are
    recorded with their error message and a ``None`` decision.
    """
    from .runner import run_configured_test

    if reps < 1:
        raise ValueError("reps must be at least 1")

    def one(r):
        try:
            ds = generate(dgp_config, _rng.child_seed(seed, _rng.DATA, r))
            if binarize is not None:
                ds = binarize_outcome(ds, binarize)
            return run_configured_test(ds, test_config, _rng.child_seed(seed, _rng.TEST, r))
        except (ValueError, RuntimeError, ArithmeticError) as exc:
            return None, None, f"{type(exc).__name__}: {exc}"

    t0 = time.perf_counter()
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(one, range(reps)))
    else:
        res = [one(r) for r in range(reps)]
    elapsed = time.perf_counter() - t0
    failures = [{"rep": r, "error": e} for r, (_, _, e) in enumerate(res) if e]
    dgp_dict = {"family": type(dgp_config).__name__, **asdict(dgp_config)}
    if binarize is not None:
        dgp_dict["binarize_at"] = binarize
    test_dict = {"kind": type(test_config).__name__, **_config_dict(test_config)}
    return SimReport(
        dgp=dgp_dict,
        test=test_dict,
        reps=reps,
        seed=seed,
        decisions=[dec for dec, _, _ in res],
        p_values=[p for _, p, _ in res],
        failures=failures,
        metadata={"seconds": elapsed, "seconds_per_rep": elapsed / reps},
    )


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    # execution settings stay out of the report, including the nested sharp config
    for part in (d, d.get("sharp") or {}):
        part.pop("threads", None)
        part.pop("seed", None)
    return d

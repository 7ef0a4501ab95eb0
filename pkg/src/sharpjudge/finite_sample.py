"""Exact finite-sample pairwise test for binary outcomes.

Each judge pair is tested with least-favorable Bernoulli(1/2) confidence
sets for the differences in treatment rates and in the signed outcome
moments, and pairs are combined with a Bonferroni correction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.stats import binom

from . import _rng
from .dataset import Dataset


class DomainError(ValueError):
    """The finite-sample test only applies to binary outcomes."""


@dataclass(frozen=True)
class JudgeSummary:
    judge: float
    n: int
    p_hat: float
    q1_hat: float
    q0_hat: float


@dataclass(frozen=True)
class FiniteConfig:
    alpha: float = 0.05
    B_sim: int = 1_000_000
    seed: int = 0
    threads: int | None = None


def judge_summaries(ds: Dataset) -> list[JudgeSummary]:
    J = ds.n_judges
    cnt = np.bincount(ds.judge, minlength=J)
    p = np.bincount(ds.judge, weights=ds.d, minlength=J) / cnt
    q1 = np.bincount(ds.judge, weights=ds.y * ds.d, minlength=J) / cnt
    q0 = -np.bincount(ds.judge, weights=ds.y * (1 - ds.d), minlength=J) / cnt
    label = ds.judge_labels[:, 0] if ds.judge_labels.shape[1] == 1 else np.arange(J)
    return [
        JudgeSummary(float(label[j]), int(cnt[j]), float(p[j]), float(q1[j]), float(q0[j]))
        for j in range(J)
    ]


def _support(n1, n2):
    """Integer support of ``n1*n2*(A/n1 - B/n2)`` with A~Bin(n1), B~Bin(n2)."""
    a = np.arange(n1 + 1)[:, None] * n2
    b = np.arange(n2 + 1)[None, :] * n1
    return np.unique((a - b).ravel())


def _check(n1, n2, alpha_tt):
    if n1 < 1 or n2 < 1:
        raise ValueError("case counts must be positive")
    if not 0 < alpha_tt < 0.5:
        raise ValueError(f"level must lie in (0, 0.5), got {alpha_tt}")


def _first_within(support, tail, alpha_tt):
    # support ascending, tail[i] = P(k > support[i]) nonincreasing
    return int(support[np.flatnonzero(tail <= alpha_tt)[0]])


@lru_cache(maxsize=256)
def _width_sim(n1, n2, alpha_tt, B_sim, seed):
    rng = _rng.stream(seed, _rng.WIDTH, min(n1, n2), max(n1, n2))
    k = np.sort(rng.binomial(n1, 0.5, B_sim) * n2 - rng.binomial(n2, 0.5, B_sim) * n1)
    support = _support(n1, n2)
    tail = (B_sim - np.searchsorted(k, support, side="right")) / B_sim
    return _first_within(support, tail, alpha_tt) / (n1 * n2)


def fs_critical_width(
    n_star: int,
    alpha_tt: float,
    B_sim: int = 1_000_000,
    seed: int = 0,
    n_other: int | None = None,
) -> float:
    """Simulated least-favorable half-width for a difference of two judge means.

    Returns the smallest support point ``c`` of ``A/n_star - B/n_other``
    (A, B independent binomials with success probability 1/2) whose simulated
    exceedance probability ``P(diff > c)`` is at most ``alpha_tt``. With equal
    counts the support is the grid ``{-1, ..., -1/n*, 0, 1/n*, ..., 1}``.
    """
    n_other = n_star if n_other is None else n_other
    _check(n_star, n_other, alpha_tt)
    return _width_sim(int(n_star), int(n_other), float(alpha_tt), int(B_sim), int(seed))


def fs_critical_width_exact(n_star: int, alpha_tt: float, n_other: int | None = None) -> float:
    """Same quantity as :func:`fs_critical_width` from the exact distribution."""
    n_other = n_star if n_other is None else n_other
    _check(n_star, n_other, alpha_tt)
    n1, n2 = int(n_star), int(n_other)
    pa = binom.pmf(np.arange(n1 + 1), n1, 0.5)
    pb = binom.pmf(np.arange(n2 + 1), n2, 0.5)
    k = (np.arange(n1 + 1)[:, None] * n2 - np.arange(n2 + 1)[None, :] * n1).ravel()
    prob = np.outer(pa, pb).ravel()
    support = np.unique(k)
    mass = np.bincount(np.searchsorted(support, k), weights=prob, minlength=support.size)
    tail = np.clip(1.0 - np.cumsum(mass), 0.0, None)
    return _first_within(support, tail, alpha_tt) / (n1 * n2)


@dataclass
class PairDecision:
    j: float
    k: float
    delta_p: float
    delta_q1: float
    delta_q0: float
    c_p: float
    c_q1: float
    c_q0: float
    bounds: dict
    rejected: bool
    events: list = field(default_factory=list)


EVENTS = ("p-down/q1-up", "p-down/q0-up", "p-up/q1-down", "p-up/q0-down")


def fs_pair_test(sj: JudgeSummary, sk: JudgeSummary, c_p: float, c_q1: float, c_q0: float) -> PairDecision:
    """Sign-conflict test for one judge pair.

    Rejects when the confidence set for the treatment-rate difference lies
    strictly on one side of zero while that of some outcome moment lies
    strictly on the other side.
    """
    dp = sj.p_hat - sk.p_hat
    dq = {1: sj.q1_hat - sk.q1_hat, 0: sj.q0_hat - sk.q0_hat}
    cq = {1: c_q1, 0: c_q0}
    p_lo, p_hi = dp - c_p, dp + c_p
    bounds = {"p": [p_lo, p_hi]}
    events = []
    for d in (1, 0):
        q_lo, q_hi = dq[d] - cq[d], dq[d] + cq[d]
        bounds[f"q{d}"] = [q_lo, q_hi]
    for d in (1, 0):
        if p_hi < 0 and bounds[f"q{d}"][0] > 0:
            events.append(f"p-down/q{d}-up")
    for d in (1, 0):
        if p_lo > 0 and bounds[f"q{d}"][1] < 0:
            events.append(f"p-up/q{d}-down")
    return PairDecision(
        j=sj.judge, k=sk.judge, delta_p=dp, delta_q1=dq[1], delta_q0=dq[0],
        c_p=c_p, c_q1=c_q1, c_q0=c_q0, bounds=bounds,
        rejected=bool(events), events=events,
    )


@dataclass
class FiniteResult:
    reject: bool
    alpha: float
    alpha_tilde: float
    alpha_tt: float
    J: int
    pairs: list
    widths: dict

    @property
    def p_value(self):
        return None

    def to_dict(self) -> dict:
        return {
            "reject": self.reject,
            "alpha": self.alpha,
            "alpha_tilde": self.alpha_tilde,
            "alpha_tilde_tilde": self.alpha_tt,
            "J": self.J,
            "rejected_pairs": sum(p.rejected for p in self.pairs),
            "widths": self.widths,
            "pairs": [asdict(p) for p in self.pairs],
        }


def run_finite_sample_test(ds: Dataset, config: FiniteConfig = FiniteConfig()) -> FiniteResult:
    """Bonferroni cascade over all judge pairs.

    Raises
    ------
    DomainError
        Outcome is not binary, or fewer than two judges.
    """
    if not ds.is_binary_outcome:
        raise DomainError("finite-sample test needs a binary outcome; use the asymptotic test")
    if not 0 < config.alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    summaries = judge_summaries(ds)
    J = len(summaries)
    if J < 2:
        raise DomainError("need at least two judges")
    a_t = 2 * config.alpha / (J * (J - 1))
    a_tt = a_t / 4

    counts = sorted({tuple(sorted((a.n, b.n))) for a, b in combinations(summaries, 2)})

    def width(pair):
        return fs_critical_width(pair[0], a_tt, config.B_sim, config.seed, pair[1])

    if config.threads and config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            widths = dict(zip(counts, ex.map(width, counts)))
    else:
        widths = {c: width(c) for c in counts}

    pairs = []
    for a, b in combinations(summaries, 2):
        c = widths[tuple(sorted((a.n, b.n)))]
        pairs.append(fs_pair_test(a, b, c, c, c))
    return FiniteResult(
        reject=any(p.rejected for p in pairs),
        alpha=config.alpha,
        alpha_tilde=a_t,
        alpha_tt=a_tt,
        J=J,
        pairs=pairs,
        widths={f"{n1},{n2}": w for (n1, n2), w in widths.items()},
    )

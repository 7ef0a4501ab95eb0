"""Descriptive diagnostics: conditional moment curves, slope bounds and Wald checks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .dataset import Dataset, normalize_outcome
from .propensity import PropensityFit


class EmptyCellError(ValueError):
    pass


class IrrelevantInstrumentError(ValueError):
    """The treatment does not covary with the propensity score."""


VARIANTS = ("Y", "YD", "Y1mD")


def parse_g(spec: str):
    """Parse ``"identity"`` or ``"interval:a,b"`` (meaning ``1{a < Y <= b}``)."""
    spec = spec.strip()
    if spec == "identity":
        return lambda y: np.asarray(y, float)
    if spec.startswith("interval:"):
        try:
            a, b = (float(v) for v in spec[len("interval:"):].split(","))
        except ValueError:
            raise ValueError(f"malformed interval spec {spec!r}; use interval:a,b") from None
        if not a < b:
            raise ValueError(f"interval needs a < b, got {spec!r}")
        return lambda y: ((np.asarray(y) > a) & (np.asarray(y) <= b)).astype(float)
    raise ValueError(f"unknown g {spec!r}; use identity or interval:a,b")


def _g(g):
    return parse_g(g) if isinstance(g, str) else g


def support_cells(p_hat: np.ndarray, bins: int | None = None, max_discrete: int = 50):
    """Group observations by propensity support point or by quantile bins.

    Returns ``(points, labels)`` where ``labels[i]`` indexes ``points``.
    Distinct values are used when there are at most ``max_discrete`` of them
    and ``bins`` is not given; otherwise ``bins`` quantile bins (default 10)
    represented by their mean propensity.
    """
    uniq, inv = np.unique(p_hat, return_inverse=True)
    if bins is None and uniq.size <= max_discrete:
        return uniq, inv.ravel()
    bins = bins or 10
    edges = np.quantile(p_hat, np.linspace(0, 1, bins + 1))
    labels = np.clip(np.searchsorted(edges, p_hat, side="right") - 1, 0, bins - 1)
    counts = np.bincount(labels, minlength=bins)
    if (counts == 0).any():
        raise EmptyCellError(
            f"propensity bin {int(np.flatnonzero(counts == 0)[0])} is empty; use fewer bins"
        )
    points = np.bincount(labels, weights=p_hat, minlength=bins) / counts
    return points, labels


@dataclass
class MomentCurve:
    """Per support point: E[g(Y)D | P=p] and -E[g(Y)(1-D) | P=p]."""

    p: np.ndarray
    m1: np.ndarray
    m0_neg: np.ndarray
    n_cell: np.ndarray

    def to_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "m1", "m0_neg", "n_cell"])
        for row in zip(self.p, self.m1, self.m0_neg, self.n_cell):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        with open(path_or_buf, "w", encoding="utf-8") as fh:
            fh.write(text)
        return None


def _cell_means(values, labels, k):
    cnt = np.bincount(labels, minlength=k)
    if (cnt == 0).any():
        raise EmptyCellError("empty propensity cell")
    return np.bincount(labels, weights=values, minlength=k) / cnt, cnt


def moment_curves(
    ds: Dataset,
    fit: PropensityFit,
    g="identity",
    bins: int | None = None,
    normalize: str | None = None,
) -> MomentCurve:
    """Plug-in conditional means of ``g(Y)D`` and ``-g(Y)(1-D)`` given the propensity.

    ``normalize`` maps the outcome to [0, 1] first (see
    :func:`sharpjudge.dataset.normalize_outcome`).
    """
    y = ds.y if normalize is None else normalize_outcome(ds, normalize).y_tilde
    gy = _g(g)(y)
    points, labels = support_cells(fit.p_hat, bins)
    m1, cnt = _cell_means(gy * ds.d, labels, points.size)
    m0, _ = _cell_means(gy * (1 - ds.d), labels, points.size)
    return MomentCurve(points, m1, -m0, cnt)


@dataclass(frozen=True)
class SlopeRow:
    p: float
    p_prime: float
    slope: float
    lower: float
    upper: float
    violated: bool


def slope_bounds(
    ds: Dataset,
    fit: PropensityFit,
    K: float,
    variant: str = "Y",
    g="identity",
    L_g: float = 0.0,
    bins: int | None = None,
) -> list[SlopeRow]:
    """Finite-difference slopes between every pair of propensity support points.

    Each unordered pair is reported once with ``p < p_prime``. Bounds by
    variant, with ``U_g = L_g + K``: ``Y`` in ``[-K, K]``; ``YD`` in
    ``[L_g, U_g]``; ``Y1mD`` in ``[-U_g, -L_g]``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if not K >= 0:
        raise ValueError("K must be nonnegative")
    gy = _g(g)(ds.y)
    factor = {"Y": 1.0, "YD": ds.d, "Y1mD": 1.0 - ds.d}[variant]
    points, labels = support_cells(fit.p_hat, bins)
    if points.size < 2:
        raise ValueError("need at least two distinct propensity values")
    mean, _ = _cell_means(gy * factor, labels, points.size)
    U_g = L_g + K
    lo, hi = {"Y": (-K, K), "YD": (L_g, U_g), "Y1mD": (-U_g, -L_g)}[variant]
    rows = []
    for i, j in combinations(range(points.size), 2):
        dp = points[j] - points[i]
        if dp == 0:
            continue
        s = float((mean[j] - mean[i]) / dp)
        rows.append(SlopeRow(float(points[i]), float(points[j]), s, lo, hi, not (lo <= s <= hi)))
    return rows


@dataclass(frozen=True)
class WaldCheck:
    wald: float
    bound: float
    within_bound: bool


def wald_bound_check(ds: Dataset, fit: PropensityFit, U: float, L: float) -> WaldCheck:
    """``Cov(Y, P) / Cov(D, P)`` compared with the outcome range ``U - L``."""
    p = fit.p_hat - fit.p_hat.mean()
    cov_d = float(np.dot(ds.d - ds.d.mean(), p))
    if abs(cov_d) <= 1e-12 * ds.n:
        raise IrrelevantInstrumentError("treatment does not covary with the propensity")
    wald = float(np.dot(ds.y - ds.y.mean(), p)) / cov_d
    bound = U - L
    return WaldCheck(wald, bound, bool(abs(wald) <= bound))


def conditional_wald(
    ds: Dataset,
    fit: PropensityFit,
    cell: dict | None,
    p: float,
    p_prime: float,
    g="identity",
    tol: float = 1e-9,
) -> float:
    """``(E[g(Y)|P=p', cell] - E[g(Y)|P=p, cell]) / (p' - p)``.

    ``cell`` maps column names to the values defining the conditioning cell;
    ``None`` uses all rows.
    """
    if p == p_prime:
        raise ValueError("p and p_prime must differ")
    rows = np.ones(ds.n, dtype=bool)
    for name, value in (cell or {}).items():
        rows &= ds.column(name) == value
    if not rows.any():
        raise EmptyCellError(f"no observations in cell {cell}")
    gy = _g(g)(ds.y)
    means = []
    for target in (p, p_prime):
        sel = rows & np.isclose(fit.p_hat, target, rtol=0, atol=tol)
        if not sel.any():
            raise EmptyCellError(f"propensity {target} does not occur in cell {cell}")
        means.append(gy[sel].mean())
    return float((means[1] - means[0]) / (p_prime - p))

"""Case-level data model: ingestion, validation and outcome normalization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm


class SchemaError(ValueError):
    """A mapped column is missing from the input file."""


class ValidationError(ValueError):
    """Input values violate the data contract (non-binary d, non-finite values)."""


class DegenerateOutcomeError(ValueError):
    """The outcome is constant, so a data-driven normalization is undefined."""


def _as_2d(a, n, name):
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != n:
        raise ValidationError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable columnar case records.

    Parameters
    ----------
    y : array of shape (n,)
        Outcome.
    d : array of shape (n,)
        Binary treatment, exactly 0 or 1.
    z : array of shape (n,) or (n, kz)
        Instrument: judge identifier or judge characteristics.
    x : array of shape (n, k), optional
        Case-level covariates.
    z_names, x_names : column labels, used for CSV output and cell splitting.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray | None = None
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    y_name: str = "y"
    d_name: str = "d"
    _judge: np.ndarray = field(init=False, repr=False)
    _judge_labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one case")
        d_raw = np.asarray(self.d, dtype=float).ravel()
        if d_raw.shape[0] != n:
            raise ValidationError(f"d has {d_raw.shape[0]} rows, expected {n}")
        bad = np.flatnonzero(~np.isin(d_raw, (0.0, 1.0)))
        if bad.size:
            raise ValidationError(
                f"treatment must be 0/1; row {int(bad[0])} has value {d_raw[bad[0]]!r}"
            )
        z = _as_2d(self.z, n, "z")
        x = _as_2d(self.x, n, "x")
        if x is not None and x.shape[1] == 0:
            x = None
        for name, arr in (("y", y), ("z", z), ("x", x)):
            if arr is None:
                continue
            finite = np.isfinite(arr) if arr.ndim == 1 else np.isfinite(arr).all(axis=1)
            if not finite.all():
                row = int(np.flatnonzero(~finite)[0])
                raise ValidationError(f"non-finite value in {name} at row {row}")

        z_names = tuple(self.z_names) or tuple(
            "z" if z.shape[1] == 1 else f"z{j}" for j in range(z.shape[1])
        )
        x_names = tuple(self.x_names)
        if x is not None and not x_names:
            x_names = tuple(f"x{j}" for j in range(x.shape[1]))
        if x is None:
            x_names = ()
        if len(z_names) != z.shape[1] or (x is not None and len(x_names) != x.shape[1]):
            raise ValidationError("column names do not match column counts")

        labels, judge = np.unique(z, axis=0, return_inverse=True)
        for arr in (y, d_raw, z, judge):
            arr.setflags(write=False)
        if x is not None:
            x.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "y", y)
        set_(self, "d", d_raw)
        set_(self, "z", z)
        set_(self, "x", x)
        set_(self, "z_names", z_names)
        set_(self, "x_names", x_names)
        set_(self, "_judge", judge.ravel())
        set_(self, "_judge_labels", labels)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return 0 if self.x is None else self.x.shape[1]

    @property
    def judge(self) -> np.ndarray:
        """Dense judge index in ``0..J-1`` (distinct rows of ``z``)."""
        return self._judge

    @property
    def judge_labels(self) -> np.ndarray:
        return self._judge_labels

    @property
    def n_judges(self) -> int:
        return self._judge_labels.shape[0]

    @property
    def is_binary_outcome(self) -> bool:
        return bool(np.isin(self.y, (0.0, 1.0)).all())

    def replace(self, **changes) -> "Dataset":
        fields = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.init
        }
        fields.update(changes)
        return Dataset(**fields)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return self.replace(
            y=self.y[rows],
            d=self.d[rows],
            z=self.z[rows],
            x=None if self.x is None else self.x[rows],
        )

    def column(self, name: str) -> np.ndarray:
        """Return a z or x column by its label."""
        if name in self.z_names:
            return self.z[:, self.z_names.index(name)]
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        if name == self.y_name:
            return self.y
        if name == self.d_name:
            return self.d
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        cols = {self.y_name: self.y, self.d_name: self.d}
        for j, name in enumerate(self.z_names):
            cols[name] = self.z[:, j]
        for j, name in enumerate(self.x_names):
            cols[name] = self.x[:, j]
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        # pandas writes floats with repr(), which round-trips exactly
        self.to_frame().to_csv(path, index=False)


def ingest_csv(
    path,
    col_y: str = "y",
    col_d: str = "d",
    col_z: str | Sequence[str] = "z",
    cols_x: Sequence[str] | None = None,
    drop_missing: bool = False,
) -> Dataset:
    """Read a case-level CSV into a :class:`Dataset`.

    Rows with missing values raise :class:`ValidationError` unless
    ``drop_missing`` is set, in which case they are removed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    col_z = [col_z] if isinstance(col_z, str) else list(col_z)
    cols_x = list(cols_x or [])
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    wanted = [col_y, col_d, *col_z, *cols_x]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    frame = frame[wanted]

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    unparsable = numeric.isna() & frame.notna()
    if unparsable.any().any():
        row, col = np.argwhere(unparsable.to_numpy())[0]
        raise ValidationError(f"non-numeric value in column {wanted[col]!r} at row {row}")
    na_rows = numeric.isna().any(axis=1).to_numpy()
    if na_rows.any():
        if not drop_missing:
            raise ValidationError(
                f"missing value at row {int(np.flatnonzero(na_rows)[0])} "
                "(use drop_missing to discard incomplete rows)"
            )
        numeric = numeric.loc[~na_rows]

    arr = numeric.to_numpy(dtype=float)
    nz = len(col_z)
    return Dataset(
        y=arr[:, 0],
        d=arr[:, 1],
        z=arr[:, 2 : 2 + nz],
        x=arr[:, 2 + nz :] if cols_x else None,
        z_names=tuple(col_z),
        x_names=tuple(cols_x),
        y_name=col_y,
        d_name=col_d,
    )


@dataclass(frozen=True)
class NormalizedOutcome:
    """Outcome mapped into [0, 1] together with the map that produced it."""

    y_tilde: np.ndarray
    transform: dict

    def apply(self, y) -> np.ndarray:
        """Apply the frozen transform to new outcome values."""
        return _apply_transform(self.transform, np.asarray(y, dtype=float))


def _apply_transform(t: dict, y: np.ndarray) -> np.ndarray:
    kind = t["kind"]
    if kind == "identity":
        return y.copy()
    if kind in ("known-bounds", "sample-range"):
        return (y - t["a"]) / (t["b"] - t["a"])
    if kind == "gaussianize":
        return norm.cdf((y - t["mean"]) / t["std"])
    raise ValueError(f"unknown transform {kind!r}")


NORMALIZE_MODES = ("auto", "identity", "known-bounds", "sample-range", "gaussianize")


def normalize_outcome(
    y_or_ds, mode: str = "auto", bounds: tuple[float, float] | None = None
) -> NormalizedOutcome:
    """Map the outcome into [0, 1] with an order-preserving transform.

    ``mode="auto"`` leaves binary outcomes untouched and gaussianizes
    everything else. ``gaussianize`` applies the standard normal CDF to the
    outcome standardized by its sample mean and sample standard deviation.
    """
    y = np.asarray(y_or_ds.y if isinstance(y_or_ds, Dataset) else y_or_ds, dtype=float)
    if mode == "auto":
        mode = "identity" if np.isin(y, (0.0, 1.0)).all() else "gaussianize"

    if mode == "identity":
        if y.min() < 0 or y.max() > 1:
            raise ValueError("identity normalization requires y in [0, 1]")
        t = {"kind": "identity"}
    elif mode == "known-bounds":
        if bounds is None:
            raise ValueError("known-bounds normalization needs bounds=(a, b)")
        a, b = map(float, bounds)
        if not a < b:
            raise ValueError(f"bounds must satisfy a < b, got ({a}, {b})")
        if y.min() < a or y.max() > b:
            raise ValueError(f"outcome leaves the declared bounds [{a}, {b}]")
        t = {"kind": "known-bounds", "a": a, "b": b}
    elif mode == "sample-range":
        a, b = float(y.min()), float(y.max())
        if a == b:
            raise DegenerateOutcomeError("constant outcome has no sample range")
        t = {"kind": "sample-range", "a": a, "b": b}
    elif mode == "gaussianize":
        std = float(y.std(ddof=1)) if y.size > 1 else 0.0
        if not std > 0:
            raise DegenerateOutcomeError("constant outcome cannot be standardized")
        t = {"kind": "gaussianize", "mean": float(y.mean()), "std": std}
    else:
        raise ValueError(f"unknown normalization mode {mode!r}; choose from {NORMALIZE_MODES}")

    return NormalizedOutcome(_apply_transform(t, y), t)

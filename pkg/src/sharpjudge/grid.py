"""Outcome-by-propensity cube grids and their weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ResolutionError(ValueError):
    """Grid resolutions outside the supported range."""


@dataclass(frozen=True)
class CubeIndex:
    y: float
    ry: float
    p1: float
    p2: float
    rp: float
    qy: int
    qp: int
    omega: float


@dataclass(frozen=True, eq=False)
class CubeGrid:
    """Truncated cube family in enumeration order ``(q_y, y, q_p, p2, p1)``.

    Cells are stored once and cubes refer to them by index, so moment
    estimates can be computed per cell and then combined per cube.

    Attributes
    ----------
    Q_Y, Q_P : int
    y_lo, y_hi : ndarray
        Closed outcome cells ``[y_lo, y_hi]``, one per ``(q_y, a)``.
    p_lo, p_hi : ndarray
        Closed propensity cells, one per ``(q_p, k)``.
    cube_y : ndarray of int
        Outcome cell of each cube.
    cube_p1, cube_p2 : ndarray of int
        Propensity cells of each cube; ``p1`` lies strictly above ``p2``.
    omega : ndarray
        Cube weights.
    """

    Q_Y: int
    Q_P: int
    y_lo: np.ndarray
    y_hi: np.ndarray
    y_q: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    p_q: np.ndarray
    cube_y: np.ndarray
    cube_p1: np.ndarray
    cube_p2: np.ndarray
    omega: np.ndarray

    def __len__(self) -> int:
        return self.omega.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.omega.sum())

    @property
    def cubes(self) -> list[CubeIndex]:
        return [self.cube(i) for i in range(len(self))]

    def cube(self, i: int) -> CubeIndex:
        a, k1, k2 = self.cube_y[i], self.cube_p1[i], self.cube_p2[i]
        qy, qp = int(self.y_q[a]), int(self.p_q[k1])
        return CubeIndex(
            y=float(self.y_lo[a]),
            ry=1.0 / qy,
            p1=float(self.p_lo[k1]),
            p2=float(self.p_lo[k2]),
            rp=1.0 / qp,
            qy=qy,
            qp=qp,
            omega=float(self.omega[i]),
        )


def cube_weight(qy: int, qp: int) -> float:
    return qy**-3.0 * qp**-2.0 / (qp * (qp - 1))


def _cells(qs):
    lo, hi, qq = [], [], []
    for q in qs:
        k = np.arange(q)
        lo.append(k / q)
        # (k+1)/q rather than k/q + 1/q so that grid points are exact
        hi.append((k + 1) / q)
        qq.append(np.full(q, q))
    return np.concatenate(lo), np.concatenate(hi), np.concatenate(qq)


def build_grid(Q_Y: int, Q_P: int) -> CubeGrid:
    """Enumerate all cubes with ``1 <= q_y <= Q_Y`` and ``2 <= q_p <= Q_P``.

    Raises
    ------
    ResolutionError
        If ``Q_Y < 1`` or ``Q_P < 2``.
    """
    if int(Q_Y) != Q_Y or Q_Y < 1:
        raise ResolutionError(f"Q_Y must be an integer >= 1, got {Q_Y}")
    if int(Q_P) != Q_P or Q_P < 2:
        raise ResolutionError(f"Q_P must be an integer >= 2, got {Q_P}")
    Q_Y, Q_P = int(Q_Y), int(Q_P)
    y_lo, y_hi, y_q = _cells(range(1, Q_Y + 1))
    p_lo, p_hi, p_q = _cells(range(2, Q_P + 1))
    p_start = {q: int(np.flatnonzero(p_q == q)[0]) for q in range(2, Q_P + 1)}

    cy, c1, c2, om = [], [], [], []
    y_start = 0
    for qy in range(1, Q_Y + 1):
        for a in range(qy):
            for qp in range(2, Q_P + 1):
                w = cube_weight(qy, qp)
                s = p_start[qp]
                for k2 in range(qp):
                    for k1 in range(k2 + 1, qp):
                        cy.append(y_start + a)
                        c1.append(s + k1)
                        c2.append(s + k2)
                        om.append(w)
        y_start += qy
    return CubeGrid(
        Q_Y=Q_Y,
        Q_P=Q_P,
        y_lo=y_lo,
        y_hi=y_hi,
        y_q=y_q,
        p_lo=p_lo,
        p_hi=p_hi,
        p_q=p_q,
        cube_y=np.array(cy, dtype=np.intp),
        cube_p1=np.array(c1, dtype=np.intp),
        cube_p2=np.array(c2, dtype=np.intp),
        omega=np.array(om),
    )


def grid_count(Q_Y: int, Q_P: int) -> int:
    return (Q_Y * (Q_Y + 1) // 2) * sum(q * (q - 1) // 2 for q in range(2, Q_P + 1))


def cube_membership(p, p_left: float, r_p: float):
    """Closed-interval membership ``p_left <= p <= p_left + r_p``."""
    return (np.asarray(p) >= p_left) & (np.asarray(p) <= p_left + r_p)


def cell_indicators(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Boolean membership of each value in each closed cell; shape ``values.shape + (cells,)``."""
    v = np.asarray(values)[..., None]
    return (v >= lo) & (v <= hi)

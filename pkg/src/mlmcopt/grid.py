"""Cell-centered grid hierarchy, level inner products and transfer operators.

Level ``l`` of a hierarchy has ``m_l = m0 * 2**l`` cells per axis on the unit
cube. Grid functions hold one value per cell, ordered lexicographically with
the first coordinate running fastest.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class LevelError(ValueError):
    """Raised when a level is outside the hierarchy or levels do not match."""


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Cell-center values on one level of a hierarchy."""

    level: int
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("grid function values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def __add__(self, other: GridFunction) -> GridFunction:
        _check_same_level(self, other)
        return GridFunction(self.level, self.values + other.values)

    def __sub__(self, other: GridFunction) -> GridFunction:
        _check_same_level(self, other)
        return GridFunction(self.level, self.values - other.values)

    def __mul__(self, scalar: float) -> GridFunction:
        return GridFunction(self.level, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> GridFunction:
        return GridFunction(self.level, -self.values)


def _check_same_level(a: GridFunction, b: GridFunction) -> None:
    if a.level != b.level:
        raise LevelError(f"level mismatch: {a.level} vs {b.level}")
    if a.values.size != b.values.size:
        raise LevelError("grid functions have different sizes")


def inner_product(a: GridFunction, b: GridFunction) -> float:
    """Level inner product ``a.b / m**d`` (the mean of the pointwise product)."""
    _check_same_level(a, b)
    return float(a.values @ b.values) / a.values.size


def norm(a: GridFunction) -> float:
    return float(np.sqrt(inner_product(a, a)))


BOUNDARY_MODES = ("constant", "dirichlet")


def _prolong_1d(m: int, boundary: str = "constant") -> sp.csr_matrix:
    # coarse centers (i+1/2)/m, fine centers (j+1/2)/(2m). Beyond the outermost
    # coarse centers the value is either copied ("constant") or interpolated
    # toward zero at the boundary, half a coarse cell away ("dirichlet").
    rows, cols, vals = [], [], []
    for j in range(2 * m):
        x = (j + 0.5) / (2 * m) * m - 0.5  # position in coarse index units
        if x <= 0.0:
            w = 1.0 if boundary == "constant" else (x + 0.5) / 0.5
            rows.append(j), cols.append(0), vals.append(w)
        elif x >= m - 1:
            w = 1.0 if boundary == "constant" else (m - 0.5 - x) / 0.5
            rows.append(j), cols.append(m - 1), vals.append(w)
        else:
            i = int(np.floor(x))
            w = x - i
            rows += [j, j]
            cols += [i, i + 1]
            vals += [1.0 - w, w]
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * m, m))


@dataclass(frozen=True, eq=False)
class GridHierarchy:
    """Uniform cell-centered hierarchy on ``[0, 1]**dim``.

    Parameters
    ----------
    m0 : int
        Cells per axis on the coarsest level (at least 2).
    L_bar : int
        Finest (return) level.
    dim : int
        Spatial dimension, 1 or 2.
    boundary : str
        Prolongation next to the boundary: ``"constant"`` copies the nearest
        coarse value (constants are reproduced exactly); ``"dirichlet"``
        interpolates toward the homogeneous boundary value.
    """

    m0: int
    L_bar: int
    dim: int = 2
    boundary: str = "constant"
    _prolongations: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.m0 < 2:
            raise ValueError("m0 must be at least 2")
        if self.L_bar < 0:
            raise ValueError("L_bar must be nonnegative")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")

    @property
    def c(self) -> int:
        """Transfer constant relating prolongation and restriction."""
        return 2**self.dim

    @property
    def levels(self) -> range:
        return range(self.L_bar + 1)

    def m(self, level: int) -> int:
        self.check_level(level)
        return self.m0 * 2**level

    def size(self, level: int) -> int:
        return self.m(level) ** self.dim

    def h(self, level: int) -> float:
        return 1.0 / self.m(level)

    def check_level(self, level: int) -> None:
        if not 0 <= level <= self.L_bar:
            raise LevelError(f"level {level} outside hierarchy 0..{self.L_bar}")

    def centers_1d(self, level: int) -> np.ndarray:
        m = self.m(level)
        return (np.arange(m) + 0.5) / m

    def centers(self, level: int) -> np.ndarray:
        """Cell centers as an array of shape ``(m**d, d)``, x1 fastest."""
        x = self.centers_1d(level)
        if self.dim == 1:
            return x[:, None]
        x1, x2 = np.meshgrid(x, x, indexing="xy")
        return np.column_stack([x1.ravel(), x2.ravel()])

    def sample(self, func, level: int) -> GridFunction:
        """Evaluate a pointwise function ``func(points)`` at the cell centers."""
        pts = self.centers(level)
        vals = np.asarray(func(pts), dtype=float)
        if vals.shape == ():
            vals = np.full(pts.shape[0], float(vals))
        return GridFunction(level, vals.reshape(-1))

    def constant(self, value: float, level: int) -> GridFunction:
        return GridFunction(level, np.full(self.size(level), float(value)))

    def zeros(self, level: int) -> GridFunction:
        return self.constant(0.0, level)

    # transfer operators

    def prolongation_matrix(self, level: int) -> sp.csr_matrix:
        """Sparse prolongation from ``level`` to ``level + 1``."""
        self.check_level(level + 1)
        mat = self._prolongations.get(level)
        if mat is None:
            p1 = _prolong_1d(self.m(level), self.boundary)
            mat = p1 if self.dim == 1 else sp.kron(p1, p1, format="csr")
            self._prolongations[level] = mat
        return mat

    def prolong_array(self, values: np.ndarray, level: int) -> np.ndarray:
        """Prolong values (last axis is the grid axis) from ``level`` to ``level+1``."""
        P = self.prolongation_matrix(level)
        return (P @ np.asarray(values).T).T

    def restrict_array(self, values: np.ndarray, level: int) -> np.ndarray:
        """Restrict values from ``level`` to ``level-1`` as ``P.T / c``."""
        if level < 1:
            raise LevelError("cannot restrict below level 0")
        P = self.prolongation_matrix(level - 1)
        return (P.T @ np.asarray(values).T).T / self.c

    def transfer_array(self, values: np.ndarray, source: int, target: int) -> np.ndarray:
        self.check_level(source)
        self.check_level(target)
        out = np.asarray(values, dtype=float)
        for lvl in range(source, target):
            out = self.prolong_array(out, lvl)
        for lvl in range(source, target, -1):
            out = self.restrict_array(out, lvl)
        return out

    def prolong(self, v: GridFunction) -> GridFunction:
        self._check_member(v)
        if v.level + 1 > self.L_bar:
            raise LevelError(f"cannot prolong beyond L_bar={self.L_bar}")
        return GridFunction(v.level + 1, self.prolong_array(v.values, v.level))

    def restrict(self, v: GridFunction) -> GridFunction:
        self._check_member(v)
        return GridFunction(v.level - 1, self.restrict_array(v.values, v.level))

    def transfer(self, v: GridFunction, target: int) -> GridFunction:
        self._check_member(v)
        if target == v.level:
            return v
        return GridFunction(target, self.transfer_array(v.values, v.level, target))

    def _check_member(self, v: GridFunction) -> None:
        self.check_level(v.level)
        if v.values.size != self.size(v.level):
            raise LevelError(
                f"grid function of size {v.values.size} does not live on level {v.level}"
            )

    # serialization

    def to_csv(self, v: GridFunction, path: str | Path | None = None) -> str:
        """Write a grid function as CSV; the header row carries ``d, m0, level``."""
        self._check_member(v)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"d={self.dim}", f"m0={self.m0}", f"level={v.level}"])
        for x in v.values:
            writer.writerow([repr(float(x))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def from_csv(self, source: str | Path) -> GridFunction:
        text = Path(source).read_text(encoding="utf-8") if _is_path(source) else source
        rows = list(csv.reader(io.StringIO(text)))
        header = dict(cell.split("=", 1) for cell in rows[0])
        d, m0, level = int(header["d"]), int(header["m0"]), int(header["level"])
        if (d, m0) != (self.dim, self.m0):
            raise LevelError(f"file is for d={d}, m0={m0}; hierarchy has d={self.dim}, m0={self.m0}")
        v = GridFunction(level, np.array([float(r[0]) for r in rows[1:]]))
        self._check_member(v)
        return v

    def to_bytes(self, v: GridFunction) -> bytes:
        """Flat little-endian binary: int32 header ``(d, m0, level)`` then float64 values."""
        self._check_member(v)
        head = np.array([self.dim, self.m0, v.level], dtype="<i4").tobytes()
        return head + v.values.astype("<f8").tobytes()

    def from_bytes(self, data: bytes) -> GridFunction:
        d, m0, level = np.frombuffer(data[:12], dtype="<i4")
        if (int(d), int(m0)) != (self.dim, self.m0):
            raise LevelError("binary grid function belongs to a different hierarchy")
        v = GridFunction(int(level), np.frombuffer(data[12:], dtype="<f8").copy())
        self._check_member(v)
        return v

    @cached_property
    def identity_factors(self) -> np.ndarray:
        """``c**l * m_Lbar**d / (c**Lbar * m_l**d)`` for every level; all ones by design."""
        L = self.L_bar
        return np.array(
            [self.c**l * self.size(L) / (self.c**L * self.size(l)) for l in self.levels]
        )


def _is_path(source) -> bool:
    if isinstance(source, Path):
        return True
    return "\n" not in source and Path(source).exists()

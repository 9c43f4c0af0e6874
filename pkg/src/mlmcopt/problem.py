"""Problem definitions: cost weights, target and control-mask descriptors, reactions, presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .field_sampler import CovarianceSpec
from .grid import GridFunction, GridHierarchy


@dataclass(frozen=True)
class FieldFunction:
    """Serializable pointwise function on the unit cube.

    ``kind="constant"`` is ``value`` everywhere. ``kind="box"`` is ``value``
    inside the closed box ``[lo, hi]**d`` and ``outside`` elsewhere.
    """

    kind: str = "constant"
    value: float = 0.0
    lo: float = 0.25
    hi: float = 0.75
    outside: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "box"):
            raise ValueError(f"unknown field function kind {self.kind!r}")
        if self.kind == "box" and not self.lo <= self.hi:
            raise ValueError("box needs lo <= hi")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.kind == "constant":
            return np.full(pts.shape[0], float(self.value))
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        return np.where(inside, float(self.value), float(self.outside))

    def on(self, hierarchy: GridHierarchy, level: int) -> GridFunction:
        return hierarchy.sample(self, level)


@dataclass(frozen=True)
class Reaction:
    """Monotone reaction ``f(y) = a + b * exp(c * y)``; ``c = 0`` is rejected.

    ``kind="linear"`` gives ``f(y) = b * y`` for degenerate tests.
    """

    kind: str = "exp"
    a: float = 20.0
    b: float = 1.0
    c: float = 5.0

    def __post_init__(self):
        if self.kind not in ("exp", "linear"):
            raise ValueError(f"unknown reaction {self.kind!r}")
        if self.b < 0 or (self.kind == "exp" and self.c == 0):
            raise ValueError("reaction must be monotone increasing")

    def f(self, y):
        if self.kind == "linear":
            return self.b * y
        return self.a + self.b * np.exp(self.c * y)

    def df(self, y):
        if self.kind == "linear":
            return np.full_like(y, self.b, dtype=float)
        return self.b * self.c * np.exp(self.c * y)

    def d2f(self, y):
        if self.kind == "linear":
            return np.zeros_like(y, dtype=float)
        return self.b * self.c**2 * np.exp(self.c * y)


@dataclass(frozen=True)
class ProblemSpec:
    """Robust control problem. ``covariance=None`` means a deterministic ``k = 1``."""

    alpha: float
    gamma: float
    target: FieldFunction
    beta: FieldFunction
    covariance: CovarianceSpec | None
    m0: int = 8
    L_bar: int = 3
    reaction: Reaction | None = None
    dim: int = 2
    transfer_boundary: str = "dirichlet"

    def __post_init__(self):
        if self.covariance is not None and self.covariance.dim != self.dim:
            raise ValueError("covariance dimension differs from problem dimension")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def hierarchy(self) -> GridHierarchy:
        return _hierarchy(self.m0, self.L_bar, self.dim, self.transfer_boundary)

    @property
    def nonlinear(self) -> bool:
        return self.reaction is not None

    def with_(self, **changes) -> ProblemSpec:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


_HIERARCHIES: dict = {}


def _hierarchy(m0, L_bar, dim, boundary) -> GridHierarchy:
    # share transfer-matrix caches between equal specs
    key = (m0, L_bar, dim, boundary)
    if key not in _HIERARCHIES:
        _HIERARCHIES[key] = GridHierarchy(m0, L_bar, dim, boundary)
    return _HIERARCHIES[key]


BOX_TARGET = FieldFunction("box", 1.0, 0.25, 0.75, 0.0)
FULL_CONTROL = FieldFunction("constant", 1.0)
LAMBDA = 0.3
N_KL = 500


def _problem(alpha, gamma, sigma2, reaction=None, L_bar=3) -> ProblemSpec:
    return ProblemSpec(
        alpha=alpha,
        gamma=gamma,
        target=BOX_TARGET,
        beta=FULL_CONTROL,
        covariance=CovarianceSpec(sigma2, LAMBDA, 2, N_KL),
        m0=8,
        L_bar=L_bar,
        reaction=reaction,
    )


@dataclass(frozen=True)
class Preset:
    problem: ProblemSpec
    tau: float


PRESETS = {
    "problem1": Preset(_problem(1e-6, 1.0, 0.1, L_bar=5), 1e-4),
    "problem2": Preset(_problem(1e-5, 0.0, 0.5, L_bar=5), 1e-4),
    "problem3": Preset(_problem(1e-5, 1.0, 0.5, Reaction(), L_bar=5), 5e-5),
    "problem1-desk": Preset(_problem(1e-6, 1.0, 0.1), 1e-3),
    "problem2-desk": Preset(_problem(1e-5, 0.0, 0.5), 1e-3),
    "problem3-desk": Preset(_problem(1e-5, 1.0, 0.5, Reaction()), 5e-4),
}


def preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


"""Finite-volume discretization of ``-div(k grad y) + f(y) = beta u`` with zero Dirichlet data.

Cells are the control volumes of a :class:`~mlmcopt.grid.GridHierarchy` level.
Face conductances are harmonic means of the adjacent cell conductivities;
boundary faces sit half a cell away from the Dirichlet boundary. Every
equation is integrated over its cell, so the discrete state system reads

    A y + h**d f(y) = h**d beta u

with ``A`` symmetric positive definite. Adjoint and linearized systems reuse
``A`` (plus ``h**d diag(f'(y))``) with right-hand sides weighted by ``h**d``.

Operators are kept in LAPACK lower band storage, ``band[k, j] = A[j + k, j]``,
for whole batches of realizations at once. Batches are factored either by a
vectorized band Cholesky (small grids) or one LAPACK call per realization;
both give results that do not depend on which other realizations share the
batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridFunction, GridHierarchy
from .problem import Reaction

VECTORIZED_MAX_SIZE = 256
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_MAX_HALVINGS = 30


class SolverError(RuntimeError):
    pass


class NewtonError(SolverError):
    def __init__(self, message, history):
        super().__init__(f"{message}; residual history: {history}")
        self.history = history


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def assemble_band(K: np.ndarray, hierarchy: GridHierarchy, level: int) -> np.ndarray:
    """Lower band storage of the diffusion operators for conductivities ``K`` of shape ``(B, N)``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if np.any(K <= 0.0) or not np.all(np.isfinite(K)):
        raise ValueError("conductivities must be finite and strictly positive")
    m, d = hierarchy.m(level), hierarchy.dim
    B, N = K.shape
    if N != m**d:
        raise ValueError(f"expected {m**d} cell values on level {level}, got {N}")
    scale = hierarchy.h(level) ** (d - 2)
    w = 1 if d == 1 else m
    band = np.zeros((B, w + 1, N))
    if d == 1:
        cf = _harmonic(K[:, :-1], K[:, 1:]) * scale
        band[:, 1, :-1] = -cf
        diag = 2.0 * scale * (K[:, 0:1] * (np.arange(N) == 0) + K[:, -1:] * (np.arange(N) == N - 1))
        diag[:, :-1] += cf
        diag[:, 1:] += cf
    else:
        Kg = K.reshape(B, m, m)  # [b, i2, i1]
        c1 = _harmonic(Kg[:, :, :-1], Kg[:, :, 1:]) * scale
        c2 = _harmonic(Kg[:, :-1, :], Kg[:, 1:, :]) * scale
        off1 = np.zeros((B, m, m))
        off1[:, :, :-1] = -c1
        band[:, 1, :] = off1.reshape(B, N)
        band[:, w, : N - m] = -c2.reshape(B, -1)
        dg = np.zeros((B, m, m))
        dg[:, :, :-1] += c1
        dg[:, :, 1:] += c1
        dg[:, :-1, :] += c2
        dg[:, 1:, :] += c2
        dg[:, :, 0] += 2.0 * scale * Kg[:, :, 0]
        dg[:, :, -1] += 2.0 * scale * Kg[:, :, -1]
        dg[:, 0, :] += 2.0 * scale * Kg[:, 0, :]
        dg[:, -1, :] += 2.0 * scale * Kg[:, -1, :]
        diag = dg.reshape(B, N)
    band[:, 0, :] = diag
    return band


def band_to_sparse(band: np.ndarray) -> sp.csc_matrix:
    """Full symmetric sparse matrix from one lower band array of shape ``(w + 1, N)``."""
    w1, N = band.shape
    diags, offsets = [band[0]], [0]
    for k in range(1, w1):
        if np.any(band[k, : N - k]):
            diags += [band[k, : N - k], band[k, : N - k]]
            offsets += [-k, k]
    return sp.diags(diags, offsets, shape=(N, N), format="csc")


def band_matvec(band: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched product of symmetric band matrices ``(B, w+1, N)`` with ``x`` of shape ``(B, N)``."""
    out = band[:, 0, :] * x
    N = x.shape[1]
    for k in range(1, band.shape[1]):
        lo = band[:, k, : N - k]
        out[:, k:] += lo * x[:, : N - k]
        out[:, : N - k] += lo * x[:, k:]
    return out


class _VectorizedCholesky:
    """Band Cholesky of a batch, one numpy operation per column across the batch."""

    def __init__(self, band: np.ndarray):
        B, w1, N = band.shape
        w = w1 - 1
        npad = N + w
        lb = np.zeros((B, w1, npad))
        lb[:, :, :N] = band
        lb[:, 0, N:] = 1.0
        flat = lb.reshape(B, -1)
        ii, kk = [], []
        for i in range(1, w + 1):
            for k in range(0, w - i + 1):
                ii.append(i)
                kk.append(k)
        ii, kk = np.array(ii, dtype=int), np.array(kk, dtype=int)
        target = kk * npad + ii
        left, right = ii + kk - 1, ii - 1
        for j in range(N):
            piv = lb[:, 0, j]
            if np.any(piv <= 0.0):
                raise SolverError("matrix is not positive definite")
            dj = np.sqrt(piv)
            lb[:, 0, j] = dj
            col = lb[:, 1:, j] / dj[:, None]
            lb[:, 1:, j] = col
            flat[:, target + j] -= col[:, left] * col[:, right]
        self.lb = lb
        self.N, self.w = N, w

    def take(self, rows) -> _VectorizedCholesky:
        out = object.__new__(_VectorizedCholesky)
        out.lb, out.N, out.w = self.lb[rows], self.N, self.w
        return out

    @property
    def nbytes(self) -> int:
        return self.lb.nbytes

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        lb, N, w = self.lb, self.N, self.w
        B = lb.shape[0]
        x = np.zeros((B, N + w))
        x[:, :N] = rhs
        for j in range(N):
            x[:, j] /= lb[:, 0, j]
            x[:, j + 1 : j + w + 1] -= lb[:, 1:, j] * x[:, j : j + 1]
        for j in range(N - 1, -1, -1):
            # row-wise reduction keeps each result independent of the batch size
            x[:, j] -= (lb[:, 1:, j] * x[:, j + 1 : j + w + 1]).sum(axis=1)
            x[:, j] /= lb[:, 0, j]
        return x[:, :N]


class _LapackCholesky:
    def __init__(self, band: np.ndarray):
        try:
            self.factors = [sla.cholesky_banded(b, lower=True) for b in band]
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc

    def take(self, rows) -> _LapackCholesky:
        out = object.__new__(_LapackCholesky)
        out.factors = [self.factors[i] for i in rows]
        return out

    @property
    def nbytes(self) -> int:
        return sum(f.nbytes for f in self.factors)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return np.stack(
            [sla.cho_solve_banded((f, True), r) for f, r in zip(self.factors, rhs)]
        )


def factor_band(band: np.ndarray):
    """Factor a batch of SPD band matrices; the result has ``solve(rhs)`` for ``(B, N)`` arrays."""
    if band.shape[2] <= VECTORIZED_MAX_SIZE:
        return _VectorizedCholesky(band)
    return _LapackCholesky(band)


def with_diagonal(band: np.ndarray, extra: np.ndarray) -> np.ndarray:
    out = band.copy()
    out[:, 0, :] += extra
    return out


# single realization API


@dataclass(eq=False)
class DiscreteOperator:
    """Diffusion operator of one realization, optionally with a diagonal reaction term.

    ``diagonal`` holds ``h**d f'(y)`` for linearized nonlinear problems. The
    operator is immutable after assembly; its factorization is cached.
    """

    level: int
    band: np.ndarray
    h: float
    dim: int
    diagonal: np.ndarray | None = None
    solver: str = "direct"
    _factor: object = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.band.shape[1]

    @property
    def cell_weight(self) -> float:
        return self.h**self.dim

    def full_band(self) -> np.ndarray:
        if self.diagonal is None:
            return self.band
        out = self.band.copy()
        out[0] += self.diagonal
        return out

    @property
    def matrix(self) -> sp.csc_matrix:
        return band_to_sparse(self.full_band())

    def with_reaction(self, diagonal: np.ndarray) -> DiscreteOperator:
        return DiscreteOperator(self.level, self.band, self.h, self.dim, np.asarray(diagonal, float), self.solver)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``A x = rhs`` (no cell weighting applied here)."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.size,):
            raise ValueError(f"right-hand side has shape {rhs.shape}, expected ({self.size},)")
        if self.solver == "cg":
            x, info = spla.cg(self.matrix, rhs, rtol=1e-13, atol=0.0, maxiter=20 * self.size)
            if info != 0:
                raise SolverError(f"CG did not converge (info={info})")
            return x
        if self._factor is None:
            self._factor = factor_band(self.full_band()[None])
        return self._factor.solve(rhs[None])[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return band_matvec(self.full_band()[None], np.asarray(x, float)[None])[0]


@dataclass
class StateSolution:
    y: GridFunction
    iterations: int = 1
    residual: float = 0.0
    history: list = field(default_factory=list)


def assemble(k: GridFunction, hierarchy: GridHierarchy, solver: str = "direct") -> DiscreteOperator:
    """Finite-volume operator for the conductivity field ``k`` on its level."""
    if np.any(k.values <= 0.0):
        raise ValueError("conductivity must be strictly positive")
    band = assemble_band(k.values[None], hierarchy, k.level)[0]
    return DiscreteOperator(k.level, band, hierarchy.h(k.level), hierarchy.dim, solver=solver)


def _relative_residual(A: DiscreteOperator, x, rhs) -> float:
    scale = np.linalg.norm(rhs)
    r = np.linalg.norm(A.apply(x) - rhs)
    return float(r / scale) if scale > 0 else float(r)


def solve_state(A: DiscreteOperator, u: GridFunction, beta: GridFunction | None = None) -> StateSolution:
    """Solve ``A y = h**d beta u``."""
    if u.level != A.level:
        raise ValueError("control and operator live on different levels")
    bu = u.values if beta is None else beta.values * u.values
    rhs = A.cell_weight * bu
    y = A.solve(rhs)
    return StateSolution(GridFunction(A.level, y), 1, _relative_residual(A, y, rhs))


def solve_adjoint(A: DiscreteOperator, rhs: GridFunction) -> GridFunction:
    """Solve the self-adjoint system ``A p = h**d rhs``.

    For the nonlinear model pass ``A.with_reaction(h**d f'(y))``.
    """
    if rhs.level != A.level:
        raise ValueError("right-hand side and operator live on different levels")
    return GridFunction(A.level, A.solve(A.cell_weight * rhs.values))


def newton_batch(
    band: np.ndarray,
    weight: float,
    source: np.ndarray,
    reaction: Reaction,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
):
    """Damped Newton for ``A y + w f(y) = w source`` on a batch.

    Each realization iterates on its own until its residual drops below
    ``tol`` times its initial residual; converged members are frozen so the
    result for one realization never depends on the rest of the batch.

    Returns ``(y, factor)`` where ``factor`` is the Jacobian factorization at
    the converged states.
    """
    B, _, N = band.shape
    y = np.zeros((B, N))

    def residual(idx, yy):
        return band_matvec(band[idx], yy) + weight * (reaction.f(yy) - source[idx])

    res = residual(np.arange(B), y)
    rnorm = np.linalg.norm(res, axis=1)
    target = tol * np.maximum(rnorm, 1e-300)
    history = [rnorm.max()]
    active = np.flatnonzero(rnorm > target)
    it = 0
    while active.size:
        if it >= max_iter:
            raise NewtonError(f"Newton did not converge in {max_iter} iterations", history)
        jac = with_diagonal(band[active], weight * reaction.df(y[active]))
        step = factor_band(jac).solve(-res[active])
        s = np.ones(active.size)
        ya = y[active]
        trial = ya + step
        rt = residual(active, trial)
        nt = np.linalg.norm(rt, axis=1)
        worse = nt > rnorm[active]
        halvings = 0
        while np.any(worse) and halvings < NEWTON_MAX_HALVINGS:
            s[worse] *= 0.5
            sub = np.flatnonzero(worse)
            trial[sub] = ya[sub] + s[sub, None] * step[sub]
            rt[sub] = residual(active[sub], trial[sub])
            nt[sub] = np.linalg.norm(rt[sub], axis=1)
            worse[sub] = nt[sub] > rnorm[active[sub]]
            halvings += 1
        y[active] = trial
        res[active] = rt
        rnorm[active] = nt
        history.append(float(nt.max()))
        active = active[nt > target[active]]
        it += 1
    factor = factor_band(with_diagonal(band, weight * reaction.df(y)))
    return y, factor, it, history


def solve_state_nonlinear(
    A: DiscreteOperator, u: GridFunction, reaction: Reaction | None, beta: GridFunction | None = None
) -> StateSolution:
    """Solve ``A y + h**d f(y) = h**d beta u`` by damped Newton."""
    if reaction is None:
        return solve_state(A, u, beta)
    bu = u.values if beta is None else beta.values * u.values
    y, _, iters, history = newton_batch(A.band[None], A.cell_weight, bu[None], reaction)
    res = A.apply(y[0]) + A.cell_weight * (reaction.f(y[0]) - bu)
    return StateSolution(GridFunction(A.level, y[0]), iters, float(np.linalg.norm(res)), history)


def hessian_pieces(
    A: DiscreteOperator,
    du: GridFunction,
    beta: GridFunction | None = None,
    reaction: Reaction | None = None,
    y: GridFunction | None = None,
    p: GridFunction | None = None,
    variance_term: GridFunction | None = None,
):
    """Linearized state and adjoint for one realization.

    Solves ``(A + h**d f'(y)) dy = h**d beta du`` and then
    ``(A + h**d f'(y)) dp = h**d (2 dy + variance_term - f''(y) p dy)``.
    ``variance_term`` carries the sampled variance-penalty contribution
    (built from neighbouring realizations by the estimator); it defaults to 0.

    Returns ``(dy, dp)``.
    """
    op = A
    if reaction is not None:
        if y is None or p is None:
            raise ValueError("nonlinear Hessian pieces need the state and adjoint")
        op = A.with_reaction(A.cell_weight * reaction.df(y.values))
    bdu = du.values if beta is None else beta.values * du.values
    dy = op.solve(op.cell_weight * bdu)
    rhs = 2.0 * dy
    if variance_term is not None:
        rhs = rhs + variance_term.values
    if reaction is not None:
        rhs = rhs - reaction.d2f(y.values) * p.values * dy
    dp = op.solve(op.cell_weight * rhs)
    return GridFunction(A.level, dy), GridFunction(A.level, dp)

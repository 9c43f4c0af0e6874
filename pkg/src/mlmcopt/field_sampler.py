"""Truncated Karhunen-Loeve sampling of lognormal conductivity fields.

The Gaussian log-field has mean zero and the separable exponential covariance
``sigma2 * exp(-|x - y|_1 / lam)`` on the unit cube, so every 2D eigenpair is a
product of two 1D eigenpairs of the kernel ``exp(-|s - t| / lam)`` on [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .grid import GridFunction, GridHierarchy

ROOT_RTOL = 1e-12


class KLBasisError(RuntimeError):
    pass


@dataclass(frozen=True)
class CovarianceSpec:
    sigma2: float
    lam: float
    dim: int = 2
    n_kl: int = 500

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not self.lam > 0:
            raise ValueError("correlation length must be positive")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.n_kl < 1:
            raise ValueError("n_kl must be at least 1")


@dataclass(frozen=True)
class SampleKey:
    """Identifies one realization: sample ``index`` of the ordered set ``base_seed``."""

    base_seed: int
    index: int
    stream: int = 0


def solve_1d_eigenpairs(sigma2: float, lam: float, count: int):
    """Analytic eigenpairs of ``sigma2 * exp(-|s - t| / lam)`` on [0, 1].

    On the centered interval [-1/2, 1/2] the eigenfunctions alternate between
    even ``cos(w x)`` and odd ``sin(w x)`` modes. Their frequencies are roots of
    ``c cos(w/2) - w sin(w/2)`` and ``w cos(w/2) + c sin(w/2)`` with
    ``c = 1 / lam``; the n-th root lies in ``[n pi, (n + 1) pi]`` and is found
    by bisection.

    Returns
    -------
    eigenvalues : ndarray, shape (count,)
        ``2 c sigma2 / (w**2 + c**2)``, strictly descending.
    omegas : ndarray, shape (count,)
        Frequencies.
    parity : ndarray of int, shape (count,)
        0 for even (cosine) modes, 1 for odd (sine) modes.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if not (sigma2 > 0 and lam > 0):
        raise ValueError("sigma2 and lam must be positive")
    c = 1.0 / lam
    a = 0.5
    even = lambda w: c * math.cos(w * a) - w * math.sin(w * a)
    odd = lambda w: w * math.cos(w * a) + c * math.sin(w * a)

    omegas = np.empty(count)
    parity = np.arange(count) % 2
    for n in range(count):
        f = odd if parity[n] else even
        lo, hi = n * math.pi, (n + 1) * math.pi
        flo, fhi = f(lo), f(hi)
        if flo == 0.0:
            omegas[n] = lo
            continue
        if np.sign(flo) == np.sign(fhi):
            raise KLBasisError(f"root bracket for eigenpair {n} does not change sign")
        omegas[n] = bisect(f, lo, hi, xtol=1e-300, rtol=ROOT_RTOL, maxiter=2000)
    eigenvalues = 2.0 * c * sigma2 / (omegas**2 + c**2)
    return eigenvalues, omegas, parity


def eval_1d_modes(x, omegas, parity) -> np.ndarray:
    """L2-normalized 1D eigenfunctions at points ``x``; shape ``(len(x), len(omegas))``."""
    x = np.asarray(x, dtype=float)[:, None] - 0.5
    w = np.asarray(omegas)[None, :]
    a = 0.5
    s = np.sin(2 * w * a) / (2 * w)
    odd = np.asarray(parity)[None, :] == 1
    norm2 = np.where(odd, a - s, a + s)
    vals = np.where(odd, np.sin(w * x), np.cos(w * x))
    return vals / np.sqrt(norm2)


@dataclass(eq=False)
class KLBasis:
    """Truncated KL basis.

    ``eigenvalues[n]`` belongs to the mode ``prod_k g_{index[n, k]}(x_k)`` where
    ``g_i`` are the unit-variance 1D eigenfunctions described by ``omegas`` and
    ``parity``.
    """

    spec: CovarianceSpec
    eigenvalues: np.ndarray
    index: np.ndarray
    omegas: np.ndarray
    parity: np.ndarray
    _mode_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_kl(self) -> int:
        return self.eigenvalues.size

    def eval_modes(self, points) -> np.ndarray:
        """Eigenfunctions ``f_n`` at points of shape ``(P, d)``; returns ``(P, n_kl)``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.spec.dim:
            pts = pts.reshape(-1, self.spec.dim)
        out = np.ones((pts.shape[0], self.n_kl))
        for k in range(self.spec.dim):
            g = eval_1d_modes(pts[:, k], self.omegas, self.parity)
            out *= g[:, self.index[:, k]]
        return out

    def scaled_modes(self, hierarchy: GridHierarchy, level: int) -> np.ndarray:
        """``sqrt(theta_n) f_n`` at the cell centers of ``level``, shape ``(m**d, n_kl)``."""
        key = (hierarchy.m0, hierarchy.dim, hierarchy.m(level))
        modes = self._mode_cache.get(key)
        if modes is None:
            if hierarchy.dim != self.spec.dim:
                raise ValueError("hierarchy and covariance have different dimensions")
            x = hierarchy.centers_1d(level)
            g = eval_1d_modes(x, self.omegas, self.parity) * 1.0
            sq = np.sqrt(self.eigenvalues)
            if self.spec.dim == 1:
                modes = g[:, self.index[:, 0]] * sq
            else:
                # rows ordered i2 * m + i1 (x1 fastest)
                g1 = g[:, self.index[:, 0]]
                g2 = g[:, self.index[:, 1]]
                modes = (g2[:, None, :] * g1[None, :, :]).reshape(-1, self.n_kl) * sq
            modes = np.ascontiguousarray(modes)
            self._mode_cache[key] = modes
        return modes

    def pointwise_variance(self, points) -> np.ndarray:
        f = self.eval_modes(points)
        return (f**2) @ self.eigenvalues

    def covariance(self, x, y) -> np.ndarray:
        return (self.eval_modes(x) * self.eval_modes(y)) @ self.eigenvalues

    def captured_fraction(self) -> float:
        """Share of the total field variance ``sigma2 * |D|`` kept by the truncation."""
        return float(self.eigenvalues.sum() / self.spec.sigma2)


def build_basis(
    spec: CovarianceSpec,
    truncation: str = "tensor",
    pool_size: int | None = None,
    margin: int = 8,
) -> KLBasis:
    """Build ``n_kl`` KL terms, sorted by eigenvalue with a lexicographic tie-break.

    In 2D the candidates are products of two 1D eigenvalues taken from a pool
    of the ``P`` largest per axis.

    ``truncation="tensor"`` uses ``P = ceil(sqrt(n_kl))`` (or ``pool_size``)
    and keeps the ``n_kl`` largest products from that square index set.

    ``truncation="certified"`` keeps the globally largest ``n_kl`` products.
    The pool starts at ``ceil(sqrt(n_kl)) + margin`` and doubles until
    ``theta_0 * theta_P`` (the largest product needing an index outside the
    pool) is strictly below the smallest retained product. An explicit
    ``pool_size`` that cannot certify raises :class:`KLBasisError`.
    """
    if truncation not in ("tensor", "certified"):
        raise ValueError(f"unknown truncation {truncation!r}")
    if spec.dim == 1:
        lam1, om, par = solve_1d_eigenpairs(spec.sigma2, spec.lam, spec.n_kl)
        return KLBasis(spec, lam1, np.arange(spec.n_kl)[:, None], om, par)

    side = math.isqrt(spec.n_kl - 1) + 1
    if truncation == "tensor":
        pool = pool_size or side
        if pool * pool < spec.n_kl:
            raise KLBasisError(f"1D pool of {pool} eigenpairs has fewer than {spec.n_kl} products")
    else:
        pool = pool_size or side + margin
    while True:
        unit, om, par = solve_1d_eigenpairs(1.0, spec.lam, pool + 1)
        theta = unit[:pool]
        prod = np.multiply.outer(theta, theta).ravel()
        ii, jj = np.divmod(np.arange(pool * pool), pool)
        order = np.lexsort((jj, ii, -prod))[: spec.n_kl]
        if truncation == "tensor" or (
            order.size == spec.n_kl and unit[0] * unit[pool] < prod[order[-1]]
        ):
            break
        if pool_size is not None:
            raise KLBasisError(
                f"1D pool of {pool_size} eigenpairs cannot certify the top {spec.n_kl} products"
            )
        pool *= 2
    idx = np.column_stack([ii[order], jj[order]])
    return KLBasis(spec, spec.sigma2 * prod[order], idx, om[:pool], par[:pool])


def draw_xi(key: SampleKey, n: int) -> np.ndarray:
    """Standard-normal vector for one key; a pure function of ``(base_seed, index, stream)``."""
    bitgen = np.random.Philox(key=key.base_seed, counter=[0, 0, key.stream, key.index])
    return np.random.Generator(bitgen).standard_normal(n)


def draw_xi_block(base_seed: int, indices, n: int, stream: int = 0) -> np.ndarray:
    """Stack of :func:`draw_xi` vectors for several indices, shape ``(len(indices), n)``."""
    out = np.empty((len(indices), n))
    for row, idx in enumerate(indices):
        out[row] = draw_xi(SampleKey(base_seed, int(idx), stream), n)
    return out


def sample_gaussian_field(
    basis: KLBasis, key: SampleKey, hierarchy: GridHierarchy, level: int
) -> GridFunction:
    """Truncated KL realization of the log-field at the cell centers of ``level``.

    The random coefficients depend on ``key`` only, so the same key gives the
    same continuous realization on every level.
    """
    hierarchy.check_level(level)
    xi = draw_xi(key, basis.n_kl)
    return GridFunction(level, basis.scaled_modes(hierarchy, level) @ xi)


def evaluate_gaussian_field(basis: KLBasis, key: SampleKey, points) -> np.ndarray:
    """Truncated series evaluated at arbitrary points."""
    xi = draw_xi(key, basis.n_kl)
    return basis.eval_modes(points) @ (np.sqrt(basis.eigenvalues) * xi)


def lognormal_field(z: GridFunction) -> GridFunction:
    return GridFunction(z.level, np.exp(z.values))

"""Multilevel Monte Carlo estimation of reduced gradients and Hessian-vector products.

A gradient sample at level ``l`` for realization ``j`` of an ordered sample set
is ``beta * p_j`` where ``p_j`` solves the adjoint equation with right-hand side

    2 (y_j - y_D) + gamma (2 y_j - y_{j+1} - y_{j-1})      (chain sampler)
    2 (y_j - y_D) + gamma (y_j - y'_j)                      (two-set sampler)

with circular wrap inside the set. The chain form is the exact gradient of the
sampled cost ``mean |y_j - y_D|^2 + gamma / (2n) sum |y_j - y_{j-1}|^2``, so
estimates built from a frozen set are gradients of :meth:`MLMCEstimator.evaluate_cost`.
"""

from __future__ import annotations

import hashlib
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .field_sampler import KLBasis, SampleKey, build_basis, draw_xi
from .grid import GridFunction, GridHierarchy
from .pde import assemble_band, factor_band, newton_batch
from .problem import ProblemSpec

SAMPLERS = ("chain", "twoset")
STOPPING = ("inf", "split")
COST_MODELS = ("dof", "measured")


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of the sampling algorithm.

    ``variance_floor`` is the factor of the raw variance that the
    covariance-corrected variance may not drop below. ``stopping="split"``
    replaces the measured stochastic error by ``theta_split * eps**2`` in the
    stopping test. Convergence is only tested once ``min_fit_levels``
    correction levels exist (or ``L_bar`` is reached); ``rho_prior`` covers
    fits with a single level.

    ``warmup="cost"`` floors the coarser counts at
    ``n_init * sqrt(C_L / C_l)`` whenever level ``L`` is opened, the optimal
    allocation when all level variances are taken equal; ``"flat"`` uses
    ``n_init`` on the new level only.
    """

    n_init: int = 20
    warmup: str = "cost"
    min_fit_levels: int = 2
    theta_split: float = 0.5
    variance_floor: float = 0.5
    lags: int = 2
    sampler: str = "chain"
    stopping: str = "inf"
    cost_model: str = "dof"
    kappa: float = 2.26
    rho_prior: float = 2.0
    max_rounds: int = 20
    block_elems: int = 2**17
    cache_mb: float = 512.0
    truncation: str = "tensor"

    def __post_init__(self):
        if self.n_init < 2:
            raise ValueError("n_init must be at least 2")
        if not 0 < self.theta_split < 1:
            raise ValueError("theta_split must lie in (0, 1)")
        if not 0 <= self.variance_floor <= 1:
            raise ValueError("variance_floor must lie in [0, 1]")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.stopping not in STOPPING:
            raise ValueError(f"stopping must be one of {STOPPING}")
        if self.cost_model not in COST_MODELS:
            raise ValueError(f"cost_model must be one of {COST_MODELS}")
        if self.lags < 0:
            raise ValueError("lags must be nonnegative")
        if self.warmup not in ("cost", "flat"):
            raise ValueError("warmup must be 'cost' or 'flat'")
        if self.min_fit_levels < 1:
            raise ValueError("min_fit_levels must be at least 1")


# statistics


@dataclass
class LevelStats:
    """Sample statistics of the corrections ``Y_l`` on one level (fields at level ``l``)."""

    level: int
    n: int
    mean: np.ndarray
    variance: np.ndarray
    lag_cov: np.ndarray
    cost: float

    @property
    def mean_norm(self) -> float:
        return float(np.max(np.abs(self.mean)))


def circular_lag_covariance(Y: np.ndarray, lag: int) -> np.ndarray:
    """Pointwise ``(1/n) sum_j (Y_j - mean)(Y_{j+lag} - mean)`` with circular indexing."""
    D = Y - Y.mean(axis=0)
    return (D * np.roll(D, -lag, axis=0)).mean(axis=0)


def level_stats(Y: np.ndarray, level: int, cost: float, lags: int = 2) -> LevelStats:
    n = Y.shape[0]
    var = Y.var(axis=0, ddof=1) if n > 1 else np.zeros(Y.shape[1])
    covs = [circular_lag_covariance(Y, k) if n > 2 * k else np.zeros(Y.shape[1]) for k in range(1, lags + 1)]
    lag_cov = np.array(covs).reshape(lags, Y.shape[1])
    return LevelStats(level, n, Y.mean(axis=0), var, lag_cov, float(cost))


def corrected_variance(stats: LevelStats, floor: float = 0.5) -> np.ndarray:
    """``max(floor * V, V + 2 * sum(lag covariances))`` pointwise."""
    if stats.n < 2:
        raise EstimatorError(f"level {stats.level}: corrected variance needs at least 2 samples")
    var = np.asarray(stats.variance, dtype=float)
    return np.maximum(floor * var, var + 2.0 * np.sum(stats.lag_cov, axis=0))


def allocate_samples(variances, costs, eps: float, theta_split: float = 0.5, current=None) -> np.ndarray:
    """Sample counts per level from pointwise variance fields that share one grid.

    ``n_l = max_x ceil( sqrt(V_l(x) / C_l) * sum_i sqrt(V_i(x) C_i) / (theta_split eps**2) )``,
    never below ``current``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    costs = np.asarray(costs, dtype=float)
    if np.any(costs <= 0) or not np.all(np.isfinite(costs)):
        raise EstimatorError("sample costs must be positive")
    V = np.atleast_2d(np.asarray(variances, dtype=float))
    V = np.maximum(V, 0.0)
    total = np.sum(np.sqrt(V * costs[:, None]), axis=0)
    ideal = np.sqrt(V / costs[:, None]) * total / (theta_split * eps**2)
    # guard against 4.000000000001 rounding up to 5
    n = np.ceil(ideal.max(axis=1) * (1.0 - 1e-12)).astype(np.int64)
    if current is not None:
        n = np.maximum(n, np.asarray(current, dtype=np.int64))
    return n


def estimate_rho_bias(mean_norms, levels=None, rho_prior: float = 2.0):
    """Fit ``log2 |E Y_l|_inf ~ c - rho l`` over correction levels ``l >= 1``.

    Returns ``(rho, bias_bound, decays)``. With a single level ``rho_prior`` is
    used. A nonpositive fitted rate gives ``decays=False`` and an infinite bias.
    """
    norms = np.asarray(mean_norms, dtype=float)
    if norms.size == 0:
        raise ValueError("need at least one correction level")
    if levels is None:
        levels = np.arange(1, norms.size + 1)
    levels = np.asarray(levels, dtype=float)
    last = norms[-1]
    if norms.size == 1:
        rho = rho_prior
    else:
        if np.any(norms <= 0):
            # exact zeros: no measurable bias
            if last == 0.0:
                return rho_prior, 0.0, True
            norms = np.maximum(norms, np.finfo(float).tiny)
        rho = -np.polyfit(levels, np.log2(norms), 1)[0]
    if not rho > 0:
        return float(rho), math.inf, False
    return float(rho), float(last / (2.0**rho - 1.0)), True


# scalar variance estimators


def v1_estimator(samples: np.ndarray) -> np.ndarray:
    """Shifted-difference variance estimate ``(1/2n) sum (y_j - y_{j-1})**2`` along axis 0."""
    s = np.asarray(samples, dtype=float)
    return 0.5 * np.mean((s - np.roll(s, 1, axis=0)) ** 2, axis=0)


def v1_gradient_samples(samples: np.ndarray) -> np.ndarray:
    """Per-sample gradient ``2 y_j - y_{j+1} - y_{j-1}`` of the shifted estimator."""
    s = np.asarray(samples, dtype=float)
    return 2.0 * s - np.roll(s, -1, axis=0) - np.roll(s, 1, axis=0)


def two_set_estimator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Paired-set variance estimate ``(1/2n) sum (y_j - y'_j)**2`` along axis 0."""
    return 0.5 * np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2, axis=0)


def robust_cost(states: np.ndarray, target: np.ndarray, gamma: float, alpha: float = 0.0, u=None) -> float:
    """``mean_j |y_j - y_D|^2 + gamma |std y|^2 + alpha |u|^2`` on an empirical ensemble."""
    Y = np.asarray(states, dtype=float)
    track = np.mean(np.mean((Y - target) ** 2, axis=1))
    std2 = np.mean(Y.var(axis=0))
    reg = 0.0 if u is None else alpha * float(np.mean(np.asarray(u) ** 2))
    return float(track + gamma * std2 + reg)


def average_cost(states: np.ndarray, target: np.ndarray, gamma: float, alpha: float = 0.0, u=None) -> float:
    """``|mean y - y_D|^2 + gamma |std y|^2 + alpha |u|^2``; equals the robust form at ``gamma - 1``."""
    Y = np.asarray(states, dtype=float)
    ybar = Y.mean(axis=0)
    std2 = np.mean(np.mean((Y - ybar) ** 2, axis=0))
    reg = 0.0 if u is None else alpha * float(np.mean(np.asarray(u) ** 2))
    return float(np.mean((ybar - target) ** 2) + gamma * std2 + reg)


# frozen sets and reports


@dataclass(frozen=True)
class FrozenLevel:
    level: int
    seed: int
    n: int


@dataclass(frozen=True)
class FrozenSampleSet:
    """Seeds and counts that determine an estimator completely.

    Level ``l`` uses the sample keys ``(seed, 0) .. (seed, n - 1)``.
    """

    levels: tuple
    eps: float
    sampler: str = "chain"

    @property
    def L(self) -> int:
        return len(self.levels) - 1

    @property
    def counts(self) -> list:
        return [lv.n for lv in self.levels]

    def to_text(self) -> str:
        lines = [
            "# frozen sample set",
            f"eps={self.eps!r}",
            f"L={self.L}",
            f"sampler={self.sampler}",
            "level,seed,count",
        ]
        lines += [f"{lv.level},{lv.seed},{lv.n}" for lv in self.levels]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> FrozenSampleSet:
        meta, rows = {}, []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line == "level,seed,count":
                continue
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
            else:
                lvl, seed, n = (int(x) for x in line.split(","))
                rows.append(FrozenLevel(lvl, seed, n))
        if [r.level for r in rows] != list(range(len(rows))):
            raise ValueError("frozen set levels must be 0..L in order")
        if "L" in meta and int(meta["L"]) != len(rows) - 1:
            raise ValueError("frozen set L does not match its level rows")
        if any(r.n < 1 for r in rows):
            raise ValueError("every level needs at least one sample")
        return cls(tuple(rows), float(meta["eps"]), meta.get("sampler", "chain"))


@dataclass
class EstimateReport:
    estimate: GridFunction
    rmse_bound: float
    counts: list
    rho: float
    bias: float
    stochastic: float
    converged: bool
    frozen: FrozenSampleSet
    stats: list = field(default_factory=list)
    contributions: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.counts) - 1


# the estimator


class _BlockFactors:
    """Factorizations of a sequence of row chunks, addressable by row position."""

    def __init__(self, chunks):
        self.chunks = chunks  # list of (start, stop, factor)

    def solve(self, rows: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        out = np.empty_like(rhs)
        for start, stop, fac in self.chunks:
            sel = np.flatnonzero((rows >= start) & (rows < stop))
            if sel.size == 0:
                continue
            local = rows[sel] - start
            if sel.size == stop - start and np.array_equal(local, np.arange(stop - start)):
                out[sel] = fac.solve(rhs[sel])
            else:
                out[sel] = fac.take(local).solve(rhs[sel])
        return out

    @property
    def nbytes(self) -> int:
        return sum(f.nbytes for _, _, f in self.chunks)


class MLMCEstimator:
    """Sampling machinery for one problem.

    ``master_seed`` determines every fresh sample set: the ``k``-th call of
    :meth:`run_estimator` draws level ``l`` seeds from
    ``SeedSequence(master_seed, spawn_key=(k, l))``.
    """

    def __init__(self, problem: ProblemSpec, config: EstimatorConfig | None = None,
                 master_seed: int = 0, basis: KLBasis | None = None):
        self.problem = problem
        self.config = config or EstimatorConfig()
        self.master_seed = int(master_seed)
        self.hierarchy: GridHierarchy = problem.hierarchy
        if problem.covariance is not None and basis is None:
            basis = _cached_basis(problem.covariance, self.config.truncation)
        self.basis = basis
        H = self.hierarchy
        self._target = [problem.target.on(H, l).values for l in H.levels]
        self._beta = [problem.beta.on(H, l).values for l in H.levels]
        self.calls = 0
        self.work = 0.0
        self.solves = 0
        self._timing = {}
        self._cache: OrderedDict = OrderedDict()
        self._cache_bytes = 0

    # low level sampling

    @property
    def gamma(self) -> float:
        return self.problem.gamma

    @property
    def _chain(self) -> bool:
        return self.config.sampler == "chain" and self.gamma > 0

    @property
    def _paired(self) -> bool:
        return self.config.sampler == "twoset" and self.gamma > 0

    def conductivities(self, level: int, seed: int, indices, stream: int = 0) -> np.ndarray:
        N = self.hierarchy.size(level)
        if self.basis is None:
            return np.ones((len(indices), N))
        modes = self.basis.scaled_modes(self.hierarchy, level)
        z = np.empty((len(indices), N))
        for row, j in enumerate(indices):
            z[row] = modes @ draw_xi(SampleKey(seed, int(j), stream), self.basis.n_kl)
        return np.exp(z)

    def _chunk(self, level: int) -> int:
        return int(max(8, min(512, self.config.block_elems // self.hierarchy.size(level))))

    def _states(self, level: int, seed: int, stream: int, indices: np.ndarray, v: np.ndarray, full: bool):
        """States and (Jacobian) factorizations for sample ``indices`` at grid ``level``."""
        reaction = self.problem.reaction
        key = None
        if full:
            key = (level, seed, stream, len(indices))
            if reaction is not None:
                key = key + (hashlib.sha1(v.tobytes()).hexdigest(),)
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                facs, Y = hit
                if Y is not None:
                    return Y, facs
                return self._linear_states(level, facs, indices, v), facs
        H = self.hierarchy
        w = H.h(level) ** H.dim
        src = self._beta[level] * v
        chunk = self._chunk(level)
        Y = np.empty((len(indices), H.size(level)))
        chunks = []
        for start in range(0, len(indices), chunk):
            stop = min(start + chunk, len(indices))
            band = assemble_band(self.conductivities(level, seed, indices[start:stop], stream), H, level)
            if reaction is None:
                fac = factor_band(band)
                Y[start:stop] = fac.solve(np.broadcast_to(w * src, (stop - start, src.size)))
            else:
                Y[start:stop], fac, _, _ = newton_batch(band, w, np.broadcast_to(src, (stop - start, src.size)), reaction)
            chunks.append((start, stop, fac))
        facs = _BlockFactors(chunks)
        self.solves += len(indices)
        if key is not None:
            self._store(key, facs, Y if reaction is not None else None)
        return Y, facs

    def _linear_states(self, level, facs, indices, v):
        w = self.hierarchy.h(level) ** self.hierarchy.dim
        rhs = np.broadcast_to(w * self._beta[level] * v, (len(indices), v.size)).copy()
        self.solves += len(indices)
        return facs.solve(np.arange(len(indices)), rhs)

    def _store(self, key, facs, Y):
        size = facs.nbytes + (0 if Y is None else Y.nbytes)
        budget = self.config.cache_mb * 2**20
        if size > budget:
            return
        self._cache[key] = (facs, Y)
        self._cache_bytes += size
        while self._cache_bytes > budget:
            _, (f, y) = self._cache.popitem(last=False)
            self._cache_bytes -= f.nbytes + (0 if y is None else y.nbytes)

    def clear_cache(self):
        self._cache.clear()
        self._cache_bytes = 0

    def level_samples(self, level: int, seed: int, n: int, v: np.ndarray, idx=None,
                      dv: np.ndarray | None = None, want_cost: bool = False) -> dict:
        """Per-sample quantities at grid ``level`` for the ordered set ``(seed, n)``.

        Returns a dict with ``q`` (gradient samples ``beta p_j``), ``dq`` (Hessian
        samples ``beta dp_j``, when ``dv`` is given), ``track`` and ``spread``
        (per-sample ``|y_j - y_D|^2`` and variance-term contributions, when
        ``want_cost``) and ``y`` (states), all for the rows ``idx``.
        """
        t0 = time.perf_counter()
        H = self.hierarchy
        full = idx is None
        idx = np.arange(n) if full else np.asarray(idx, dtype=np.int64)
        v = np.asarray(v, dtype=float)
        gamma = self.gamma
        if self._chain and n > 1:
            win = np.arange(n) if full else np.unique(np.concatenate([idx, (idx - 1) % n, (idx + 1) % n]))
        else:
            win = idx if full else np.unique(idx)
        Y, F = self._states(level, seed, 0, win, v, full)
        ip = np.searchsorted(win, idx)
        y = Y[ip]
        if self._chain and n > 1:
            y_next = Y[np.searchsorted(win, (idx + 1) % n)]
            y_prev = Y[np.searchsorted(win, (idx - 1) % n)]
        else:
            y_next = y_prev = y
        if self._paired:
            Yp, Fp = self._states(level, seed, 1, idx, v, full)
        w = H.h(level) ** H.dim
        target = self._target[level]
        beta = self._beta[level]
        out = {"y": y}

        need_adjoint = dv is None or self.problem.reaction is not None
        p = None
        if need_adjoint:
            rhs = 2.0 * (y - target)
            if gamma > 0:
                rhs += gamma * ((2.0 * y - y_next - y_prev) if self._chain else (y - Yp))
            p = F.solve(ip, w * rhs)
            self.solves += len(idx)
            if self._paired:
                # the paired set enters the sampled variance too, so it gets its own adjoint
                pp = Fp.solve(np.arange(len(idx)), w * gamma * (Yp - y))
                self.solves += len(idx)
            if dv is None:
                out["q"] = beta * (p + pp) if self._paired else beta * p
        if dv is not None:
            dsrc = np.broadcast_to(w * beta * np.asarray(dv, float), Y.shape).copy()
            dY = F.solve(np.arange(len(win)), dsrc)
            dy = dY[ip]
            rhs = 2.0 * dy
            if gamma > 0:
                if self._chain:
                    if n > 1:
                        rhs += gamma * (2.0 * dy - dY[np.searchsorted(win, (idx + 1) % n)]
                                        - dY[np.searchsorted(win, (idx - 1) % n)])
                else:
                    dYp = Fp.solve(np.arange(len(idx)), dsrc[: len(idx)])
                    rhs += gamma * (dy - dYp)
            if self.problem.reaction is not None:
                rhs -= self.problem.reaction.d2f(y) * p * dy
            out["dq"] = beta * F.solve(ip, w * rhs)
            self.solves += len(win) + len(idx)
            if self._paired:
                rhs_p = gamma * (dYp - dy)
                if self.problem.reaction is not None:
                    rhs_p -= self.problem.reaction.d2f(Yp) * pp * dYp
                out["dq"] += beta * Fp.solve(np.arange(len(idx)), w * rhs_p)
                self.solves += len(idx)
        if want_cost:
            out["track"] = np.mean((y - target) ** 2, axis=1)
            if gamma == 0:
                out["spread"] = np.zeros(len(idx))
            elif self._chain:
                out["spread"] = 0.5 * np.mean((y - y_prev) ** 2, axis=1)
            else:
                out["spread"] = 0.5 * np.mean((y - Yp) ** 2, axis=1)
        self.work += len(idx) * H.size(level)
        self._timing.setdefault(level, [0.0, 0])
        self._timing[level][0] += time.perf_counter() - t0
        self._timing[level][1] += len(idx)
        return out

    def _controls(self, u: np.ndarray, L: int) -> list:
        H = self.hierarchy
        out = [None] * (L + 1)
        cur = np.asarray(u, dtype=float)
        for l in range(H.L_bar, -1, -1):
            if l <= L:
                out[l] = cur
            if l > 0:
                cur = H.restrict_array(cur, l)
        return out

    def corrections(self, level: int, seed: int, n: int, controls: list, idx=None,
                    dcontrols: list | None = None, kind: str = "q") -> np.ndarray:
        """Samples of ``Y_l = Q_l - P Q_{l-1}`` (``kind="q"`` gradient, ``"dq"`` Hessian)."""
        H = self.hierarchy
        dv = None if dcontrols is None else dcontrols[level]
        fine = self.level_samples(level, seed, n, controls[level], idx, dv)[kind]
        if level == 0:
            return fine
        dvc = None if dcontrols is None else dcontrols[level - 1]
        coarse = self.level_samples(level - 1, seed, n, controls[level - 1], idx, dvc)[kind]
        return fine - H.prolong_array(coarse, level - 1)

    # cost model

    def level_cost(self, level: int) -> float:
        if self.config.cost_model == "measured" and level in self._timing and self._timing[level][1]:
            per = self._timing[level][0] / self._timing[level][1]
            coarse = self._timing.get(level - 1, [0.0, 1])
            return per + (coarse[0] / max(coarse[1], 1) if level > 0 else 0.0)
        m = self.hierarchy.m(level)
        c = m**self.config.kappa
        if level > 0:
            c += (m // 2) ** self.config.kappa
        return float(c)

    # adaptive estimator loop

    def _level_seed(self, call: int, level: int) -> int:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(call, level))
        return int(ss.generate_state(1, np.uint64)[0])

    def _stochastic(self, stats: list) -> tuple:
        H = self.hierarchy
        floor = self.config.variance_floor
        V = []
        for st in stats:
            corr = corrected_variance(st, floor) if self._chain else np.asarray(st.variance)
            V.append(H.transfer_array(corr, st.level, H.L_bar))
        V = np.array(V)
        n = np.array([st.n for st in stats], dtype=float)
        return V, float(np.max(np.sum(V / n[:, None], axis=0)))

    def _bias(self, stats: list):
        if len(stats) < 2:
            return self.config.rho_prior, 0.0, True
        return estimate_rho_bias([st.mean_norm for st in stats[1:]], rho_prior=self.config.rho_prior)

    def run_estimator(self, u, eps: float) -> EstimateReport:
        """Adaptive estimate of the reduced gradient at ``u`` (values on level ``L_bar``)."""
        if not eps > 0:
            raise ValueError("eps must be positive")
        cfg = self.config
        H = self.hierarchy
        u = _values(u, H.size(H.L_bar))
        call = self.calls
        self.calls += 1
        controls = self._controls(u, H.L_bar)
        seeds, Ys = [], []
        converged = False
        rho, bias, stoch = cfg.rho_prior, math.inf, math.inf
        for L in range(H.L_bar + 1):
            seeds.append(self._level_seed(call, L))
            Ys.append(self.corrections(L, seeds[L], cfg.n_init, controls, np.arange(cfg.n_init)))
            if cfg.warmup == "cost":
                for l in range(L):
                    floor = math.ceil(cfg.n_init * math.sqrt(self.level_cost(L) / self.level_cost(l)) - 1e-9)
                    if floor > Ys[l].shape[0]:
                        Ys[l] = self._top_up(l, seeds[l], Ys[l], floor, controls)
            for _ in range(cfg.max_rounds):
                stats = [level_stats(Ys[l], l, self.level_cost(l), cfg.lags if self._chain else 0) for l in range(L + 1)]
                V, stoch = self._stochastic(stats)
                have = [Y.shape[0] for Y in Ys]
                want = allocate_samples(V, [s.cost for s in stats], eps, cfg.theta_split, have)
                if np.all(want <= have):
                    break
                for l in range(L + 1):
                    if want[l] > have[l]:
                        Ys[l] = self._top_up(l, seeds[l], Ys[l], int(want[l]), controls)
            stats = [level_stats(Ys[l], l, self.level_cost(l), cfg.lags if self._chain else 0) for l in range(L + 1)]
            _, stoch = self._stochastic(stats)
            if L < min(cfg.min_fit_levels, H.L_bar):
                continue
            rho, bias, decays = self._bias(stats)
            if not decays:
                continue
            first = cfg.theta_split * eps**2 if cfg.stopping == "split" else stoch
            if first + bias**2 <= eps**2:
                converged = True
                break
        if H.L_bar == 0:
            bias = 0.0
            converged = stoch <= eps**2
        L = len(Ys) - 1
        contributions = [H.transfer_array(st.mean, st.level, H.L_bar) for st in stats]
        g = np.sum(contributions, axis=0) + 2.0 * self.problem.alpha * u
        frozen = FrozenSampleSet(tuple(FrozenLevel(l, seeds[l], Ys[l].shape[0]) for l in range(L + 1)), eps, cfg.sampler)
        return EstimateReport(
            estimate=GridFunction(H.L_bar, g),
            rmse_bound=math.sqrt(stoch + bias**2),
            counts=[Y.shape[0] for Y in Ys],
            rho=rho,
            bias=bias,
            stochastic=stoch,
            converged=converged,
            frozen=frozen,
            stats=stats,
            contributions=contributions,
        )

    def _top_up(self, level, seed, Y, n_new, controls):
        n_old = Y.shape[0]
        new = np.arange(n_old, n_new)
        redo = np.array([0, n_old - 1]) if self._chain else np.array([], dtype=np.int64)
        redo = np.unique(redo)
        idx = np.concatenate([redo, new])
        vals = self.corrections(level, seed, n_new, controls, idx)
        out = np.empty((n_new, Y.shape[1]))
        out[:n_old] = Y
        out[idx] = vals
        return out

    # replay on frozen sets

    def replay_gradient(self, frozen: FrozenSampleSet, u):
        """Gradient from the frozen samples and the RMSE bound they imply at ``u``."""
        H = self.hierarchy
        u = _values(u, H.size(H.L_bar))
        controls = self._controls(u, frozen.L)
        stats = []
        g = 2.0 * self.problem.alpha * u
        for lv in frozen.levels:
            Y = self.corrections(lv.level, lv.seed, lv.n, controls)
            st = level_stats(Y, lv.level, self.level_cost(lv.level), self.config.lags if self._chain else 0)
            stats.append(st)
            g = g + H.transfer_array(st.mean, lv.level, H.L_bar)
        if all(st.n >= 2 for st in stats):
            _, stoch = self._stochastic(stats)
        else:
            stoch = math.inf
        bias = 0.0 if frozen.L == 0 else self._bias(stats)[1]
        return GridFunction(H.L_bar, g), math.sqrt(stoch + bias**2)

    def replay_hessian_vector(self, frozen: FrozenSampleSet, u, du) -> GridFunction:
        H = self.hierarchy
        u = _values(u, H.size(H.L_bar))
        du = _values(du, H.size(H.L_bar))
        controls = self._controls(u, frozen.L)
        dcontrols = self._controls(du, frozen.L)
        hv = 2.0 * self.problem.alpha * du
        for lv in frozen.levels:
            Y = self.corrections(lv.level, lv.seed, lv.n, controls, dcontrols=dcontrols, kind="dq")
            hv = hv + H.transfer_array(Y.mean(axis=0), lv.level, H.L_bar)
        return GridFunction(H.L_bar, hv)

    def level_cost_value(self, level: int, seed: int, n: int, v) -> float:
        """Sampled cost ``mean |y_j - y_D|^2 + gamma * variance estimate`` at grid ``level``."""
        s = self.level_samples(level, seed, n, np.asarray(v, float), want_cost=True)
        return float(np.mean(s["track"]) + self.gamma * np.mean(s["spread"]))

    def evaluate_cost(self, frozen: FrozenSampleSet, u) -> float:
        """Telescoping cost whose gradient is :meth:`replay_gradient`."""
        H = self.hierarchy
        u = _values(u, H.size(H.L_bar))
        controls = self._controls(u, frozen.L)
        total = self.problem.alpha * float(np.mean(u**2))
        for lv in frozen.levels:
            total += self.level_cost_value(lv.level, lv.seed, lv.n, controls[lv.level])
            if lv.level > 0:
                total -= self.level_cost_value(lv.level - 1, lv.seed, lv.n, controls[lv.level - 1])
        return total

    def deterministic_gradient(self, u, level: int) -> GridFunction:
        """Single-realization (k = 1) gradient at ``level``, prolonged to ``L_bar``."""
        H = self.hierarchy
        controls = self._controls(_values(u, H.size(H.L_bar)), H.L_bar)
        saved = self.basis
        self.basis = None
        try:
            q = self.level_samples(level, 0, 1, controls[level])["q"][0]
        finally:
            self.basis = saved
        g = H.transfer_array(q, level, H.L_bar) + 2.0 * self.problem.alpha * controls[H.L_bar]
        return GridFunction(H.L_bar, g)

    def state_moments(self, u, level: int, n: int, seed: int | None = None):
        """Sample mean and variance of the state at ``level`` from ``n`` fresh realizations."""
        H = self.hierarchy
        controls = self._controls(_values(u, H.size(H.L_bar)), H.L_bar)
        if seed is None:
            seed = self._level_seed(self.calls, level)
            self.calls += 1
        y = self.level_samples(level, seed, n, controls[level])["y"]
        return y.mean(axis=0), y.var(axis=0, ddof=1) if n > 1 else np.zeros(y.shape[1])


_BASES: dict = {}


def _cached_basis(spec, truncation) -> KLBasis:
    key = (spec, truncation)
    if key not in _BASES:
        _BASES[key] = build_basis(spec, truncation=truncation)
    return _BASES[key]


def _values(u, size) -> np.ndarray:
    vals = u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)
    if vals.shape != (size,):
        raise ValueError(f"control has shape {vals.shape}, expected ({size},)")
    return vals


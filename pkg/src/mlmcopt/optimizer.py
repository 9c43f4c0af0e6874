"""Sample-refreshing NCG and Newton-CG on multilevel gradient estimates.

Both optimizers alternate between fresh estimates, which draw a new frozen sample
set at a requested RMSE, and replays on the current frozen set. Convergence
is only accepted after a gradient from newly drawn samples passes the
tolerance.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import GridFunction
from .mlmc_estimator import EstimateReport, MLMCEstimator


class LineSearchError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    tau: float
    q: float = 1.0
    eta: float = 0.2
    eps0: float = 1e-2
    k_max: int = 200
    s_init: float = 1.0
    refresh: bool = True
    cg_max_iter: int = 500

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.q > 0:
            raise ValueError("q must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if not self.s_init > 0:
            raise ValueError("s_init must be positive")


TRACE_COLUMNS = ["k_or_i", "phase", "grad_or_res_norm", "epsilon", "refreshed", "counts", "wall_s", "work_dof"]


@dataclass
class IterationRecord:
    """One line of the optimizer trace.

    ``phase`` is ``ncg``, ``newton``, ``cg`` (inner residual), ``check``
    (fresh-sample convergence test) or ``linesearch``.
    """

    index: int
    phase: str
    norm: float
    eps: float
    refreshed: bool
    counts: tuple
    wall: float
    work: float

    def row(self, n_levels: int) -> list:
        counts = list(self.counts) + [""] * (n_levels - len(self.counts))
        return [self.index, self.phase, repr(self.norm), repr(self.eps), int(self.refreshed), *counts,
                f"{self.wall:.6f}", repr(self.work)]


def trace_to_csv(records, n_levels: int, header: dict | None = None) -> str:
    """CSV with columns ``k_or_i, phase, grad_or_res_norm, epsilon, refreshed, n0..nL, wall_s, work_dof``.

    ``header`` entries are written as leading ``# key=value`` comment lines.
    """
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k_or_i", "phase", "grad_or_res_norm", "epsilon", "refreshed",
                *[f"n{l}" for l in range(n_levels)], "wall_s", "work_dof"])
    for rec in records:
        w.writerow(rec.row(n_levels))
    return buf.getvalue()


@dataclass
class RefreshRow:
    """Sampling summary each time a new sample set is drawn."""

    index: int
    phase: str
    eps: float
    counts: list
    rho: float
    seconds: float
    converged: bool
    max_variance: list


@dataclass
class OptimizeResult:
    u: GridFunction
    converged: bool
    fresh_norm: float
    iterations: int
    trace: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)
    last_report: EstimateReport | None = None
    work: float = 0.0


def dy_beta(g_new: GridFunction, g_old: GridFunction, d_old: GridFunction):
    """Dai-Yuan coefficient, or ``None`` when the denominator vanishes (restart)."""
    num = _ip(g_new.values, g_new.values)
    den = _ip(d_old.values, g_new.values - g_old.values)
    if abs(den) < 1e-300:
        return None
    return num / den


def parabola_linesearch(dphi0: float, dphi_prev: float, s_prev: float, iteration: int | None = None) -> float:
    """Step minimizing the parabola through ``phi'(0)`` and ``phi'(s_prev)``.

    Falls back to ``s_prev`` when the measured curvature is not positive.
    """
    if not dphi0 < 0:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise LineSearchError(f"search direction is not a descent direction{where} (phi'(0)={dphi0})")
    if dphi_prev <= dphi0:
        return s_prev
    return s_prev * dphi0 / (dphi0 - dphi_prev)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residuals: list
    converged: bool
    negative_curvature: bool = False


def cg_solve(hessian_vector, rhs: np.ndarray, tol: float, max_iter: int = 500, callback=None) -> CGResult:
    """Conjugate gradients in the level inner product, starting from zero.

    ``hessian_vector`` maps a value array to a value array. Stops when the
    residual norm drops to ``tol``; aborts on nonpositive curvature.
    """
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = _ip(r, r)
    residuals = [math.sqrt(rr)]
    if callback:
        callback(0, residuals[0])
    if residuals[0] <= tol:
        return CGResult(x, 0, residuals, True)
    for i in range(1, max_iter + 1):
        Hp = np.asarray(hessian_vector(p), dtype=float)
        curv = _ip(p, Hp)
        if curv <= 0:
            return CGResult(x, i - 1, residuals, False, negative_curvature=True)
        a = rr / curv
        x = x + a * p
        r = r - a * Hp
        rr_new = _ip(r, r)
        residuals.append(math.sqrt(rr_new))
        if callback:
            callback(i, residuals[-1])
        if residuals[-1] <= tol:
            return CGResult(x, i, residuals, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, max_iter, residuals, False)


def _ip(a, b) -> float:
    return float(np.dot(a, b)) / a.size


def _norm(a) -> float:
    return math.sqrt(_ip(a, a))


class _Run:
    """Bookkeeping shared by both optimizers."""

    def __init__(self, estimator: MLMCEstimator, config: OptimizerConfig, log=None):
        self.est = estimator
        self.cfg = config
        self.t0 = time.perf_counter()
        self.work0 = estimator.work
        self.trace: list = []
        self.refreshes: list = []
        self.log = log

    def record(self, index, phase, norm, eps, refreshed, counts):
        rec = IterationRecord(index, phase, float(norm), float(eps), bool(refreshed), tuple(counts),
                              time.perf_counter() - self.t0, self.est.work - self.work0)
        self.trace.append(rec)
        if self.log:
            self.log(rec)

    def fresh(self, u, eps, index, phase) -> EstimateReport:
        t = time.perf_counter()
        rep = self.est.run_estimator(u, eps)
        maxvar = [float(np.max(s.variance)) for s in rep.stats]
        self.refreshes.append(RefreshRow(index, phase, eps, rep.counts, rep.rho, time.perf_counter() - t,
                                         rep.converged, maxvar))
        return rep

    def result(self, u, converged, fresh_norm, k, report):
        return OptimizeResult(GridFunction(self.est.hierarchy.L_bar, u), converged, fresh_norm, k,
                              self.trace, self.refreshes, report, self.est.work - self.work0)


def ncg_optimize(estimator: MLMCEstimator, config: OptimizerConfig, u0=None, log=None) -> OptimizeResult:
    """Nonlinear CG (Dai-Yuan) with parabola line search and sample refreshing.

    Without convergence after ``k_max`` steps the iterate with the smallest
    estimated gradient norm is returned, flagged non-converged.

    The line-search gradient at ``u + s_prev d`` uses the frozen set. A
    failed fresh-sample convergence check adopts the fresh samples as the new
    frozen set.
    """
    cfg = config
    H = estimator.hierarchy
    N = H.size(H.L_bar)
    u = np.zeros(N) if u0 is None else np.array(_vals(u0), dtype=float)
    run = _Run(estimator, cfg, log)
    eps = cfg.eps0
    rep = run.fresh(u, eps, 0, "ncg")
    g, frozen = rep.estimate.values, rep.frozen
    refreshed = True
    d_prev = g_prev = None
    s_prev = cfg.s_init
    fresh_norm = math.nan
    best = (math.inf, u)
    for k in range(cfg.k_max):
        gn = _norm(g)
        run.record(k, "ncg", gn, eps, refreshed, frozen.counts)
        if gn < best[0]:
            best = (gn, u)
        if gn <= cfg.tau:
            check = run.fresh(u, eps, k, "check")
            fresh_norm = _norm(check.estimate.values)
            run.record(k, "check", fresh_norm, eps, True, check.frozen.counts)
            if fresh_norm <= cfg.tau:
                return run.result(u, True, fresh_norm, k, check)
            g, frozen, rep = check.estimate.values, check.frozen, check
            gn = fresh_norm
            d_prev = g_prev = None
        beta = None if d_prev is None else dy_beta(_gf(g), _gf(g_prev), _gf(d_prev))
        d = -g if beta is None else -g + beta * d_prev
        if _ip(g, d) >= 0:
            d = -g
        dphi0 = _ip(g, d)
        g_trial, _ = estimator.replay_gradient(frozen, u + s_prev * d)
        s = parabola_linesearch(dphi0, _ip(g_trial.values, d), s_prev, k)
        u = u + s * d
        s_prev = s
        d_prev, g_prev = d, g
        if cfg.refresh and (eps > max(cfg.q * cfg.tau, cfg.q * gn) or eps < cfg.eta**2 * cfg.q * gn):
            eps = max(cfg.q * cfg.tau, cfg.eta * cfg.q * gn)
            rep = run.fresh(u, eps, k + 1, "ncg")
            g, frozen = rep.estimate.values, rep.frozen
            refreshed = True
        else:
            gf, eps = estimator.replay_gradient(frozen, u)
            g = gf.values
            refreshed = False
    return run.result(best[1], False, fresh_norm, cfg.k_max, rep)


def newton_optimize(estimator: MLMCEstimator, config: OptimizerConfig, u0=None, log=None) -> OptimizeResult:
    """Newton steps with matrix-free CG on the frozen-sample Hessian."""
    cfg = config
    H = estimator.hierarchy
    N = H.size(H.L_bar)
    u = np.zeros(N) if u0 is None else np.array(_vals(u0), dtype=float)
    run = _Run(estimator, cfg, log)
    eps = cfg.eps0
    fresh_norm = math.nan
    rep = None
    cg_index = 0
    best = (math.inf, u)
    for k in range(cfg.k_max):
        rep = run.fresh(u, eps, cg_index, "newton")
        g, frozen = rep.estimate.values, rep.frozen
        gn = _norm(g)
        run.record(k, "newton", gn, eps, True, frozen.counts)
        if gn < best[0]:
            best = (gn, u)
        if gn <= cfg.tau:
            check = run.fresh(u, eps, cg_index, "check")
            fresh_norm = _norm(check.estimate.values)
            run.record(k, "check", fresh_norm, eps, True, check.frozen.counts)
            if fresh_norm <= cfg.tau:
                return run.result(u, True, fresh_norm, k, check)
        u_k = u.copy()

        def hv(v, u_k=u_k, frozen=frozen):
            return estimator.replay_hessian_vector(frozen, u_k, v).values

        def on_cg(i, r, eps=eps, frozen=frozen):
            nonlocal cg_index
            if i > 0:
                cg_index += 1
            run.record(cg_index, "cg", r, eps, i == 0, frozen.counts)

        res = cg_solve(hv, -g, eps / cfg.q, cfg.cg_max_iter, on_cg)
        if res.negative_curvature:
            return run.result(best[1], False, fresh_norm, k, rep)
        u = u + res.x
        estimator.clear_cache()
        eps = max(cfg.q * cfg.tau, cfg.eta * eps)
    return run.result(best[1], False, fresh_norm, cfg.k_max, rep)


def _vals(u):
    return u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)


def _gf(v) -> GridFunction:
    return GridFunction(0, v)

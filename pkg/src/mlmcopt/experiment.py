"""Run orchestration: optimizer runs, result bundles and plot-ready CSV data."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .grid import GridFunction
from .mlmc_estimator import EstimateReport, MLMCEstimator
from .optimizer import IterationRecord, RefreshRow, ncg_optimize, newton_optimize, trace_to_csv

POST_PILOT = 20


@dataclass
class ResultBundle:
    """Everything a run produces. :meth:`files` is the byte-level contract."""

    config: RunConfig
    u: GridFunction
    converged: bool
    fresh_norm: float
    iterations: int
    table: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    gradient: np.ndarray | None = None
    contributions: list = field(default_factory=list)
    mean_state: np.ndarray | None = None
    var_state: np.ndarray | None = None
    post_eps: float = math.nan
    post_samples: int = 0
    work: float = 0.0

    @property
    def n_levels(self) -> int:
        return self.config.L_bar + 1

    def _header(self) -> dict:
        return self.config.header()

    def table_csv(self) -> str:
        rows = [_refresh_row(r, self.n_levels, self.config.timing) for r in self.table]
        cols = ["index", "phase", "epsilon", *_level_cols("n", self.n_levels), "rho", "seconds", "converged"]
        return _csv(self._header(), cols, rows)

    def trace_csv(self) -> str:
        recs = self.trace if self.config.timing else [_untimed(r) for r in self.trace]
        return trace_to_csv(recs, self.n_levels, self._header())

    def fields_csv(self) -> str:
        H = self.config.problem().hierarchy
        pts = H.centers(H.L_bar)
        cols = [f"x{i}" for i in range(pts.shape[1])] + ["u", "mean_y", "var_y"]
        mean = self.mean_state if self.mean_state is not None else np.full(len(pts), math.nan)
        var = self.var_state if self.var_state is not None else np.full(len(pts), math.nan)
        rows = [[*map(repr, map(float, p)), repr(float(a)), repr(float(b)), repr(float(c))]
                for p, a, b, c in zip(pts, self.u.values, mean, var)]
        header = {**self._header(), "post_eps": repr(self.post_eps), "post_samples": self.post_samples}
        return _csv(header, cols, rows)

    def summary_json(self) -> str:
        data = {
            "converged": self.converged,
            "fresh_norm": _jsonable(self.fresh_norm),
            "iterations": self.iterations,
            "refreshes": len(self.table),
            "work_dof": self.work,
            "post_eps": _jsonable(self.post_eps),
            "post_samples": self.post_samples,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def files(self) -> dict:
        return {
            "table.csv": self.table_csv(),
            "trace.csv": self.trace_csv(),
            "fields.csv": self.fields_csv(),
            "summary.json": self.summary_json(),
        }

    def to_bytes(self) -> bytes:
        return b"".join(name.encode() + b"\n" + text.encode("utf-8") for name, text in sorted(self.files().items()))

    def write(self, out=None) -> list:
        return _write(self.files(), Path(out or self.config.out))


def _jsonable(x: float):
    return None if x is None or not math.isfinite(x) else float(x)


def _level_cols(prefix: str, n: int) -> list:
    return [f"{prefix}{l}" for l in range(n)]


def _pad(values, n: int) -> list:
    values = list(values)
    return values + [""] * (n - len(values))


def _refresh_row(r: RefreshRow, n_levels: int, timing: bool) -> list:
    seconds = f"{r.seconds:.6f}" if timing else "0"
    return [r.index, r.phase, repr(float(r.eps)), *_pad(r.counts, n_levels), repr(float(r.rho)), seconds,
            int(r.converged)]


def _untimed(r: IterationRecord) -> IterationRecord:
    return IterationRecord(r.index, r.phase, r.norm, r.eps, r.refreshed, r.counts, 0.0, r.work)


def _csv(header: dict, cols: list, rows: list) -> str:
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(rows)
    return buf.getvalue()


def _write(files: dict, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_bytes(text.encode("utf-8"))
        paths.append(path)
    return paths


def make_estimator(config: RunConfig) -> MLMCEstimator:
    return MLMCEstimator(config.problem(), config.estimator(), master_seed=config.seed)


def post_moments(estimator: MLMCEstimator, u, eps: float, n_max: int):
    """Mean and variance of the state on ``L_bar`` from a fresh set sized for RMSE ``eps``.

    A pilot of ``POST_PILOT`` samples fixes the size ``ceil(max Var / eps**2)``
    (capped at ``n_max``); the returned RMSE is the one actually achieved.
    """
    H = estimator.hierarchy
    seed = estimator._level_seed(estimator.calls, H.L_bar)
    estimator.calls += 1
    n_pilot = min(POST_PILOT, n_max)
    _, var = estimator.state_moments(u, H.L_bar, n_pilot, seed)
    n = int(min(n_max, max(n_pilot, math.ceil(float(np.max(var)) / eps**2))))
    # indices 0..n-1 of the same seed extend the pilot set
    mean, var = estimator.state_moments(u, H.L_bar, n, seed)
    achieved = math.sqrt(float(np.max(var)) / n)
    return mean, var, achieved, n


def run_experiment(config: RunConfig, write: bool = True, log=None) -> ResultBundle:
    """Run the configured optimizer and collect every output.

    A run that hits ``k_max`` still yields (and writes) its bundle with
    ``converged=False``.
    """
    est = make_estimator(config)
    opt = newton_optimize if config.method == "newton" else ncg_optimize
    res = opt(est, config.optimizer(), log=log)
    rep: EstimateReport | None = res.last_report
    mean, var, achieved, n_post = post_moments(est, res.u.values, config.post_eps, config.post_max)
    bundle = ResultBundle(
        config=config,
        u=res.u,
        converged=res.converged,
        fresh_norm=res.fresh_norm,
        iterations=res.iterations,
        table=res.refreshes,
        trace=res.trace,
        gradient=None if rep is None else rep.estimate.values,
        contributions=[] if rep is None else list(rep.contributions),
        mean_state=mean,
        var_state=var,
        post_eps=achieved,
        post_samples=n_post,
        work=res.work,
    )
    if write:
        bundle.write()
        emit_plots(bundle)
    return bundle


def cross_section(values: np.ndarray, m: int, dim: int) -> np.ndarray:
    """Values along the first axis at mid-height of the second (mean of the two middle rows)."""
    if dim == 1:
        return np.asarray(values, dtype=float).copy()
    grid = np.asarray(values, dtype=float).reshape(m, m)
    if m % 2:
        return grid[m // 2].copy()
    return 0.5 * (grid[m // 2 - 1] + grid[m // 2])


def plot_files(bundle: ResultBundle) -> dict:
    """Plot-ready CSV text keyed by file name."""
    cfg = bundle.config
    header = cfg.header()
    n_levels = bundle.n_levels
    recs = bundle.trace if cfg.timing else [_untimed(r) for r in bundle.trace]

    conv = [[r.index, r.phase, repr(r.norm), repr(r.eps), int(r.refreshed)] for r in recs]
    files = {"convergence.csv": _csv(header, ["k_or_i", "phase", "grad_or_res_norm", "epsilon", "refreshed"], conv)}

    H = cfg.problem().hierarchy
    L = H.L_bar
    m = H.m(L)
    level_cols = _level_cols("level", n_levels)
    cols = ["x", *level_cols, "penalty", "gradient"]
    rows = []
    if bundle.contributions and bundle.gradient is not None:
        x = H.centers_1d(L)
        parts = [cross_section(c, m, H.dim) for c in bundle.contributions]
        parts += [np.zeros(m)] * (n_levels - len(parts))
        penalty = cross_section(2.0 * cfg.alpha * bundle.u.values, m, H.dim)
        total = cross_section(bundle.gradient, m, H.dim)
        for i in range(m):
            rows.append([repr(float(x[i])), *(repr(float(p[i])) for p in parts), repr(float(penalty[i])),
                         repr(float(total[i]))])
    files["cross_section.csv"] = _csv(header, cols, rows)

    var_rows = [[r.index, r.phase, repr(float(r.eps)), *_pad(map(repr, map(float, r.max_variance)), n_levels)]
                for r in bundle.table]
    files["variance.csv"] = _csv(header, ["index", "phase", "epsilon", *_level_cols("var", n_levels)], var_rows)
    return files


def emit_plots(bundle: ResultBundle, out=None) -> list:
    """Write convergence, cross-section and per-level variance CSVs."""
    return _write(plot_files(bundle), Path(out or bundle.config.out))


def empty_bundle(config: RunConfig) -> ResultBundle:
    H = config.problem().hierarchy
    return ResultBundle(config, GridFunction(H.L_bar, np.zeros(H.size(H.L_bar))), False, math.nan, 0)


def run_estimate(config: RunConfig, eps: float, write: bool = True) -> EstimateReport:
    """One fresh gradient estimate at ``u = 0`` and RMSE ``eps``."""
    est = make_estimator(config)
    H = est.hierarchy
    rep = est.run_estimator(np.zeros(H.size(H.L_bar)), eps)
    if write:
        header = {**config.header(), "eps": repr(eps), "rho": repr(rep.rho), "bias": repr(rep.bias),
                  "rmse_bound": repr(rep.rmse_bound), "converged": int(rep.converged)}
        rows = [[st.level, st.n, repr(float(st.cost)), repr(float(st.mean_norm)), repr(float(np.max(st.variance)))]
                for st in rep.stats]
        files = {
            "estimate.csv": _csv(header, ["level", "n", "cost", "mean_norm", "max_var"], rows),
            "gradient.csv": _csv(header, [f"x{i}" for i in range(H.dim)] + ["gradient"],
                                 [[*map(repr, map(float, p)), repr(float(g))]
                                  for p, g in zip(H.centers(H.L_bar), rep.estimate.values)]),
            "frozen.txt": rep.frozen.to_text(),
        }
        _write(files, Path(config.out))
    return rep


def calibrate(config: RunConfig, n: int = 8, repeats: int = 3, write: bool = True) -> dict:
    """Time gradient samples per level and fit ``seconds ~ m**kappa``.

    Returns ``{"kappa": ..., "levels": [(level, m, dof, seconds_per_sample), ...]}``.
    """
    est = make_estimator(config)
    H = est.hierarchy
    u = np.zeros(H.size(H.L_bar))
    controls = est._controls(u, H.L_bar)
    levels = []
    for l in H.levels:
        best = math.inf
        for r in range(repeats):
            t = time.perf_counter()
            est.level_samples(l, 1000 + r, n, controls[l])
            best = min(best, time.perf_counter() - t)
            est.clear_cache()
        levels.append((l, H.m(l), H.size(l), best / n))
    if len(levels) >= 2:
        kappa = float(np.polyfit(np.log([lv[1] for lv in levels]), np.log([lv[3] for lv in levels]), 1)[0])
    else:
        kappa = math.nan
    if write:
        rows = [[l, m, dof, f"{s:.9f}"] for l, m, dof, s in levels]
        text = _csv({**config.header(), "kappa": repr(kappa)}, ["level", "m", "dof", "seconds_per_sample"], rows)
        _write({"calibrate.csv": text}, Path(config.out))
    return {"kappa": kappa, "levels": levels}

"""Convergence-study driver: config, pipeline, rate fits, and report files.

A study is described by one JSON config.  ``run_study`` executes the staged
pipeline (validate, effective table, characteristic fan, corrector hierarchy,
then residual sweeps and/or reference comparisons per epsilon) and collects
one row per (mode, order, epsilon).  ``emit_report`` writes the delimited
outputs; every value-bearing file is byte-stable across reruns, with wall
times quarantined in their own file.
"""

from __future__ import annotations

import json
import math
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import scipy
import scipy.stats

from .cell import TorusGrid, effective_table
from .correctors import build_hierarchy
from .effective import fan_invariants, solve_effective
from .problem import (initial_from_dict, load_problem, problem_from_dict,
                      validate_problem)
from .reference import compare_expansion, reference_margin, solve_reference

SCHEMA_VERSION = 1
ERROR_FLOOR = 1e-9
MODES = ("residual", "end-to-end", "both")


class StudyError(RuntimeError):
    """A pipeline stage failed; carries the partial report."""

    def __init__(self, message: str, report: "StudyReport"):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class StudyConfig:
    problem: object              # path string or inline problem dict
    initial: dict | None
    orders: tuple
    eps: tuple
    mode: str
    window: tuple                # ((lo, hi), ...) per dimension
    T: float
    n_fast: int = 64
    n_per: int = 128
    hx: float = 0.05
    ht: float = 0.0125
    p_box: tuple = ()
    dp: float = 0.02
    cell_mode: str = "spectral"
    scheme: str = "imex"
    tol: float | None = None
    zeta_min: float = 0.1
    tail_sigmas: float = 5.0
    stencil_pad: float = 12.0
    output_times: tuple = ()
    seed: int = 0
    slope_slack: float = 0.3
    base_dir: str = "."
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "StudyConfig":
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}")
        grids = data.get("grids", {})
        solver = data.get("solver", {})
        cfg = cls(
            problem=data["problem"],
            initial=data.get("initial"),
            orders=tuple(int(m) for m in data["orders"]),
            eps=tuple(float(e) for e in data["eps"]),
            mode=data.get("mode", "residual"),
            window=tuple(tuple(float(v) for v in pair)
                         for pair in data["window"]),
            T=float(data["T"]),
            n_fast=int(grids.get("n_fast", 64)),
            n_per=int(grids.get("n_per", 128)),
            hx=float(grids.get("hx", 0.05)),
            ht=float(grids.get("ht", 0.0125)),
            p_box=tuple(tuple(float(v) for v in pair)
                        for pair in grids.get("p_box", ())),
            dp=float(grids.get("dp", 0.02)),
            cell_mode=solver.get("cell_mode", "spectral"),
            scheme=solver.get("scheme", "imex"),
            tol=solver.get("tol"),
            zeta_min=float(solver.get("zeta_min", 0.1)),
            tail_sigmas=float(solver.get("tail_sigmas", 5.0)),
            stencil_pad=float(solver.get("stencil_pad", 12.0)),
            output_times=tuple(float(t) for t in data.get("output_times", ())),
            seed=int(data.get("seed", 0)),
            slope_slack=float(data.get("slope_slack", 0.3)),
            base_dir=base_dir,
            raw=dict(data),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "StudyConfig":
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.eps:
            raise ValueError("eps list is empty")
        if any(not 0.0 < e <= 0.5 for e in self.eps):
            raise ValueError("every eps must lie in (0, 1/2]")
        if any(a <= b for a, b in zip(self.eps, self.eps[1:])):
            raise ValueError("eps values must be strictly decreasing")
        if not self.orders:
            raise ValueError("orders list is empty")
        if list(self.orders) != sorted(set(self.orders)):
            raise ValueError("orders must be strictly increasing")
        if self.mode != "end-to-end" and min(self.orders) < 1:
            raise ValueError("residual sweeps need orders >= 1")
        if min(self.orders) < 0:
            raise ValueError("orders must be nonnegative")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        for lo, hi in self.window:
            if not lo < hi:
                raise ValueError("window bounds must satisfy lo < hi")
        for t in self.output_times:
            if not 0.0 < t <= self.T + 1e-12:
                raise ValueError("output times must lie in (0, T]")
        if list(self.output_times) != sorted(self.output_times):
            raise ValueError("output times must be increasing")
        if self.n_fast < 8 or self.n_per < 4:
            raise ValueError("grid resolutions are too small")

    def to_dict(self) -> dict:
        """Round-trippable echo of the parsed configuration."""
        return {
            "schema_version": SCHEMA_VERSION,
            "problem": self.problem,
            "initial": self.initial,
            "orders": list(self.orders),
            "eps": list(self.eps),
            "mode": self.mode,
            "window": [list(pair) for pair in self.window],
            "T": self.T,
            "grids": {
                "n_fast": self.n_fast, "n_per": self.n_per,
                "hx": self.hx, "ht": self.ht,
                "p_box": [list(pair) for pair in self.p_box],
                "dp": self.dp,
            },
            "solver": {
                "cell_mode": self.cell_mode, "scheme": self.scheme,
                "tol": self.tol, "zeta_min": self.zeta_min,
                "tail_sigmas": self.tail_sigmas,
                "stencil_pad": self.stencil_pad,
            },
            "output_times": list(self.output_times),
            "seed": self.seed,
            "slope_slack": self.slope_slack,
        }

    def resolve(self):
        """Load the problem and initial data this config points at."""
        if isinstance(self.problem, str):
            path = self.problem
            if not os.path.isabs(path):
                path = os.path.join(self.base_dir, path)
            spec, initial = load_problem(path)
        else:
            spec = problem_from_dict(self.problem)
            initial = (initial_from_dict(spec.dim, self.problem["initial"])
                       if "initial" in self.problem else None)
        if self.initial is not None:
            initial = initial_from_dict(spec.dim, self.initial)
        if initial is None:
            raise ValueError("no initial data in config or problem file")
        if len(self.window) != spec.dim:
            raise ValueError("window dimension disagrees with the problem")
        if self.p_box and len(self.p_box) != spec.dim:
            raise ValueError("p_box dimension disagrees with the problem")
        return spec, initial

    def effective_times(self) -> tuple:
        return self.output_times if self.output_times else (self.T,)


# ---------------------------------------------------------------------------
# rate fitting
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    stderr: float
    ci: tuple
    n_used: int
    status: str                  # fitted | exact | insufficient

    def to_row(self) -> dict:
        return {"slope": self.slope, "stderr": self.stderr,
                "ci_lo": self.ci[0], "ci_hi": self.ci[1],
                "n_used": self.n_used, "status": self.status}


def fit_rates(eps, errors, floor: float = ERROR_FLOOR) -> RateFit:
    """Least-squares slope of log(error) against log(eps).

    Rows at or below the floor are noise-level and excluded; a series that is
    entirely at the floor is reported as exact rather than fitted.  The
    confidence interval is the two-sided 95% band from the regression.
    """
    eps = np.asarray(eps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if eps.shape != errors.shape or eps.ndim != 1:
        raise ValueError("eps and errors must be matching 1-D sequences")
    keep = errors > floor
    n = int(keep.sum())
    if n == 0:
        return RateFit(math.nan, math.nan, (math.nan, math.nan), 0, "exact")
    if n < 3:
        return RateFit(math.nan, math.nan, (math.nan, math.nan), n,
                       "insufficient")
    res = scipy.stats.linregress(np.log(eps[keep]), np.log(errors[keep]))
    slope, stderr = float(res.slope), float(res.stderr)
    half = float(scipy.stats.t.ppf(0.975, n - 2)) * stderr if stderr > 0 else 0.0
    return RateFit(slope, stderr, (slope - half, slope + half), n, "fitted")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class StudyReport:
    config_echo: dict
    rows: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def series(self, mode: str, m: int):
        """(eps, value) arrays for one rate series, in row order."""
        key = "residual" if mode == "residual" else "error"
        pairs = [(r["eps"], r[key]) for r in self.rows
                 if r["mode"] == mode and r["m"] == m and r[key] is not None]
        eps = np.array([p[0] for p in pairs])
        vals = np.array([p[1] for p in pairs])
        return eps, vals

    def fit_all(self, floor: float = ERROR_FLOOR):
        """Recompute the slope table from the collected rows."""
        self.slopes = []
        seen = []
        for r in self.rows:
            key = (r["mode"], r["m"])
            if key not in seen:
                seen.append(key)
        for mode, m in seen:
            eps, vals = self.series(mode, m)
            if eps.size == 0:
                continue
            fit = fit_rates(eps, vals, floor)
            row = {"mode": mode, "m": m}
            row.update(fit.to_row())
            self.slopes.append(row)

    def passes(self, slack: float = 0.3) -> bool:
        """Every fitted slope meets its order target within the slack."""
        ok = True
        for row in self.slopes:
            if row["status"] != "fitted":
                continue
            target = max(row["m"], 1) - slack
            if row["slope"] < target:
                ok = False
        return ok

    def monotone_violations(self, slack: float = 0.1) -> list:
        """(eps, m_lo, m_hi) triples where a higher order did worse."""
        out = []
        for mode in ("residual", "end-to-end"):
            ms = sorted({r["m"] for r in self.rows if r["mode"] == mode})
            for lo, hi in zip(ms, ms[1:]):
                eps_lo, v_lo = self.series(mode, lo)
                eps_hi, v_hi = self.series(mode, hi)
                for e in eps_lo:
                    if e not in eps_hi:
                        continue
                    a = float(v_lo[eps_lo == e][0])
                    b = float(v_hi[eps_hi == e][0])
                    if b > a * (1.0 + slack) and a > ERROR_FLOOR:
                        out.append((float(e), lo, hi))
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config_echo,
            "rows": self.rows,
            "slopes": self.slopes,
            "stages": self.stages,
            "diagnostics": self.diagnostics,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def run_study(config: StudyConfig, threads: int = 1,
              outdir: str | None = None, keep_hierarchy: bool = False):
    """Execute a study config and return the StudyReport.

    Stages run in a fixed order and are logged by name; residual-only configs
    never reach a reference stage.  On any stage failure the partial report is
    persisted to ``outdir`` (when given) and a StudyError is raised.
    """
    report = StudyReport(config_echo=config.to_dict())
    stage = "setup"

    def begin(name):
        nonlocal stage
        stage = name
        report.stages.append(name)
        return time.perf_counter()

    def finish(t0):
        report.timings.append((stage, time.perf_counter() - t0))

    try:
        t0 = begin("validate")
        spec, initial = config.resolve()
        vr = validate_problem(spec, seed=config.seed)
        if not vr.passed:
            raise ValueError(f"problem validation failed: {vr.summary()}")
        if config.mode != "residual" and spec.dim != 1:
            raise ValueError("end-to-end comparisons need a 1-D problem")
        finish(t0)

        t0 = begin("effective-table")
        p_box = config.p_box
        if not p_box:
            raise ValueError("config gives no p_box for the effective table")
        table = effective_table(spec, TorusGrid(spec.dim, config.n_fast),
                                p_box, config.dp, mode=config.cell_mode,
                                tol=config.tol)
        finish(t0)

        t0 = begin("characteristic-fan")
        fan = solve_effective(table, initial, config.window, config.T,
                              config.zeta_min)
        inv = fan_invariants(fan, samples=400, seed=config.seed)
        if inv["jacobian_min"] <= 0:
            raise ValueError(f"characteristic fan folds: {inv}")
        report.diagnostics["fan"] = inv
        finish(t0)

        t0 = begin("hierarchy")
        m_max = max(1, max(config.orders))
        hier = build_hierarchy(
            spec, table, initial, config.window, config.T, m_max,
            hx=config.hx, ht=config.ht, mode=config.cell_mode,
            tol=config.tol, threads=threads, zeta_min=config.zeta_min,
            tail_sigmas=config.tail_sigmas, stencil_pad=config.stencil_pad)
        report.diagnostics["hierarchy"] = {
            k: v for k, v in hier.diagnostics.items()
            if isinstance(v, (int, float))}
        finish(t0)

        if config.mode in ("residual", "both"):
            for m in config.orders:
                if m < 1:
                    continue
                for eps in config.eps:
                    t0 = begin(f"residual m={m} eps={eps:g}")
                    _, max_psi = hier.residual_field(eps, m)
                    report.rows.append({
                        "mode": "residual", "m": m, "eps": eps,
                        "error": None, "residual": float(max_psi)})
                    finish(t0)

        if config.mode in ("end-to-end", "both"):
            times = config.effective_times()
            for eps in config.eps:
                t0 = begin(f"reference eps={eps:g}")
                marg = reference_margin(spec, table, initial, config.T, eps)
                lo, hi = config.window[0]
                ref = solve_reference(
                    spec, initial, (lo - marg, hi + marg), config.T, eps,
                    n_per=config.n_per, scheme=config.scheme,
                    output_times=times)
                finish(t0)
                for m in config.orders:
                    t0 = begin(f"compare m={m} eps={eps:g}")
                    cmp = compare_expansion(hier, ref, config.window[0], m)
                    report.rows.append({
                        "mode": "end-to-end", "m": m, "eps": eps,
                        "error": float(cmp["sup_error"]), "residual": None})
                    finish(t0)

        t0 = begin("fit-rates")
        report.fit_all()
        finish(t0)
    except Exception as exc:
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        if outdir is not None:
            emit_report(report, outdir, figures=False)
        raise StudyError(f"stage {stage!r} failed: {exc}", report) from exc

    if keep_hierarchy:
        report.diagnostics["_hierarchy_object"] = hier
    return report


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def fmt_float(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def _sorted_rows(report: StudyReport) -> list:
    order = {"residual": 0, "end-to-end": 1}
    return sorted(report.rows,
                  key=lambda r: (order[r["mode"]], r["m"], -r["eps"]))


def emit_report(report: StudyReport, outdir: str, figures: bool = True):
    """Write the study outputs into a directory.

    rows.csv, slopes.csv, plotdata.csv, config-echo.json, stages.log, and
    report.json are byte-stable across reruns of the same config; wall-clock
    data goes to timings.csv only.  Rate figures are rendered from the same
    rows the delimited files carry.
    """
    os.makedirs(outdir, exist_ok=True)
    rows = _sorted_rows(report)

    lines = ["mode,m,eps,error,residual"]
    for r in rows:
        lines.append(",".join([r["mode"], str(r["m"]), fmt_float(r["eps"]),
                               fmt_float(r["error"]), fmt_float(r["residual"])]))
    _write_text(os.path.join(outdir, "rows.csv"), lines)

    lines = ["mode,m,slope,stderr,ci_lo,ci_hi,n_used,status"]
    for s in report.slopes:
        lines.append(",".join([s["mode"], str(s["m"]), fmt_float(s["slope"]),
                               fmt_float(s["stderr"]), fmt_float(s["ci_lo"]),
                               fmt_float(s["ci_hi"]), str(s["n_used"]),
                               s["status"]]))
    _write_text(os.path.join(outdir, "slopes.csv"), lines)

    lines = ["mode,m,log2_eps,log10_value"]
    for r in rows:
        val = r["residual"] if r["mode"] == "residual" else r["error"]
        if val is None or val <= 0:
            continue
        lines.append(",".join([r["mode"], str(r["m"]),
                               fmt_float(math.log2(r["eps"])),
                               fmt_float(math.log10(val))]))
    _write_text(os.path.join(outdir, "plotdata.csv"), lines)

    with open(os.path.join(outdir, "config-echo.json"), "w") as fh:
        json.dump(report.config_echo, fh, indent=2, sort_keys=True)
        fh.write("\n")

    _write_text(os.path.join(outdir, "stages.log"), report.stages)

    with open(os.path.join(outdir, "report.json"), "w") as fh:
        payload = report.to_dict()
        payload["diagnostics"] = {k: v for k, v in payload["diagnostics"].items()
                                  if not k.startswith("_")}
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["stage,seconds"]
    for name, sec in report.timings:
        lines.append(f"{name},{sec:.6f}")
    _write_text(os.path.join(outdir, "timings.csv"), lines)

    with open(os.path.join(outdir, "environment.json"), "w") as fh:
        json.dump({"python": platform.python_version(),
                   "numpy": np.__version__,
                   "scipy": scipy.__version__,
                   "machine": platform.machine()},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    if figures and report.rows:
        _render_figures(report, outdir)


def _write_text(path: str, lines: list):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _render_figures(report: StudyReport, outdir: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    slope_by = {(s["mode"], s["m"]): s for s in report.slopes}
    for mode in ("residual", "end-to-end"):
        ms = sorted({r["m"] for r in report.rows if r["mode"] == mode})
        if not ms:
            continue
        fig, ax = plt.subplots(figsize=(5.5, 4.0))
        for m in ms:
            eps, vals = report.series(mode, m)
            pos = vals > 0
            if not pos.any():
                continue
            s = slope_by.get((mode, m))
            tag = (f", slope {s['slope']:.2f}"
                   if s and s["status"] == "fitted" else "")
            ax.loglog(eps[pos], vals[pos], "o-", label=f"m={m}{tag}")
        ax.set_xlabel("eps")
        ylabel = ("max residual" if mode == "residual"
                  else "sup error vs reference")
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        ax.invert_xaxis()
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, f"rates-{mode}.png"), dpi=150)
        plt.close(fig)

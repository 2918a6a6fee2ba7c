"""Command-line entry points for the homogenization workbench.

Every subcommand is driven by the same JSON study config.  Exit codes:
0 on success, 2 when a validation or rate acceptance check fails, 1 on
any other error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .cell import TorusGrid, effective_table
from .correctors import build_hierarchy
from .effective import eval_u0, solve_effective
from .harness import (StudyConfig, StudyError, emit_report, fmt_float,
                      run_study)
from .problem import validate_initial_data, validate_problem
from .reference import compare_expansion, reference_margin, solve_reference
from .serialize import save_hierarchy, save_table


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(fmt_float(v) if isinstance(v, (float, type(None)))
                              else str(v) for v in row) + "\n")


def _build_table(cfg, spec):
    if not cfg.p_box:
        raise ValueError("config gives no p_box for the effective table")
    return effective_table(spec, TorusGrid(spec.dim, cfg.n_fast), cfg.p_box,
                           cfg.dp, mode=cfg.cell_mode, tol=cfg.tol)


def _build_hier(cfg, spec, table, initial, threads):
    m_max = max(1, max(cfg.orders))
    return build_hierarchy(spec, table, initial, cfg.window, cfg.T, m_max,
                           hx=cfg.hx, ht=cfg.ht, mode=cfg.cell_mode,
                           tol=cfg.tol, threads=threads,
                           zeta_min=cfg.zeta_min, tail_sigmas=cfg.tail_sigmas,
                           stencil_pad=cfg.stencil_pad)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(cfg, out, threads):
    spec, initial = cfg.resolve()
    rep = validate_problem(spec, seed=cfg.seed)
    print(rep.summary())
    ok = rep.passed
    if cfg.p_box:
        table = _build_table(cfg, spec)
        rep2 = validate_initial_data(initial, table, cfg.window,
                                     zeta_min=cfg.zeta_min, seed=cfg.seed,
                                     bounds=spec.bounds)
        print(rep2.summary())
        ok = ok and rep2.passed
    print("validate:", "pass" if ok else "FAIL")
    return 0 if ok else 2


def cmd_cell(cfg, out, threads):
    spec, _ = cfg.resolve()
    table = _build_table(cfg, spec)
    path = os.path.join(out, "cell.csv")
    if spec.dim == 1:
        p = table.p_axes[0]
        rows = [(float(p[i]), float(table.hbar[i]), float(table.bbar[i, 0]))
                for i in range(p.size)]
        _write_csv(path, "p,hbar,bbar", rows)
    else:
        p1, p2 = table.p_axes
        rows = []
        for i in range(p1.size):
            for j in range(p2.size):
                rows.append((float(p1[i]), float(p2[j]),
                             float(table.hbar[i, j]),
                             float(table.bbar[i, j, 0]),
                             float(table.bbar[i, j, 1])))
        _write_csv(path, "p1,p2,hbar,bbar1,bbar2", rows)
    save_table(os.path.join(out, "table.hjh"), table)
    print(f"cell: {len(rows)} nodes -> {path}")
    return 0


def cmd_effective(cfg, out, threads):
    spec, initial = cfg.resolve()
    table = _build_table(cfg, spec)
    fan = solve_effective(table, initial, cfg.window, cfg.T, cfg.zeta_min)
    times = (0.0,) + cfg.effective_times()
    path = os.path.join(out, "effective.csv")
    rows = []
    if spec.dim == 1:
        lo, hi = cfg.window[0]
        xs = np.linspace(lo, hi, max(int(round((hi - lo) / cfg.hx)) + 1, 2))
        for t in times:
            st = eval_u0(fan, xs, float(t))
            for i in range(xs.size):
                rows.append((float(xs[i]), float(t), float(st.u0[i]),
                             float(st.du0[0, i]), float(st.d2u0[0, 0, i]),
                             float(st.bbar[0, i])))
        _write_csv(path, "x,t,u0,du0,d2u0,bbar", rows)
    else:
        axes = [np.linspace(lo, hi, max(int(round((hi - lo) / cfg.hx)) + 1, 2))
                for lo, hi in cfg.window]
        mesh = np.meshgrid(*axes, indexing="ij")
        for t in times:
            st = eval_u0(fan, tuple(mesh), float(t))
            flat = [c.ravel() for c in mesh]
            u0 = st.u0.ravel()
            du = st.du0.reshape(2, -1)
            bb = st.bbar.reshape(2, -1)
            for i in range(u0.size):
                rows.append((float(flat[0][i]), float(flat[1][i]), float(t),
                             float(u0[i]), float(du[0, i]), float(du[1, i]),
                             float(bb[0, i]), float(bb[1, i])))
        _write_csv(path, "x1,x2,t,u0,du0_1,du0_2,bbar_1,bbar_2", rows)
    print(f"effective: {len(rows)} samples -> {path}")
    return 0


def cmd_correctors(cfg, out, threads):
    spec, initial = cfg.resolve()
    table = _build_table(cfg, spec)
    hier = _build_hier(cfg, spec, table, initial, threads)
    path = os.path.join(out, "hierarchy.hjh")
    save_hierarchy(path, hier)
    d = hier.diagnostics
    print(f"correctors: m_max={hier.m_max} slow grid {d.get('slow_shape')} "
          f"({d.get('nodes')} nodes) -> {path}")
    return 0


def cmd_residual(cfg, out, threads):
    spec, initial = cfg.resolve()
    table = _build_table(cfg, spec)
    hier = _build_hier(cfg, spec, table, initial, threads)
    rows = []
    for m in cfg.orders:
        if m < 1:
            continue
        for eps in cfg.eps:
            _, max_psi = hier.residual_field(eps, m)
            rows.append((m, float(eps), float(max_psi)))
            print(f"residual: m={m} eps={eps:g} max|psi| = {max_psi:.6e}")
    path = os.path.join(out, "residual.csv")
    _write_csv(path, "m,eps,max_psi", rows)
    print(f"residual: {len(rows)} rows -> {path}")
    return 0


def cmd_reference(cfg, out, threads):
    spec, initial = cfg.resolve()
    table = _build_table(cfg, spec)
    times = cfg.effective_times()
    for eps in cfg.eps:
        marg = reference_margin(spec, table, initial, cfg.T, eps)
        lo, hi = cfg.window[0]
        ref = solve_reference(spec, initial, (lo - marg, hi + marg), cfg.T,
                              eps, n_per=cfg.n_per, scheme=cfg.scheme,
                              output_times=times)
        rows = []
        for j, t in enumerate(ref.times):
            for i in range(ref.grid.n):
                rows.append((float(ref.grid.x[i]), float(t),
                             float(ref.values[j, i])))
        path = os.path.join(out, f"reference-eps{eps:g}.csv")
        _write_csv(path, "x,t,u", rows)
        d = ref.diagnostics
        print(f"reference: eps={eps:g} n={ref.grid.n} steps={d['steps']} "
              f"-> {path}")
    return 0


def cmd_compare(cfg, out, threads):
    spec, initial = cfg.resolve()
    table = _build_table(cfg, spec)
    hier = _build_hier(cfg, spec, table, initial, threads)
    times = cfg.effective_times()
    rows = []
    for eps in cfg.eps:
        marg = reference_margin(spec, table, initial, cfg.T, eps)
        lo, hi = cfg.window[0]
        ref = solve_reference(spec, initial, (lo - marg, hi + marg), cfg.T,
                              eps, n_per=cfg.n_per, scheme=cfg.scheme,
                              output_times=times)
        for m in cfg.orders:
            res = compare_expansion(hier, ref, cfg.window[0], m)
            rows.append((float(eps), m, float(res["sup_error"])))
            print(f"compare: eps={eps:g} m={m} sup_error = "
                  f"{res['sup_error']:.6e}")
    path = os.path.join(out, "compare.csv")
    _write_csv(path, "eps,m,sup_error", rows)
    print(f"compare: {len(rows)} rows -> {path}")
    return 0


def cmd_study(cfg, out, threads):
    try:
        report = run_study(cfg, threads=threads, outdir=out)
    except StudyError as exc:
        print(f"study: FAILED at stage {exc.report.failed_stage!r}: "
              f"{exc.report.error}", file=sys.stderr)
        return 1
    emit_report(report, out)
    for s in report.slopes:
        label = (f"{s['slope']:.3f} +- {s['stderr']:.3f}"
                 if s["status"] == "fitted" else s["status"])
        print(f"study: {s['mode']} m={s['m']} slope {label}")
    ok = report.passes(cfg.slope_slack)
    print(f"study: report -> {out}")
    print("study:", "pass" if ok else "FAIL (slope below order target)")
    return 0 if ok else 2


COMMANDS = {
    "validate": cmd_validate,
    "cell": cmd_cell,
    "effective": cmd_effective,
    "correctors": cmd_correctors,
    "residual": cmd_residual,
    "reference": cmd_reference,
    "compare": cmd_compare,
    "study": cmd_study,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="hjh",
                     description="homogenization expansion workbench")
    sub = parser.add_subparsers(dest="command", metavar="command")
    descriptions = {
        "validate": "audit problem structure and initial-data admissibility",
        "cell": "tabulate the effective Hamiltonian over the p-box",
        "effective": "sample the leading-order solution on the window",
        "correctors": "build and archive the corrector hierarchy",
        "residual": "sweep expansion residuals over orders and epsilons",
        "reference": "run the fine-grid solver and dump snapshots",
        "compare": "measure expansion error against the reference",
        "study": "run the full convergence study and write the report",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", required=True, help="study config JSON")
        p.add_argument("--out", default="hjh-out", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for node-level solves")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"hjh: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help()
        return 1
    try:
        cfg = StudyConfig.from_file(args.config)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out, args.threads)
    except _UsageError as exc:
        print(f"hjh: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"hjh {args.command}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

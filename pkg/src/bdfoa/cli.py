"""``bdfoa`` command line.

Exit codes: 0 success, 2 analysis-negative finding (no certificate, empty
cone, equivalence refuted, localization not certified), 1 error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import kkt
from . import regularity as reg
from . import verify as ver
from ._util import to_jsonable
from .expr import EvalPoint, ExprError, evaluate
from .lower import GridSpec, solve_lower, solve_lower_many, stationary_set, stationary_set_many, value_function
from .problems import BUILTIN_NAMES, BilevelProblem, ProblemError, builtin, load_problem, solve_y0

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2
FLOAT_FMT = "%.12g"
REPRODUCIBLE = ("mirrlees", "modified-mirrlees", "figure1", "example-xy-1", "example-xy3", "principal-agent-2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# emission


def _fmt_floats(obj):
    if isinstance(obj, float):
        return float(FLOAT_FMT % obj)
    if isinstance(obj, dict):
        return {k: _fmt_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_fmt_floats(v) for v in obj]
    return obj


def dumps(report) -> str:
    return json.dumps(_fmt_floats(to_jsonable(report)), sort_keys=True, indent=2) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([FLOAT_FMT % v if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def emit(report, fmt: str, path, header=None) -> Path:
    """Write ``report`` as JSON or ``(header, rows)`` as CSV; output is byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        text = dumps(report)
    elif fmt == "csv":
        text = csv_text(header, report)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    path.write_text(text)
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


@dataclass
class ReportDocument:
    command: list
    reports: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "versions": {
                "bdfoa": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "reports": self.reports,
            "summary": self.summary,
        }


# ---------------------------------------------------------------------------
# helpers


def _problem(args) -> BilevelProblem:
    if args.problem:
        return load_problem(Path(args.problem))
    return builtin(args.builtin or "mirrlees")


def _grid(args) -> GridSpec:
    return GridSpec(resolution=args.grid) if getattr(args, "grid", None) else GridSpec()


def polish_point(prob: BilevelProblem, x, y_guess, grid: GridSpec, radius: float = 0.05) -> np.ndarray:
    """Nearest lower-level stationary point to ``y_guess`` (so rounded input like 0.957 works)."""
    y_guess = np.atleast_1d(np.asarray(y_guess, dtype=float))
    s = stationary_set(prob, x, grid.around(y_guess, radius))
    if s.stationary_points.size == 0:
        raise ValueError(f"no lower-level stationary point within {radius} of y = {y_guess.tolist()}")
    k = int(np.argmin(np.linalg.norm(s.stationary_points - y_guess, axis=1)))
    return s.stationary_points[k]


def _point(args, prob: BilevelProblem, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """``--point`` takes n + m numbers (y polished) or n numbers (y = first global minimizer)."""
    if args.point is None:
        return prob.reference_point()
    vals = np.asarray(args.point, dtype=float)
    n, m = prob.n, prob.m
    if vals.size == n:
        s = solve_lower(prob, vals, grid)
        return vals, s.minimizers[0]
    if vals.size != n + m:
        raise UsageError(f"--point needs {n} or {n + m} numbers for problem {prob.name!r}")
    x = vals[:n]
    return x, polish_point(prob, x, vals[n:], grid)


def _direction(args, n: int):
    if args.direction is None:
        return None
    u = np.asarray(args.direction, dtype=float)
    if u.size != n:
        raise UsageError(f"--direction needs {n} numbers")
    return u


def _eps(args) -> tuple[float, float]:
    e = args.eps or [0.3, 0.4]
    if any(v <= 0 for v in e) or (args.delta is not None and args.delta <= 0):
        raise UsageError("--eps and --delta must be positive")
    return (e[0], e[1] if len(e) > 1 else e[0])


# ---------------------------------------------------------------------------
# pipelines


def critical_scan(prob, x, y, cone: reg.DirectionCone, count: int = 21):
    """Candidate directions in the admissible cone and the first critical one found."""
    if cone.empty:
        return [], None, None
    if prob.n == 1:
        sign = 1.0 if cone.is_full else float(np.sign(cone.interior_direction[0]))
        cands = [np.array([sign * s]) for s in np.linspace(0.1, 2.0, count)]
    else:
        cands = list(cone.sample(count))
    for u in cands:
        try:
            v = kkt.find_critical_direction(prob, x, y, u)
        except kkt.KktError:
            v = None
        if v is not None and (np.any(u) or np.any(v)):
            return cands, u, v
    return cands, None, None


def choose_cq(prob, x, y, u, v, assume: bool):
    nn = kkt.check_nnamcq(prob, x, y)
    if nn.holds:
        return nn, [nn]
    fo = kkt.check_foscms(prob, x, y, u, v)
    if fo.holds:
        return fo, [nn, fo]
    ap = kkt.affine_polyhedral_cq(prob)
    if ap.holds:
        return ap, [nn, fo, ap]
    if assume:
        a = kkt.assumed_cq("--assume-cq")
        return a, [nn, fo, a]
    return None, [nn, fo, ap]


def certify_pipeline(prob, x, y, grid, u=None, assume=False) -> tuple[dict, dict, int]:
    reports, summary = {}, {}
    cone = reg.admissible_directions(prob, x, y, grid)
    reports["directions"] = cone
    if u is not None:
        if not cone.contains(u) and not cone.is_full:
            summary["finding"] = "direction is not admissible"
            return reports, summary, EXIT_NEGATIVE
        v = kkt.find_critical_direction(prob, x, y, u)
        cands = [u]
    else:
        cands, u, v = critical_scan(prob, x, y, cone)
    reports["scanned_directions"] = cands
    if v is None:
        summary["finding"] = "no critical direction"
        summary["certificate"] = False
        return reports, summary, EXIT_NEGATIVE
    reports["critical_direction"] = {"u": u, "v": v}
    cq, evidence = choose_cq(prob, x, y, u, v, assume)
    reports["cq"] = evidence
    if cq is None:
        summary["finding"] = "no constraint qualification certified"
        summary["certificate"] = False
        return reports, summary, EXIT_NEGATIVE
    try:
        cert = kkt.certify_directional_kkt(prob, x, y, u, v, cq)
    except kkt.KktError as exc:
        summary.update(finding=str(exc), certificate=False, best_residual=exc.best_residual)
        return reports, summary, EXIT_NEGATIVE
    reports["certificate"] = cert
    summary.update(certificate=True, verified=cert.verify(prob), nu=cert.nu, mu=cert.mu, beta=cert.beta,
                   residual=cert.residual, cq=cq.kind)
    return reports, summary, EXIT_OK


def figure1_data(samples_y: int = 801, samples_x: int = 600) -> dict:
    """Stationary curve, solution curve and the jump location for the Mirrlees example."""
    prob = builtin("mirrlees")
    ys = np.linspace(-2.0, 2.0, samples_y)
    ys = ys[np.abs(ys + 1.0) > 1e-9]
    sfo = [(y, (1 - y) * math.exp(4 * y) / (1 + y)) for y in ys]
    xs = np.linspace(0.05, 3.0, samples_x)
    sol = []
    for x, s in zip(xs, solve_lower_many(prob, xs[:, None])):
        for y in s.minimizers:
            sol.append((x, y[0]))

    def gap(x):
        P = stationary_set(prob, [x]).stationary_points[:, 0]
        hi, lo = P.max(), P.min()
        return evaluate(prob.f, EvalPoint([x], [hi])) - evaluate(prob.f, EvalPoint([x], [lo]))

    a, b = 0.5, 1.5
    ga = gap(a)
    for _ in range(60):
        c = 0.5 * (a + b)
        gc = gap(c)
        if (gc < 0) == (ga < 0):
            a, ga = c, gc
        else:
            b = c
    return {"sfo": sfo, "solution": sol, "jump": 0.5 * (a + b)}


def _solution_check(prob, xs, exact, grid) -> dict:
    rows, worst = [], 0.0
    for x, s in zip(xs, solve_lower_many(prob, np.asarray(xs, float).reshape(-1, prob.n), grid)):
        e = np.asarray(exact(x), dtype=float).reshape(-1, prob.m)
        err = ver.K.hausdorff(s.minimizers, e) if s.minimizers.size else math.inf
        worst = max(worst, err)
        rows.append({"x": x, "minimizers": s.minimizers, "exact": e, "error": err})
    return {"samples": rows, "max_error": worst}


def reproduce(name: str, grid: GridSpec, out: Path | None) -> tuple[dict, dict, int]:
    reports, summary = {}, {}
    y0 = solve_y0()
    if name == "figure1":
        data = figure1_data()
        summary["jump_x"] = data["jump"]
        summary["jump_ok"] = abs(data["jump"] - 1.0) <= 1e-3
        reports["sfo_points"] = len(data["sfo"])
        reports["solution_points"] = len(data["solution"])
        if out is not None:
            emit(data["sfo"], "csv", out / "figure1_sfo.csv", ("y", "x"))
            emit(data["solution"], "csv", out / "figure1_solution.csv", ("x", "y"))
            summary["files"] = ["figure1_sfo.csv", "figure1_solution.csv"]
        return reports, summary, EXIT_OK
    if name == "mirrlees":
        prob = builtin(name)
        x, y = prob.reference_point()
        cone = reg.admissible_directions(prob, x, y, grid)
        reports["directions"] = cone
        reports["localization"] = reg.check_localization(prob, x, y, grid=grid)
        reports["inner_semicontinuity"] = reg.inner_semicontinuity_report(prob, x, y, [-1.0], grid)
        eq_neg = ver.verify_equivalence(prob, x, y, [-1.0], 0.3, 0.4, 0.5, grid)
        eq_pos = ver.verify_equivalence(prob, x, y, [1.0], 0.3, 0.4, 0.5, grid)
        reports["equivalence_u_neg"], reports["equivalence_u_pos"] = eq_neg, eq_pos
        foa = ver.detect_classical_foa_failure(prob, x, y, 0.05, grid)
        reports["foa_failure"] = foa
        cands, u, v = critical_scan(prob, x, y, cone)
        summary.update(
            y0=y0,
            cone_normals=cone.normals,
            equivalence_u_neg=eq_neg.verdict,
            equivalence_u_pos=eq_pos.verdict,
            classical_foa_fails=foa.failed,
            critical_direction_found=v is not None,
        )
        return reports, summary, EXIT_OK
    if name == "modified-mirrlees":
        prob = builtin(name)
        x, y = prob.reference_point()
        cone = reg.admissible_directions(prob, x, y, grid)
        reports["directions"] = cone
        loc = reg.check_localization(prob, x, y, grid=grid)
        reports["localization"] = loc
        u = cone.interior_direction
        eq = ver.verify_equivalence(prob, x, y, u, 0.3, 0.4, 0.5, grid)
        reports["equivalence"] = eq
        reports["foa_failure"] = ver.detect_classical_foa_failure(prob, x, y, 0.05, grid)
        reports["local_min"] = ver.verify_bilevel_local_min(prob, x, y, 0.05, grid=grid)
        rep, summ, code = certify_pipeline(prob, x, y, grid, u)
        reports.update(rep)
        summary.update(summ)
        summary.update(cone_normals=cone.normals, localization=loc.certified, equivalence=eq.verdict)
        return reports, summary, code
    if name == "example-xy-1":
        prob = builtin(name)
        ic = reg.check_inf_compactness(prob, [0.0])
        reports["inf_compactness_at_0"] = ic
        reports["solutions"] = _solution_check(
            prob, [-2.0, -1.0, 0.5, 1.0, 2.0], lambda x: [1.0 / x], grid
        )
        s0 = solve_lower(prob, [0.0], grid)
        reports["solution_at_0"] = {"minimizers": s0.minimizers, "boundary_flag": s0.boundary_flag}
        summary.update(inf_compact_at_0=ic.holds, max_error=reports["solutions"]["max_error"])
        return reports, summary, EXIT_OK
    if name == "example-xy3":
        prob = builtin(name)
        xs = list(np.linspace(-2.0, 2.0, 21))
        chk = _solution_check(prob, xs, lambda x: [-math.copysign(abs(x / 4) ** (1 / 9), x)], grid)
        reports["solutions"] = chk
        summary["max_error"] = chk["max_error"]
        return reports, summary, EXIT_OK
    if name == "principal-agent-2":
        prob = builtin(name)
        x = np.array([1.0, 5.0])
        s = solve_lower(prob, x, grid)
        y = s.minimizers[0]
        reports["lower_solution"] = s.__dict__
        reports["directions"] = reg.admissible_directions(prob, x, y, grid, s)
        reports["localization"] = reg.check_localization(prob, x, y, grid=grid)
        wages = np.linspace(0.5, 6.0, 12)
        table = value_function(prob, np.column_stack([np.full_like(wages, 1.0), wages]), grid)
        reports["value_function"] = table
        summary.update(action=y, participation=[evaluate(g, EvalPoint(x, y)) for g in prob.G])
        if out is not None:
            emit(table.tolist(), "csv", out / "principal_agent_2_value.csv", ("x1", "x2", "V"))
        return reports, summary, EXIT_OK
    raise UsageError(f"unknown reproduction {name!r}; choose from {', '.join(REPRODUCIBLE)}")


# ---------------------------------------------------------------------------
# commands


def cmd_check_localization(args, doc):
    prob, grid = _problem(args), _grid(args)
    x, y = _point(args, prob, grid)
    loc = reg.check_localization(prob, x, y, liminf_evidence=args.liminf_evidence, grid=grid)
    doc.reports["localization"] = loc
    doc.reports["inner_semicontinuity"] = reg.inner_semicontinuity_report(prob, x, y, _direction(args, prob.n), grid)
    doc.summary["certified"] = loc.certified
    return EXIT_OK if loc.certified else EXIT_NEGATIVE


def cmd_directions(args, doc):
    prob, grid = _problem(args), _grid(args)
    x, y = _point(args, prob, grid)
    cone = reg.admissible_directions(prob, x, y, grid)
    doc.reports["directions"] = cone
    doc.summary.update(empty=cone.empty, full_space=cone.is_full)
    return EXIT_NEGATIVE if cone.empty else EXIT_OK


def cmd_verify_equivalence(args, doc):
    prob, grid = _problem(args), _grid(args)
    x, y = _point(args, prob, grid)
    u = _direction(args, prob.n)
    if u is None:
        u = np.zeros(prob.n)
    ex, ey = _eps(args)
    rep = ver.verify_equivalence(prob, x, y, u, ex, ey, args.delta or 0.5, grid)
    doc.reports["equivalence"] = rep
    doc.summary.update(verdict=rep.verdict, samples=rep.samples)
    return EXIT_OK if rep.verdict else EXIT_NEGATIVE


def cmd_certify(args, doc):
    prob, grid = _problem(args), _grid(args)
    x, y = _point(args, prob, grid)
    doc.reports["point"] = {"x": x, "y": y}
    rep, summ, code = certify_pipeline(prob, x, y, grid, _direction(args, prob.n), args.assume_cq)
    doc.reports.update(rep)
    doc.summary.update(summ)
    if args.out and "certificate" in rep:
        emit(rep["certificate"], "json", args.out)
    return code


def cmd_solve_lower(args, doc):
    prob, grid = _problem(args), _grid(args)
    xs = np.asarray(args.x, dtype=float).reshape(-1, prob.n)
    samples = solve_lower_many(prob, xs, grid)
    doc.reports["solutions"] = [s.__dict__ for s in samples]
    if args.out:
        rows = [list(s.x) + list(y) + [s.value] for s in samples for y in s.minimizers]
        hdr = [f"x{i + 1}" for i in range(prob.n)] + [f"y{j + 1}" for j in range(prob.m)] + ["V"]
        emit(rows, "csv", args.out, hdr)
    doc.summary["boundary_flags"] = [s.boundary_flag for s in samples]
    return EXIT_OK


def _x_values(args, prob):
    if args.x is not None:
        return np.asarray(args.x, dtype=float).reshape(-1, prob.n)
    if prob.n != 1:
        raise UsageError("--x-range is only available for one upper-level variable; use --x")
    a, b = args.x_range
    return np.linspace(a, b, args.samples)[:, None]


def cmd_value_function(args, doc):
    prob, grid = _problem(args), _grid(args)
    table = value_function(prob, _x_values(args, prob), grid)
    hdr = [f"x{i + 1}" for i in range(prob.n)] + ["V"]
    if args.out:
        emit(table.tolist(), "csv", args.out, hdr)
    doc.reports["value_function"] = {"header": hdr, "rows": table}
    return EXIT_OK


def cmd_plot_data(args, doc):
    out = Path(args.out or ".")
    if args.name == "figure1":
        rep, summ, code = reproduce("figure1", _grid(args), out)
        doc.reports.update(rep)
        doc.summary.update(summ)
        return code
    prob, grid = _problem(args), _grid(args)
    if prob.m != 1:
        raise UsageError("plot-data curves need a single lower-level variable")
    X = _x_values(args, prob)
    sol = [list(x) + [y[0]] for x, s in zip(X, solve_lower_many(prob, X, grid)) for y in s.minimizers]
    sfo = [list(x) + [y[0]] for x, s in zip(X, stationary_set_many(prob, X, grid)) for y in s.stationary_points]
    hdr = [f"x{i + 1}" for i in range(prob.n)] + ["y"]
    emit(sol, "csv", out / f"{prob.name}_solution.csv", hdr)
    emit(sfo, "csv", out / f"{prob.name}_stationary.csv", hdr)
    doc.summary["files"] = [f"{prob.name}_solution.csv", f"{prob.name}_stationary.csv"]
    return EXIT_OK


def cmd_reproduce(args, doc):
    out = Path(args.out) if args.out else Path(".")
    rep, summ, code = reproduce(args.name, _grid(args), out)
    doc.reports.update(rep)
    doc.summary.update(summ)
    if args.name != "figure1":
        emit(doc, "json", out / f"{args.name}_report.json")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bdfoa", description="Directional first-order analysis of bilevel programs.")
    p.add_argument("--version", action="version", version=f"bdfoa {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, point=True):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--builtin", choices=BUILTIN_NAMES, help="built-in problem")
        src.add_argument("--problem", help="problem config (JSON)")
        if point:
            sp.add_argument("--point", type=float, nargs="+", help="x then y (y is polished), or x only")
            sp.add_argument("--direction", type=float, nargs="+", help="upper-level direction u")
        sp.add_argument("--grid", type=int, help="grid points per axis for the lower-level oracle")
        sp.add_argument("--json", action="store_true", help="print the full report")

    sp = sub.add_parser("check-localization", help="single-valued localization conditions")
    common(sp)
    sp.add_argument("--liminf-evidence", action="store_true")
    sp.set_defaults(func=cmd_check_localization)

    sp = sub.add_parser("directions", help="admissible direction cone")
    common(sp)
    sp.set_defaults(func=cmd_directions)

    sp = sub.add_parser("verify-equivalence", help="compare stationary and solution maps")
    common(sp)
    sp.add_argument("--eps", type=float, nargs="+", help="eps_x [eps_y]")
    sp.add_argument("--delta", type=float)
    sp.set_defaults(func=cmd_verify_equivalence)

    sp = sub.add_parser("certify", help="directional KKT certificate")
    common(sp)
    sp.add_argument("--assume-cq", action="store_true", help="certify under a declared CQ")
    sp.add_argument("--out", help="write the certificate JSON here")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("solve-lower", help="global lower-level minimizers")
    common(sp, point=False)
    sp.add_argument("--x", type=float, nargs="+", required=True)
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(func=cmd_solve_lower)

    for name, func, hlp in (("value-function", cmd_value_function, "lower-level value function table"),):
        sp = sub.add_parser(name, help=hlp)
        common(sp, point=False)
        sp.add_argument("--x", type=float, nargs="+")
        sp.add_argument("--x-range", type=float, nargs=2, default=(-2.0, 2.0))
        sp.add_argument("--samples", type=int, default=101)
        sp.add_argument("--out", help="CSV path")
        sp.set_defaults(func=func)

    sp = sub.add_parser("reproduce", help="rerun a worked example")
    sp.add_argument("name", choices=REPRODUCIBLE)
    sp.add_argument("--out", help="output directory (default: current)")
    sp.add_argument("--grid", type=int)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_reproduce)

    sp = sub.add_parser("plot-data", help="CSV curves of the solution and stationary maps")
    sp.add_argument("name", nargs="?", default="curves", choices=("figure1", "curves"))
    common(sp, point=False)
    sp.add_argument("--x", type=float, nargs="+")
    sp.add_argument("--x-range", type=float, nargs=2, default=(-2.0, 2.0))
    sp.add_argument("--samples", type=int, default=201)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_plot_data)
    return p


def run(argv=None) -> tuple[int, ReportDocument | None]:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_ERROR, None
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0), None
    if getattr(args, "grid", None) is not None and args.grid < 2:
        print("bdfoa: error: --grid must be at least 2", file=sys.stderr)
        return EXIT_ERROR, None
    doc = ReportDocument(["bdfoa", *argv])
    try:
        code = args.func(args, doc)
    except UsageError as exc:
        print(f"bdfoa: error: {exc}", file=sys.stderr)
        return EXIT_ERROR, None
    except (ProblemError, ExprError, ValueError, OSError, kkt.KktError, reg.NotStationaryError) as exc:
        print(f"bdfoa: error: {exc}", file=sys.stderr)
        return EXIT_ERROR, None
    doc.summary["exit_code"] = code
    if args.json:
        sys.stdout.write(dumps(doc))
    else:
        sys.stdout.write(dumps({"command": doc.command, "summary": doc.summary}))
    return code, doc


def main(argv=None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``pooledlogit <command> ...``.

Commands
    fit          standard logistic regression on individual records
    pool-fit     pool records centrally, then fit the pooled model
    coordinator  run the analysis centre of a distributed session (TCP)
    node         run one data node of a distributed session (TCP)
    simulate     Monte Carlo comparison of standard and pooled fits

Exit status: 0 success, 2 invalid input, 3 numerical failure, 4 protocol failure.
Seeds are always explicit; no environment variable supplies a default.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
import warnings
from pathlib import Path

from . import __version__, glm, io, simulate
from .errors import PooledLogitError, ValidationError
from .model import ModelSpec, StudyMeta, validate_model_spec
from .pooling import AutoSizes, ExplicitSizes, SingleSize, aggregate_centralized, build_plan, check_poolsize
from .securesum import EXACT, MODES

log = logging.getLogger("pooledlogit")


# -- option helpers ---------------------------------------------------------------


def _pool_counts(text: str) -> ExplicitSizes:
    """``"3*4,4*22:3*3,4*1078"`` -> cases {3: 4, 4: 22}, controls {3: 3, 4: 1078}."""

    def side(part: str) -> dict[int, int]:
        out = {}
        for item in filter(None, (p.strip() for p in part.split(","))):
            g, sep, count = item.partition("*")
            if not sep:
                raise argparse.ArgumentTypeError(f"expected SIZE*COUNT, got {item!r}")
            out[int(g)] = int(count)
        return out

    cases, sep, controls = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("expected CASE_COUNTS:CONTROL_COUNTS")
    try:
        return ExplicitSizes(side(cases), side(controls))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_sizes(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pool-size", type=int, metavar="G", help="one pool size; remainders are discarded")
    g.add_argument("--auto-sizes", type=int, metavar="G", help="sizes G and G+1 chosen to use every subject")
    g.add_argument("--pool-counts", type=_pool_counts, metavar="SPEC", help="explicit counts, e.g. 3*4,4*22:3*3,4*1078")
    p.add_argument("--research", action="store_true", help="allow g=1 (no privacy)")


def _sizes(args):
    if args.pool_size is not None:
        return SingleSize(args.pool_size)
    if args.auto_sizes is not None:
        return AutoSizes(args.auto_sizes)
    return args.pool_counts


def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return value


def _out_dir(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(fit_result: glm.FitResult, meta: StudyMeta | None, level: float) -> str:
    text = fit_result.report(level)
    if meta is not None and meta.prevalence is not None:
        text += f"\nrecovered intercept: {glm.recover_baseline(fit_result, meta):.6f} (prevalence {meta.prevalence:g})\n"
    return text


def _warn_privacy(spec: ModelSpec, g_min: int, strict: bool) -> None:
    for w in validate_model_spec(spec, g_min, strict=strict):
        print(f"warning: {w}", file=sys.stderr)


# -- commands -------------------------------------------------------------------------


def cmd_fit(args) -> int:
    records = io.load_microdata(args.data)
    spec = io.load_model_config(args.model)
    fit_result = glm.fit(glm.individual_design(records, spec), max_iter=args.max_iter, tol=args.tol)
    print(fit_result.report(args.level), end="")
    if args.out:
        io.write_text(args.out, io.fit_record(fit_result, command="fit", data=str(args.data), model=io.format_model_config(spec)))
    return 0


def cmd_pool_fit(args) -> int:
    records = io.load_microdata(args.data)
    spec = io.load_model_config(args.model)
    sizes = _sizes(args)
    privacy = not args.research
    for r in records:
        r.check(spec)
    cases = [r.subject_id for r in records if r.outcome == 1]
    controls = [r.subject_id for r in records if r.outcome == 0]
    meta = StudyMeta(len(cases), len(controls), args.prevalence)
    plan = build_plan(meta, cases, controls, sizes, args.seed, privacy=privacy)
    for g in sorted(set(plan.sizes)):
        for msg in check_poolsize(g):
            print(f"warning: {msg}", file=sys.stderr)
    _warn_privacy(spec, plan.g_min, args.strict)
    rows = aggregate_centralized(plan, records, spec, mode=args.mode)
    fit_result = glm.fit(glm.pooled_design(rows, spec), max_iter=args.max_iter, tol=args.tol)
    header = io.header_line(args.seed, io.analysis_config(spec, sizes, args.mode, privacy))
    print(header)
    print(_report(fit_result, meta, args.level), end="")
    out = _out_dir(args.out_dir)
    if out is not None:
        io.write_text(out / "plan.csv", io.format_plan(plan, header=header))
        io.write_text(out / "pooled.csv", io.format_pooled(rows, spec.names, header=header))
        io.write_text(out / "fit.json", io.fit_record(fit_result, command="pool-fit", seed=args.seed, header=header))
    return 0


def cmd_coordinator(args) -> int:
    from .protocol import CoordinatorConfig, SocketEndpoint, Transcript, run_coordinator
    from .protocol.transport import parse_address

    spec = io.load_model_config(args.model)
    out = _out_dir(args.out_dir)
    transcript = Transcript(out / "transcript.jsonl" if out else None)
    host, port = parse_address(args.listen)
    endpoint = SocketEndpoint(host, port, transcript)
    config = CoordinatorConfig(
        session_id=args.session,
        roster=[n.strip() for n in args.nodes.split(",") if n.strip()],
        spec=spec,
        sizes=_sizes(args),
        seed=args.seed,
        mode=args.mode,
        privacy=not args.research,
        strict=args.strict,
        prevalence=args.prevalence,
        fit_options={"max_iter": args.max_iter, "tol": args.tol},
    )
    print(f"coordinator listening on {endpoint.address}", file=sys.stderr, flush=True)
    try:
        coord = run_coordinator(config, endpoint, timeout=args.timeout)
    finally:
        endpoint.close()
    if coord.error is not None:
        raise coord.error
    header = coord.header()
    print(header)
    print(_report(coord.fit, coord.meta, args.level), end="")
    if out is not None:
        io.write_text(out / "plan.csv", coord.plan_csv())
        io.write_text(out / "pooled.csv", coord.pooled_csv())
        io.write_text(out / "fit.json", io.fit_record(coord.fit, command="coordinator", seed=args.seed, header=header))
    return 0


def cmd_node(args) -> int:
    from .protocol import Node, SocketEndpoint, Transcript, run_node
    from .protocol.transport import parse_address

    records = io.load_microdata(args.data)
    transcript = Transcript(args.transcript) if args.transcript else None
    host, port = parse_address(args.listen)
    endpoint = SocketEndpoint(host, port, transcript)
    node = Node(args.id, records, args.session, args.mask_seed, strict=args.strict)
    try:
        run_node(node, endpoint, args.coordinator, timeout=args.timeout)
    finally:
        endpoint.close()
    if node.error is not None:
        raise node.error
    print(f"node {args.id}: {node.phase}", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    config = simulate.SimConfig(
        n_subjects=args.subjects,
        n_reps=args.reps,
        corr_x_w=args.corr,
        pool_sizes=tuple(int(g) for g in args.sizes.split(",")),
        seed=args.seed,
    )

    def progress(done, total):
        if done % max(1, total // 10) == 0 or done == total:
            print(f"  {done}/{total} reps", file=sys.stderr, flush=True)

    rep = simulate.run_replication(config, workers=args.workers, progress=None if args.quiet else progress)
    header = io.header_line(config.seed, {"simulate": repr(config)})
    print(header)
    print(simulate.table_text(rep, with_power=args.power), end="")
    out = _out_dir(args.out_dir)
    if out is not None:
        io.write_text(out / "table.csv", simulate.table_csv(rep, header=header, with_power=args.power))
        io.write_text(out / "table.txt", header + "\n" + simulate.table_text(rep, with_power=args.power))
        io.write_text(out / "reps.csv", simulate.per_rep_csv(rep, header=header))
    if args.scatter is not None:
        arm = f"g={args.scatter}"
        if arm not in config.arms:
            raise ValidationError(f"--scatter {args.scatter} is not one of the simulated pool sizes")
        pairs, lines = simulate.scatter_report(rep, arm)
        for line in lines:
            state = "degenerate" if line.degenerate else f"slope {line.slope:.4f} intercept {line.intercept:+.4f}"
            print(f"agreement {simulate.UNPOOLED} vs {arm} {line.parameter}: {state} (n={line.n})")
        if out is not None:
            cols = ["rep", "parameter", simulate.UNPOOLED, arm]
            body = "\n".join(",".join(repr(p[c]) if isinstance(p[c], float) else str(p[c]) for c in cols) for p in pairs)
            io.write_text(out / f"scatter_g{args.scatter}.csv", header + "\n" + ",".join(cols) + "\n" + body + "\n")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pooledlogit", description="Logistic regression on pooled covariates.")
    parser.add_argument("--version", action="version", version=f"pooledlogit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def fit_opts(p):
        p.add_argument("--max-iter", type=int, default=glm.MAX_ITER)
        p.add_argument("--tol", type=float, default=glm.TOL)
        p.add_argument("--level", type=float, default=0.95, help="confidence level of reported intervals")

    p = sub.add_parser("fit", help="standard individual-level fit")
    p.add_argument("--data", required=True, help="microdata CSV")
    p.add_argument("--model", required=True, help="model config file")
    p.add_argument("--out", help="write the fit record (JSON) here")
    fit_opts(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("pool-fit", help="pool centrally, then fit")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=_seed, required=True)
    _add_sizes(p)
    p.add_argument("--mode", choices=MODES, default=EXACT)
    p.add_argument("--strict", action="store_true", help="reject models that could reveal individual values")
    p.add_argument("--prevalence", type=float, help="population prevalence, for recovering the intercept")
    p.add_argument("--out-dir", help="write plan.csv, pooled.csv and fit.json here")
    fit_opts(p)
    p.set_defaults(func=cmd_pool_fit)

    p = sub.add_parser("coordinator", help="run the analysis centre of a session")
    p.add_argument("--session", required=True)
    p.add_argument("--nodes", required=True, help="comma-separated node ids")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=_seed, required=True)
    _add_sizes(p)
    p.add_argument("--listen", default="127.0.0.1:7700", help="host:port")
    p.add_argument("--timeout", type=float, default=30.0, help="seconds of silence before giving up")
    p.add_argument("--mode", choices=MODES, default=EXACT)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--prevalence", type=float)
    p.add_argument("--out-dir", help="write transcript.jsonl, plan.csv, pooled.csv and fit.json here")
    fit_opts(p)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("node", help="run one data node of a session")
    p.add_argument("--id", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--coordinator", required=True, help="coordinator host:port")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port for other nodes to reach this one")
    p.add_argument("--mask-seed", type=_seed, required=True)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--transcript", help="append this node's outgoing messages here (JSONL)")
    p.set_defaults(func=cmd_node)

    p = sub.add_parser("simulate", help="standard vs pooled Monte Carlo")
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--subjects", type=int, default=30000)
    p.add_argument("--sizes", default="2,3,4,6", help="comma-separated pool sizes")
    p.add_argument("--corr", type=float, default=0.3, help="correlation of X and the normal behind Z1")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--power", action="store_true", help="add a power row to the table")
    p.add_argument("--scatter", type=int, metavar="G", help="report agreement of g=G with the standard fit")
    p.add_argument("--out-dir", help="write table.csv, table.txt and reps.csv here")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def _origin(exc: BaseException) -> str:
    """Package module in which the exception was raised."""
    frames = [f for f, _ in traceback.walk_tb(exc.__traceback__)]
    names = [f.f_globals.get("__name__", "") for f in frames]
    inner = [n for n in names if n.startswith("pooledlogit") and n != "pooledlogit.cli"]
    return inner[-1] if inner else "pooledlogit.cli"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", glm.ConvergenceWarning)
        try:
            code = args.func(args)
        except PooledLogitError as exc:
            print(f"error ({_origin(exc)}: {type(exc).__name__}): {exc}", file=sys.stderr)
            return exc.exit_code
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

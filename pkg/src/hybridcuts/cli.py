"""Command-line entry point: generate, solve, bench and hev-sim."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import SyntheticConfig, benchmark_csv, generate_synthetic, run_benchmark
from .bnb import VARIANTS, SolveConfig, solve_miqp
from .hev import HevParams, default_profile, load_profile, mpc_run, params_from_dict
from .model import InstanceError, load_instance, save_instance

EXIT_OK, EXIT_USAGE, EXIT_SOLVE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("hybridcuts")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    # None means "not set", which the help text already says
    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def _cells(text: str):
    out = []
    for item in text.split(","):
        try:
            dx, dy = item.lower().split("x")
            out.append((int(dx), int(dy)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"cell {item!r} is not of the form DXxDY") from None
    return out


def _seeds(text: str):
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    fmt = _Help
    ap = _Parser(prog="hybridcuts", description="Strong formulations for hybrid control problems.", formatter_class=fmt)
    ap.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    ap.add_argument("--threads", type=int, default=1, help="worker cap")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", formatter_class=fmt, help="write seeded synthetic instances")
    g.add_argument("--dx", type=int, default=1, help="state dimension")
    g.add_argument("--dy", type=int, default=1, help="control dimension")
    g.add_argument("--dz", type=int, default=1, help="number of modes")
    g.add_argument("--n", type=int, default=50, help="horizon length")
    g.add_argument("--seed", type=int, required=True, help="seed of the first instance")
    g.add_argument("--count", type=int, default=1, help="instances with consecutive seeds")
    g.add_argument("--out", required=True, help="file (count 1) or directory")

    s = sub.add_parser("solve", formatter_class=fmt, help="solve one instance file")
    s.add_argument("--in", dest="inp", required=True, help="instance JSON")
    s.add_argument("--variant", choices=VARIANTS, default="wc-g", help="formulation")
    s.add_argument("--time-limit", type=float, default=3600.0, help="seconds")
    s.add_argument("--root-cut-rounds", type=int, default=50, help="separation rounds at the root")
    s.add_argument("--node-cut-rounds", type=int, default=0, help="separation rounds per node")
    s.add_argument("--split-policy", choices=("singletons", "all"), default="singletons", help="mode splits to separate")
    s.add_argument("--out", help="report file (stdout if omitted)")

    b = sub.add_parser("bench", formatter_class=fmt, help="run the synthetic benchmark")
    b.add_argument("--cells", type=_cells, default=[(1, 1), (2, 2)], help="e.g. 1x1,2x2")
    b.add_argument("--seeds", type=_seeds, default=[0], help="e.g. 0-9 or 1,4,7")
    b.add_argument("--variant", nargs="+", choices=VARIANTS, default=list(VARIANTS), help="formulations")
    b.add_argument("--n", type=int, default=10, help="horizon length")
    b.add_argument("--time-limit", type=float, default=3600.0, help="seconds per solve")
    b.add_argument("--out", required=True, help="CSV file")

    h = sub.add_parser("hev-sim", formatter_class=fmt, help="closed-loop HEV simulation")
    h.add_argument("--params", help="JSON file of HevParams overrides; defaults if omitted")
    h.add_argument("--profile", help="CSV with time_s,V_r,T_d; built-in cycle if omitted")
    h.add_argument("--variant", choices=VARIANTS, default="wc-g", help="formulation")
    h.add_argument("--r1", type=float, help="SOC tracking weight; overrides --params")
    h.add_argument("--gamma", type=float, help="fuel carry-over factor")
    h.add_argument("--ts", type=float, help="sampling time in seconds")
    h.add_argument("--time-limit", type=float, default=60.0, help="seconds per MPC solve")
    h.add_argument("--out", required=True, help="trace CSV")
    return ap


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _generate(args):
    try:
        cfg = SyntheticConfig(n=args.n, dx=args.dx, dy=args.dy, dz=args.dz, count=args.count)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    if args.count == 1 and out.suffix == ".json":
        save_instance(generate_synthetic(cfg, args.seed), out)
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        save_instance(generate_synthetic(cfg, args.seed + i), out / f"dx{args.dx}-dy{args.dy}-n{args.n}-s{args.seed + i}.json")
    return EXIT_OK


def _solve(args):
    inst = load_instance(args.inp)
    cfg = SolveConfig(variant=args.variant, time_limit=args.time_limit, root_cut_rounds=args.root_cut_rounds,
                      node_cut_rounds=args.node_cut_rounds, split_policy=args.split_policy, threads=args.threads)
    try:
        rep = solve_miqp(inst, cfg)
    except InstanceError as exc:
        print(f"error: invalid instance: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    text = rep.record()
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    log.info("status %s, incumbent %s, nodes %d", rep.status, rep.incumbent, rep.nodes)
    return EXIT_OK if rep.status in ("optimal", "time-limit") else EXIT_SOLVE


def _bench(args):
    cfg = SolveConfig(time_limit=args.time_limit)
    try:
        rows, agg = run_benchmark(args.cells, args.variant, args.seeds, cfg, n=args.n, threads=args.threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write(args.out, benchmark_csv(rows, agg))
    return EXIT_SOLVE if any(r.status.startswith("error") for r in rows) else EXIT_OK


def _hev(args):
    overrides = {}
    if args.params:
        overrides = json.loads(Path(args.params).read_text(encoding="utf-8"))
    for key, val in (("r1", args.r1), ("gamma", args.gamma), ("Ts", args.ts)):
        if val is not None:
            overrides[key] = val
    try:
        params = params_from_dict(overrides) if overrides else HevParams()
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    profile = load_profile(args.profile) if args.profile else default_profile()
    trace = mpc_run(params, profile, args.variant, SolveConfig(time_limit=args.time_limit))
    _write(args.out, trace.to_csv())
    log.info("violations %d, mean root gap %.4g, nodes %d", trace.violations(), trace.mean_root_gap,
             trace.total_nodes)
    return EXIT_SOLVE if any(s.fallback for s in trace.steps) else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    handler = {"generate": _generate, "solve": _solve, "bench": _bench, "hev-sim": _hev}[args.command]
    try:
        return handler(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InstanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

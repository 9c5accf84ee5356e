"""Command-line entry point: ``treeg {verify,run,sweep,gradcheck}``.

Exit codes: 0 success, 1 a check failed, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import sys
import time

from . import harness
from .config import SHIPPED, ConfigError, load_config


def _print_checks(checks) -> int:
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed"
          + ("" if not failed else f"; {len(failed)} failed"))
    return 1 if failed else 0


def cmd_verify(args) -> int:
    return _print_checks(harness.verify_checks())


def _load(args):
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg = cfg.with_search(seeds=args.seeds)
    for key in ("A", "K"):
        v = getattr(args, key, None)
        if v is not None:
            cfg = cfg.with_search(**{key: v})
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    t0 = time.perf_counter()
    rows = harness.cli_run(cfg, out_root=args.output_root, workers=args.workers,
                           traces=True if args.traces else None, csv_path=args.csv)
    fy = [r["final_fy"] for r in rows]
    mae = [r["mae"] for r in rows]
    print(f"{cfg.task_id}: {len(rows)} runs, family {cfg.guidance.family}, "
          f"A={cfg.search['A']} K={cfg.search['K']}, mean f_y {sum(fy) / len(fy):.4f}, "
          f"mean MAE {sum(mae) / len(mae):.4f}, {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    rows = harness.cli_sweep(cfg, args.budgets, out_root=args.output_root, workers=args.workers,
                             csv_path=args.csv)
    print(f"{'budget':>6} {'A':>3} {'K':>3} {'mean f_y':>10} {'se':>8} {'wall s':>8}")
    for r in rows:
        star = "  *" if r["frontier"] else ""
        print(f"{r['budget']:>6} {r['A']:>3} {r['K']:>3} {r['mean_fy']:>10.4f} {r['se_fy']:>8.4f} "
              f"{r['mean_wall_s']:>8.3f}{star}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    return _print_checks(harness.cli_gradcheck(cfg, n_states=args.states))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treeg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", help="run the exact invariant checks")

    def common(sp):
        sp.add_argument("config", help=f"YAML file or a shipped name: {', '.join(SHIPPED)}")
        sp.add_argument("--seeds", type=int, help="override the number of seeds")
        sp.add_argument("--workers", type=int, help="run seeds on this many threads")
        sp.add_argument("--output-root", help=f"defaults to ${harness.OUTPUT_ENV} or ./treeg-output")
        sp.add_argument("--csv", help="write rows to this file instead of the configured one")

    r = sub.add_parser("run", help="run the configured search for every seed")
    common(r)
    r.add_argument("-A", type=int)
    r.add_argument("-K", type=int)
    r.add_argument("--traces", action="store_true", help="write one JSON trace per run")
    s = sub.add_parser("sweep", help="fixed-budget A x K sweep")
    common(s)
    s.add_argument("--budgets", type=int, nargs="+", required=True)
    g = sub.add_parser("gradcheck", help="gradient and ratio estimator checks")
    g.add_argument("config")
    g.add_argument("--states", type=int, default=100)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"verify": cmd_verify, "run": cmd_run, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

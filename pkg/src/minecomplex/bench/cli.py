"""Command line entry point: generate, solve, compare, selfcheck."""

import argparse
import sys
from pathlib import Path

from ..flowsheet import InfeasibleSolutionError
from . import harness
from .config import POLICIES, SELECTORS, ConfigError, ExperimentConfig, preset

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def load_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    cfg = ExperimentConfig.load(args.config) if args.config else preset(args.preset or "copper")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "budget_seconds", None) is not None:
        cfg.budget_seconds = args.budget_seconds
    if getattr(args, "policy", None) is not None:
        cfg.policy = args.policy
    if getattr(args, "selector", None) is not None:
        cfg.selector = args.selector
    if getattr(args, "max_iters", None) is not None:
        cfg.schedule.max_iters = args.max_iters
    return cfg.validate()


def cmd_generate(args):
    cfg = load_config(args)
    out = Path(args.out or Path(cfg.output_dir) / "instance")
    manifest = harness.generate(cfg, out, args.force)
    for name, h in manifest["files"].items():
        print(f"{h}  {out / name}")
    print(f"instance {harness.instance_hash(manifest)}")
    return EXIT_OK


def cmd_solve(args):
    cfg = load_config(args)
    instance = Path(args.instance or Path(cfg.output_dir) / "instance")
    out = Path(args.out or Path(cfg.output_dir) / f"{cfg.policy}-seed{cfg.seed}")

    def progress(it, best):
        if args.verbose and it % 5000 == 0:
            print(f"  iter {it:>8d}  best {best:.6e}", file=sys.stderr)

    header, body = harness.solve(cfg, instance, out, args.force, audit=args.audit,
                                 figures=not args.no_figures, progress_cb=progress)
    q = body["npv_quantiles"]
    print(f"{header['method']} seed {cfg.seed}: {body['timing']['iterations']} iterations, "
          f"objective {body['initial_objective']:.6e} -> {body['final_objective']:.6e}")
    print(f"NPV P10 {q['P10']:.6e}  P50 {q['P50']:.6e}  P90 {q['P90']:.6e}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_compare(args):
    reports = [harness.load_report(p) for p in args.reports]
    result = harness.compare(reports, args.out, args.force, figures=not args.no_figures)
    print(harness.format_table(result))
    if args.out:
        print(f"\nwritten: {Path(args.out) / 'comparison.csv'}")
    return EXIT_OK


def cmd_selfcheck(args):
    results = harness.selfcheck(args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAULT


def build_parser():
    p = _Parser(prog="minecomplex", description="Stochastic mining-complex scheduling bench.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, solver=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--preset", choices=("copper", "gold"), help="built-in config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if solver:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--budget-seconds", type=float)
            sp.add_argument("--policy", choices=POLICIES)
            sp.add_argument("--selector", choices=SELECTORS, help="heuristic selection")
            sp.add_argument("--max-iters", type=int)

    g = sub.add_parser("generate", help="write block model and price paths")
    common(g)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run the solver and write a report")
    common(s, solver=True)
    s.add_argument("--instance", help="directory written by generate")
    s.add_argument("--audit", action="store_true", help="validate every iteration")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("compare", help="compare run reports on one instance")
    c.add_argument("reports", nargs="+", help="report.json files or run directories")
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.add_argument("--no-figures", action="store_true")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("selfcheck", help="oracle, gradient and distribution checks")
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.HarnessError, InfeasibleSolutionError, FloatingPointError) as e:
        print(f"fault: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, ContractError, ParseError

log = logging.getLogger("cleot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="cleot", description="Label-noise robust training with entropic optimal transport.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run a method x noise x seed grid from a config file")
    p.add_argument("config")

    p = sub.add_parser("validate-config", help="parse a config file without running anything")
    p.add_argument("config")

    p = sub.add_parser("toy", help="two-moons walkthrough: noisy labels, then three CLEOT rounds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (default: toy-seed<seed>)")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--flip", type=float, default=0.2)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--initial-epochs", type=int, default=500)
    p.add_argument("--epochs-per-round", type=int, default=100)
    p.add_argument("--lam", type=float, default=0.02)
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=None, help="coupling graph threshold (default 0.25/n^2)")
    p.add_argument("--resolution", type=int, default=100)

    p = sub.add_parser("gen-data", help="write a two-moons dataset as CSV")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="render a results summary or a checkpoint's decision boundary")
    p.add_argument("--results", help="results.csv from a grid run")
    p.add_argument("--checkpoint", help="CLNN checkpoint of an MLP")
    p.add_argument("--data", help="dataset CSV to draw under the decision boundary")
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--out", required=True)
    return parser


def _cmd_run(args):
    from .harness import run_grid

    table = run_grid(load_config(args.config))
    for row in table.summary:
        print(f"{row['method']:>16}  noise={float(row['noise']):<5g} acc={float(row['mean_acc']):.4f} "
              f"+/- {float(row['std_acc']):.4f}  (n={row['n']})")
    return 2 if table.failures else 0


def _cmd_validate(args):
    cfg = load_config(args.config)
    cells = len(cfg.methods) * len(cfg.noise_levels) * len(cfg.seeds)
    print(f"ok: {len(cfg.methods)} methods x {len(cfg.noise_levels)} noise levels x {len(cfg.seeds)} seeds = {cells} runs")
    return 0


def _cmd_toy(args):
    from .harness import run_toy

    out = Path(args.out or f"toy-seed{args.seed}")
    res = run_toy(out, seed=args.seed, n=args.n, flip=args.flip, rounds=args.rounds,
                  initial_epochs=args.initial_epochs, epochs_per_round=args.epochs_per_round,
                  alpha=args.alpha, beta=args.beta, lam=args.lam, threshold=args.threshold,
                  resolution=args.resolution)
    for k, acc in enumerate(res.accuracy):
        print(f"round {k}: accuracy {acc:.4f}")
    print(f"outputs in {out}")
    return 0


def _cmd_gen_data(args):
    from .data import save_csv, two_moons

    save_csv(two_moons(args.n, args.noise_std, np.random.default_rng(args.seed)), args.out)
    return 0


def _cmd_plot(args):
    from .plotting import plot_accuracy_summary, plot_decision_boundary

    if args.results:
        from .harness import aggregate, read_results

        plot_accuracy_summary(aggregate(read_results(args.results)), args.out)
        return 0
    if args.checkpoint and args.data:
        from .data import load_csv
        from .nn import net_from_checkpoint
        from .training import accuracy

        net = net_from_checkpoint(args.checkpoint)
        ds = load_csv(args.data)
        plot_decision_boundary(net, ds.features, ds.labels, args.resolution, args.out,
                               accuracy(net, ds.features, ds.labels))
        return 0
    raise UsageError("plot needs --results, or --checkpoint together with --data")


COMMANDS = {"run": _cmd_run, "validate-config": _cmd_validate, "toy": _cmd_toy,
            "gen-data": _cmd_gen_data, "plot": _cmd_plot}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, ParseError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

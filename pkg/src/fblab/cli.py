"""Command-line entry point: ``fblab <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 check failure.
"""

import argparse
import os
import sys

from . import harness as H
from .checkpoint import load_checkpoint
from .errors import ConfigError, FormatError, NumericError, TrainingAborted, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fblab", description="Forward-backward representation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write metrics.csv, final.fbckpt, config.resolved")
    _common(p)

    p = sub.add_parser("theory-check", help="run the rank, ground-truth, attack and witness checks")
    _common(p)
    p.add_argument("--env", default=None, help="three_state | five_state (default: from --config or three_state)")
    p.add_argument("--d", default=None, help="comma-separated representation dimensions (default: |S x A|)")

    p = sub.add_parser("sweep", help="one run per value of lr or tau_policy_train")
    _common(p)
    p.add_argument("--param", required=True, choices=H.SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("aggregate", help="mean and std across metrics.csv files")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    p.add_argument("--out", help="output CSV (default: stdout)")

    p = sub.add_parser("eval-checkpoint", help="evaluate a checkpoint on the config's eval latents")
    _common(p)
    p.add_argument("checkpoint")
    return parser


def _need_config(args):
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    return args.config


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value list {text!r}: {exc}") from exc


def _cmd_train(args):
    res = H.run_experiment(_need_config(args), args.seed, args.out)
    last = res.records[-1]
    print(f"wrote {res.output_dir}: step {last.step} eps_smr {last.eps_smr:.6g} eps_equiv {last.eps_equiv:.6g}")
    return EXIT_OK


def _cmd_theory(args):
    exp = H.load_config(args.config) if args.config else H.ExperimentConfig()
    if args.env:
        exp.env = H.EnvConfig(kind=args.env)
    seed = exp.train.seed if args.seed is None else args.seed
    n = exp.env.build().num_pairs
    d_list = [int(v) for v in _floats(args.d)] if args.d else [n]
    out = args.out or exp.output_dir
    results, text = H.run_theory_checks(exp.env, d_list, seed, os.path.join(out, "theory_report.txt"),
                                        exp.train.gamma)
    print(text, end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _cmd_sweep(args):
    values = _floats(args.values)
    rows = H.sweep(_need_config(args), args.param, values, args.seed, args.out)
    failed = [v for v, status, _ in rows if status != "ok"]
    for value, status, rec in rows:
        tail = f"eps_smr {rec.eps_smr:.6g} eps_equiv {rec.eps_equiv:.6g}" if rec else ""
        print(f"{args.param}={value:g} {status} {tail}")
    return EXIT_NUMERIC if failed else EXIT_OK


def _cmd_aggregate(args):
    result = H.aggregate(args.metrics, args.out)
    if args.out is None:
        cols = list(result)
        print(",".join(cols))
        for i in range(len(result["step"])):
            print(",".join([str(int(result["step"][i]))] + ["{:.12g}".format(result[c][i]) for c in cols[1:]]))
    return EXIT_OK


def _cmd_eval(args):
    exp = H.load_config(_need_config(args))
    if args.seed is not None:
        exp.train.seed = args.seed
    model = load_checkpoint(args.checkpoint, expect_algo=exp.algo)
    rec = H.evaluate_checkpoint(model, exp)
    print(H.METRICS_HEADER)
    print(H.format_row(rec))
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "theory-check": _cmd_theory,
    "sweep": _cmd_sweep,
    "aggregate": _cmd_aggregate,
    "eval-checkpoint": _cmd_eval,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"error: {exc}; last good step {exc.last_good_step}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry points: generate-data, train, resume, evaluate, sweep.

Every RunConfig key is exposed as a ``--key value`` flag; ``--config``
loads a flat key = value file first and flags override it. Errors exit
nonzero with a single machine-parseable ``error: <Type>: <message>``
line on stderr.
"""

import argparse
import sys
from dataclasses import fields

from . import runner
from .errors import PhaseganError
from .runner import RunConfig, parse_config
from .synthdata import DatasetConfig, write_dataset


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value config file")
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="V")


def _build_config(args):
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(RunConfig)
        if getattr(args, f"cfg_{f.name}", None) is not None
    }
    if args.config:
        return runner.load_config(args.config, overrides)
    return parse_config("", overrides)


def _cmd_generate_data(args):
    cfg = DatasetConfig(
        num_train=args.num_train,
        num_test=args.num_test,
        image_size=args.image_size,
        categories=args.categories,
        seed=args.seed,
    )
    write_dataset(args.out_dir, cfg)
    print(f"wrote {cfg.num_train}+{cfg.num_test} scenes to {args.out_dir}")
    return 0


def _cmd_train(args):
    config = _build_config(args)
    report = runner.train(config)
    print(f"finished: {report.to_csv_row()}")
    return 0


def _cmd_resume(args):
    config = _build_config(args) if args.config else None
    report = runner.resume(args.checkpoint, config)
    if report is not None:
        print(f"finished: {report.to_csv_row()}")
    return 0


def _cmd_evaluate(args):
    config = _build_config(args) if args.config else None
    report = runner.evaluate(args.checkpoint, config, identity=args.identity)
    print(report.to_text(), end="")
    return 0


def _cmd_sweep(args):
    config = _build_config(args)
    ratios = args.ratios.split(",")
    divisors = [float(v) for v in args.lr_divisors.split(",")]
    results = runner.sweep(config, ratios, divisors)
    failed = sum(1 for _, _, report in results if report is None)
    print(f"sweep complete: {len(results) - failed} ok, {failed} failed")
    return 0 if failed == 0 else 1


def make_parser():
    parser = argparse.ArgumentParser(
        prog="phasegan",
        description="Image translation GAN training with interleaved semantic phases",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a scene dataset to disk")
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--num-train", type=int, default=200)
    gen.add_argument("--num-test", type=int, default=40)
    gen.add_argument("--image-size", type=int, default=32)
    gen.add_argument("--categories", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(fn=_cmd_generate_data)

    tr = sub.add_parser("train", help="train from scratch")
    _add_config_flags(tr)
    tr.set_defaults(fn=_cmd_train)

    rs = sub.add_parser("resume", help="continue from a checkpoint")
    rs.add_argument("checkpoint")
    _add_config_flags(rs)
    rs.set_defaults(fn=_cmd_resume)

    ev = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    ev.add_argument("checkpoint")
    ev.add_argument(
        "--identity",
        action="store_true",
        help="debug mode: feed targets straight through",
    )
    _add_config_flags(ev)
    ev.set_defaults(fn=_cmd_evaluate)

    sw = sub.add_parser("sweep", help="grid of (ratio, lr divisor) runs")
    sw.add_argument("--ratios", default="100:0,90:10,80:20,70:30,60:40")
    sw.add_argument("--lr-divisors", dest="lr_divisors", default="1,10,100")
    _add_config_flags(sw)
    sw.set_defaults(fn=_cmd_sweep)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PhaseganError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

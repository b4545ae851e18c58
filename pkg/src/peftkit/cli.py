"""Command line entry point: ``peftkit {gradcheck,count-params,train,merge,bench}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Optional, Sequence

from .adapters import Kind, param_count
from .errors import ConfigError, PeftError, TrainingDiverged
from .harness.bench import cmd_bench
from .harness.checkpoint import cmd_merge
from .harness.config import TrainConfig, load_config
from .harness.gradcheck import cmd_gradcheck
from .harness.train import cmd_train

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser, require_seed: bool = False) -> None:
    p.add_argument("--config", help="YAML/JSON file with TrainConfig fields")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            p.add_argument(flag, type=int, required=require_seed, default=None)
        elif isinstance(f.default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, default=None, metavar=f.name.upper(),
                           help=f"default: {f.default}")


def _config_from_args(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    if args.config:
        return load_config(args.config, **overrides)
    return TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def count_params_rows(kind: str, n: int, m: int, r: int) -> list[str]:
    kinds = list(Kind) if kind == "all" else [Kind.parse(kind)]
    lora = param_count(Kind.LORA, n, m, r)
    rows = [f"{'kind':<6} {'n':>6} {'m':>6} {'r':>4} {'params':>9} {'overhead':>9} {'vs_lora':>8}"]
    for k in kinds:
        count = param_count(k, n, m, r)
        rows.append(f"{k.value:<6} {n:>6} {m:>6} {r:>4} {count:>9} {count - lora:>+9d} {count / lora:>8.4f}")
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peftkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    _add_config_flags(p)

    p = sub.add_parser("count-params", help="trainable parameter counts vs LoRA")
    p.add_argument("--kind", default="all", choices=["all"] + [k.value for k in Kind])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--r", type=int, required=True)

    p = sub.add_parser("train", help="run a training experiment")
    _add_config_flags(p, require_seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint manifest to resume from (config flags ignored)")
    p.add_argument("--stop-after", type=int, help="stop at this global step and checkpoint")

    p = sub.add_parser("merge", help="write dense effective weights from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")

    p = sub.add_parser("bench", help="median step time per adapter kind")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(_config_from_args(args))
        if args.command == "count-params":
            if min(args.n, args.m, args.r) < 1 or args.r > min(args.n, args.m):
                raise ConfigError("need 1 <= r <= min(n, m)")
            print("\n".join(count_params_rows(args.kind, args.n, args.m, args.r)))
            return EXIT_OK
        if args.command == "train":
            config = None if args.resume else _config_from_args(args)
            record = cmd_train(config, args.out, resume=args.resume, stop_after=args.stop_after)
            print(record.artifacts["summary"].read_text(), end="")
            return EXIT_OK
        if args.command == "merge":
            merged = cmd_merge(args.checkpoint, args.out)
            print(f"wrote {len(merged)} merged layer(s) to {args.out}")
            return EXIT_OK
        if args.command == "bench":
            if args.steps < 200:
                raise ConfigError("bench needs at least 200 timed steps")
            cmd_bench(args.n, args.m, args.r, args.batch, args.steps, args.warmup, args.seed)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (PeftError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

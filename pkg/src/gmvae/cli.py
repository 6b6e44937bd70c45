"""``gmvae <command> --config <path> [--out <dir>] [--seed <u64>]``."""
from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import CheckpointError, ConfigError, GMVAEError

COMMANDS = ("gen-data", "train", "eval", "bench")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmvae", description="Gaussian mixture VAE experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return harness.EXIT_CONFIG
    try:
        cfg = harness.load_config(args.config, args.seed)
        if args.command == "gen-data":
            harness.cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            harness.cmd_train(cfg, args.out)
        elif args.command == "eval":
            m = harness.cmd_eval(cfg, args.out)
            print(" ".join(f"{k}={m[k]}" for k in ("reconstruction_ll", "kl_y", "usage_entropy", "purity")))
        else:
            harness.cmd_bench(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return harness.EXIT_CHECKPOINT
    except (harness.DataError, GMVAEError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return harness.EXIT_DATA
    return harness.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

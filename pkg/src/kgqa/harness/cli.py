"""Command line: ``kgqa {train,eval,sweep,mine,gen-synthetic}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, ConfigError, build_config
from . import runner

# flags that map one-to-one onto config keys
_OVERRIDES = {
    "mode": str, "data_dir": str, "d": int, "hidden": int, "T": int, "beam": int, "batch_size": int,
    "rollouts": int, "lr": float, "rl_epochs": int, "sup_epochs": int, "eval_every": int,
    "r_pos": float, "r_neg": float, "entropy_weight": float, "max_out": int, "max_paths": int,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs/latest")
    p.add_argument("--paper-scale", action="store_true", help="d=100, H=200, batch 256, 20 rollouts, beam 100")
    for key, typ in _OVERRIDES.items():
        flag = "--" + key.replace("_", "-")
        if key == "mode":
            p.add_argument(flag, choices=MODES)
        else:
            p.add_argument(flag, dest=key, type=typ)


def _config(args):
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    overrides["seed"] = args.seed
    return build_config(args.config, overrides, args.paper_scale)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgqa", description="Path-walking KG question answering with abstention")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy and report on the test split")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=runner.SPLITS)
    p.add_argument("--out-dir", default="runs/eval")

    p = sub.add_parser("sweep", help="train one model per reward value")
    _common(p)
    p.add_argument("--axis", choices=("r_pos", "r_neg"), required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)

    p = sub.add_parser("mine", help="write DFS supervision paths for the training split")
    _common(p)
    p.add_argument("--output", help="defaults to <out-dir>/dfs_paths.tsv")

    p = sub.add_parser("gen-synthetic", help="write a synthetic rule graph to --out-dir")
    _common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            report = runner.cmd_eval(args.checkpoint, args.split, args.out_dir)
            print(json.dumps(report.to_dict(), sort_keys=True))
            return 0
        cfg = _config(args)
        if args.command == "train":
            report, _ = runner.cmd_train(cfg, args.out_dir)
            print(json.dumps(report.to_dict(), sort_keys=True))
        elif args.command == "sweep":
            runner.cmd_sweep(cfg, args.axis, args.values, args.out_dir,
                             on_point=lambda row: print(json.dumps(row, sort_keys=True), flush=True))
        elif args.command == "mine":
            out = args.output or str(Path(args.out_dir) / "dfs_paths.tsv")
            n = len(runner.cmd_mine(cfg, out))
            print(f"{n} paths -> {out}")
        elif args.command == "gen-synthetic":
            data = runner.cmd_gen_synthetic(cfg, args.out_dir)
            print(f"{len(data.graph.triples)} triples, {len(data.queries)} queries, "
                  f"{len(data.unreachable)} unreachable -> {args.out_dir}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

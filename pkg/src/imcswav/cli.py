"""Command line entry point: gen-data, train, eval, metrics, sinkhorn."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container
from .data import gen_synthetic, load_dataset, save_dataset, train_val_split
from .errors import ConfigError, IMCError
from .metrics import ari, clustering_accuracy, nmi
from .network import load_checkpoint
from .selflabel import marginal_residual, sinkhorn_targets
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict(values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    features, labels = gen_synthetic(cfg.dataset_spec)
    save_dataset(args.out, features, labels)
    _print({"path": str(args.out), "n": int(features.shape[0]), "input_dim": int(features.shape[1]),
            "k_true": cfg.k_true})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    if args.dataset:
        cfg.dataset_path = args.dataset
    if args.out:
        cfg.output_dir = args.out
    result = train(cfg)
    _print({"epochs": cfg.epochs, "checkpoint": str(result.checkpoint) if result.checkpoint else None,
            **{k: v for k, v in result.val_metrics.items()}})
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    features, labels = load_dataset(args.dataset)
    seed = args.seed if args.seed is not None else int(ckpt.counters.get("seed", 0))
    if args.split == "val":
        _, idx = train_val_split(features.shape[0], seed, args.val_fraction)
        features, labels = features[idx], labels[idx]
    cfg = build_config(args) if (args.config or args.set) else None
    _print(evaluate(ckpt.model, features, labels, cfg, seed))
    return EXIT_OK


def _read_labels(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        return np.array([int(ln) for ln in lines], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"{path}: expected one integer label per line ({exc})") from exc


def cmd_metrics(args) -> int:
    pred, truth = _read_labels(args.pred), _read_labels(args.truth)
    _print({"acc": clustering_accuracy(pred, truth), "nmi": nmi(pred, truth), "ari": ari(pred, truth)})
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    arrays = container.load(args.input)
    if "scores" in arrays:
        scores = arrays["scores"]
    elif len(arrays) == 1:
        scores = next(iter(arrays.values()))
    else:
        raise ConfigError(f"{args.input}: expected an array named 'scores'")
    targets = sinkhorn_targets(scores, args.eps, args.iters)
    row, col = marginal_residual(targets)
    _print({"row_residual": row, "col_residual": col, "shape": list(scores.shape), "epsilon": args.eps,
            "iterations": args.iters})
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imcswav", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset container")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write metrics.jsonl, summary.csv and a checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", help="dataset container (default: synthetic from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="ACC/NMI/ARI between two label files")
    p.add_argument("pred")
    p.add_argument("truth")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sinkhorn", help="balance a score matrix and report marginal residuals")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=3)
    p.set_defaults(func=cmd_sinkhorn)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (IMCError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"imcswav: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

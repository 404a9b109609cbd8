"""Command-line entry point: ``hetembed {synth,train,eval,export,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .adversarial import AttackDivergedError
from .hetgraph import NodeType, load_dataset, save_graph
from .metrics import format_table
from .model import load_checkpoint
from .synthetic import SyntheticConfig, generate_synthetic, structure_signal_config
from .trainer import (
    CONFIG_KEYS,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    export_embeddings,
    format_ablation,
    load_config,
    parse_config_text,
    run_ablation,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One ``--<field>`` flag per TrainConfig field; values override the config file."""
    g = p.add_argument_group("training options (override --config)")
    g.add_argument("--config", type=Path, help="flat key = value file with TrainConfig fields")
    for key in CONFIG_KEYS:
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V", default=None)


def _train_config(args) -> TrainConfig:
    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        lines = [f"{k} = {getattr(args, 'cfg_' + k)}" for k in CONFIG_KEYS if getattr(args, "cfg_" + k) is not None]
        return parse_config_text("\n".join(lines), cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetembed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a planted-signal synthetic graph")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--recipes", type=int, default=300)
    s.add_argument("--users", type=int, default=40)
    s.add_argument("--ingredients", type=int, default=60)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--regions", type=int, default=2)
    s.add_argument("--signal", type=float, default=None, help="attribute signal strength in [0, 1]")
    s.add_argument("--image-dim", type=int, default=None)
    s.add_argument("--text-dim", type=int, default=None)
    s.add_argument("--structure", action="store_true", help="noise-only attributes; class carried by R-I edges")
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model and write checkpoint.npz + metrics.json")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, default=Path("run"))
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--task", default=None, help="defaults to the checkpoint's task")
    e.add_argument("--which", choices=("train", "val", "test"), default="test")
    e.add_argument("--json", type=Path, default=None, help="also write the metrics here")

    x = sub.add_parser("export", help="export node embeddings as TSV")
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    x.add_argument("--nodes", default=None, help="comma-separated ids (default: every recipe)")

    a = sub.add_parser("ablate", help="single-switch-off grid plus the full model")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--json", type=Path, default=None)
    _add_train_flags(a)
    return parser


def _cmd_synth(args) -> int:
    overrides = dict(
        n_recipes=args.recipes,
        n_users=args.users,
        n_ingredients=args.ingredients,
        n_classes=args.classes,
        n_regions=args.regions,
    )
    for key, val in (("signal", args.signal), ("image_dim", args.image_dim), ("text_dim", args.text_dim)):
        if val is not None:
            overrides[key] = val
    try:
        cfg = structure_signal_config(**overrides) if args.structure else SyntheticConfig(**overrides)
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    g, labels = generate_synthetic(cfg, seed=args.seed)
    save_graph(g, args.out)
    print(f"wrote {len(g.nodes())} nodes, {len(g.edges())} edges to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    g, labels = load_dataset(args.data, task=cfg.task)
    result = train(g, labels, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    result.save(args.out / "checkpoint.npz")
    (args.out / "metrics.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    print(f"best epoch {result.report.best_epoch}; test metrics (%):")
    print(format_table(result.report.test, labels.class_names))
    print(f"wrote {args.out / 'checkpoint.npz'} and {args.out / 'metrics.json'}")
    return EXIT_OK


def _checkpoint_task(path: Path) -> str:
    _, _, header = load_checkpoint(path)
    return header.get("extra", {}).get("config", {}).get("task", "cuisine")


def _cmd_eval(args) -> int:
    task = args.task or _checkpoint_task(args.checkpoint)
    g, labels = load_dataset(args.data, task=task)
    metrics = evaluate(args.checkpoint, g, labels, which=args.which)
    print(f"{args.which} metrics (%):")
    print(format_table(metrics, labels.class_names))
    if args.json:
        args.json.write_text(json.dumps(metrics.to_dict(labels.class_names), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_export(args) -> int:
    g, _ = load_dataset(args.data, task=_checkpoint_task(args.checkpoint))
    if args.nodes is None:
        ids = g.nodes(NodeType.RECIPE)
    else:
        ids = [v.strip() for v in args.nodes.split(",") if v.strip()]
    export_embeddings(args.checkpoint, g, ids, args.out)
    print(f"wrote {len(ids)} embeddings to {args.out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _train_config(args)
    g, labels = load_dataset(args.data, task=cfg.task)
    reports = run_ablation(g, labels, cfg)
    print("test metrics (%):")
    print(format_ablation(reports))
    if args.json:
        payload = {k: r.to_dict() for k, r in reports.items()}
        args.json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


_COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval, "export": _cmd_export, "ablate": _cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, AttackDivergedError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

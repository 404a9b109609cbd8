"""Training loop for the joint supervised + adversarial objective, evaluation and export."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import AttackConfig, adversarial_loss, batch_labels, joint_loss, pgd_attack
from .hetgraph import HetGraph, LabelSet, SplitAssignment, make_split
from .metrics import ClassificationMetrics, classification_metrics
from .model import (
    AblationSwitches,
    ModelDims,
    ModelParams,
    Plan,
    build_plan,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .sampler import MetaPath, SampleCache, WalkConfig

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "TrainResult",
    "TrainingDivergedError",
    "train",
    "evaluate",
    "evaluate_params",
    "export_embeddings",
    "load_config",
    "parse_config_text",
    "ABLATION_COLUMNS",
    "run_ablation",
    "format_ablation",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "cuisine"
    lr: float = 0.005
    hidden: int = 128
    batch_size: int = 4096
    epochs: int = 100
    lam: float = 0.1
    metapath: str = "R-U-R"
    p: int = 10
    n_walks: int = 100
    attack_bound: float = 0.02
    attack_step: float = 0.005
    attack_iters: int = 5
    attack_random_start: bool = False
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    graph_seed: int = 0
    model_seed: int = 0
    split_seed: int = 0
    sampler_seed: int = 0
    ns: bool = True
    na: bool = True
    ca: bool = True
    ra: bool = True
    al: bool = True
    layers: int = 1
    share_weights: bool = False
    pool: str = "max"
    leaky_slope: float = 0.2
    # stop after this many epochs without a validation improvement; 0 disables
    patience: int = 0

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        MetaPath.parse(self.metapath)

    @property
    def switches(self) -> AblationSwitches:
        return AblationSwitches(self.ns, self.na, self.ca, self.ra, self.al)

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(self.attack_bound, self.attack_step, self.attack_iters, self.attack_random_start)

    @property
    def walk(self) -> WalkConfig:
        return WalkConfig(self.n_walks, self.p, self.sampler_seed)

    @property
    def effective_lam(self) -> float:
        return self.lam if self.al else 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.replace("/", ",").split(","))
    return raw


_DEFAULTS = TrainConfig()
CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines (``#`` comments) applied over ``base``."""
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, value, getattr(_DEFAULTS, key))
    return dataclasses.replace(base or TrainConfig(), **changes)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


@dataclass
class MetricsReport:
    config: dict
    class_names: list[str]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    train: ClassificationMetrics | None = None
    val: ClassificationMetrics | None = None
    test: ClassificationMetrics | None = None
    dropped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "config": self.config,
            "class_names": self.class_names,
            "best_epoch": self.best_epoch,
            "history": self.history,
            "dropped": self.dropped,
        }
        for part in ("train", "val", "test"):
            m = getattr(self, part)
            out[part] = m.to_dict(self.class_names) if m is not None else None
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class TrainResult:
    params: ModelParams
    report: MetricsReport
    split: SplitAssignment
    config: TrainConfig

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.params, self.config.switches, _header_extra(self.config, self.report.class_names))


def _header_extra(cfg: TrainConfig, class_names: list[str]) -> dict:
    return {"config": cfg.to_dict(), "class_names": class_names}


def _dims_for(g: HetGraph, cfg: TrainConfig, n_classes: int) -> ModelDims:
    return ModelDims(
        hidden=cfg.hidden,
        modality_dims={m.value: d for m, d in g.modality_dims().items()},
        n_classes=n_classes,
        layers=cfg.layers,
        share_weights=cfg.share_weights,
        pool=cfg.pool,
        leaky_slope=cfg.leaky_slope,
    )


_SAMPLES = SampleCache()


def _samples(g: HetGraph, cfg: TrainConfig):
    return _SAMPLES.get(g, MetaPath.parse(cfg.metapath), cfg.walk)


def _predict(params: ModelParams, g: HetGraph, plan: Plan, switches: AblationSwitches) -> tuple[list[str], np.ndarray]:
    if not plan.batch:
        return [], np.zeros(0, dtype=np.intp)
    out = forward(params, g, plan, switches)
    return out.ids, out.logits.data.argmax(axis=1)


def evaluate_params(
    params: ModelParams,
    g: HetGraph,
    labels: LabelSet,
    nodes: Sequence[str],
    switches: AblationSwitches,
    samples,
    plan: Plan | None = None,
) -> ClassificationMetrics:
    plan = plan or build_plan(g, samples, nodes, switches, params.dims.layers)
    ids, pred = _predict(params, g, plan, switches)
    y = batch_labels(ids, labels.labels)
    return classification_metrics(y, pred, labels.n_classes)


def _check_class_coverage(train_nodes: Sequence[str], labels: LabelSet) -> None:
    counts = np.bincount([labels.labels[v] for v in train_nodes], minlength=labels.n_classes)
    thin = [labels.class_names[c] for c in range(labels.n_classes) if counts[c] < 3]
    if thin:
        raise ValueError(f"train split has fewer than 3 nodes for classes: {', '.join(thin)}")


def train(
    g: HetGraph,
    labels: LabelSet,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize ``L_sup + lam * L_adv`` with Adam, keeping the best-validation weights."""
    split = make_split(labels, cfg.split, cfg.split_seed)
    _check_class_coverage(split.train, labels)
    switches = cfg.switches
    lam = cfg.effective_lam
    samples = _samples(g, cfg)
    dims = _dims_for(g, cfg, labels.n_classes)
    params = init_params(dims, cfg.model_seed)
    opt = ad.AdamState()
    attack = cfg.attack

    train_nodes = split.train
    val_plan = build_plan(g, samples, split.val, switches, cfg.layers)
    report = MetricsReport(cfg.to_dict(), list(labels.class_names))
    best_f1, best_params = -1.0, params
    plans: dict[tuple[str, ...], Plan] = {}
    dropped: set[str] = set(val_plan.dropped)

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.model_seed, epoch]).permutation(len(train_nodes))
        shuffled = [train_nodes[i] for i in order]
        batches = [shuffled[i : i + cfg.batch_size] for i in range(0, len(shuffled), cfg.batch_size)]
        sums = {"l_sup": 0.0, "l_adv": 0.0, "loss": 0.0}
        correct = seen = 0
        for b, batch in enumerate(batches):
            key = tuple(sorted(batch))
            plan = plans.get(key)
            if plan is None:
                plan = build_plan(g, samples, batch, switches, cfg.layers)
                dropped.update(plan.dropped)
                if len(batches) == 1:
                    plans[key] = plan
            if not plan.batch:
                continue
            y = batch_labels(plan.batch, labels.labels)
            try:
                pert = pgd_attack(params, g, plan, labels.labels, attack, switches, record_final=False) if lam > 0 else None
                weights = {k: ad.Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
                with ad.Tape() as tape:
                    out = forward(weights, g, plan, switches, dims=dims)
                    l_sup = ad.cross_entropy(out.logits, y)
                    if pert is not None:
                        l_adv = adversarial_loss(weights, g, plan, labels.labels, pert, switches, dims=dims)
                        loss = joint_loss(l_sup, l_adv, lam)
                    else:
                        l_adv, loss = None, l_sup
                grads = tape.backward(loss, list(weights.values()))
            except (ValueError, RuntimeError) as exc:
                if "non-finite" in str(exc):
                    raise TrainingDivergedError(f"epoch {epoch} batch {b}: {exc}") from exc
                raise
            params = ModelParams(dims, ad.adam_step(params.tensors, {k: grads[w] for k, w in weights.items()}, opt, cfg.lr))
            n = len(plan.batch)
            sums["l_sup"] += l_sup.item() * n
            sums["l_adv"] += (l_adv.item() if l_adv is not None else 0.0) * n
            sums["loss"] += loss.item() * n
            correct += int((out.logits.data.argmax(axis=1) == y).sum())
            seen += n
        try:
            val_metrics = evaluate_params(params, g, labels, split.val, switches, samples, plan=val_plan)
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise TrainingDivergedError(f"epoch {epoch} validation: {exc}") from exc
            raise
        row = {k: v / max(seen, 1) for k, v in sums.items()}
        row.update(epoch=epoch, train_accuracy=100.0 * correct / max(seen, 1), val_micro_f1=val_metrics.micro_f1)
        for k in ("l_sup", "l_adv", "loss"):
            if not np.isfinite(row[k]):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite {k}")
        report.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d loss %.4f train acc %.1f val F1 %.1f", epoch, row["loss"], row["train_accuracy"], row["val_micro_f1"])
        if val_metrics.micro_f1 > best_f1:
            best_f1, best_params, report.best_epoch = val_metrics.micro_f1, params, epoch
        if cfg.patience and epoch - report.best_epoch >= cfg.patience:
            break

    report.dropped = sorted(dropped)
    report.train = evaluate_params(best_params, g, labels, split.train, switches, samples)
    report.val = evaluate_params(best_params, g, labels, split.val, switches, samples, plan=val_plan)
    report.test = evaluate_params(best_params, g, labels, split.test, switches, samples)
    return TrainResult(best_params, report, split, cfg)


def _config_from_header(header: dict) -> TrainConfig:
    raw = dict(header.get("extra", {}).get("config", {}))
    if "split" in raw:
        raw["split"] = tuple(raw["split"])
    known = {k: v for k, v in raw.items() if k in CONFIG_KEYS}
    return TrainConfig(**known)


def evaluate(
    checkpoint: str | Path, g: HetGraph, labels: LabelSet, split: SplitAssignment | None = None, which: str = "test"
) -> ClassificationMetrics:
    """Metrics of a saved model on the ``which`` part of ``split`` (rebuilt from the checkpoint's config if omitted)."""
    params, switches, header = load_checkpoint(checkpoint, graph=g, n_classes=labels.n_classes)
    cfg = _config_from_header(header)
    if split is None:
        split = make_split(labels, cfg.split, cfg.split_seed)
    if which not in ("train", "val", "test"):
        raise ValueError(f"which must be train, val or test, got {which!r}")
    return evaluate_params(params, g, labels, split.nodes(which), switches, _samples(g, cfg))


def export_embeddings(checkpoint: str | Path, g: HetGraph, node_ids: Sequence[str], out_path: str | Path) -> Path:
    """Write ``<id>\\t<label>\\t<f1>,...,<fd>`` rows in ascending id order."""
    params, switches, header = load_checkpoint(checkpoint, graph=g)
    cfg = _config_from_header(header)
    for v in node_ids:
        g.node_type(v)
    out_path = Path(out_path)
    lines = ["# id\tlabel\tembedding"]
    if node_ids:
        plan = build_plan(g, _samples(g, cfg), node_ids, switches, params.dims.layers)
        res = forward(params, g, plan, switches)
        task_labels = g.node_labels.get(cfg.task, {})
        for v, row in zip(res.ids, res.embeddings.data):
            lines.append(f"{v}\t{task_labels.get(v, '-')}\t" + ",".join(repr(float(x)) for x in row))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path


# one column per single-switch-off variant, then the full model
ABLATION_COLUMNS = ("ns", "na", "ca", "ra", "al", "full")


def run_ablation(
    g: HetGraph, labels: LabelSet, cfg: TrainConfig = TrainConfig(), columns: Sequence[str] = ABLATION_COLUMNS
) -> dict[str, MetricsReport]:
    """Train one model per column; ``cfg`` supplies everything but the switch being turned off."""
    out = {}
    for col in columns:
        if col not in ABLATION_COLUMNS:
            raise ValueError(f"unknown ablation column {col!r}")
        variant = cfg.replace(ns=True, na=True, ca=True, ra=True, al=True)
        if col != "full":
            variant = variant.replace(**{col: False})
        log.info("ablation variant %s", col)
        out[col] = train(g, labels, variant).report
    return out


def format_ablation(reports: Mapping[str, MetricsReport], which: str = "test") -> str:
    cols = [c for c in ABLATION_COLUMNS if c in reports]
    header = ["", *(c if c == "full" else f"-{c.upper()}" for c in cols)]
    rows = [header]
    for name, attr in (("Micro-F1", "micro_f1"), ("Acc", "accuracy")):
        rows.append([name, *(f"{getattr(getattr(reports[c], which), attr):.1f}" for c in cols)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows)

"""PGD perturbations on projected input features and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hetgraph import HetGraph, Modality
from .model import AblationSwitches, ModelParams, Plan, forward

__all__ = [
    "AttackConfig",
    "Perturbation",
    "PerturbationBoundError",
    "AttackDivergedError",
    "pgd_attack",
    "adversarial_loss",
    "joint_loss",
    "batch_labels",
]


class PerturbationBoundError(ValueError):
    """A perturbation left the allowed max-norm ball."""


class AttackDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    bound: float = 0.02
    step: float = 0.005
    iters: int = 5
    random_start: bool = False

    def __post_init__(self):
        if self.bound <= 0 or self.step <= 0 or self.iters < 1:
            raise ValueError(f"invalid attack config {self}")


@dataclass
class Perturbation:
    """Per-modality perturbation rows aligned with ``Plan.modality_nodes``."""

    eps: dict[Modality, np.ndarray]
    bound: float
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        for m, e in self.eps.items():
            if e.size and np.max(np.abs(e)) > self.bound:
                raise PerturbationBoundError(
                    f"{m.value} perturbation has max-norm {np.max(np.abs(e))!r} > bound {self.bound!r}"
                )

    def max_norm(self) -> float:
        return max((float(np.max(np.abs(e))) for e in self.eps.values() if e.size), default=0.0)

    @classmethod
    def zeros(cls, plan: Plan, hidden: int, bound: float) -> "Perturbation":
        return cls({m: np.zeros(shape) for m, shape in plan.eps_shapes(hidden).items()}, bound)


def batch_labels(ids: Sequence[str], labels: Mapping[str, int]) -> np.ndarray:
    missing = [v for v in ids if v not in labels]
    if missing:
        raise KeyError(f"labels missing for batch nodes: {missing[:5]}")
    return np.array([labels[v] for v in ids], dtype=np.intp)


def pgd_attack(
    params: ModelParams,
    g: HetGraph,
    plan: Plan,
    labels: Mapping[str, int],
    cfg: AttackConfig = AttackConfig(),
    switches: AblationSwitches = AblationSwitches(),
    rng: np.random.Generator | None = None,
    record_final: bool = True,
) -> Perturbation:
    """Sign-gradient ascent on the batch cross-entropy within ``||eps||_inf <= bound``.

    ``params`` are read as constants. ``losses`` on the result holds the
    attacked loss before each update, plus the loss at the final
    perturbation when ``record_final`` is set.
    """
    if not plan.batch:
        raise ValueError("pgd_attack needs a nonempty batch")
    y = batch_labels(plan.batch, labels)
    hidden = params.dims.hidden
    shapes = plan.eps_shapes(hidden)
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = {m: rng.uniform(-cfg.bound, cfg.bound, size=s) for m, s in shapes.items()}
    else:
        eps = {m: np.zeros(s) for m, s in shapes.items()}
    losses = []
    for it in range(cfg.iters + (1 if record_final else 0)):
        leaves = {m: Tensor(e, requires_grad=True) for m, e in eps.items()}
        try:
            with ad.Tape() as tape:
                out = forward(params, g, plan, switches, eps=leaves)
                loss = ad.cross_entropy(out.logits, y)
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise AttackDivergedError(f"non-finite loss at attack iteration {it}: {exc}") from exc
            raise
        losses.append(loss.item())
        if it == cfg.iters:
            break
        grads = tape.backward(loss, list(leaves.values()))
        for m, t in leaves.items():
            eps[m] = np.clip(eps[m] + cfg.step * np.sign(grads[t]), -cfg.bound, cfg.bound)
            if eps[m].size and np.max(np.abs(eps[m])) > cfg.bound:
                raise PerturbationBoundError(f"{m.value} perturbation escaped the bound at iteration {it}")
    return Perturbation(eps, cfg.bound, losses)


def adversarial_loss(weights, g: HetGraph, plan: Plan, labels: Mapping[str, int], perturbation: Perturbation,
                     switches: AblationSwitches = AblationSwitches(), dims=None) -> Tensor:
    """Cross-entropy of the forward pass on perturbed features.

    The perturbation is a constant here; gradients reach the weights only.
    """
    perturbation.check()
    y = batch_labels(plan.batch, labels)
    eps = {m: Tensor._wrap(e, False) for m, e in perturbation.eps.items()}
    out = forward(weights, g, plan, switches, eps=eps, dims=dims)
    return ad.cross_entropy(out.logits, y)


def joint_loss(l_sup, l_adv, lam: float) -> Tensor:
    """``l_sup + lam * l_adv``."""
    if lam < 0:
        raise ValueError(f"trade-off weight must be non-negative, got {lam}")
    return ad.add(l_sup, ad.mul(lam, l_adv))

"""Multi-modal heterogeneous GNN.

Pipeline per target node: modality-specific input projection, then for every
relation bucket and modality channel an attention/affinity aggregator, a
node-type projection fusing the image and text channels, and a relation-level
attention that mixes the per-relation embeddings. A linear head produces
class logits.

Row-vector convention throughout: a projection ``W`` of shape ``(in, out)``
maps ``x`` to ``x @ W``.

The single-node functions (:func:`project_input`, :func:`node_attention`, ...)
spell out each step on plain vectors. :func:`forward` runs the same algebra
over a whole batch with segment reductions and is what training uses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hetgraph import MODALITIES_BY_TYPE, HetGraph, Modality, NodeType, RelationType
from .sampler import NeighborSample

log = logging.getLogger(__name__)

__all__ = [
    "AblationSwitches",
    "ModelDims",
    "ModelParams",
    "Plan",
    "ForwardResult",
    "CHANNELS",
    "RELATIONS",
    "init_params",
    "build_plan",
    "forward",
    "project_input",
    "node_attention",
    "affinity",
    "aggregate_node",
    "cross_modal",
    "relation_importance",
    "fuse_relations",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHANNELS = (Modality.IMAGE, Modality.TEXT)
RELATIONS = tuple(RelationType)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AblationSwitches:
    """Component toggles: neighbor sampler, node/cross-modal/relation aggregators, adversarial loss."""

    ns: bool = True
    na: bool = True
    ca: bool = True
    ra: bool = True
    al: bool = True

    @property
    def all_off(self) -> bool:
        return not (self.ns or self.na or self.ca or self.ra or self.al)

    @classmethod
    def without(cls, name: str) -> "AblationSwitches":
        return cls(**{name.lower(): False})

    @classmethod
    def none(cls) -> "AblationSwitches":
        return cls(False, False, False, False, False)


@dataclass(frozen=True)
class ModelDims:
    hidden: int
    modality_dims: Mapping[str, int]
    n_classes: int
    layers: int = 1
    share_weights: bool = False
    pool: str = "max"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.hidden < 1 or self.n_classes < 1 or self.layers < 1:
            raise ValueError("hidden, n_classes and layers must be positive")
        if any(v < 1 for v in self.modality_dims.values()):
            raise ValueError("modality dimensions must be positive")
        if self.pool not in ("max", "sum"):
            raise ValueError(f"pool must be 'max' or 'sum', got {self.pool!r}")
        object.__setattr__(self, "modality_dims", dict(sorted(self.modality_dims.items())))

    def to_dict(self) -> dict:
        return asdict(self)


def _agg_key(layer: int, relation: RelationType, channel: Modality, share: bool) -> str:
    return f"l{layer}.shared" if share else f"l{layer}.{relation.value}.{channel.value}"


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes."""
    d = dims.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for m, dm in dims.modality_dims.items():
        shapes[f"proj.{m}"] = (dm, d)
    for k in range(dims.layers):
        keys = []
        for r in RELATIONS:
            for c in CHANNELS:
                key = _agg_key(k, r, c, dims.share_weights)
                if key not in keys:
                    keys.append(key)
        for key in keys:
            shapes[f"{key}.att"] = (2 * d,)
            shapes[f"{key}.affinity"] = (d, d)
            shapes[f"{key}.self"] = (d, d)
            shapes[f"{key}.neigh"] = (d, d)
            shapes[f"{key}.out"] = (d, d)
        for t in NodeType:
            shapes[f"l{k}.cross.{t.value}"] = (2 * d, d)
        shapes[f"l{k}.relatt.W"] = (d, d)
        shapes[f"l{k}.relatt.q"] = (d,)
        shapes[f"l{k}.relatt.b"] = (d,)
    shapes["head.W"] = (d, dims.n_classes)
    shapes["head.b"] = (dims.n_classes,)
    return shapes


_ZERO_INIT = ("relatt.b", "head.b")


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Xavier-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(dims).items():
        if name.endswith(_ZERO_INIT):
            tensors[name] = np.zeros(shape)
            continue
        fan_in, fan_out = (shape[0], 1) if len(shape) == 1 else shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dims, tensors)


# --------------------------------------------------------------------------
# single-node building blocks


def project_input(w_m, x) -> Tensor:
    """Modality projection ``h = x @ W_m`` (linear, no bias, no activation)."""
    w_m, x = ad.as_tensor(w_m), ad.as_tensor(x)
    if x.shape[-1] != w_m.shape[0]:
        raise ad.DimensionError(f"attribute dim {x.shape[-1]} does not match projection input {w_m.shape[0]}")
    return ad.matmul(x, w_m)


def node_attention(w_att, h_i, neighbors: Sequence, slope: float = 0.2) -> Tensor:
    """Softmax-normalized scores ``LeakyReLU(w_att . (h_i || h_j))`` over the neighbors."""
    if len(neighbors) == 0:
        raise ad.EmptyNeighborhoodError("node_attention over an empty relation")
    scores = [ad.reshape(ad.leaky_relu(ad.matmul(ad.concat(h_i, h_j), w_att), slope), (1,)) for h_j in neighbors]
    return ad.softmax(ad.concat(scores))


def affinity(w_a, h_i, neighbors: Sequence, alpha) -> Tensor:
    """``sum_j alpha_j * ((h_i * h_j) @ W_a)``."""
    alpha = ad.as_tensor(alpha)
    if alpha.shape != (len(neighbors),):
        raise ad.DimensionError(f"{alpha.shape[0]} attention weights for {len(neighbors)} neighbors")
    total = None
    for k, h_j in enumerate(neighbors):
        term = ad.mul(ad.take(alpha, k), ad.matmul(ad.hadamard(h_i, h_j), w_a))
        total = term if total is None else ad.add(total, term)
    return total


def aggregate_node(w_self, w_neigh, w_out, h_i, neighbors: Sequence, a_m, pool: str = "max") -> Tensor:
    """``(h_i @ W_i + POOL_j(h_j @ W_j) + A_m) @ W_o`` with elementwise max or sum pooling."""
    if len(neighbors) == 0:
        raise ad.EmptyNeighborhoodError("aggregate_node over an empty relation")
    msgs = [ad.matmul(h_j, w_neigh) for h_j in neighbors]
    if pool == "max":
        pooled = ad.max_pool(msgs)
    else:
        pooled = msgs[0]
        for m in msgs[1:]:
            pooled = ad.add(pooled, m)
    return ad.matmul(ad.add(ad.add(ad.matmul(h_i, w_self), pooled), a_m), w_out)


def cross_modal(w_phi, h_img, h_txt) -> Tensor:
    """Node-type projection of the concatenated channels, ``(h_img || h_txt) @ W_phi``."""
    h_img, h_txt, w_phi = ad.as_tensor(h_img), ad.as_tensor(h_txt), ad.as_tensor(w_phi)
    if h_img.shape != h_txt.shape or w_phi.shape[0] != 2 * h_img.shape[-1]:
        raise ad.DimensionError(f"cross_modal shapes {h_img.shape}, {h_txt.shape}, W {w_phi.shape}")
    return ad.matmul(ad.concat(h_img, h_txt), w_phi)


def relation_importance(w_r, q, b, embeddings: Sequence) -> Tensor:
    """Mean over nodes of ``q . tanh(h @ W_R + b)``."""
    if len(embeddings) == 0:
        raise ad.EmptyNeighborhoodError("relation_importance needs at least one node")
    scores = [ad.matmul(ad.tanh(ad.add(ad.matmul(h, w_r), b)), q) for h in embeddings]
    return ad.mean(ad.concat([ad.reshape(s, (1,)) for s in scores]))


def fuse_relations(per_relation: Sequence, importances: Sequence) -> tuple[Tensor, Tensor]:
    """Softmax the relation scores and mix the per-relation embeddings. Returns ``(h, beta)``."""
    if len(per_relation) == 0:
        raise ad.EmptyNeighborhoodError("node has no relations to fuse")
    beta = ad.softmax(ad.concat([ad.reshape(ad.as_tensor(w), (1,)) for w in importances]))
    total = None
    for k, h in enumerate(per_relation):
        term = ad.mul(ad.take(beta, k), h)
        total = term if total is None else ad.add(total, term)
    return total, beta


# --------------------------------------------------------------------------
# batched execution plan


@dataclass
class RelationBlock:
    relation: RelationType
    seeds: np.ndarray  # positions in the layer's targets
    seeds_in: np.ndarray  # the same nodes' positions in the layer's inputs
    edge_seed: np.ndarray  # per edge: index into ``seeds``
    edge_nb: np.ndarray  # per edge: position of the neighbor in the inputs
    seed_types: list[NodeType]


@dataclass
class LayerPlan:
    targets: list[str]
    inputs: list[str]
    target_types: list[NodeType]
    blocks: list[RelationBlock]


@dataclass
class Plan:
    """Index arrays for one forward pass over a fixed batch."""

    batch: list[str]
    dropped: list[str]
    layers: list[LayerPlan]
    inputs: list[str]
    input_types: list[NodeType]
    modality_nodes: dict[Modality, list[str]]
    modality_rows: dict[Modality, np.ndarray]  # rows into the graph attribute tables
    channel_index: dict[Modality, np.ndarray]  # per input node: row in the stacked projections
    attributes_only: bool

    def eps_shapes(self, hidden: int) -> dict[Modality, tuple[int, int]]:
        return {m: (len(ns), hidden) for m, ns in self.modality_nodes.items()}


def _buckets(sample: NeighborSample, ns: bool) -> dict[RelationType, list[str]]:
    return {r: sorted(set(nbs)) for r, nbs in sample.buckets(use_metapath=ns).items()}


def build_plan(
    g: HetGraph,
    samples: Mapping[str, NeighborSample],
    batch: Sequence[str],
    switches: AblationSwitches = AblationSwitches(),
    layers: int = 1,
) -> Plan:
    """Resolve the receptive field of ``batch`` into index arrays.

    Targets are processed in ascending id order regardless of the order of
    ``batch`` and each neighbor bucket is deduplicated and sorted, so results
    do not depend on either ordering. Targets without any neighbor are dropped
    with a warning (except in the attributes-only configuration).
    """
    targets = sorted(set(batch))
    for v in targets:
        g.node_type(v)
    attributes_only = switches.all_off
    dropped: list[str] = []
    layer_plans: list[LayerPlan] = []
    if not attributes_only:
        kept = []
        for v in targets:
            if v not in samples:
                raise KeyError(f"no neighbor sample for {v}")
            if samples[v].is_isolated(use_metapath=switches.ns):
                dropped.append(v)
            else:
                kept.append(v)
        if dropped:
            log.warning("dropping %d isolated node(s): %s", len(dropped), ", ".join(dropped[:5]))
        targets = kept
        cur = targets
        for _ in range(layers):
            buckets = {}
            for v in cur:
                if v not in samples:
                    raise KeyError(f"no neighbor sample for {v}")
                buckets[v] = _buckets(samples[v], switches.ns)
                if not buckets[v]:
                    raise ad.EmptyNeighborhoodError(f"intermediate node {v} has no neighbors")
            field_nodes = set(cur)
            for b in buckets.values():
                for nbs in b.values():
                    field_nodes.update(nbs)
            inputs = sorted(field_nodes)
            pos = {v: i for i, v in enumerate(inputs)}
            tpos = {v: i for i, v in enumerate(cur)}
            blocks = []
            for r in RELATIONS:
                seeds = [v for v in cur if r in buckets[v]]
                if not seeds:
                    continue
                edge_seed, edge_nb = [], []
                for k, v in enumerate(seeds):
                    for u in buckets[v][r]:
                        edge_seed.append(k)
                        edge_nb.append(pos[u])
                blocks.append(
                    RelationBlock(
                        r,
                        np.array([tpos[v] for v in seeds], dtype=np.intp),
                        np.array([pos[v] for v in seeds], dtype=np.intp),
                        np.array(edge_seed, dtype=np.intp),
                        np.array(edge_nb, dtype=np.intp),
                        [g.node_types[v] for v in seeds],
                    )
                )
            layer_plans.append(LayerPlan(list(cur), inputs, [g.node_types[v] for v in cur], blocks))
            cur = inputs
        layer_plans.reverse()
        inputs = layer_plans[0].inputs if layer_plans else []
    else:
        inputs = targets
    input_types = [g.node_types[v] for v in inputs]

    modality_nodes: dict[Modality, list[str]] = {}
    for v, t in zip(inputs, input_types):
        for m in MODALITIES_BY_TYPE[t]:
            modality_nodes.setdefault(m, []).append(v)
    modality_nodes = {m: modality_nodes[m] for m in Modality if m in modality_nodes}
    modality_rows = {m: np.array([g.attributes[m].index[v] for v in ns], dtype=np.intp) for m, ns in modality_nodes.items()}
    offset = 0
    stacked: dict[tuple[Modality, str], int] = {}
    for m, ns in modality_nodes.items():
        for i, v in enumerate(ns):
            stacked[(m, v)] = offset + i
        offset += len(ns)
    channel_index = {}
    for c in CHANNELS:
        idx = []
        for v, t in zip(inputs, input_types):
            mods = MODALITIES_BY_TYPE[t]
            # single-modality nodes feed their lone feature to both channels
            m = c if c in mods else mods[0]
            idx.append(stacked[(m, v)])
        channel_index[c] = np.array(idx, dtype=np.intp)
    return Plan(
        batch=targets,
        dropped=dropped,
        layers=layer_plans,
        inputs=inputs,
        input_types=input_types,
        modality_nodes=modality_nodes,
        modality_rows=modality_rows,
        channel_index=channel_index,
        attributes_only=attributes_only,
    )


@dataclass
class ForwardResult:
    ids: list[str]
    embeddings: Tensor
    logits: Tensor
    dropped: list[str] = field(default_factory=list)
    trace: dict | None = None


def _as_weights(params) -> dict[str, Tensor]:
    src = params.tensors if isinstance(params, ModelParams) else params
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in src.items()}


def _by_type(x_img: Tensor, x_txt: Tensor, types: Sequence[NodeType], W: dict, layer: int) -> Tensor:
    """Apply the node-type projection row-group by row-group, restoring order."""
    distinct = list(dict.fromkeys(types))
    if len(distinct) == 1:
        return ad.matmul(ad.concat(x_img, x_txt, axis=1), W[f"l{layer}.cross.{distinct[0].value}"])
    parts, order = [], []
    tarr = np.array([t.value for t in types])
    for t in distinct:
        rows = np.flatnonzero(tarr == t.value)
        order.append(rows)
        parts.append(ad.matmul(ad.concat(ad.take(x_img, rows), ad.take(x_txt, rows), axis=1), W[f"l{layer}.cross.{t.value}"]))
    inv = np.empty(len(types), dtype=np.intp)
    inv[np.concatenate(order)] = np.arange(len(types))
    return ad.take(ad.concat(parts, axis=0), inv)


def forward(
    params,
    g: HetGraph,
    plan: Plan,
    switches: AblationSwitches = AblationSwitches(),
    eps: Mapping[Modality, object] | None = None,
    trace: bool = False,
    dims: ModelDims | None = None,
) -> ForwardResult:
    """Embeddings and logits for ``plan.batch``.

    ``params`` is a :class:`ModelParams` or a name -> Tensor/array mapping
    (pass Tensors with ``requires_grad`` to differentiate; ``dims`` then
    supplies the architecture options). ``eps`` adds a perturbation to the
    projected features of each modality; its rows follow ``plan.modality_nodes``.
    """
    W = _as_weights(params)
    if isinstance(params, ModelParams):
        dims = params.dims
    slope = dims.leaky_slope if dims else 0.2
    pool = dims.pool if dims else "max"
    share = dims.share_weights if dims else False
    hidden = W["head.W"].shape[0]
    tr: dict | None = {"alpha": [], "beta": [], "relation_h": [], "relation_w": []} if trace else None

    projected = []
    for m, rows in plan.modality_rows.items():
        x = Tensor._wrap(g.attributes[m].matrix[rows], False)
        h = project_input(W[f"proj.{m.value}"], x)
        if eps is not None and m in eps:
            e = ad.as_tensor(eps[m])
            if e.shape != h.shape:
                raise ad.DimensionError(f"perturbation for {m.value} has shape {e.shape}, expected {h.shape}")
            h = ad.add(h, e)
        projected.append(h)
    if not projected:
        raise ad.EmptyNeighborhoodError("empty batch")
    table = ad.concat(projected, axis=0) if len(projected) > 1 else projected[0]
    chan = {c: ad.take(table, plan.channel_index[c]) for c in CHANNELS}

    if plan.attributes_only:
        emb = _by_type(chan[Modality.IMAGE], chan[Modality.TEXT], plan.input_types, W, 0)
    else:
        for k, lp in enumerate(plan.layers):
            n_t = len(lp.targets)
            rel_h, rel_nodes, rel_index = [], [], []
            for bi, blk in enumerate(lp.blocks):
                n_r = len(blk.seeds)
                out_c = {}
                for c in CHANNELS:
                    C = chan[c]
                    key = _agg_key(k, blk.relation, c, share)
                    if switches.na:
                        hi_e = ad.take(C, blk.seeds_in[blk.edge_seed])
                        hj_e = ad.take(C, blk.edge_nb)
                        scores = ad.leaky_relu(ad.matmul(ad.concat(hi_e, hj_e, axis=1), W[f"{key}.att"]), slope)
                        alpha = ad.segment_softmax(scores, blk.edge_seed, n_r)
                        if tr is not None:
                            tr["alpha"].append((k, blk.relation, c, alpha.data, blk.edge_seed))
                        weighted = ad.mul(ad.reshape(alpha, (-1, 1)), ad.hadamard(hi_e, hj_e))
                        a_m = ad.matmul(ad.segment_sum(weighted, blk.edge_seed, n_r), W[f"{key}.affinity"])
                        msgs = ad.take(ad.matmul(C, W[f"{key}.neigh"]), blk.edge_nb)
                        if pool == "max":
                            pooled = ad.segment_max(msgs, blk.edge_seed, n_r)
                        else:
                            pooled = ad.segment_sum(msgs, blk.edge_seed, n_r)
                        h_self = ad.matmul(ad.take(C, blk.seeds_in), W[f"{key}.self"])
                        out_c[c] = ad.matmul(ad.add(ad.add(h_self, pooled), a_m), W[f"{key}.out"])
                    else:
                        out_c[c] = ad.segment_mean(ad.take(C, blk.edge_nb), blk.edge_seed, n_r)
                if switches.ca:
                    h_r = _by_type(out_c[Modality.IMAGE], out_c[Modality.TEXT], blk.seed_types, W, k)
                else:
                    h_r = ad.mul(0.5, ad.add(out_c[Modality.IMAGE], out_c[Modality.TEXT]))
                rel_h.append(h_r)
                rel_nodes.append(blk.seeds)
                rel_index.append(np.full(n_r, bi, dtype=np.intp))
                if tr is not None:
                    tr["relation_h"].append((k, blk.relation, blk.seeds, h_r.data))
            pair_node = np.concatenate(rel_nodes)
            pair_rel = np.concatenate(rel_index)
            stacked = ad.concat(rel_h, axis=0) if len(rel_h) > 1 else rel_h[0]
            if switches.ra:
                ws = []
                for h_r in rel_h:
                    s = ad.matmul(ad.tanh(ad.add(ad.matmul(h_r, W[f"l{k}.relatt.W"]), W[f"l{k}.relatt.b"])), W[f"l{k}.relatt.q"])
                    ws.append(ad.reshape(ad.mean(s), (1,)))
                wvec = ad.concat(ws) if len(ws) > 1 else ws[0]
                beta = ad.segment_softmax(ad.take(wvec, pair_rel), pair_node, n_t)
                if tr is not None:
                    tr["relation_w"].append((k, [b.relation for b in lp.blocks], wvec.data))
            else:
                counts = np.bincount(pair_node, minlength=n_t).astype(np.float64)
                beta = Tensor._wrap(1.0 / counts[pair_node], False)
            if tr is not None:
                tr["beta"].append((k, beta.data, pair_node, pair_rel))
            emb = ad.segment_sum(ad.mul(ad.reshape(beta, (-1, 1)), stacked), pair_node, n_t)
            chan = {c: emb for c in CHANNELS}
    logits = ad.add(ad.matmul(emb, W["head.W"]), W["head.b"])
    if emb.shape[1] != hidden:
        raise ad.DimensionError("embedding width does not match the head")
    return ForwardResult(list(plan.batch), emb, logits, list(plan.dropped), tr)


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: ModelParams, switches: AblationSwitches, extra: dict | None = None) -> Path:
    """Write a versioned ``.npz`` checkpoint (header JSON plus every tensor)."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": params.dims.to_dict(),
        "relations": [r.value for r in RELATIONS],
        "switches": asdict(switches),
        "params": list(param_shapes(params.dims)),
        "extra": extra or {},
    }
    arrays = {f"p::{k}": params.tensors[k] for k in param_shapes(params.dims)}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path, graph: HetGraph | None = None, n_classes: int | None = None):
    """Read a checkpoint; returns ``(params, switches, header)``.

    Shapes are validated against the header; with ``graph`` / ``n_classes``
    the attribute widths and class count must match too.
    """
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            arrays = {k[3:]: np.array(z[k]) for k in z.files if k.startswith("p::")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    dims = ModelDims(**header["dims"])
    shapes = param_shapes(dims)
    if set(shapes) != set(arrays):
        raise CheckpointError("checkpoint parameter set does not match its header")
    for k, shape in shapes.items():
        if arrays[k].shape != shape:
            raise CheckpointError(f"parameter {k} has shape {arrays[k].shape}, header implies {shape}")
    if graph is not None:
        for m, dm in graph.modality_dims().items():
            want = dims.modality_dims.get(m.value)
            if want != dm:
                raise CheckpointError(f"graph {m.value} attributes have dim {dm}, checkpoint expects {want}")
    if n_classes is not None and n_classes != dims.n_classes:
        raise CheckpointError(f"label set has {n_classes} classes, checkpoint head has {dims.n_classes}")
    params = ModelParams(dims, {k: arrays[k] for k in shapes})
    return params, AblationSwitches(**header["switches"]), header

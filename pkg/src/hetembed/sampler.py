"""Multi-view neighbor sampling: direct schema neighbors plus meta-path top-p."""

from __future__ import annotations

import hashlib
import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .hetgraph import REAL_RELATIONS, HetGraph, NodeType, RelationType, relation_between

__all__ = [
    "MetaPath",
    "WalkConfig",
    "NeighborSample",
    "schema_neighbors",
    "simulate_walks",
    "walk_visit_counts",
    "normalize_l1",
    "top_p",
    "sample_neighbors",
    "sample_all",
    "node_rng",
    "save_samples",
    "load_samples",
]

_TYPE_CODES = {"R": NodeType.RECIPE, "U": NodeType.USER, "I": NodeType.INGREDIENT}


@dataclass(frozen=True)
class MetaPath:
    types: tuple[NodeType, ...]

    def __post_init__(self):
        if len(self.types) < 2:
            raise ValueError("a meta-path needs at least two node types")
        if self.types[0] is not self.types[-1]:
            raise ValueError("a meta-path must start and end at the same node type")
        for a, b in zip(self.types, self.types[1:]):
            relation_between(a, b)  # raises for an impossible hop

    @classmethod
    def parse(cls, text: str) -> "MetaPath":
        """``"R-U-R"`` -> recipe, user, recipe."""
        try:
            return cls(tuple(_TYPE_CODES[c.strip().upper()] for c in text.split("-")))
        except KeyError as exc:
            raise ValueError(f"bad meta-path {text!r}: unknown type code {exc.args[0]!r}") from None

    def __str__(self) -> str:
        inv = {t: c for c, t in _TYPE_CODES.items()}
        return "-".join(inv[t] for t in self.types)


@dataclass(frozen=True)
class WalkConfig:
    n_walks: int = 100
    p: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_walks < 1:
            raise ValueError("n_walks must be >= 1")
        if self.p < 1:
            raise ValueError("p must be >= 1")


@dataclass
class NeighborSample:
    seed: str
    schema: dict[RelationType, list[str]] = field(default_factory=dict)
    metapath: list[str] = field(default_factory=list)

    def buckets(self, use_metapath: bool = True) -> dict[RelationType, list[str]]:
        out = {r: list(ns) for r, ns in self.schema.items() if ns}
        if use_metapath and self.metapath:
            out[RelationType.METAPATH] = list(self.metapath)
        return out

    def is_isolated(self, use_metapath: bool = True) -> bool:
        return not self.buckets(use_metapath)


def schema_neighbors(g: HetGraph, v: str) -> dict[RelationType, list[str]]:
    """Adjacency of ``v`` under every real relation (empty lists included)."""
    g.node_type(v)
    return {r: g.neighbors(v, r) for r in REAL_RELATIONS}


def node_rng(seed: int, v: str) -> np.random.Generator:
    """Random stream for node ``v``, independent of sampling order."""
    return np.random.default_rng([seed, zlib.crc32(v.encode("utf-8"))])


def simulate_walks(
    g: HetGraph, v: str, path: MetaPath, n_walks: int, rng: np.random.Generator
) -> list[tuple[str, ...]]:
    """Type-constrained uniform walks following one traversal of ``path``.

    Each trajectory starts at ``v``; a walk stops early when the current node
    has no neighbor of the next required type.
    """
    if g.node_type(v) is not path.types[0]:
        raise ValueError(f"meta-path {path} starts at {path.types[0].value}, node {v} is {g.node_type(v).value}")
    hops = [(relation_between(a, b), b) for a, b in zip(path.types, path.types[1:])]
    cache: dict[tuple[str, int], list[str]] = {}
    walks = []
    for _ in range(n_walks):
        cur = v
        traj = [v]
        for k, (rel, want) in enumerate(hops):
            key = (cur, k)
            cands = cache.get(key)
            if cands is None:
                cands = [u for u in g.neighbors(cur, rel) if g.node_types[u] is want]
                cache[key] = cands
            if not cands:
                break
            cur = cands[int(rng.integers(len(cands)))]
            traj.append(cur)
        walks.append(tuple(traj))
    return walks


def walk_visit_counts(
    g: HetGraph, v: str, path: MetaPath, n_walks: int, rng: np.random.Generator
) -> dict[str, int]:
    """Visits of every node other than ``v`` across ``n_walks`` walks."""
    counts: Counter[str] = Counter()
    for traj in simulate_walks(g, v, path, n_walks, rng):
        counts.update(u for u in traj[1:] if u != v)
    return dict(sorted(counts.items()))


def normalize_l1(counts: dict[str, float]) -> dict[str, float]:
    total = sum(counts.values())
    if not counts or total == 0:
        return {}
    return {k: c / total for k, c in counts.items()}


def top_p(probs: dict[str, float], p: int) -> list[str]:
    """The ``p`` most probable nodes, highest first; ties by ascending id."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return [k for k, _ in sorted(probs.items(), key=lambda kv: (-kv[1], kv[0]))[:p]]


def sample_neighbors(g: HetGraph, v: str, path: MetaPath, cfg: WalkConfig) -> NeighborSample:
    if g.node_type(v) is not path.types[0]:
        raise ValueError(f"meta-path sampling is defined for {path.types[0].value} nodes; {v} is {g.node_type(v).value}")
    schema = schema_neighbors(g, v)
    counts = walk_visit_counts(g, v, path, cfg.n_walks, node_rng(cfg.seed, v))
    probs = normalize_l1(counts)
    terminal = path.types[-1]
    probs = {u: q for u, q in probs.items() if g.node_types[u] is terminal and u != v}
    return NeighborSample(v, schema, top_p(probs, cfg.p) if probs else [])


def sample_all(
    g: HetGraph, path: MetaPath, cfg: WalkConfig, nodes: Iterable[str] | None = None
) -> dict[str, NeighborSample]:
    """Samples for ``nodes`` (default: all); non-seed-type nodes get schema neighbors only."""
    out = {}
    for v in (g.nodes() if nodes is None else nodes):
        if g.node_type(v) is path.types[0]:
            out[v] = sample_neighbors(g, v, path, cfg)
        else:
            out[v] = NeighborSample(v, schema_neighbors(g, v), [])
    return out


def fingerprint(g: HetGraph, path: MetaPath, cfg: WalkConfig) -> str:
    key = f"{g.fingerprint()}|{path}|{cfg.n_walks}|{cfg.p}|{cfg.seed}"
    return hashlib.sha256(key.encode()).hexdigest()


def save_samples(out: str | Path, key: str, samples: dict[str, NeighborSample]) -> None:
    payload = {
        "fingerprint": key,
        "samples": {
            v: {"schema": {r.value: ns for r, ns in s.schema.items()}, "metapath": s.metapath}
            for v, s in sorted(samples.items())
        },
    }
    Path(out).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_samples(path: str | Path, key: str) -> dict[str, NeighborSample] | None:
    """Cached samples, or None when the file is absent or was built for another key."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None
    if payload.get("fingerprint") != key:
        return None
    return {
        v: NeighborSample(v, {RelationType(r): ns for r, ns in d["schema"].items()}, d["metapath"])
        for v, d in payload["samples"].items()
    }


class SampleCache:
    """In-process memo of full-graph samples keyed by fingerprint."""

    def __init__(self, directory: str | Path | None = None):
        self._mem: dict[str, dict[str, NeighborSample]] = {}
        self.directory = Path(directory) if directory else None

    def get(self, g: HetGraph, path: MetaPath, cfg: WalkConfig) -> dict[str, NeighborSample]:
        key = fingerprint(g, path, cfg)
        if key in self._mem:
            return self._mem[key]
        samples = None
        if self.directory is not None:
            samples = load_samples(self.directory / f"samples-{key[:16]}.json", key)
        if samples is None:
            samples = sample_all(g, path, cfg)
            if self.directory is not None:
                self.directory.mkdir(parents=True, exist_ok=True)
                save_samples(self.directory / f"samples-{key[:16]}.json", key, samples)
        self._mem[key] = samples
        return samples

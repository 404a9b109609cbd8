"""Shared oracles for the test suite."""

from __future__ import annotations

from typing import Callable

import numpy as np

H = 1e-5


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (``x`` is not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the larger max-magnitude of the two."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale < 1e-12:
        return float(np.max(np.abs(a - b), initial=0.0))
    return float(np.max(np.abs(a - b)) / scale)


def enumerate_visit_distribution(g, v, path):
    """Exact L1-normalized expected visit counts of non-seed nodes, by enumerating trajectories.

    Mirrors the walk contract: uniform choice among neighbors of the next
    required type, early stop at a dead end.
    """
    from hetembed.hetgraph import relation_between

    hops = [(relation_between(a, b), b) for a, b in zip(path.types, path.types[1:])]
    expected: dict[str, float] = {}

    def walk(node, k, prob, visited):
        if k == len(hops):
            for u in visited:
                expected[u] = expected.get(u, 0.0) + prob
            return
        rel, want = hops[k]
        cands = [u for u in g.neighbors(node, rel) if g.node_types[u] is want]
        if not cands:
            walk(node, len(hops), prob, visited)
            return
        for u in cands:
            walk(u, k + 1, prob / len(cands), visited + ([u] if u != v else []))

    walk(v, 0, 1.0, [])
    total = sum(expected.values())
    return {u: q / total for u, q in sorted(expected.items())} if total else {}


def tv_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def oracle_graph():
    """Twelve-node graph with distinct R-U-R visit probabilities from r0."""
    from hetembed.hetgraph import AttributeTable, HetGraph, Modality, NodeType, RelationType

    recipes = [f"r{i}" for i in range(7)]
    users = [f"u{i}" for i in range(4)]
    types = {v: NodeType.RECIPE for v in recipes} | {v: NodeType.USER for v in users} | {"i0": NodeType.INGREDIENT}
    ur = [("u0", "r0"), ("u1", "r0"), ("u2", "r0"), ("u0", "r1"), ("u0", "r2"), ("u1", "r1"), ("u1", "r3"),
          ("u1", "r4"), ("u2", "r1"), ("u2", "r5"), ("u3", "r6"), ("u3", "r5")]
    edges = [(RelationType.USER_RECIPE, u, r) for u, r in ur]
    edges += [(RelationType.RECIPE_INGREDIENT, "r0", "i0"), (RelationType.RECIPE_RECIPE, "r0", "r6")]
    attrs = {
        Modality.IMAGE: AttributeTable(recipes, np.arange(14.0).reshape(7, 2)),
        Modality.TEXT: AttributeTable(recipes, np.arange(21.0).reshape(7, 3) / 10),
        Modality.NUTRIENT: AttributeTable(["i0"], np.ones((1, 2))),
        Modality.USER: AttributeTable(users, np.eye(4)[:, :2]),
    }
    labels = {"cuisine": {r: f"c{i % 2}" for i, r in enumerate(recipes)}}
    return HetGraph(types, edges, attrs, labels)

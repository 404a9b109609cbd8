"""Heterogeneous recipe graph: typed nodes, typed symmetric relations, attributes.

On-disk layout of a dataset directory::

    nodes.tsv            <id> \\t <node_type> \\t <cuisine|-> \\t <region|->
    edges.tsv            <relation> \\t <src_id> \\t <dst_id>
    attrs.<modality>.tsv <id> \\t <f1>,<f2>,...

Lines starting with ``#`` are comments. An attribute file may declare its
dimension with a ``# dim=<n>`` comment, which the loader then enforces.
"""

from __future__ import annotations

import enum
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "NodeType",
    "RelationType",
    "Modality",
    "GraphFormatError",
    "UnknownNodeError",
    "ModalityError",
    "HetGraph",
    "LabelSet",
    "SplitAssignment",
    "load_graph",
    "load_dataset",
    "save_graph",
    "make_split",
    "TASKS",
]

TASKS = ("cuisine", "region")


class NodeType(str, enum.Enum):
    USER = "user"
    RECIPE = "recipe"
    INGREDIENT = "ingredient"


class RelationType(str, enum.Enum):
    USER_RECIPE = "U-R"
    RECIPE_RECIPE = "R-R"
    RECIPE_INGREDIENT = "R-I"
    INGREDIENT_INGREDIENT = "I-I"
    # pseudo-relation housing meta-path sampled neighbors; never stored in a graph
    METAPATH = "MP"

    @property
    def signature(self) -> tuple[NodeType, NodeType]:
        return _SIGNATURES[self]

    @property
    def is_real(self) -> bool:
        return self is not RelationType.METAPATH


_SIGNATURES = {
    RelationType.USER_RECIPE: (NodeType.USER, NodeType.RECIPE),
    RelationType.RECIPE_RECIPE: (NodeType.RECIPE, NodeType.RECIPE),
    RelationType.RECIPE_INGREDIENT: (NodeType.RECIPE, NodeType.INGREDIENT),
    RelationType.INGREDIENT_INGREDIENT: (NodeType.INGREDIENT, NodeType.INGREDIENT),
    RelationType.METAPATH: (NodeType.RECIPE, NodeType.RECIPE),
}

REAL_RELATIONS = tuple(r for r in RelationType if r.is_real)


def relation_between(a: NodeType, b: NodeType) -> RelationType:
    """The real relation linking node types ``a`` and ``b`` (in either order)."""
    for r in REAL_RELATIONS:
        if r.signature in ((a, b), (b, a)):
            return r
    raise KeyError(f"no relation between {a.value} and {b.value}")


class Modality(str, enum.Enum):
    IMAGE = "image"
    TEXT = "text"
    NUTRIENT = "nutrient"
    USER = "user"


MODALITIES_BY_TYPE: dict[NodeType, tuple[Modality, ...]] = {
    NodeType.RECIPE: (Modality.IMAGE, Modality.TEXT),
    NodeType.INGREDIENT: (Modality.NUTRIENT,),
    NodeType.USER: (Modality.USER,),
}
TYPE_OF_MODALITY = {m: t for t, ms in MODALITIES_BY_TYPE.items() for m in ms}


class GraphFormatError(ValueError):
    """Malformed or inconsistent dataset input."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class UnknownNodeError(KeyError):
    def __init__(self, node_id: str, context: str = ""):
        super().__init__(f"unknown node id {node_id!r}{' ' + context if context else ''}")
        self.node_id = node_id

    def __str__(self) -> str:
        return self.args[0]


class ModalityError(KeyError):
    def __str__(self) -> str:
        return self.args[0]


@dataclass
class AttributeTable:
    """Row-major attribute matrix for the nodes carrying one modality."""

    ids: list[str]
    matrix: np.ndarray
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        self.matrix.flags.writeable = False
        self.index = {v: i for i, v in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class LabelSet:
    task: str
    labels: dict[str, int]
    class_names: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SplitAssignment:
    assignment: dict[str, str]

    def nodes(self, part: str) -> list[str]:
        return sorted(v for v, p in self.assignment.items() if p == part)

    @property
    def train(self) -> list[str]:
        return self.nodes("train")

    @property
    def val(self) -> list[str]:
        return self.nodes("val")

    @property
    def test(self) -> list[str]:
        return self.nodes("test")


class HetGraph:
    """Immutable typed multigraph with per-modality attribute tables.

    Edges are undirected: every stored edge is visible from both endpoints and
    adjacency lists are kept sorted by node id.
    """

    def __init__(
        self,
        node_types: Mapping[str, NodeType],
        edges: Iterable[tuple[RelationType, str, str]],
        attributes: Mapping[Modality, AttributeTable],
        node_labels: Mapping[str, Mapping[str, str]] | None = None,
    ):
        self.node_types: dict[str, NodeType] = {v: NodeType(t) for v, t in sorted(node_types.items())}
        adj: dict[RelationType, dict[str, set[str]]] = {r: {} for r in REAL_RELATIONS}
        for rel, a, b in edges:
            rel = RelationType(rel)
            self._check_edge(rel, a, b)
            adj[rel].setdefault(a, set()).add(b)
            adj[rel].setdefault(b, set()).add(a)
        self._adj = {r: {v: tuple(sorted(ns)) for v, ns in m.items()} for r, m in adj.items()}
        self.attributes: dict[Modality, AttributeTable] = {Modality(m): t for m, t in attributes.items()}
        self.node_labels: dict[str, dict[str, str]] = {
            task: dict(sorted((node_labels or {}).get(task, {}).items())) for task in TASKS
        }
        self._check_attributes()
        self._hash: str | None = None

    def _check_edge(self, rel: RelationType, a: str, b: str) -> None:
        if not rel.is_real:
            raise GraphFormatError(f"relation {rel.value} cannot be stored in a graph")
        for v in (a, b):
            if v not in self.node_types:
                raise UnknownNodeError(v, f"in {rel.value} edge")
        ta, tb = self.node_types[a], self.node_types[b]
        if {(ta, tb), (tb, ta)}.isdisjoint({rel.signature}):
            raise GraphFormatError(
                f"edge {a}-{b} has types ({ta.value}, {tb.value}); {rel.value} needs "
                f"({rel.signature[0].value}, {rel.signature[1].value})"
            )
        if a == b:
            raise GraphFormatError(f"self-loop on {a} in {rel.value}")

    def _check_attributes(self) -> None:
        for v, t in self.node_types.items():
            for m in MODALITIES_BY_TYPE[t]:
                table = self.attributes.get(m)
                if table is None or v not in table.index:
                    raise GraphFormatError(f"node {v} ({t.value}) is missing its {m.value} attribute")
        for m, table in self.attributes.items():
            for v in table.ids:
                if v not in self.node_types:
                    raise UnknownNodeError(v, f"in {m.value} attributes")
                if self.node_types[v] is not TYPE_OF_MODALITY[m]:
                    raise GraphFormatError(f"node {v} of type {self.node_types[v].value} has a {m.value} attribute")

    # ---- queries

    def __contains__(self, v: str) -> bool:
        return v in self.node_types

    def __len__(self) -> int:
        return len(self.node_types)

    def node_type(self, v: str) -> NodeType:
        try:
            return self.node_types[v]
        except KeyError:
            raise UnknownNodeError(v) from None

    def nodes(self, node_type: NodeType | None = None) -> list[str]:
        if node_type is None:
            return list(self.node_types)
        return [v for v, t in self.node_types.items() if t is node_type]

    def neighbors(self, v: str, relation: RelationType) -> list[str]:
        if v not in self.node_types:
            raise UnknownNodeError(v)
        relation = RelationType(relation)
        if not relation.is_real:
            return []
        return list(self._adj[relation].get(v, ()))

    def degree(self, v: str) -> int:
        return sum(len(self.neighbors(v, r)) for r in REAL_RELATIONS)

    def edges(self, relation: RelationType | None = None) -> list[tuple[RelationType, str, str]]:
        """Each undirected edge once, oriented by relation signature, sorted."""
        rels = REAL_RELATIONS if relation is None else (RelationType(relation),)
        out = []
        for r in rels:
            first, second = r.signature
            for a, ns in self._adj[r].items():
                if self.node_types[a] is not first:
                    continue
                for b in ns:
                    if first is second and b < a:
                        continue
                    out.append((r, a, b))
        out.sort(key=lambda e: (e[0].value, e[1], e[2]))
        return out

    def attribute(self, v: str, modality: Modality) -> np.ndarray:
        t = self.node_type(v)
        modality = Modality(modality)
        if modality not in MODALITIES_BY_TYPE[t]:
            raise ModalityError(f"{t.value} node {v} has no {modality.value} modality")
        table = self.attributes[modality]
        return table.matrix[table.index[v]]

    def modality_dims(self) -> dict[Modality, int]:
        return {m: t.dim for m, t in self.attributes.items()}

    def labels(self, task: str = "cuisine") -> LabelSet:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        raw = self.node_labels[task]
        names = sorted(set(raw.values()))
        idx = {n: i for i, n in enumerate(names)}
        return LabelSet(task, {v: idx[n] for v, n in raw.items()}, names)

    def without_relation(self, relation: RelationType) -> "HetGraph":
        """Copy of this graph with every edge of ``relation`` removed."""
        relation = RelationType(relation)
        kept = [e for e in self.edges() if e[0] is not relation]
        return HetGraph(self.node_types, kept, self.attributes, self.node_labels)

    # ---- serialization

    def canonical_text(self) -> dict[str, str]:
        """File name -> canonical file content."""
        files = {"nodes.tsv": _format_nodes(self), "edges.tsv": _format_edges(self)}
        for m in sorted(self.attributes, key=lambda m: m.value):
            files[f"attrs.{m.value}.tsv"] = _format_attrs(self.attributes[m])
        return files

    def fingerprint(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            for name, text in self.canonical_text().items():
                h.update(name.encode())
                h.update(text.encode())
            self._hash = h.hexdigest()
        return self._hash


# --------------------------------------------------------------------------
# file formats


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _format_nodes(g: HetGraph) -> str:
    buf = io.StringIO()
    buf.write("# id\tnode_type\tcuisine\tregion\n")
    for v, t in g.node_types.items():
        c = g.node_labels["cuisine"].get(v, "-")
        r = g.node_labels["region"].get(v, "-")
        buf.write(f"{v}\t{t.value}\t{c}\t{r}\n")
    return buf.getvalue()


def _format_edges(g: HetGraph) -> str:
    buf = io.StringIO()
    buf.write("# relation\tsrc\tdst\n")
    for r, a, b in g.edges():
        buf.write(f"{r.value}\t{a}\t{b}\n")
    return buf.getvalue()


def _format_attrs(table: AttributeTable) -> str:
    buf = io.StringIO()
    buf.write(f"# dim={table.dim}\n")
    for i in sorted(range(len(table.ids)), key=lambda i: table.ids[i]):
        row = ",".join(_fmt_float(x) for x in table.matrix[i])
        buf.write(f"{table.ids[i]}\t{row}\n")
    return buf.getvalue()


def save_graph(g: HetGraph, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in g.canonical_text().items():
        (directory / name).write_text(text, encoding="utf-8")
    return directory


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            yield lineno, line


def _read_nodes(path: Path):
    types: dict[str, NodeType] = {}
    labels: dict[str, dict[str, str]] = {t: {} for t in TASKS}
    for lineno, line in _data_lines(path):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3, 4):
            raise GraphFormatError(f"expected 2-4 tab-separated fields, got {len(parts)}", str(path), lineno)
        v, t = parts[0], parts[1]
        if not v:
            raise GraphFormatError("empty node id", str(path), lineno)
        try:
            ntype = NodeType(t)
        except ValueError:
            raise GraphFormatError(f"unknown node type {t!r}", str(path), lineno) from None
        if v in types:
            raise GraphFormatError(f"duplicate node id {v!r}", str(path), lineno)
        types[v] = ntype
        for task, value in zip(TASKS, parts[2:]):
            if value not in ("", "-"):
                if ntype is not NodeType.RECIPE:
                    raise GraphFormatError(f"label on non-recipe node {v}", str(path), lineno)
                labels[task][v] = value
    return types, labels


def _read_edges(path: Path, types: Mapping[str, NodeType]):
    edges = []
    for lineno, line in _data_lines(path):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"expected 3 tab-separated fields, got {len(parts)}", str(path), lineno)
        rel_name, a, b = parts
        try:
            rel = RelationType(rel_name)
        except ValueError:
            raise GraphFormatError(f"unknown relation {rel_name!r}", str(path), lineno) from None
        if not rel.is_real:
            raise GraphFormatError(f"relation {rel_name} is not storable", str(path), lineno)
        for v in (a, b):
            if v not in types:
                raise GraphFormatError(f"unknown node id {v!r} in edge", str(path), lineno)
        ta, tb = types[a], types[b]
        if (ta, tb) != rel.signature and (tb, ta) != rel.signature:
            raise GraphFormatError(
                f"edge {a}-{b} of types ({ta.value}, {tb.value}) does not match {rel_name}", str(path), lineno
            )
        if a == b:
            raise GraphFormatError(f"self-loop on {a}", str(path), lineno)
        edges.append((rel, a, b))
    return edges


def _read_attrs(path: Path, types: Mapping[str, NodeType], modality: Modality, dim: int | None):
    ids: list[str] = []
    seen: set[str] = set()
    rows: list[list[float]] = []
    for lineno, line in _data_lines(path):
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("dim="):
                declared = int(body[4:])
                if dim is not None and declared != dim:
                    raise GraphFormatError(f"declared dim {declared} conflicts with expected {dim}", str(path), lineno)
                dim = declared
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(f"expected 2 tab-separated fields, got {len(parts)}", str(path), lineno)
        v, payload = parts
        if v not in types:
            raise GraphFormatError(f"unknown node id {v!r} in attributes", str(path), lineno)
        if types[v] is not TYPE_OF_MODALITY[modality]:
            raise GraphFormatError(f"{types[v].value} node {v} cannot carry {modality.value}", str(path), lineno)
        try:
            vec = [float(x) for x in payload.split(",")]
        except ValueError:
            raise GraphFormatError("unparseable attribute value", str(path), lineno) from None
        if not all(math.isfinite(x) for x in vec):
            raise GraphFormatError("non-finite attribute value", str(path), lineno)
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise GraphFormatError(f"attribute dimension {len(vec)} != {dim} for {v}", str(path), lineno)
        if v in seen:
            raise GraphFormatError(f"duplicate attribute row for {v}", str(path), lineno)
        seen.add(v)
        ids.append(v)
        rows.append(vec)
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    return AttributeTable(ids, matrix)


def _read_label_file(path: Path, types: Mapping[str, NodeType]) -> dict[str, str]:
    out = {}
    for lineno, line in _data_lines(path):
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(f"expected 2 tab-separated fields, got {len(parts)}", str(path), lineno)
        v, value = parts
        if v not in types:
            raise GraphFormatError(f"unknown node id {v!r} in labels", str(path), lineno)
        if types[v] is not NodeType.RECIPE:
            raise GraphFormatError(f"label on non-recipe node {v}", str(path), lineno)
        if value not in ("", "-"):
            out[v] = value
    return out


def load_graph(
    node_file: str | Path,
    edge_file: str | Path,
    attribute_files: Mapping[str, str | Path],
    label_file: str | Path | None = None,
    task: str = "cuisine",
    dims: Mapping[str, int] | None = None,
) -> tuple[HetGraph, LabelSet]:
    """Read a graph and the label set for ``task``.

    ``attribute_files`` maps modality name to path. ``label_file`` is an
    optional two-column ``<id>\\t<label>`` file overriding the ``task`` column
    of the node file. ``dims`` optionally pins expected attribute widths.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    types, labels = _read_nodes(Path(node_file))
    edges = _read_edges(Path(edge_file), types)
    tables = {}
    for name, path in attribute_files.items():
        m = Modality(name)
        tables[m] = _read_attrs(Path(path), types, m, (dims or {}).get(m.value))
    if label_file is not None:
        labels[task] = _read_label_file(Path(label_file), types)
    try:
        g = HetGraph(types, edges, tables, labels)
    except UnknownNodeError as exc:
        raise GraphFormatError(str(exc)) from None
    return g, g.labels(task)


def load_dataset(directory: str | Path, task: str = "cuisine", dims: Mapping[str, int] | None = None):
    directory = Path(directory)
    if not (directory / "nodes.tsv").exists():
        raise GraphFormatError("missing nodes.tsv", str(directory))
    attrs = {m.value: directory / f"attrs.{m.value}.tsv" for m in Modality if (directory / f"attrs.{m.value}.tsv").exists()}
    return load_graph(directory / "nodes.tsv", directory / "edges.tsv", attrs, task=task, dims=dims)


# --------------------------------------------------------------------------
# splits


def _largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    leftover = n - sum(sizes)
    # ties go to the earlier part
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def make_split(
    labels: LabelSet, fractions: tuple[float, float, float] = (0.70, 0.15, 0.15), seed: int = 0
) -> SplitAssignment:
    """Uniform random train/val/test partition of the labeled nodes.

    Part sizes use largest-remainder rounding of ``n * fraction``; a tie in
    remainders favours train, then val.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    nodes = sorted(labels.labels)
    if len(nodes) < 3:
        raise ValueError(f"need at least 3 labeled nodes to split, got {len(nodes)}")
    sizes = _largest_remainder(len(nodes), tuple(fractions))
    perm = np.random.default_rng(seed).permutation(len(nodes))
    parts = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    return SplitAssignment({nodes[i]: part for i, part in zip(perm, parts)})

"""Graph data model: ingestion, batching, augmentation, synthetic tasks.

Graphs are stored as explicit directed edge lists; undirected graphs carry
both directed pairs so every aggregation operator can treat in-edges
uniformly. All containers are immutable after construction and safe to
share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASK_TYPES = ("binary", "multi-binary", "multi-class")

MISSING = float("nan")  # sentinel for absent multi-binary targets


class ValidationError(ValueError):
    """A graph or dataset violates a structural invariant."""


class ParseError(ValueError):
    """A dataset file line could not be decoded."""


@dataclass(frozen=True)
class TaskSchema:
    """What kind of labels a dataset carries.

    num_tasks matters for multi-binary targets, num_classes for
    multi-class; both default to the single binary task.
    """
    task_type: str = "binary"
    num_tasks: int = 1
    num_classes: int = 2

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValidationError(f"unknown task type {self.task_type!r}; expected one of {TASK_TYPES}")
        if self.task_type == "multi-binary" and self.num_tasks < 1:
            raise ValidationError("multi-binary schema needs num_tasks >= 1")
        if self.task_type == "multi-class" and self.num_classes < 2:
            raise ValidationError("multi-class schema needs num_classes >= 2")

    @property
    def label_width(self) -> int:
        return self.num_tasks if self.task_type == "multi-binary" else 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Graph:
    """One graph: node features, directed edge list, optional extras.

    label is a float vector: length 1 for binary (0/1) and multi-class
    (the class index), length K for multi-binary with NaN marking a
    missing target.
    """
    node_features: np.ndarray          # N x d_in
    edges: np.ndarray                  # E x 2 int64 (src, dst)
    edge_features: np.ndarray | None = None  # E x d_e
    label: np.ndarray | None = None    # (K,) float

    def __post_init__(self):
        nf = _freeze(np.asarray(self.node_features, dtype=np.float64))
        ed = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edges", _freeze(ed))
        if nf.ndim != 2:
            raise ValidationError(f"node_features must be 2-d, got shape {nf.shape}")
        n = nf.shape[0]
        if ed.size and (ed.min() < 0 or ed.max() >= n):
            raise ValidationError(f"edge endpoint out of range [0, {n})")
        if self.edge_features is not None:
            ef = _freeze(np.asarray(self.edge_features, dtype=np.float64))
            object.__setattr__(self, "edge_features", ef)
            if ef.shape[0] != ed.shape[0]:
                raise ValidationError(
                    f"edge_features rows ({ef.shape[0]}) != edge count ({ed.shape[0]})")
        if self.label is not None:
            lab = _freeze(np.asarray(self.label, dtype=np.float64).reshape(-1))
            object.__setattr__(self, "label", lab)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class GraphBatch:
    """Block-diagonal concatenation of graphs with a node-to-graph map."""
    node_features: np.ndarray          # (sum N_i) x d_in
    edges: np.ndarray                  # (sum E_i) x 2, offset-adjusted
    graph_ids: np.ndarray              # (sum N_i,) int64, non-decreasing
    labels: np.ndarray                 # B x K float
    edge_features: np.ndarray | None = None
    node_counts: np.ndarray = field(default=None)  # (B,) nodes per graph
    edge_counts: np.ndarray = field(default=None)  # (B,) edges per graph

    def __post_init__(self):
        for name in ("node_features", "edges", "graph_ids", "labels",
                     "node_counts", "edge_counts"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _freeze(np.asarray(val)))
        if self.edge_features is not None:
            object.__setattr__(self, "edge_features",
                               _freeze(np.asarray(self.edge_features, dtype=np.float64)))
        # cached degree vectors shared by the aggregation operators
        n = self.node_features.shape[0]
        dst = self.edges[:, 1] if self.edges.size else np.zeros(0, dtype=np.int64)
        in_deg = np.bincount(dst, minlength=n).astype(np.float64)
        object.__setattr__(self, "in_degrees", _freeze(in_deg))
        object.__setattr__(self, "degrees",
                           _freeze(_undirected_degrees(self.edges, n).astype(np.float64)))

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_graphs(self) -> int:
        return int(self.graph_ids.max()) + 1 if self.graph_ids.size else 0


@dataclass(frozen=True)
class Dataset:
    graphs: list
    schema: TaskSchema
    splits: dict

    def __post_init__(self):
        all_idx = np.concatenate([np.asarray(v, dtype=np.int64) for v in self.splits.values()]) \
            if self.splits else np.zeros(0, dtype=np.int64)
        if len(all_idx) != len(set(all_idx.tolist())):
            raise ValidationError("splits overlap")
        if set(all_idx.tolist()) != set(range(len(self.graphs))):
            raise ValidationError("splits must cover all graph indices exactly once")

    def split_graphs(self, name: str) -> list:
        return [self.graphs[i] for i in self.splits[name]]

    @property
    def num_node_features(self) -> int:
        return self.graphs[0].node_features.shape[1]

    @property
    def num_edge_features(self) -> int:
        g = self.graphs[0]
        return 0 if g.edge_features is None else g.edge_features.shape[1]


# ---------------------------------------------------------------------------
# degrees


def _undirected_degrees(edges: np.ndarray, num_nodes: int) -> np.ndarray:
    """Degree counting each undirected pair once; a self-loop adds one."""
    deg = np.zeros(num_nodes, dtype=np.int64)
    if edges.size == 0:
        return deg
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    pairs = np.unique(lo * np.int64(num_nodes) + hi)
    a = pairs // num_nodes
    b = pairs % num_nodes
    np.add.at(deg, a, 1)
    loops = a == b
    np.add.at(deg, b[~loops], 1)
    return deg


def compute_degrees(g: Graph) -> np.ndarray:
    """Per-node degree; directed pairs (u,v) and (v,u) count as one edge."""
    return _undirected_degrees(g.edges, g.num_nodes)


# ---------------------------------------------------------------------------
# batching


def batch_graphs(graphs: list) -> GraphBatch:
    """Concatenate graphs block-diagonally, offsetting edge indices."""
    if not graphs:
        raise ValidationError("cannot batch an empty graph list")
    d_in = graphs[0].node_features.shape[1]
    has_ef = graphs[0].edge_features is not None
    d_e = graphs[0].edge_features.shape[1] if has_ef else 0
    for g in graphs:
        if g.node_features.shape[1] != d_in:
            raise ValidationError(
                f"mixed node feature widths: {d_in} vs {g.node_features.shape[1]}")
        if (g.edge_features is not None) != has_ef or \
                (has_ef and g.edge_features.shape[1] != d_e):
            raise ValidationError("mixed edge feature presence or widths")

    node_counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    edge_counts = np.array([g.num_edges for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(node_counts)[:-1]])

    feats = np.concatenate([g.node_features for g in graphs], axis=0)
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)], axis=0) \
        if edge_counts.sum() else np.zeros((0, 2), dtype=np.int64)
    gids = np.repeat(np.arange(len(graphs), dtype=np.int64), node_counts)
    labels = np.stack([g.label for g in graphs], axis=0)
    efeats = np.concatenate([g.edge_features for g in graphs], axis=0) if has_ef else None

    return GraphBatch(node_features=feats, edges=edges, graph_ids=gids,
                      labels=labels, edge_features=efeats,
                      node_counts=node_counts, edge_counts=edge_counts)


def unbatch(batch: GraphBatch) -> list:
    """Invert batch_graphs, reproducing the original graphs."""
    graphs = []
    n_off = 0
    e_off = 0
    for i, (n, e) in enumerate(zip(batch.node_counts, batch.edge_counts)):
        ef = None
        if batch.edge_features is not None:
            ef = batch.edge_features[e_off:e_off + e]
        graphs.append(Graph(
            node_features=batch.node_features[n_off:n_off + n],
            edges=batch.edges[e_off:e_off + e] - n_off,
            edge_features=ef,
            label=batch.labels[i]))
        n_off += n
        e_off += e
    return graphs


# ---------------------------------------------------------------------------
# augmentation


def add_virtual_node(g: Graph) -> Graph:
    """Append one zero-featured node connected both ways to every node.

    Not idempotent: applying twice adds two virtual nodes.
    """
    n = g.num_nodes
    feats = np.concatenate([g.node_features,
                            np.zeros((1, g.node_features.shape[1]))], axis=0)
    new_edges = np.empty((2 * n, 2), dtype=np.int64)
    new_edges[0::2, 0] = n          # (v, u)
    new_edges[0::2, 1] = np.arange(n)
    new_edges[1::2, 0] = np.arange(n)
    new_edges[1::2, 1] = n          # (u, v)
    edges = np.concatenate([g.edges, new_edges], axis=0)
    ef = None
    if g.edge_features is not None:
        ef = np.concatenate([g.edge_features,
                             np.zeros((2 * n, g.edge_features.shape[1]))], axis=0)
    return Graph(node_features=feats, edges=edges, edge_features=ef, label=g.label)


# ---------------------------------------------------------------------------
# JSON-lines IO


def _parse_record(obj: dict, schema: TaskSchema, lineno: int) -> Graph:
    try:
        n = int(obj["num_nodes"])
        node_feat = np.asarray(obj["node_feat"], dtype=np.float64)
        edges = np.asarray(obj.get("edges", []), dtype=np.int64).reshape(-1, 2)
        raw_ef = obj.get("edge_feat")
        edge_feat = None if raw_ef is None else np.asarray(raw_ef, dtype=np.float64)
        raw_label = obj["label"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {lineno}: malformed graph record ({exc})") from exc

    if node_feat.ndim != 2 or node_feat.shape[0] != n:
        raise ValidationError(f"line {lineno}: node_feat shape {node_feat.shape} "
                              f"does not match num_nodes {n}")

    label = _parse_label(raw_label, schema, lineno)
    try:
        return Graph(node_features=node_feat, edges=edges,
                     edge_features=edge_feat, label=label)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc


def _parse_label(raw, schema: TaskSchema, lineno: int) -> np.ndarray:
    if schema.task_type == "multi-binary":
        if not isinstance(raw, list) or len(raw) != schema.num_tasks:
            raise ValidationError(
                f"line {lineno}: expected a {schema.num_tasks}-entry label vector")
        vals = np.array([MISSING if v is None else float(v) for v in raw])
        present = vals[~np.isnan(vals)]
        if present.size and not np.isin(present, (0.0, 1.0)).all():
            raise ValidationError(f"line {lineno}: multi-binary entries must be 0, 1 or null")
        return vals
    if isinstance(raw, list):
        raise ValidationError(f"line {lineno}: scalar label expected for {schema.task_type} task")
    val = float(raw)
    if schema.task_type == "binary":
        if val not in (0.0, 1.0):
            raise ValidationError(f"line {lineno}: binary label must be 0 or 1, got {raw}")
    else:
        if val != int(val) or not (0 <= int(val) < schema.num_classes):
            raise ValidationError(
                f"line {lineno}: class index must be an integer in [0, {schema.num_classes})")
    return np.array([val])


def load_dataset(path, schema: TaskSchema, splits_path=None,
                 symmetrize: bool = True) -> Dataset:
    """Load a JSON-lines graph file, preserving file order.

    Edge lists are normalized to the both-directions convention unless
    ``symmetrize`` is off: any directed pair lacking its reverse gets the
    reverse appended (copying the edge features). Splits come from the
    JSON file at ``splits_path``; when omitted, a contiguous 80/10/10
    split over file order is used.
    """
    path = Path(path)
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            g = _parse_record(obj, schema, lineno)
            if symmetrize:
                g = _symmetrize(g)
            graphs.append(g)
    if not graphs:
        raise ValidationError(f"{path}: no graph records found")

    if splits_path is not None:
        with open(splits_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in raw.items()}
    else:
        splits = contiguous_split(len(graphs))
    return Dataset(graphs=graphs, schema=schema, splits=splits)


def _symmetrize(g: Graph) -> Graph:
    if g.num_edges == 0:
        return g
    n = g.num_nodes
    keys = set((g.edges[:, 0] * np.int64(n) + g.edges[:, 1]).tolist())
    missing = [i for i, (s, d) in enumerate(g.edges)
               if s != d and (d * n + s) not in keys]
    if not missing:
        return g
    extra = g.edges[missing][:, ::-1]
    edges = np.concatenate([g.edges, extra], axis=0)
    ef = None
    if g.edge_features is not None:
        ef = np.concatenate([g.edge_features, g.edge_features[missing]], axis=0)
    return Graph(node_features=g.node_features, edges=edges,
                 edge_features=ef, label=g.label)


def write_dataset(dataset: Dataset, path, splits_path) -> None:
    """Write the JSON-lines graph file plus the splits file."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in dataset.graphs:
            rec = {
                "num_nodes": g.num_nodes,
                "node_feat": g.node_features.tolist(),
                "edges": g.edges.tolist(),
                "edge_feat": None if g.edge_features is None else g.edge_features.tolist(),
                "label": _label_to_json(g.label, dataset.schema),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    with open(splits_path, "w", encoding="utf-8") as fh:
        json.dump({k: np.asarray(v).tolist() for k, v in dataset.splits.items()},
                  fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _label_to_json(label: np.ndarray, schema: TaskSchema):
    if schema.task_type == "multi-binary":
        return [None if np.isnan(v) else v for v in label.tolist()]
    val = float(label[0])
    return int(val) if schema.task_type == "multi-class" else val


def contiguous_split(n: int) -> dict:
    n_va = max(1, round(0.1 * n)) if n >= 3 else 0
    n_te = n_va
    idx = np.arange(n, dtype=np.int64)
    return {"train": idx[:n - n_va - n_te],
            "valid": idx[n - n_va - n_te:n - n_te],
            "test": idx[n - n_te:]}


# ---------------------------------------------------------------------------
# synthetic task generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Built-in generator settings: random graphs with exact structural labels."""
    task: str                       # "triangle-threshold" or "degree-parity"
    num_graphs: int = 500
    min_nodes: int = 8
    max_nodes: int = 16
    edge_prob: float = 0.25
    triangle_threshold: int = 3

    def __post_init__(self):
        if self.task not in ("triangle-threshold", "degree-parity"):
            raise ValidationError(f"unknown synthetic task {self.task!r}")
        if self.num_graphs < 10:
            raise ValidationError("num_graphs must be at least 10 (splits need every part non-empty)")
        if not (1 <= self.min_nodes <= self.max_nodes):
            raise ValidationError("need 1 <= min_nodes <= max_nodes")
        if not (0.0 < self.edge_prob <= 1.0):
            raise ValidationError("edge_prob must be in (0, 1]")
        if self.triangle_threshold < 1:
            raise ValidationError("triangle_threshold must be >= 1")


def count_triangles(edges: np.ndarray, num_nodes: int) -> int:
    """Exact triangle count via the cubed 0/1 adjacency matrix."""
    adj = np.zeros((num_nodes, num_nodes))
    if edges.size:
        adj[edges[:, 0], edges[:, 1]] = 1.0
        adj[edges[:, 1], edges[:, 0]] = 1.0
    np.fill_diagonal(adj, 0.0)
    return int(round(np.trace(adj @ adj @ adj) / 6.0))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Deterministic random-graph dataset with exactly computed labels.

    Node features are [1, degree]. Undirected edges are stored as both
    directed pairs. Splits are stratified 80/10/10.
    """
    rng = np.random.default_rng([int(seed), 0x5F3A])
    graphs = []
    for _ in range(spec.num_graphs):
        n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
        upper = rng.random((n, n)) < spec.edge_prob
        src, dst = np.nonzero(np.triu(upper, k=1))
        edges = np.empty((2 * src.size, 2), dtype=np.int64)
        edges[0::2, 0], edges[0::2, 1] = src, dst
        edges[1::2, 0], edges[1::2, 1] = dst, src

        deg = _undirected_degrees(edges, n)
        feats = np.stack([np.ones(n), deg.astype(np.float64)], axis=1)
        if spec.task == "triangle-threshold":
            label = 1.0 if count_triangles(edges, n) >= spec.triangle_threshold else 0.0
        else:
            label = float(int(deg.sum()) % 2)
        graphs.append(Graph(node_features=feats, edges=edges, label=np.array([label])))

    labels = np.array([float(g.label[0]) for g in graphs])
    splits = stratified_split(labels, rng=np.random.default_rng([int(seed), 0x51D5]))
    return Dataset(graphs=graphs, schema=TaskSchema("binary"), splits=splits)


def stratified_split(labels: np.ndarray, rng: np.random.Generator,
                     frac_valid: float = 0.1, frac_test: float = 0.1) -> dict:
    """80/10/10 split preserving class proportions (largest remainder)."""
    n = len(labels)
    n_va = round(frac_valid * n)
    n_te = round(frac_test * n)
    classes = np.unique(labels)
    per_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}

    def allocate(total: int, pools: dict) -> dict:
        sizes = {c: len(v) for c, v in pools.items()}
        total_pool = sum(sizes.values())
        exact = {c: total * sizes[c] / total_pool for c in pools}
        counts = {c: int(exact[c]) for c in pools}
        short = total - sum(counts.values())
        by_rem = sorted(pools, key=lambda c: (-(exact[c] - counts[c]), c))
        for c in by_rem[:short]:
            counts[c] += 1
        return counts

    valid_idx, test_idx, train_idx = [], [], []
    va_counts = allocate(n_va, per_class)
    remaining = {c: v[va_counts[c]:] for c, v in per_class.items()}
    for c, v in per_class.items():
        valid_idx.extend(v[:va_counts[c]].tolist())
    te_counts = allocate(n_te, remaining)
    for c, v in remaining.items():
        test_idx.extend(v[:te_counts[c]].tolist())
        train_idx.extend(v[te_counts[c]:].tolist())

    return {"train": np.sort(np.array(train_idx, dtype=np.int64)),
            "valid": np.sort(np.array(valid_idx, dtype=np.int64)),
            "test": np.sort(np.array(test_idx, dtype=np.int64))}

"""Losses, evaluation metrics, and from-scratch training of a derived
architecture.

Losses are built from autodiff primitives in numerically stable forms.
Metrics operate on plain arrays; the two ranking metrics match exhaustive
pair/precision oracles exactly, including the documented tie rules
(roc_auc counts ties as half; average_precision sorts by descending score
with ties broken by original index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Dataset, Graph, TaskSchema, add_virtual_node, batch_graphs
from .supernet import ArchEncoding, SupernetDims, SupernetParams, init_discrete, supernet_forward

# ---------------------------------------------------------------------------
# losses


def bce_masked(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over non-missing (non-NaN) label entries.

    Uses the stable form max(z,0) - z*y + log(1+exp(-|z|)) so large
    logits neither overflow nor lose the labelled term.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if logits.data.shape != labels.shape:
        raise ad.ShapeError(f"bce_masked: logits {logits.data.shape} vs labels {labels.shape}")
    mask = ~np.isnan(labels)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("bce_masked: all labels missing")
    y = np.where(mask, labels, 0.0)
    z = logits
    neg_abs = ad.scalar_mul(ad.add(ad.relu(z), ad.relu(ad.scalar_mul(z, -1.0))), -1.0)
    elem = ad.add(ad.sub(ad.relu(z), ad.mul(z, Tensor(y))),
                  ad.log(ad.add(Tensor(1.0), ad.exp(neg_abs))))
    masked = ad.mul(elem, Tensor(mask.astype(np.float64)))
    return ad.scalar_mul(ad.tsum(masked), 1.0 / count)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class (constant max shift)."""
    labels = np.asarray(labels)
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    labels = labels.astype(np.int64)
    B, C = logits.data.shape
    if labels.shape != (B,):
        raise ad.ShapeError(f"cross_entropy: {B} rows but label shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"cross_entropy: labels must lie in [0, {C})")
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    lse = ad.add(m, ad.log(ad.tsum(ad.exp(ad.sub(logits, m)), axis=1, keepdims=True)))
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    z_true = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return ad.tmean(ad.sub(lse, z_true))


def task_loss(schema: TaskSchema, logits: Tensor, labels: np.ndarray) -> Tensor:
    if schema.task_type == "multi-class":
        return cross_entropy(logits, labels)
    return bce_masked(logits, labels)


# ---------------------------------------------------------------------------
# metrics


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative, ties
    worth half (the rank-statistic form)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise ValueError("roc_auc: scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _ap_single(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")  # descending, ties by original index
    hits = labels[order] == 1
    cum = np.cumsum(hits)
    ks = np.nonzero(hits)[0] + 1
    return float((cum[ks - 1] / ks).mean())


def average_precision(scores: np.ndarray, labels: np.ndarray):
    """Mean precision at each positive, averaged over tasks that have
    both classes after masking missing labels.

    Returns (mean AP, per-task list with None for skipped tasks).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
        labels = labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError("average_precision: scores and labels differ in shape")
    per_task = []
    valid = []
    for k in range(scores.shape[1]):
        m = ~np.isnan(labels[:, k])
        yk = labels[m, k]
        if m.sum() == 0 or yk.min() == yk.max():
            per_task.append(None)
            continue
        apk = _ap_single(scores[m, k], yk)
        per_task.append(apk)
        valid.append(apk)
    if not valid:
        raise ValueError("average_precision: no task has both classes")
    return float(np.mean(valid)), per_task


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of exact matches between two equal-length vectors."""
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.shape != labels.shape:
        raise ValueError("accuracy: predictions and labels differ in length")
    if predictions.size == 0:
        raise ValueError("accuracy: empty input")
    return float(np.mean(predictions == labels))


def predictions_from_logits(schema: TaskSchema, logits: np.ndarray) -> np.ndarray:
    """Class predictions: argmax over classes (first index on ties), or
    sign threshold for a single-logit binary head."""
    if schema.task_type == "multi-class":
        return np.argmax(logits, axis=1)
    return (logits[:, 0] > 0.0).astype(np.int64)


METRICS = ("auc", "ap", "accuracy")


def default_metric(schema: TaskSchema) -> str:
    return {"binary": "auc", "multi-binary": "ap", "multi-class": "accuracy"}[schema.task_type]


def check_metric(schema: TaskSchema, metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    allowed = {"binary": ("auc", "ap", "accuracy"),
               "multi-binary": ("ap",),
               "multi-class": ("accuracy",)}[schema.task_type]
    if metric not in allowed:
        raise ValueError(f"metric {metric!r} does not apply to a {schema.task_type} task "
                         f"(allowed: {allowed})")


@dataclass
class EvalReport:
    metric: str
    value: float
    split: str
    epoch: int
    per_task: list | None = None

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "split": self.split,
                "epoch": self.epoch, "per_task": self.per_task}


def evaluate_logits(schema: TaskSchema, metric: str, logits: np.ndarray,
                    labels: np.ndarray, split: str, epoch: int) -> EvalReport:
    check_metric(schema, metric)
    per_task = None
    if metric == "auc":
        value = roc_auc(logits[:, 0], labels[:, 0])
    elif metric == "ap":
        value, per_task = average_precision(logits, labels)
        if schema.task_type == "binary":
            per_task = None
    else:
        value = accuracy(predictions_from_logits(schema, logits), labels)
    return EvalReport(metric=metric, value=value, split=split, epoch=epoch,
                      per_task=per_task)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Gradient descent over named tensors, optional momentum."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()} \
            if momentum > 0 else None

    def step(self) -> None:
        for k, t in self.params.items():
            if t.grad is None:
                continue
            if self.velocity is not None:
                v = self.velocity[k]
                v *= self.momentum
                v += t.grad
                t.data -= self.lr * v
            else:
                t.data -= self.lr * t.grad


# ---------------------------------------------------------------------------
# training a discrete architecture


@dataclass
class HParams:
    learning_rate: float = 0.01
    batch_size: int = 32
    hidden_size: int = 32
    dropout: float = 0.0
    virtual_node: bool = False
    epochs: int = 30
    seed: int = 0
    momentum: float = 0.9
    metric: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.hidden_size < 1:
            raise ValueError("learning_rate, batch_size, hidden_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def output_dim(schema: TaskSchema) -> int:
    if schema.task_type == "multi-class":
        return schema.num_classes
    return schema.num_tasks


def _minibatches(graphs: list, batch_size: int, rng: np.random.Generator | None):
    idx = np.arange(len(graphs))
    if rng is not None:
        rng.shuffle(idx)
    for start in range(0, len(graphs), batch_size):
        chunk = idx[start: start + batch_size]
        yield [graphs[i] for i in chunk]


def _forward_split(params: SupernetParams, graphs: list, arch: ArchEncoding,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    parts = []
    labels = []
    for chunk in _minibatches(graphs, batch_size, rng=None):
        batch = batch_graphs(chunk)
        logits = supernet_forward(batch, params, mode="discrete", arch=arch)
        parts.append(logits.data)
        labels.append(batch.labels)
    return np.concatenate(parts, axis=0), np.concatenate(labels, axis=0)


def _clone_weights(params: SupernetParams) -> dict:
    return {k: t.data.copy() for k, t in params.weights.items()}


def _restore_weights(params: SupernetParams, snapshot: dict) -> None:
    for k, t in params.weights.items():
        t.data[:] = snapshot[k]


def train_discrete(dataset: Dataset, arch: ArchEncoding, hp: HParams):
    """Train ``arch`` from a fresh initialization; returns the
    best-valid-epoch parameters, per-split EvalReports, and an epoch log.

    With epochs=0 the reports describe the initialized model (epoch -1).
    """
    schema = dataset.schema
    metric = hp.metric or default_metric(schema)
    check_metric(schema, metric)

    def prep(split: str) -> list[Graph]:
        graphs = dataset.split_graphs(split)
        if hp.virtual_node:
            graphs = [add_virtual_node(g) for g in graphs]
        return graphs

    train_graphs = prep("train")
    valid_graphs = prep("valid")
    test_graphs = prep("test")
    if not train_graphs or not valid_graphs:
        raise ValueError("train and valid splits must be non-empty")

    d_in = train_graphs[0].node_features.shape[1]
    if dataset.num_node_features != d_in and not hp.virtual_node:
        raise ValueError("dataset feature width changed unexpectedly")
    dims = SupernetDims(d_in=d_in, out_dim=output_dim(schema),
                        num_blocks=arch.num_blocks, hidden=hp.hidden_size,
                        d_edge=dataset.num_edge_features)
    params = init_discrete(dims, arch, seed=hp.seed)

    opt = SGD(params.weights, lr=hp.learning_rate, momentum=hp.momentum)
    shuffle_rng = np.random.default_rng([hp.seed, 0x7121])
    dropout_rng = np.random.default_rng([hp.seed, 0xD120])

    best_value = -np.inf
    best_epoch = -1
    best_snapshot = _clone_weights(params)
    history = []
    for epoch in range(hp.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for chunk in _minibatches(train_graphs, hp.batch_size, shuffle_rng):
            batch = batch_graphs(chunk)
            logits = supernet_forward(batch, params, mode="discrete", arch=arch,
                                      training=True, dropout_rate=hp.dropout,
                                      rng=dropout_rng)
            loss = task_loss(schema, logits, batch.labels)
            params.zero_grads()
            ad.backward(loss)
            opt.step()
            epoch_loss += float(loss.data)
            n_batches += 1
        logits, labels = _forward_split(params, valid_graphs, arch)
        report = evaluate_logits(schema, metric, logits, labels, "valid", epoch)
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(1, n_batches),
                        f"valid_{metric}": report.value})
        if report.value > best_value:
            best_value = report.value
            best_epoch = epoch
            best_snapshot = _clone_weights(params)

    _restore_weights(params, best_snapshot)
    reports = {}
    for split, graphs in (("train", train_graphs), ("valid", valid_graphs),
                          ("test", test_graphs)):
        if not graphs:
            continue
        logits, labels = _forward_split(params, graphs, arch)
        reports[split] = evaluate_logits(schema, metric, logits, labels, split, best_epoch)
    return params, reports, history


def evaluate_model(dataset: Dataset, params: SupernetParams, arch: ArchEncoding,
                   metric: str | None = None, virtual_node: bool = False,
                   epoch: int = -1) -> dict:
    """Per-split EvalReports for an already-trained model."""
    schema = dataset.schema
    metric = metric or default_metric(schema)
    check_metric(schema, metric)
    if params.dims.d_in != dataset.num_node_features:
        raise ValueError(f"model expects {params.dims.d_in} node features, "
                         f"dataset has {dataset.num_node_features}")
    reports = {}
    for split in ("train", "valid", "test"):
        graphs = dataset.split_graphs(split)
        if virtual_node:
            graphs = [add_virtual_node(g) for g in graphs]
        if not graphs:
            continue
        logits, labels = _forward_split(params, graphs, arch)
        reports[split] = evaluate_logits(schema, metric, logits, labels, split, epoch)
    return reports


# ---------------------------------------------------------------------------
# model serialization


def save_model(params: SupernetParams, arch: ArchEncoding, bin_path, manifest_path,
               extra: dict | None = None) -> None:
    """Flat little-endian float64 blob plus a JSON manifest that records
    enough to rebuild the container (dims, arch, tensor names and shapes)."""
    names = list(params.weights)
    flat = np.concatenate([params.weights[k].data.ravel() for k in names]) \
        if names else np.zeros(0)
    with open(bin_path, "wb") as fh:
        fh.write(flat.astype("<f8").tobytes())
    manifest = {
        "schema_version": 1,
        "dtype": "<f8",
        "dims": {"d_in": params.dims.d_in, "out_dim": params.dims.out_dim,
                 "num_blocks": params.dims.num_blocks, "hidden": params.dims.hidden,
                 "d_edge": params.dims.d_edge},
        "max_degree": params.max_degree,
        "expansion": params.expansion,
        "arch": arch.to_dict(),
        "tensors": [{"name": k, "shape": list(params.weights[k].data.shape)}
                    for k in names],
    }
    if extra:
        for k, v in extra.items():
            if k in manifest:
                raise ValueError(f"extra manifest key {k!r} collides with a built-in")
            manifest[k] = v
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(bin_path, manifest_path) -> tuple[SupernetParams, ArchEncoding, dict]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != 1:
        raise ValueError(f"unsupported model manifest version {manifest.get('schema_version')!r}")
    dims = SupernetDims(**manifest["dims"])
    arch = ArchEncoding.from_dict(manifest["arch"])
    params = init_discrete(dims, arch, seed=0, max_degree=manifest["max_degree"],
                           expansion=manifest["expansion"])
    flat = np.frombuffer(open(bin_path, "rb").read(), dtype="<f8")
    offset = 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        t = params.weights.get(name)
        if t is None or t.data.shape != shape:
            raise ValueError(f"manifest tensor {name} {shape} does not match the "
                             f"rebuilt architecture")
        size = int(np.prod(shape)) if shape else 1
        t.data[:] = flat[offset: offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ValueError("model binary length does not match manifest shapes")
    return params, arch, manifest

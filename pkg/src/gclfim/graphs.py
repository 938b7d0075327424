"""Graph loading, synthesis, normalization and class-incremental task splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """A node or edge file line could not be parsed."""


class GraphValidationError(ValueError):
    """Graph contents violate a structural invariant."""


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return pairs.astype(np.int64)


@dataclass(frozen=True, eq=False)
class RawGraph:
    """Undirected node-labelled graph.

    ``edges`` is stored canonically: each undirected pair once as ``(u, v)``
    with ``u < v``, rows sorted lexicographically.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != self.num_nodes:
            raise GraphValidationError(
                f"feature matrix has shape {features.shape}, expected ({self.num_nodes}, d)"
            )
        if labels.shape != (self.num_nodes,):
            raise GraphValidationError(f"expected {self.num_nodes} labels, got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise GraphValidationError("class ids must be non-negative")
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise GraphValidationError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphValidationError("raw edge list contains a self-loop")
        object.__setattr__(self, "edges", _canonical_edges(edges))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_nodes else 0

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.ones(rows.shape[0])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def induced(self, nodes: np.ndarray) -> "RawGraph":
        """Subgraph on ``nodes`` (relabelled 0..k-1 in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        u, v = local[self.edges[:, 0]], local[self.edges[:, 1]]
        keep = (u >= 0) & (v >= 0)
        return RawGraph(
            num_nodes=int(nodes.size),
            edges=np.stack([u[keep], v[keep]], axis=1),
            features=self.features[nodes],
            labels=self.labels[nodes],
        )


def normalize_adjacency(raw: RawGraph) -> sp.csr_matrix:
    """Symmetric GCN normalization D^-1/2 (A + I) D^-1/2 with D the degree of A + I."""
    a_hat = raw.adjacency() + sp.identity(raw.num_nodes, format="csr")
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    return sp.csr_matrix(inv_sqrt @ a_hat @ inv_sqrt)


@dataclass(frozen=True, eq=False)
class TaskGraph:
    task_id: int
    subgraph: RawGraph
    adjacency: sp.csr_matrix
    class_set: tuple[int, ...]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    global_ids: np.ndarray = field(repr=False)

    @property
    def features(self) -> np.ndarray:
        return self.subgraph.features

    @property
    def labels(self) -> np.ndarray:
        return self.subgraph.labels

    @property
    def num_nodes(self) -> int:
        return self.subgraph.num_nodes


@dataclass(frozen=True, eq=False)
class TaskSchedule:
    tasks: tuple[TaskGraph, ...]
    total_classes: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> TaskGraph:
        return self.tasks[i]

    def classes_seen(self, upto: int) -> int:
        """Number of output columns active after tasks ``0..upto`` (0-based, inclusive).

        Classes are grouped in ascending order, so the classes seen so far are
        always a prefix ``0..k-1`` of the output head.
        """
        return max(self.tasks[upto].class_set) + 1

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.total_classes).encode())
        for task in self.tasks:
            h.update(repr((task.task_id, task.class_set)).encode())
            for arr in (
                task.global_ids,
                task.subgraph.edges,
                task.subgraph.features,
                task.subgraph.labels,
                task.train,
                task.val,
                task.test,
                task.adjacency.indptr,
                task.adjacency.indices,
                task.adjacency.data,
            ):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def split_counts(n: int, ratio: Sequence[float]) -> tuple[int, int, int]:
    _, r_val, r_test = ratio
    n_val = max(1, int(round(r_val * n)))
    n_test = max(1, int(round(r_test * n)))
    return n - n_val - n_test, n_val, n_test


def build_schedule(
    raw: RawGraph,
    classes_per_task: int,
    split_ratio: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> TaskSchedule:
    """Partition ``raw`` into class-incremental tasks.

    Classes are taken in ascending id order, ``classes_per_task`` at a time
    (the last task may be smaller). Edges crossing task boundaries are
    dropped. Within every class the nodes are shuffled with ``seed`` and cut
    into train/val/test according to ``split_ratio``.
    """
    if len(split_ratio) != 3 or abs(sum(split_ratio) - 1.0) > 1e-9 or min(split_ratio) < 0:
        raise ValueError(f"split_ratio must be three non-negative fractions summing to 1, got {split_ratio}")
    if classes_per_task < 1:
        raise ValueError("classes_per_task must be >= 1")

    classes = np.unique(raw.labels)
    counts = np.bincount(raw.labels)
    small = [int(c) for c in classes if counts[c] < 3]
    if small:
        raise GraphValidationError(f"classes {small} have fewer than 3 nodes")

    rng = np.random.default_rng(seed)
    tasks = []
    for task_id, start in enumerate(range(0, classes.size, classes_per_task)):
        class_set = tuple(int(c) for c in classes[start : start + classes_per_task])
        global_ids = np.flatnonzero(np.isin(raw.labels, class_set))
        local_of = {int(g): i for i, g in enumerate(global_ids)}
        parts: list[list[int]] = [[], [], []]
        for c in class_set:
            members = np.flatnonzero(raw.labels == c)
            members = members[rng.permutation(members.size)]
            n_train, n_val, _ = split_counts(members.size, split_ratio)
            chunks = np.split(members, [n_train, n_train + n_val])
            for part, chunk in zip(parts, chunks):
                part.extend(local_of[int(g)] for g in chunk)
        sub = raw.induced(global_ids)
        tasks.append(
            TaskGraph(
                task_id=task_id,
                subgraph=sub,
                adjacency=normalize_adjacency(sub),
                class_set=class_set,
                train=np.array(sorted(parts[0]), dtype=np.int64),
                val=np.array(sorted(parts[1]), dtype=np.int64),
                test=np.array(sorted(parts[2]), dtype=np.int64),
                global_ids=global_ids,
            )
        )
    return TaskSchedule(tasks=tuple(tasks), total_classes=int(classes.max()) + 1)


def generate_sbm_stream(
    num_classes: int,
    nodes_per_class: int,
    d: int,
    p_in: float,
    p_out: float,
    seed: int = 0,
    feature_scale: float = 1.0,
) -> RawGraph:
    """Stochastic block model with one block per class.

    Node features are the class mean plus unit Gaussian noise; class means
    are standard normal vectors scaled by ``feature_scale``.
    """
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    n = num_classes * nodes_per_class
    labels = np.repeat(np.arange(num_classes), nodes_per_class)
    means = feature_scale * rng.standard_normal((num_classes, d))
    features = means[labels] + rng.standard_normal((n, d))

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return RawGraph(num_nodes=n, edges=edges, features=features, labels=labels)


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield lineno, stripped.split()


def load_graph(node_file: str | Path, edge_file: str | Path) -> RawGraph:
    """Read the whitespace-separated node and edge text formats.

    Node lines are ``<node_id> <class_id> <f_1> ... <f_d>`` with ids in
    order from 0; edge lines are ``<u> <v>``. ``#`` starts a comment line.
    """
    node_file, edge_file = Path(node_file), Path(edge_file)
    labels, rows = [], []
    width = None
    for lineno, tokens in _data_lines(node_file):
        try:
            node_id, class_id = int(tokens[0]), int(tokens[1])
            feats = [float(t) for t in tokens[2:]]
        except (ValueError, IndexError) as exc:
            raise GraphFormatError(f"{node_file}:{lineno}: cannot parse node line ({exc})") from None
        if node_id != len(rows):
            raise GraphFormatError(f"{node_file}:{lineno}: expected node id {len(rows)}, got {node_id}")
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise GraphFormatError(f"{node_file}:{lineno}: expected {width} features, got {len(feats)}")
        labels.append(class_id)
        rows.append(feats)

    n = len(rows)
    edges = []
    for lineno, tokens in _data_lines(edge_file):
        if len(tokens) != 2:
            raise GraphFormatError(f"{edge_file}:{lineno}: expected '<u> <v>'")
        try:
            u, v = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise GraphFormatError(f"{edge_file}:{lineno}: non-integer node id") from None
        if not (0 <= u < n and 0 <= v < n):
            raise GraphValidationError(f"{edge_file}:{lineno}: edge ({u}, {v}) references a missing node")
        if u != v:
            edges.append((u, v))

    features = np.array(rows, dtype=np.float64).reshape(n, width or 0)
    return RawGraph(num_nodes=n, edges=np.array(edges, dtype=np.int64), features=features, labels=labels)


def save_graph(raw: RawGraph, node_file: str | Path, edge_file: str | Path) -> None:
    with open(node_file, "w", encoding="utf-8") as fh:
        for i in range(raw.num_nodes):
            feats = " ".join(repr(float(x)) for x in raw.features[i])
            fh.write(f"{i} {raw.labels[i]} {feats}\n")
    with open(edge_file, "w", encoding="utf-8") as fh:
        for u, v in raw.edges:
            fh.write(f"{u} {v}\n")

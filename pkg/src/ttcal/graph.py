"""Fully connected embedding graphs and subgraph samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .synth import EmbeddingSet, _as_rng


@dataclass
class EmbGraph:
    node_features: np.ndarray
    edge_cosine: np.ndarray
    node_index: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.node_features.shape[0]


def build_full_graph(emb: EmbeddingSet, indices=None) -> EmbGraph:
    idx = np.arange(len(emb)) if indices is None else np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size < 2 or idx.size > len(emb):
        raise InvalidArgument("a graph needs between 2 and n distinct nodes")
    if np.unique(idx).size != idx.size:
        raise InvalidArgument("duplicate node indices")
    if idx.min() < 0 or idx.max() >= len(emb):
        raise InvalidArgument("node index out of range")
    x = emb.vectors[idx]
    cos = x @ x.T
    cos = 0.5 * (cos + cos.T)
    np.fill_diagonal(cos, 1.0)
    labels = None if emb.labels is None else emb.labels[idx]
    return EmbGraph(x, cos, idx, labels)


def sample_subgraphs(emb: EmbeddingSet, batch_size: int, n_batches: int, seed) -> list[EmbGraph]:
    """Independent uniform batches, each drawn without replacement."""
    if batch_size < 2:
        raise InvalidArgument("batch_size must be >= 2")
    if batch_size > len(emb):
        raise InvalidArgument(f"batch_size {batch_size} exceeds set size {len(emb)}")
    rng = _as_rng(seed)
    return [build_full_graph(emb, _uniform_batch(len(emb), batch_size, rng))
            for _ in range(n_batches)]


def _uniform_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def stratified_batch(labels: np.ndarray, batch_size: int, per_class: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Pick classes, then ``per_class`` members of each, topped up uniformly.

    Guarantees positive pairs whenever some class has two or more members.
    """
    n = labels.shape[0]
    if batch_size > n:
        raise InvalidArgument(f"batch_size {batch_size} exceeds set size {n}")
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    n_classes = min(max(batch_size // max(per_class, 1), 1), eligible.size)
    chosen = rng.choice(eligible, size=n_classes, replace=False) if n_classes else []
    picked = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        picked.append(rng.choice(members, size=min(per_class, members.size), replace=False))
    picked = np.concatenate(picked) if picked else np.empty(0, dtype=np.intp)
    picked = picked[:batch_size]
    if picked.size < batch_size:
        rest = np.setdiff1d(np.arange(n), picked)
        picked = np.concatenate([picked, rng.choice(rest, size=batch_size - picked.size, replace=False)])
    return np.sort(picked)

"""Representation densities and class-specific TPR/TNR scores.

For node ``i`` with neighborhood ``N_i`` and cosine similarities ``a_ij``::

    s_avg_i = mean_{j in N_i} a_ij * [y_i == y_j]
    s_nbr_i = mean_{j in N_i} a_ij * ([y_i == y_j] - [y_i != y_j])
    a_avg_i = mean_{j in N_i} a_ij

Class scores for class ``k`` with members ``f_i`` (unit vectors)::

    tpr_k = || sum_{y_i = k} f_i || / n_k
    tnr_k = mean over pairs (i in k, j not in k) of (1 - a_ij)

The two estimators relate cluster-averaged densities to these scores and
become tight as the neighborhoods grow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInput, InvalidArgument
from .synth import EmbeddingSet


@dataclass(frozen=True)
class DensityRecord:
    node: int
    s_avg: float
    s_nbr: float
    a_avg: float
    neighborhood_size: int


@dataclass(frozen=True)
class ClassScore:
    class_id: int
    tpr_k: float
    tnr_k: float


class TheoremEstimate(NamedTuple):
    value: float
    clamped: bool


def node_densities(emb: EmbeddingSet, neighborhoods: Sequence[Sequence[int]]) -> list[DensityRecord]:
    if emb.labels is None:
        raise InvalidArgument("densities need labels")
    if len(neighborhoods) != len(emb):
        raise InvalidArgument("one neighborhood per node is required")
    x, y = emb.vectors, emb.labels
    records = []
    for i, nbrs in enumerate(neighborhoods):
        nbrs = np.asarray(nbrs, dtype=np.intp)
        if nbrs.size == 0:
            raise InvalidArgument(f"node {i} has an empty neighborhood")
        if np.any(nbrs == i):
            raise InvalidArgument(f"neighborhood of node {i} contains the node itself")
        a = x[nbrs] @ x[i]
        same = y[nbrs] == y[i]
        m = nbrs.size
        records.append(DensityRecord(
            node=i,
            s_avg=float(np.sum(a * same) / m),
            s_nbr=float(np.sum(a * np.where(same, 1.0, -1.0)) / m),
            a_avg=float(np.sum(a) / m),
            neighborhood_size=int(m),
        ))
    return records


def full_neighborhoods(n: int) -> list[np.ndarray]:
    """``N_i = V \\ {i}`` for a fully connected graph."""
    idx = np.arange(n)
    return [np.delete(idx, i) for i in range(n)]


def graph_densities(cosine: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised densities over full neighborhoods; returns ``(s_avg, s_nbr, a_avg)``."""
    n = cosine.shape[0]
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(n, dtype=bool)
    a = np.where(off, cosine, 0.0)
    s_avg = np.sum(a * same, axis=1) / (n - 1)
    s_nbr = np.sum(a * np.where(same, 1.0, -1.0), axis=1) / (n - 1)
    return s_avg, s_nbr, a.sum(axis=1) / (n - 1)


def class_scores(emb: EmbeddingSet, class_id: int) -> ClassScore:
    if emb.labels is None:
        raise InvalidArgument("class scores need labels")
    member = emb.labels == class_id
    n_k = int(member.sum())
    n_rest = len(emb) - n_k
    if n_k == 0:
        raise DegenerateInput(f"class {class_id} has no members")
    if n_rest == 0:
        raise DegenerateInput(f"class {class_id} has no non-members")
    r_k = emb.vectors[member].sum(axis=0)
    r_rest = emb.vectors[~member].sum(axis=0)
    # sum over cross pairs of a_ij factorises into a dot product of resultants
    tnr = 1.0 - float(r_k @ r_rest) / (n_k * n_rest)
    return ClassScore(int(class_id), float(np.linalg.norm(r_k)) / n_k, tnr)


def theorem1_estimate(records: Sequence[DensityRecord], cluster_size: int, neighborhood_size: int,
                      clamp: bool = True) -> TheoremEstimate:
    """Estimate ``tpr_k`` of a high-purity cluster from its densities.

    ``sqrt(|N_i| / (2 |N|) * (mean s_nbr + mean a_avg))``; since
    ``s_nbr + a_avg = 2 s_avg`` this equals ``sqrt(|N_i| / |N| * mean s_avg)``.
    """
    if not records or cluster_size < 1:
        raise InvalidArgument("cluster must be non-empty")
    if any(r.neighborhood_size != neighborhood_size for r in records):
        raise InvalidArgument("all records must share the neighborhood size")
    s_nbr = np.mean([r.s_nbr for r in records])
    a_avg = np.mean([r.a_avg for r in records])
    radicand = neighborhood_size / (2.0 * cluster_size) * (s_nbr + a_avg)
    if radicand < 0:
        if not clamp:
            raise ArithmeticError(f"negative radicand {radicand:.3g} in the TPR estimate")
        return TheoremEstimate(0.0, True)
    return TheoremEstimate(float(np.sqrt(radicand)), False)


def theorem2_estimate(records: Sequence[DensityRecord], cluster_size: int, n_cross_pairs: int,
                      neighborhood_size: int | None = None) -> TheoremEstimate:
    """Estimate ``tnr_k`` from the mean of ``s_avg - s_nbr`` over a cluster.

    Default form: ``1 - |N| / n_cross_pairs * mean(s_avg - s_nbr)``.

    That scale only stays consistent when cross-label cosines vanish, because
    the mean difference is normalised per neighbor. Passing
    ``neighborhood_size`` applies the size-consistent scale
    ``|N| |N_i| / (2 n_cross_pairs)``, which reproduces ``tnr_k`` exactly on a
    two-label cluster with full neighborhoods (``n_cross_pairs`` unordered).
    """
    if n_cross_pairs < 1:
        raise DegenerateInput("no negative pairs involving the class")
    if not records:
        raise InvalidArgument("cluster must be non-empty")
    diff = float(np.mean([r.s_avg - r.s_nbr for r in records]))
    scale = cluster_size / n_cross_pairs
    if neighborhood_size is not None:
        scale *= neighborhood_size / 2.0
    return TheoremEstimate(1.0 - scale * diff, False)

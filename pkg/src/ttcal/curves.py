"""TPR/TNR versus distance-threshold curves.

For a set of pairs with distances ``d_ij`` and a positive/negative split::

    TPR(d) = #{positive pairs with d_ij < d} / #{positive pairs}
    TNR(d) = #{negative pairs with d_ij > d} / #{negative pairs}

Inequalities are strict, so a pair lying exactly on a grid threshold counts
as neither a true positive nor a true negative there. Pairs are unordered
(``i < j``); ordered double sums give identical ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateInput, InvalidArgument, UnreachableTarget
from .synth import EmbeddingSet


@dataclass(frozen=True)
class ThresholdGrid:
    lo: float = 0.0
    hi: float = 2.0
    step: float = 0.01

    def __post_init__(self):
        if not (self.lo < self.hi) or not (self.step > 0):
            raise InvalidArgument("grid needs lo < hi and step > 0")
        ratio = (self.hi - self.lo) / self.step
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidArgument("(hi - lo) / step must be an integer")

    @property
    def size(self) -> int:
        return int(round((self.hi - self.lo) / self.step)) + 1

    @property
    def points(self) -> np.ndarray:
        # rounding keeps e.g. 0.43 exact instead of 0.43000000000000005
        return np.round(self.lo + self.step * np.arange(self.size), 10)

    def index_of(self, d: float) -> int:
        k = int(round((d - self.lo) / self.step))
        if k < 0 or k >= self.size or abs(self.points[k] - d) > 1e-6 * self.step:
            raise InvalidArgument(f"threshold {d} is not on the grid")
        return k


@dataclass(frozen=True)
class PerfCurve:
    grid: ThresholdGrid
    tpr: np.ndarray
    tnr: np.ndarray

    def __post_init__(self):
        tpr = np.asarray(self.tpr, dtype=np.float64)
        tnr = np.asarray(self.tnr, dtype=np.float64)
        object.__setattr__(self, "tpr", tpr)
        object.__setattr__(self, "tnr", tnr)
        if tpr.shape != (self.grid.size,) or tnr.shape != (self.grid.size,):
            raise InvalidArgument("curve length must match the grid")
        if not (np.all(np.isfinite(tpr)) and np.all(np.isfinite(tnr))):
            raise InvalidArgument("curve values must be finite")
        if tpr.min() < 0 or tpr.max() > 1 or tnr.min() < 0 or tnr.max() > 1:
            raise InvalidArgument("curve values must lie in [0, 1]")
        if np.any(np.diff(tpr) < 0):
            raise InvalidArgument("tpr must be non-decreasing in the threshold")
        if np.any(np.diff(tnr) > 0):
            raise InvalidArgument("tnr must be non-increasing in the threshold")

    @property
    def thresholds(self) -> np.ndarray:
        return self.grid.points

    def metric(self, name: str) -> np.ndarray:
        name = name.upper()
        if name == "TPR":
            return self.tpr
        if name == "TNR":
            return self.tnr
        raise InvalidArgument(f"unknown metric {name!r}")

    def boundary_ok(self) -> bool:
        """``tpr(2) = 1`` and ``tnr(0) = 1`` wherever the grid covers them."""
        pts = self.grid.points
        ok = True
        if pts[-1] >= 2.0:
            ok &= bool(np.all(self.tpr[pts >= 2.0] == 1.0))
        if pts[0] <= 0.0:
            ok &= bool(np.all(self.tnr[pts <= 0.0] == 1.0))
        return ok


@dataclass(frozen=True)
class CalibrationTarget:
    metric: str
    value: float

    def __post_init__(self):
        object.__setattr__(self, "metric", self.metric.upper())
        if self.metric not in ("TPR", "TNR"):
            raise InvalidArgument(f"metric must be TPR or TNR, got {self.metric!r}")
        if not 0 < self.value < 1:
            raise InvalidArgument("target value must lie strictly between 0 and 1")

    @classmethod
    def parse(cls, text: str) -> "CalibrationTarget":
        """Parse ``"tpr=0.9"``."""
        try:
            metric, value = text.split("=")
            return cls(metric.strip(), float(value))
        except ValueError as exc:
            raise InvalidArgument(f"bad target {text!r}; expected e.g. tpr=0.9") from exc

    @property
    def tag(self) -> str:
        return f"{self.metric.lower()}{int(round(self.value * 100))}"


@dataclass(frozen=True)
class ConnectivityEstimate:
    pair_index: np.ndarray
    prob: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=np.float64)
        dist = np.asarray(self.distance, dtype=np.float64)
        object.__setattr__(self, "prob", prob)
        object.__setattr__(self, "distance", dist)
        if prob.shape != dist.shape:
            raise InvalidArgument("prob and distance must align")
        if prob.size and (prob.min() < 0 or prob.max() > 1):
            raise InvalidArgument("probabilities must lie in [0, 1]")
        if dist.size and (dist.min() < -1e-6 or dist.max() > 2 + 1e-6):
            raise InvalidArgument("distances must lie in [0, 2]")


def condensed_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major ``(i, j)`` index arrays over ``i < j``."""
    return np.triu_indices(n, k=1)


def pairwise_distances(emb: EmbeddingSet) -> np.ndarray:
    """Condensed L2 distances, row-major over ``i < j``."""
    if len(emb) < 2:
        raise InvalidArgument("need at least two embeddings")
    return kernels.pairwise_distances(emb.vectors)


def same_label_pairs(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    i, j = condensed_pairs(labels.shape[0])
    return labels[i] == labels[j]


def curve_from_counts(grid: ThresholdGrid, pos_below, neg_above, n_pos: int, n_neg: int,
                      what: str = "pairs") -> PerfCurve:
    if n_pos == 0:
        raise DegenerateInput(f"no positive {what}")
    if n_neg == 0:
        raise DegenerateInput(f"no negative {what}")
    return PerfCurve(grid, np.asarray(pos_below) / n_pos, np.asarray(neg_above) / n_neg)


def curve_from_pairs(dist: np.ndarray, positive: np.ndarray, grid: ThresholdGrid,
                     what: str = "pairs") -> PerfCurve:
    pos_below, neg_above, n_pos, n_neg = kernels.threshold_counts(dist, positive, grid.points)
    return curve_from_counts(grid, pos_below, neg_above, n_pos, n_neg, what)


def exact_curves(emb: EmbeddingSet, grid: ThresholdGrid | None = None) -> PerfCurve:
    """Ground-truth curves from labels."""
    grid = grid or ThresholdGrid()
    if emb.labels is None:
        raise InvalidArgument("exact curves need labels")
    dist = pairwise_distances(emb)
    return curve_from_pairs(dist, same_label_pairs(emb.labels), grid, what="pairs (same label)")


def estimated_curves(est: ConnectivityEstimate, tau: float,
                     grid: ThresholdGrid | None = None) -> PerfCurve:
    """Curves with label indicators replaced by ``p_ij > tau``."""
    grid = grid or ThresholdGrid()
    if est.prob.size == 0:
        raise InvalidArgument("empty connectivity estimate")
    if not 0 < tau < 1:
        raise InvalidArgument("tau must lie strictly between 0 and 1")
    return curve_from_pairs(est.distance, est.prob > tau, grid, what="predicted pairs")


def solve_threshold(curve: PerfCurve, target: CalibrationTarget) -> float:
    """Grid threshold meeting ``target``.

    TPR targets return the smallest threshold with ``tpr >= value``, which
    keeps TNR as high as possible; TNR targets the largest threshold with
    ``tnr >= value``.
    """
    values = curve.metric(target.metric)
    ok = np.flatnonzero(values >= target.value)
    if ok.size == 0:
        raise UnreachableTarget(
            f"{target.metric}={target.value} is not attained on the grid "
            f"(best {values.max():.6g})", best=float(values.max()))
    k = ok[0] if target.metric == "TPR" else ok[-1]
    return float(curve.thresholds[k])


def mae_comb(est: PerfCurve, truth: PerfCurve) -> float:
    """Half the integral of ``|dTPR| + |dTNR|`` over the grid (trapezoid rule)."""
    if est.grid != truth.grid:
        raise InvalidArgument("curves live on different grids")
    err = np.abs(est.tpr - truth.tpr) + np.abs(est.tnr - truth.tnr)
    return 0.5 * float(np.trapezoid(err, truth.thresholds))


def pointwise_ae(truth: PerfCurve, d_opt: float, target: CalibrationTarget) -> float:
    k = truth.grid.index_of(d_opt)
    return abs(float(truth.metric(target.metric)[k]) - target.value)

"""Inductive posthoc calibrators used as curve-to-curve maps, and DBSCAN.

The inductive protocol fits, for each metric, a map ``g`` on the pairs
``(TPR_train(d), TPR_cal(d))`` over the threshold grid and predicts the test
curve as ``g(TPR_train(d))``; likewise for TNR. The train curve is the only
curve available without test labels, so every prediction comes from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit
from sklearn.cluster import DBSCAN

from . import kernels
from .curves import PerfCurve, ThresholdGrid, exact_curves, mae_comb
from .errors import DegenerateInput, InvalidArgument
from .synth import EmbeddingSet

POSTHOC_METHODS = ("platt", "beta", "isotonic", "histogram")
_EPS = 1e-6


@dataclass
class CalibrationMap:
    method: str
    params: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        p = self.params
        if self.method == "platt":
            z = logit(np.clip(x, _EPS, 1 - _EPS))
            return expit(p["slope"] * z + p["intercept"])
        if self.method == "beta":
            xc = np.clip(x, _EPS, 1 - _EPS)
            return expit(p["a"] * np.log(xc) - p["b"] * np.log1p(-xc) + p["c"])
        if self.method == "isotonic":
            return np.interp(x, p["breakpoints"], p["values"])
        if self.method == "histogram":
            return _interp_extrapolate(x, p["centroids"], p["centroid_values"])
        raise InvalidArgument(f"unknown calibration method {self.method!r}")


def _interp_extrapolate(x, xp, fp) -> np.ndarray:
    """Piecewise-linear through the centroids, continued linearly past the end ones."""
    out = np.array(np.interp(x, xp, fp), dtype=np.float64)
    if xp.size >= 2:
        lo, hi = x < xp[0], x > xp[-1]
        out[lo] = fp[0] + (x[lo] - xp[0]) * (fp[1] - fp[0]) / (xp[1] - xp[0])
        out[hi] = fp[-1] + (x[hi] - xp[-1]) * (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    return np.clip(out, 0.0, 1.0)


def _check_xy(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgument("xs and ys must be 1-d and of equal length")
    if xs.size < 2:
        raise InvalidArgument("at least two points are needed to fit a map")
    if xs.min() < 0 or xs.max() > 1 or ys.min() < 0 or ys.max() > 1:
        raise InvalidArgument("calibration inputs must lie in [0, 1]")
    if np.all(xs == xs[0]):
        raise DegenerateInput("all calibration inputs are equal")
    return xs, ys


def _soft_bce(z: np.ndarray, ys: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of sigmoid(z) against soft targets, and d/dz."""
    # log(1 + e^z) - y z, written stably
    loss = np.logaddexp(0.0, z) - ys * z
    return float(loss.mean()), (expit(z) - ys) / z.size


def _fit_sigmoid_features(feats: np.ndarray, ys: np.ndarray, x0: np.ndarray,
                          bounds) -> np.ndarray:
    def objective(theta):
        z = feats @ theta
        f, dz = _soft_bce(z, ys)
        return f, feats.T @ dz

    res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12})
    return res.x


def isotonic_fit(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """PAVA on points sorted by ``xs``; tied inputs are pooled first."""
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    ux, inverse, counts = np.unique(xs, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=ys)
    fitted = kernels.pava(sums / counts, counts.astype(np.float64))
    return ux, fitted


def fit_calibration_map(method: str, xs, ys, n_bins: int = 15) -> CalibrationMap:
    xs, ys = _check_xy(xs, ys)
    if method == "platt":
        feats = np.column_stack([logit(np.clip(xs, _EPS, 1 - _EPS)), np.ones_like(xs)])
        a, b = _fit_sigmoid_features(feats, ys, np.array([1.0, 0.0]), [(0, None), (None, None)])
        return CalibrationMap("platt", {"slope": float(a), "intercept": float(b)})
    if method == "beta":
        xc = np.clip(xs, _EPS, 1 - _EPS)
        feats = np.column_stack([np.log(xc), -np.log1p(-xc), np.ones_like(xs)])
        a, b, c = _fit_sigmoid_features(feats, ys, np.array([1.0, 1.0, 0.0]),
                                        [(0, None), (0, None), (None, None)])
        return CalibrationMap("beta", {"a": float(a), "b": float(b), "c": float(c)})
    if method == "isotonic":
        bx, bv = isotonic_fit(xs, ys)
        return CalibrationMap("isotonic", {"breakpoints": bx, "values": bv})
    if method == "histogram":
        if n_bins < 1:
            raise InvalidArgument("n_bins must be >= 1")
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        idx = np.minimum((xs * n_bins).astype(np.intp), n_bins - 1)
        cnt = np.bincount(idx, minlength=n_bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.bincount(idx, weights=ys, minlength=n_bins) / cnt
            cx = np.bincount(idx, weights=xs, minlength=n_bins) / cnt
        full = cnt > 0
        # prediction interpolates between per-bin (mean x, mean y) centroids
        return CalibrationMap("histogram", {
            "edges": edges, "bin_values": values,
            "centroids": cx[full], "centroid_values": values[full],
        })
    raise InvalidArgument(f"unknown calibration method {method!r}")


def rectify(tpr: np.ndarray, tnr: np.ndarray, source: PerfCurve) -> tuple[np.ndarray, np.ndarray]:
    """Clip to [0, 1] and force tpr non-decreasing, tnr non-increasing.

    Points where the source curve is saturated at 1 stay at 1.
    """
    tpr = np.maximum.accumulate(np.clip(tpr, 0.0, 1.0))
    tnr = np.minimum.accumulate(np.clip(tnr, 0.0, 1.0))
    tpr[source.tpr == 1.0] = 1.0
    tnr[source.tnr == 1.0] = 1.0
    return np.maximum.accumulate(tpr), np.minimum.accumulate(tnr)


def predict_curve(tpr_map: CalibrationMap, tnr_map: CalibrationMap, source: PerfCurve) -> PerfCurve:
    tpr, tnr = rectify(tpr_map(source.tpr), tnr_map(source.tnr), source)
    return PerfCurve(source.grid, tpr, tnr)


def fit_curve_maps(method: str, train: PerfCurve, cal: PerfCurve) -> tuple[CalibrationMap, CalibrationMap]:
    if train.grid != cal.grid:
        raise InvalidArgument("train and cal curves live on different grids")
    return (fit_calibration_map(method, train.tpr, cal.tpr),
            fit_calibration_map(method, train.tnr, cal.tnr))


def posthoc_curve(method: str, train: PerfCurve, cal: PerfCurve) -> PerfCurve:
    """Inductive prediction of the test curve from train and cal curves."""
    tpr_map, tnr_map = fit_curve_maps(method, train, cal)
    return predict_curve(tpr_map, tnr_map, train)


def dbscan_labels(emb: EmbeddingSet, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN pseudo labels on L2 distances; noise is ``-1``.

    ``min_pts`` counts the point itself, and neighbors satisfy ``d <= eps``.
    """
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    if min_pts < 1:
        raise InvalidArgument("min_pts must be >= 1")
    return DBSCAN(eps=eps, min_samples=min_pts, metric="euclidean").fit(emb.vectors).labels_


def pseudo_label_curve(emb: EmbeddingSet, pseudo: np.ndarray,
                       grid: ThresholdGrid | None = None) -> PerfCurve:
    keep = np.flatnonzero(pseudo >= 0)
    if keep.size < 2:
        raise DegenerateInput("DBSCAN marked (almost) every point as noise")
    return exact_curves(EmbeddingSet(emb.vectors[keep], pseudo[keep]), grid)


@dataclass(frozen=True)
class DBSCANSetting:
    eps: float
    min_pts: int
    cal_mae: float


def rank_dbscan(cal: EmbeddingSet, grid: ThresholdGrid | None = None,
                eps_grid=None, min_pts_grid=(2, 3, 5, 8)) -> list[DBSCANSetting]:
    """Every usable (eps, min_pts) on ``cal``, best ``mae_comb`` first."""
    grid = grid or ThresholdGrid()
    truth = exact_curves(cal, grid)
    eps_grid = np.round(np.arange(0.2, 1.61, 0.1), 2) if eps_grid is None else eps_grid
    found = []
    for eps in eps_grid:
        for mp in min_pts_grid:
            try:
                err = mae_comb(pseudo_label_curve(cal, dbscan_labels(cal, float(eps), int(mp)), grid), truth)
            except DegenerateInput:
                continue
            found.append(DBSCANSetting(float(eps), int(mp), err))
    if not found:
        raise DegenerateInput("no DBSCAN setting produced a usable pseudo curve on cal")
    return sorted(found, key=lambda s: (s.cal_mae, s.eps, s.min_pts))


def tune_dbscan(cal: EmbeddingSet, grid: ThresholdGrid | None = None,
                eps_grid=None, min_pts_grid=(2, 3, 5, 8)) -> DBSCANSetting:
    """Grid search (eps, min_pts) minimising mae_comb of the pseudo curve on ``cal``."""
    return rank_dbscan(cal, grid, eps_grid, min_pts_grid)[0]


def dbscan_on_test(cal: EmbeddingSet, test: EmbeddingSet,
                   grid: ThresholdGrid | None = None) -> PerfCurve:
    """Pseudo-label curve on ``test`` using the best cal setting that works there.

    A setting tuned on ``cal`` can merge the test set into one cluster, which
    leaves no negative pairs; the next-best setting is tried instead.
    """
    grid = grid or ThresholdGrid()
    for setting in rank_dbscan(cal, grid):
        try:
            return pseudo_label_curve(test, dbscan_labels(test, setting.eps, setting.min_pts), grid)
        except DegenerateInput:
            continue
    raise DegenerateInput("no tuned DBSCAN setting gives usable pseudo labels on test")

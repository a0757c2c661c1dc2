"""Two-stage training, connectivity-threshold selection and transductive estimation.

Training: pretrain the whole network on closed-set data, then reset the MLP
head and fit it alone on the small calibration set while the attention
encoder stays frozen.

Inference: sample fully connected subgraphs of the unlabeled test set,
predict pairwise connectivity, threshold it at ``tau``, and pool the pair
counts of every round into one TPR/TNR curve until the curve stops moving.
"""

from __future__ import annotations

import base64
import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .curves import (CalibrationTarget, PerfCurve, ThresholdGrid, curve_from_counts,
                     exact_curves, mae_comb, pointwise_ae, solve_threshold)
from .errors import (CalibrationFailure, DegenerateBatch, DegenerateInput, InvalidArgument,
                     TrainingFailure)
from .graph import EmbGraph, _uniform_batch, build_full_graph, stratified_batch
from .net import (DENSITY_TERMS, ModelParams, NetDims, OptimizerState, adam_step, forward,
                  init_params, load_model, loss_and_gradients, reset_mlp,
                  save_model)
from .synth import EmbeddingSet, _as_rng

log = logging.getLogger(__name__)

DEFAULT_TAU_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 300
    lr_max: float = 3e-3
    lr_min: float = 1e-5
    lam: float = 10.0
    seed: int = 0
    stage: str = "pretrain"
    per_class: int = 8
    density_terms: tuple[str, ...] = DENSITY_TERMS
    rotate: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise InvalidArgument("need 0 < lr_min <= lr_max")
        if self.lam < 0:
            raise InvalidArgument("lambda must be >= 0")
        if self.batch_size < 2 or self.per_class < 1:
            raise InvalidArgument("batch_size must be >= 2 and per_class >= 1")
        if self.stage not in ("pretrain", "finetune"):
            raise InvalidArgument(f"unknown stage {self.stage!r}")
        bad = set(self.density_terms) - set(DENSITY_TERMS)
        if bad:
            raise InvalidArgument(f"unknown density terms {sorted(bad)}")

    def as_dict(self) -> dict:
        return {"batch_size": self.batch_size, "steps": self.steps, "lr_max": self.lr_max,
                "lr_min": self.lr_min, "lambda": self.lam, "seed": self.seed,
                "stage": self.stage, "per_class": self.per_class,
                "density_terms": list(self.density_terms), "rotate": self.rotate}


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    skipped: int


def _train(params: ModelParams, config: TrainConfig, data: EmbeddingSet,
           names: Sequence[str]) -> TrainResult:
    if data.labels is None:
        raise InvalidArgument("training data must be labeled")
    if np.unique(data.labels).size < 2:
        raise InvalidArgument("training data needs at least two classes")
    batch = min(config.batch_size, len(data))
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.fresh(params, config.lr_max, config.lr_min, config.steps, names)
    losses, skipped = [], 0
    for _ in range(config.steps):
        idx = stratified_batch(data.labels, batch, config.per_class, rng)
        graph = build_full_graph(data, idx)
        if config.rotate:
            graph = _rotated(graph, rng)
        try:
            breakdown, grads = loss_and_gradients(params, graph, config.lam,
                                                  config.density_terms, names)
        except DegenerateBatch:
            skipped += 1
            continue
        losses.append(breakdown.total)
        params, state = adam_step(state, params, grads)
    if skipped:
        log.warning("%s: skipped %d of %d degenerate batches", config.stage, skipped, config.steps)
    if skipped > config.steps / 2:
        raise TrainingFailure(f"{skipped} of {config.steps} batches were degenerate")
    return TrainResult(params, losses, skipped)


def _rotated(graph: EmbGraph, rng: np.random.Generator) -> EmbGraph:
    # connectivity is invariant to a global rotation; random ones stop the
    # head from memorising the directions of the training classes
    q, r = np.linalg.qr(rng.standard_normal((graph.node_features.shape[1],) * 2))
    q *= np.sign(np.diag(r))
    return replace(graph, node_features=graph.node_features @ q)


def pretrain(config: TrainConfig, d_train: EmbeddingSet, dims: NetDims | None = None) -> TrainResult:
    """Train encoder and head on closed-set data."""
    dims = dims or NetDims(input_dim=d_train.dim)
    params = init_params(dims, config.seed)
    return _train(params, config, d_train, list(params.tensors))


def finetune(params: ModelParams, config: TrainConfig, d_cal: EmbeddingSet) -> TrainResult:
    """Reset the MLP head from ``config.seed`` and fit it alone; the encoder is frozen."""
    fresh = reset_mlp(params, config.seed)
    return _train(fresh, config, d_cal, fresh.mlp_names)


# -- connectivity models ------------------------------------------------------

@dataclass
class CalibratorModel:
    params: ModelParams
    tau: float
    grid: ThresholdGrid = field(default_factory=ThresholdGrid)
    provenance: dict = field(default_factory=dict)
    cv_table: "TauCvTable | None" = None
    uses_labels = False

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise InvalidArgument("tau must lie strictly between 0 and 1")

    def pair_probabilities(self, graph: EmbGraph) -> np.ndarray:
        return forward(self.params, graph).condensed()


@dataclass
class OracleModel:
    """Connectivity read off the labels: ``hi`` for same-label pairs, ``lo`` otherwise."""
    tau: float = 0.5
    grid: ThresholdGrid = field(default_factory=ThresholdGrid)
    lo: float = 0.0
    hi: float = 1.0
    uses_labels = True

    def pair_probabilities(self, graph: EmbGraph) -> np.ndarray:
        if graph.labels is None:
            raise InvalidArgument("the oracle model needs labels")
        i, j = np.triu_indices(graph.n, k=1)
        return np.where(graph.labels[i] == graph.labels[j], self.hi, self.lo)


def _as_model(model, tau=0.5, grid=None):
    if isinstance(model, ModelParams):
        return CalibratorModel(model, tau, grid or ThresholdGrid())
    return model


def _graph_pairs(model, graph: EmbGraph) -> tuple[np.ndarray, np.ndarray]:
    return kernels.pairwise_distances(graph.node_features), model.pair_probabilities(graph)


# -- tau selection -----------------------------------------------------------------

def _class_folds(labels: np.ndarray, folds: int, rng) -> list[np.ndarray]:
    classes = np.unique(labels)
    k = min(folds, classes.size // 2)
    if k < 2:
        raise CalibrationFailure("cross-validation needs at least four calibration classes")
    if k < folds:
        log.warning("reducing tau cross-validation from %d to %d class folds", folds, k)
    return np.array_split(rng.permutation(classes), k)


@dataclass
class TauCvTable:
    """Held-out pair counts per class fold and tau, split by true pair label.

    ``counts[f, t, c]`` holds ``(pos_below, neg_above)`` over the grid for the
    pairs of true class ``c`` (0 = same label, 1 = different) in fold ``f``
    thresholded at ``taus[t]``; ``totals[f, t, c]`` holds the matching
    predicted-positive and predicted-negative counts. Keeping the two true
    classes apart lets the errors be recomputed for any positive-pair share.

    ``em_share[f]`` is what :func:`estimate_positive_share` reports on fold
    ``f``. Reweighting by the ratio of estimated odds on fold and test
    cancels the estimator's bias, which is large when the head is overfit.
    """
    taus: np.ndarray
    counts: np.ndarray
    totals: np.ndarray
    truth: np.ndarray
    share: np.ndarray
    grid: ThresholdGrid = field(default_factory=ThresholdGrid)
    em_share: np.ndarray | None = None

    def errors(self, prior: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Summed ``mae_comb`` per tau, reweighting pairs to positive share ``prior``."""
        errs = np.zeros(self.taus.size)
        valid = np.ones(self.taus.size, dtype=bool)
        for f in range(self.counts.shape[0]):
            w = 1.0
            if prior is not None:
                ref = self.share[f] if self.em_share is None else self.em_share[f]
                w = ref / (1 - ref) * (1 - prior) / prior
            truth = PerfCurve(self.grid, self.truth[f, 0], self.truth[f, 1])
            for t in range(self.taus.size):
                if not valid[t]:
                    continue
                (pb_s, na_s), (pb_d, na_d) = self.counts[f, t]
                (np_s, nn_s), (np_d, nn_d) = self.totals[f, t]
                n_pos, n_neg = np_s + w * np_d, nn_s + w * nn_d
                if n_pos <= 0 or n_neg <= 0:
                    valid[t] = False
                    continue
                est = PerfCurve(self.grid, (pb_s + w * pb_d) / n_pos, (na_s + w * na_d) / n_neg)
                errs[t] += mae_comb(est, truth)
        return errs, valid

    def select(self, prior: float | None = None) -> float:
        errs, valid = self.errors(prior)
        return _argmin_tau(self.taus, errs, valid)

    def to_json(self) -> dict:
        def pack(a, dtype):
            return base64.b64encode(zlib.compress(np.ascontiguousarray(a, dtype=dtype).tobytes(), 9)).decode()
        return {"taus": self.taus.tolist(), "shape": list(self.counts.shape),
                "counts": pack(self.counts, "<i8"), "totals": pack(self.totals, "<i8"),
                "truth": pack(self.truth, "<f8"), "share": self.share.tolist(),
                "em_share": None if self.em_share is None else self.em_share.tolist(),
                "grid": [self.grid.lo, self.grid.hi, self.grid.step]}

    @classmethod
    def from_json(cls, blob: dict) -> "TauCvTable":
        def unpack(key, dtype, shape):
            return np.frombuffer(zlib.decompress(base64.b64decode(blob[key])), dtype=dtype).reshape(shape)
        try:
            f, t, c, k, g = blob["shape"]
            return cls(np.asarray(blob["taus"], dtype=np.float64),
                       unpack("counts", "<i8", (f, t, c, k, g)).astype(np.float64),
                       unpack("totals", "<i8", (f, t, c, k)).astype(np.float64),
                       unpack("truth", "<f8", (f, 2, g)).copy(),
                       np.asarray(blob["share"], dtype=np.float64), ThresholdGrid(*blob["grid"]),
                       None if blob.get("em_share") is None else np.asarray(blob["em_share"], dtype=np.float64))
        except (KeyError, ValueError, TypeError, zlib.error) as exc:
            raise InvalidArgument(f"corrupt tau cross-validation table: {exc}") from exc


def tau_cv_table(model, d_cal: EmbeddingSet, folds: int = 10, tau_grid=DEFAULT_TAU_GRID,
                 grid: ThresholdGrid | None = None, batch_size: int = 64,
                 n_subgraphs: int = 20, seed=0) -> TauCvTable:
    """Score each held-out class fold with the test-time subgraph protocol."""
    if folds < 2:
        raise InvalidArgument("folds must be >= 2")
    if d_cal.labels is None:
        raise InvalidArgument("d_cal must be labeled")
    grid = grid or ThresholdGrid()
    model = _as_model(model, grid=grid)
    taus = np.asarray(tau_grid, dtype=np.float64)
    rng = _as_rng(seed)
    counts, totals, truths, shares, em = [], [], [], [], []
    for fold_classes in _class_folds(d_cal.labels, folds, rng):
        fold = d_cal.subset(np.flatnonzero(np.isin(d_cal.labels, fold_classes)))
        try:
            truth = exact_curves(fold, grid)
        except DegenerateInput:
            continue
        dist, prob, same = [], [], []
        for g in _sample_graphs(fold, batch_size, n_subgraphs, rng):
            d, p = _graph_pairs(model, g)
            i, j = np.triu_indices(g.n, k=1)
            dist.append(d)
            prob.append(p)
            same.append(g.labels[i] == g.labels[j])
        dist, prob, same = np.concatenate(dist), np.concatenate(prob), np.concatenate(same)
        c = np.zeros((taus.size, 2, 2, grid.size), dtype=np.int64)
        n = np.zeros((taus.size, 2, 2), dtype=np.int64)
        for t, tau in enumerate(taus):
            for k, mask in enumerate((same, ~same)):
                pb, na, npos, nneg = kernels.threshold_counts(dist[mask], prob[mask] > tau, grid.points)
                c[t, k] = pb, na
                n[t, k] = npos, nneg
        counts.append(c)
        totals.append(n)
        truths.append(np.stack([truth.tpr, truth.tnr]))
        shares.append(same.mean())
        em.append(estimate_positive_share(prob))
    if not counts:
        raise CalibrationFailure("no calibration fold has both positive and negative pairs")
    return TauCvTable(taus, np.array(counts, dtype=np.float64), np.array(totals, dtype=np.float64),
                      np.array(truths), np.array(shares), grid, np.array(em))


def tau_cv_errors(model, d_cal: EmbeddingSet, folds: int = 10, tau_grid=DEFAULT_TAU_GRID,
                  grid: ThresholdGrid | None = None, batch_size: int = 64,
                  n_subgraphs: int = 20, seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Summed held-out ``mae_comb`` per tau and a mask of non-degenerate taus."""
    table = tau_cv_table(model, d_cal, folds, tau_grid, grid, batch_size, n_subgraphs, seed)
    errors, valid = table.errors()
    return table.taus, errors, valid


def _argmin_tau(taus, errors, valid) -> float:
    if not valid.any():
        raise CalibrationFailure("every tau produced a degenerate estimate on some fold")
    best = errors[valid].min()
    cands = taus[valid][np.abs(errors[valid] - best) <= 1e-12 * max(1.0, best)]
    return float(cands[np.lexsort((cands, np.abs(cands - 0.5)))[0]])


def select_tau(model, d_cal: EmbeddingSet, folds: int = 10, tau_grid=DEFAULT_TAU_GRID,
               grid: ThresholdGrid | None = None, batch_size: int = 64,
               n_subgraphs: int = 20, seed=0) -> float:
    """Pick tau by class-fold cross-validation of ``mae_comb`` on ``d_cal``.

    Each held-out fold is scored with the same subgraph protocol used at test
    time. A tau that leaves any fold without predicted positives or negatives
    is excluded; ties go to the tau closest to 0.5.
    """
    taus, errors, valid = tau_cv_errors(model, d_cal, folds, tau_grid, grid, batch_size,
                                        n_subgraphs, seed)
    return _argmin_tau(taus, errors, valid)


def estimate_positive_share(prob: np.ndarray, iters: int = 200, tol: float = 1e-9) -> float:
    """EM estimate of the same-label share among pairs from prior-free probabilities.

    The head is trained with a class-balanced loss, so ``p`` behaves like a
    posterior under a 50/50 prior; the fixed point of
    ``pi = mean(pi*p / (pi*p + (1-pi)*(1-p)))`` adjusts it to the data.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-6, 1 - 1e-6)
    if p.size == 0:
        raise InvalidArgument("no pair probabilities")
    pi = 0.5
    for _ in range(iters):
        post = pi * p / (pi * p + (1 - pi) * (1 - p))
        nxt = float(post.mean())
        if abs(nxt - pi) < tol:
            return float(np.clip(nxt, 1e-6, 1 - 1e-6))
        pi = nxt
    return float(np.clip(pi, 1e-6, 1 - 1e-6))


def _sample_graphs(emb: EmbeddingSet, batch_size: int, n: int, rng) -> list[EmbGraph]:
    if len(emb) <= batch_size:
        return [build_full_graph(emb)]
    return [build_full_graph(emb, _uniform_batch(len(emb), batch_size, rng)) for _ in range(n)]


# -- transductive estimation -------------------------------------------------------

@dataclass
class TtcReport:
    estimated: PerfCurve
    convergence_trace: list[float]
    converged: bool
    true: PerfCurve | None = None
    d_opt: dict[str, float] = field(default_factory=dict)
    mae_comb: float | None = None
    ae: dict[str, float] = field(default_factory=dict)
    tau: float | None = None
    positive_share: float | None = None

    @property
    def rounds(self) -> int:
        return len(self.convergence_trace)

    @property
    def truncated(self) -> bool:
        return not self.converged


def transductive_estimate(model, d_test: EmbeddingSet, batch_size: int = 64,
                          max_rounds: int = 100, stop_tol: float = 1e-3,
                          n_subgraphs: int = 20, seed=0) -> TtcReport:
    """Pool thresholded connectivity counts over rounds of random subgraphs.

    The change recorded for round 1 is measured against an all-zero curve, so
    a finite tolerance never stops after one round by accident. Rounds whose
    pooled counts are still degenerate record an infinite change.
    """
    if len(d_test) == 0:
        raise InvalidArgument("d_test is empty")
    if batch_size < 2 or batch_size > len(d_test):
        raise InvalidArgument(f"batch_size must lie in [2, {len(d_test)}]")
    if max_rounds < 1 or n_subgraphs < 1:
        raise InvalidArgument("max_rounds and n_subgraphs must be >= 1")
    grid = model.grid
    pts = grid.points
    rng = _as_rng(seed)
    pos_below = np.zeros(grid.size, dtype=np.int64)
    neg_above = np.zeros(grid.size, dtype=np.int64)
    n_pos = n_neg = 0
    prev_tpr = np.zeros(grid.size)
    prev_tnr = np.zeros(grid.size)
    trace: list[float] = []
    converged = False
    for _ in range(max_rounds):
        for _ in range(n_subgraphs):
            graph = build_full_graph(d_test, _uniform_batch(len(d_test), batch_size, rng))
            dist, prob = _graph_pairs(model, graph)
            pb, na, npos, nneg = kernels.threshold_counts(dist, prob > model.tau, pts)
            pos_below += pb
            neg_above += na
            n_pos += int(npos)
            n_neg += int(nneg)
        if n_pos == 0 or n_neg == 0:
            trace.append(float("inf"))
            continue
        tpr, tnr = pos_below / n_pos, neg_above / n_neg
        change = float(max(np.abs(tpr - prev_tpr).max(), np.abs(tnr - prev_tnr).max()))
        trace.append(change)
        prev_tpr, prev_tnr = tpr, tnr
        if change < stop_tol:
            converged = True
            break
    if n_pos == 0 or n_neg == 0:
        side = "positive" if n_pos == 0 else "negative"
        raise CalibrationFailure(f"no predicted {side} pairs after {len(trace)} rounds")
    return TtcReport(PerfCurve(grid, prev_tpr, prev_tnr), trace, converged)


def _prior_matched(model, d_test: EmbeddingSet, batch_size: int, n_subgraphs: int, seed,
                   odds_cap: float = 10.0):
    table = getattr(model, "cv_table", None)
    if table is None:
        return model, None
    rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), 0x7A0]))
    probs = [model.pair_probabilities(build_full_graph(d_test, _uniform_batch(len(d_test), batch_size, rng)))
             for _ in range(n_subgraphs)]
    share = estimate_positive_share(np.concatenate(probs))
    # under domain shift the head predicts almost no connections and the
    # estimate collapses towards 0; keep the odds within a factor of the folds'
    ref = float(np.mean(table.share if table.em_share is None else table.em_share))
    odds = np.clip(share / (1 - share), ref / (1 - ref) / odds_cap, ref / (1 - ref) * odds_cap)
    try:
        tau = table.select(float(odds / (1 + odds)))
    except CalibrationFailure:
        log.warning("prior-matched tau selection failed; keeping tau=%g", model.tau)
        return model, share
    return replace(model, tau=tau), share


def _seed_int(seed) -> int:
    return seed if isinstance(seed, (int, np.integer)) else 0


def calibrate(model, d_test: EmbeddingSet, targets: Sequence[CalibrationTarget],
              match_prior: bool = True, prior_odds_cap: float = 10.0, **estimate_kw) -> TtcReport:
    """Estimate curves on ``d_test`` and solve each target on them.

    When the model carries a cross-validation table and ``match_prior`` is
    set, tau is reselected after weighting the calibration folds to the
    same-label pair share estimated on ``d_test``. The estimated odds are
    kept within ``prior_odds_cap`` of the calibration folds' odds.

    Labels are hidden from the model unless it is an oracle; when ``d_test``
    is labeled the report also carries the true curve and the errors.
    """
    visible = d_test if getattr(model, "uses_labels", False) or d_test.labels is None else d_test.unlabeled()
    share = None
    if match_prior:
        batch = min(estimate_kw.get("batch_size", 64), len(visible))
        if prior_odds_cap < 1:
            raise InvalidArgument("prior_odds_cap must be >= 1")
        model, share = _prior_matched(model, visible, batch, estimate_kw.get("n_subgraphs", 20),
                                      estimate_kw.get("seed", 0), prior_odds_cap)
    report = transductive_estimate(model, visible, **estimate_kw)
    report.tau, report.positive_share = model.tau, share
    for t in targets:
        report.d_opt[t.tag] = solve_threshold(report.estimated, t)
    if d_test.labels is not None:
        report.true = exact_curves(d_test, model.grid)
        report.mae_comb = mae_comb(report.estimated, report.true)
        for t in targets:
            report.ae[t.tag] = pointwise_ae(report.true, report.d_opt[t.tag], t)
    return report


def train_calibrator(d_train: EmbeddingSet, d_cal: EmbeddingSet, pre_cfg: TrainConfig,
                     fine_cfg: TrainConfig | None, dims: NetDims | None = None,
                     cv_folds: int = 10, cv_seed=0, inference_batch: int = 64,
                     grid: ThresholdGrid | None = None) -> CalibratorModel:
    """Full two-stage pipeline; ``fine_cfg=None`` skips the finetune stage."""
    grid = grid or ThresholdGrid()
    pre = pretrain(pre_cfg, d_train, dims)
    params = pre.params
    prov = {"pretrain": pre_cfg.as_dict()}
    if fine_cfg is not None:
        params = finetune(params, replace(fine_cfg, stage="finetune"), d_cal).params
        prov["finetune"] = replace(fine_cfg, stage="finetune").as_dict()
    model = CalibratorModel(params, 0.5, grid, prov)
    table = tau_cv_table(model, d_cal, cv_folds, grid=grid, batch_size=inference_batch, seed=cv_seed)
    return replace(model, tau=table.select(), cv_table=table)


def save_calibrator(path, model: CalibratorModel) -> None:
    """Write a model file; the tau cross-validation table rides in the provenance blob."""
    prov = dict(model.provenance)
    if model.cv_table is not None:
        prov["tau_cv"] = model.cv_table.to_json()
    g = model.grid
    save_model(path, model.params, model.tau, (g.lo, g.hi, g.step), prov)


def load_calibrator(path) -> CalibratorModel:
    params, tau, grid, prov = load_model(path)
    if not 0 < tau < 1:
        raise InvalidArgument(f"{path}: model has no connectivity threshold; finetune it first")
    table = prov.pop("tau_cv", None)
    return CalibratorModel(params, tau, ThresholdGrid(*grid), prov,
                           None if table is None else TauCvTable.from_json(table))

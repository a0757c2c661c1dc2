import numpy as np
import pytest
from dataclasses import dataclass, field, replace

from ttcal.curves import CalibrationTarget, ThresholdGrid, exact_curves, solve_threshold
from ttcal.errors import CalibrationFailure, InvalidArgument
from ttcal.graph import build_full_graph
from ttcal.net import NetDims, forward, init_params
from ttcal.synth import EmbeddingSet, ScenarioConfig, generate_scenario, sample_vmf
from ttcal.ttc import (CalibratorModel, OracleModel, TauCvTable, TrainConfig, calibrate,
                       estimate_positive_share, finetune, load_calibrator, pretrain,
                       save_calibrator, select_tau, tau_cv_table, transductive_estimate)

TARGETS = [CalibrationTarget("TPR", 0.8), CalibrationTarget("TPR", 0.9),
           CalibrationTarget("TNR", 0.8), CalibrationTarget("TNR", 0.9)]


@pytest.fixture(scope="module")
def small_part():
    return generate_scenario(ScenarioConfig(n_train_classes=6, n_cal_classes=8, n_test_classes=6,
                                            samples_per_class=(10, 14), seed=3))


@dataclass
class ScriptedModel:
    """Connectivity from a callable of the round-robin call count; for stop-rule tests."""
    script: object
    tau: float = 0.5
    grid: ThresholdGrid = field(default_factory=ThresholdGrid)
    calls: int = 0
    uses_labels = True

    def pair_probabilities(self, graph):
        self.calls += 1
        i, j = np.triu_indices(graph.n, k=1)
        return self.script(self.calls, graph.labels[i] == graph.labels[j])


class TestSelectTau:
    def test_oracle_ties_to_half(self, small_part):
        assert select_tau(OracleModel(), small_part.cal, folds=2) == 0.5

    def test_smoothed_indicator(self, small_part):
        assert select_tau(OracleModel(lo=0.3, hi=0.7), small_part.cal, folds=3) == 0.5

    def test_folds(self, small_part):
        with pytest.raises(InvalidArgument):
            select_tau(OracleModel(), small_part.cal, folds=1)

    def test_all_degenerate(self, small_part):
        # every prediction is 0.97: each tau below predicts no negatives, each above no positives
        with pytest.raises(CalibrationFailure):
            select_tau(OracleModel(lo=0.97, hi=0.97), small_part.cal, folds=2)

    def test_smoothed_excludes_outside_band(self, small_part):
        table = tau_cv_table(OracleModel(lo=0.3, hi=0.7), small_part.cal, folds=2)
        errs, valid = table.errors()
        inside = (table.taus >= 0.3) & (table.taus < 0.7)
        assert np.array_equal(valid, inside)
        assert np.ptp(errs[inside]) < 1e-12


class TestTauTable:
    def test_json_roundtrip(self, small_part):
        t = tau_cv_table(OracleModel(lo=0.2, hi=0.9), small_part.cal, folds=2, seed=1)
        back = TauCvTable.from_json(t.to_json())
        for name in ("taus", "counts", "totals", "truth", "share", "em_share"):
            np.testing.assert_array_equal(getattr(back, name), getattr(t, name))
        assert back.select(0.1) == t.select(0.1)

    def test_corrupt(self):
        with pytest.raises(InvalidArgument):
            TauCvTable.from_json({"taus": [0.5]})

    def test_reweighting_is_identity_at_reference_share(self, small_part):
        t = tau_cv_table(OracleModel(lo=0.2, hi=0.9), small_part.cal, folds=2, seed=1)
        t = replace(t, em_share=np.full(t.share.size, 0.25))
        np.testing.assert_allclose(t.errors(0.25)[0], replace(t, em_share=None).errors()[0], atol=1e-12)


class TestPositiveShare:
    def test_recovers_prior(self):
        # scores calibrated under a 50/50 prior; the data holds 10% positives
        rng = np.random.default_rng(0)
        y = rng.random(200_000) < 0.1
        z = rng.normal(np.where(y, 1.0, -1.0), 1.0)
        p = 1 / (1 + np.exp(-2 * z))
        assert estimate_positive_share(p) == pytest.approx(0.1, abs=0.01)

    def test_bounds(self):
        assert 0 < estimate_positive_share(np.zeros(10)) < 1e-3
        with pytest.raises(InvalidArgument):
            estimate_positive_share(np.array([]))


class TestTransductive:
    def test_infinite_tol_single_round(self, small_part):
        r = transductive_estimate(OracleModel(), small_part.test, batch_size=16, stop_tol=np.inf)
        assert r.rounds == 1 and r.converged

    def test_full_batch_stops_at_round_two(self, small_part):
        test = small_part.test
        r = transductive_estimate(OracleModel(), test, batch_size=len(test), n_subgraphs=1)
        assert r.rounds == 2 and r.convergence_trace[1] == 0.0
        exact = exact_curves(test)
        assert np.array_equal(r.estimated.tpr, exact.tpr) and np.array_equal(r.estimated.tnr, exact.tnr)

    def test_oracle_close_to_exact(self, small_part):
        r = transductive_estimate(OracleModel(), small_part.test, batch_size=24, seed=0)
        exact = exact_curves(small_part.test)
        assert max(np.abs(r.estimated.tpr - exact.tpr).max(), np.abs(r.estimated.tnr - exact.tnr).max()) < 0.01

    def test_truncation(self, small_part):
        r = transductive_estimate(OracleModel(), small_part.test, batch_size=8, max_rounds=3,
                                  stop_tol=0.0)
        assert r.rounds == 3 and r.truncated

    def test_degenerate_rounds_then_recovery(self, small_part):
        # round 1 predicts nothing connected; its negatives stay pooled afterwards
        m = ScriptedModel(lambda k, same: same.astype(float) * (k > 20))
        r = transductive_estimate(m, small_part.test, batch_size=len(small_part.test), n_subgraphs=20)
        assert r.convergence_trace[0] == np.inf
        assert r.converged and np.all(np.isfinite(r.convergence_trace[1:]))
        assert r.convergence_trace[-1] < 1e-3 <= min(r.convergence_trace[:-1])

    def test_all_degenerate_fails(self, small_part):
        with pytest.raises(CalibrationFailure, match="positive"):
            transductive_estimate(ScriptedModel(lambda k, same: np.zeros(same.size)), small_part.test,
                                  batch_size=8, max_rounds=2)

    def test_round_order_independent(self, small_part):
        # re-pool the very same subgraphs in reverse order: integer sums agree exactly
        from ttcal import kernels
        seen = []

        def record(k, same):
            seen.append(same)
            return same.astype(float)

        graphs = []
        model = ScriptedModel(record)
        orig = model.pair_probabilities
        model.pair_probabilities = lambda g: graphs.append(g) or orig(g)
        r = transductive_estimate(model, small_part.test, batch_size=10, max_rounds=4,
                                  stop_tol=0.0, seed=5)
        pts = model.grid.points
        pb, na, n_pos, n_neg = np.zeros(pts.size), np.zeros(pts.size), 0, 0
        for g, same in zip(graphs[::-1], seen[::-1]):
            a, b, c, d = kernels.threshold_counts(kernels.pairwise_distances(g.node_features), same, pts)
            pb, na, n_pos, n_neg = pb + a, na + b, n_pos + c, n_neg + d
        np.testing.assert_array_equal(r.estimated.tpr, pb / n_pos)
        np.testing.assert_array_equal(r.estimated.tnr, na / n_neg)

    @pytest.mark.parametrize("kw", [{"batch_size": 1}, {"batch_size": 10**6}, {"max_rounds": 0}])
    def test_validation(self, small_part, kw):
        with pytest.raises(InvalidArgument):
            transductive_estimate(OracleModel(), small_part.test, **kw)


class TestCalibrate:
    def test_oracle_d_opt_matches_exact(self, small_part):
        test = small_part.test
        r = calibrate(OracleModel(), test, TARGETS, batch_size=len(test), n_subgraphs=1)
        exact = exact_curves(test)
        for t in TARGETS:
            assert r.d_opt[t.tag] == solve_threshold(exact, t)
            assert r.ae[t.tag] <= np.abs(np.diff(exact.metric(t.metric))).max() + 1e-12
        assert r.mae_comb == 0.0

    def test_targets_monotone(self, small_part):
        r = calibrate(OracleModel(), small_part.test, TARGETS, batch_size=16)
        d = r.d_opt
        assert d["tpr80"] <= d["tpr90"] and d["tnr80"] >= d["tnr90"]

    def test_unlabeled_has_no_errors(self, small_part):
        r = calibrate(OracleModel(), small_part.test, TARGETS[:1], batch_size=16)
        assert r.true is not None
        p = init_params(NetDims(input_dim=small_part.test.dim, hidden=8, mlp_hidden=16), 0)
        r = calibrate(CalibratorModel(p, 0.5), small_part.test.unlabeled(), [], batch_size=16,
                      max_rounds=2)
        assert r.true is None and r.mae_comb is None


def _separable(seed=0, n=40, dim=8):
    a = sample_vmf(np.eye(dim)[0], 100.0, n, seed)
    b = sample_vmf(np.eye(dim)[1], 100.0, n, seed + 1)
    return EmbeddingSet(np.vstack([a, b]), np.r_[np.zeros(n, int), np.ones(n, int)])


class TestTraining:
    DIMS = NetDims(input_dim=8, hidden=8, heads=1, layers=1, mlp_hidden=16)

    def test_separable_sanity(self):
        data = _separable()
        # rotation augmentation slows convergence a lot on a two-class toy set
        res = pretrain(TrainConfig(steps=1200, batch_size=32, rotate=False), data, NetDims(input_dim=8))
        g = build_full_graph(data)
        p = forward(res.params, g).condensed()
        i, j = np.triu_indices(g.n, 1)
        same = g.labels[i] == g.labels[j]
        assert p[same].mean() > 0.9 and p[~same].mean() < 0.1

    def test_deterministic(self):
        cfg = TrainConfig(steps=20, batch_size=16, seed=4)
        a, b = pretrain(cfg, _separable(), self.DIMS), pretrain(cfg, _separable(), self.DIMS)
        assert a.losses == b.losses

    def test_freeze_contract(self):
        pre = pretrain(TrainConfig(steps=10, batch_size=16), _separable(), self.DIMS).params
        ft = finetune(pre, TrainConfig(steps=10, batch_size=16, seed=2, stage="finetune"),
                      _separable(seed=7)).params
        for k in pre.encoder_names:
            assert np.array_equal(ft.tensors[k], pre.tensors[k])
        assert any(not np.array_equal(ft.tensors[k], pre.tensors[k]) for k in pre.mlp_names)

    def test_config_validation(self):
        for kw in ({"steps": 0}, {"lr_min": 0.0}, {"lam": -1.0}, {"stage": "x"},
                   {"density_terms": ("bogus",)}):
            with pytest.raises(InvalidArgument):
                TrainConfig(**kw)

    def test_needs_two_classes(self):
        e = _separable()
        with pytest.raises(InvalidArgument):
            pretrain(TrainConfig(steps=1), EmbeddingSet(e.vectors, np.zeros(len(e), int)), self.DIMS)


class TestPersistence:
    def test_roundtrip_with_table(self, tmp_path, small_part):
        p = init_params(NetDims(input_dim=small_part.cal.dim, hidden=8, mlp_hidden=16), 0)
        table = tau_cv_table(OracleModel(lo=0.2, hi=0.9), small_part.cal, folds=2)
        m = CalibratorModel(p, 0.35, provenance={"seed": 1}, cv_table=table)
        save_calibrator(tmp_path / "m.ttcm", m)
        back = load_calibrator(tmp_path / "m.ttcm")
        assert back.tau == 0.35 and back.provenance == {"seed": 1}
        np.testing.assert_array_equal(back.cv_table.counts, table.counts)

    def test_untrained_threshold_rejected(self, tmp_path):
        from ttcal.net import save_model
        save_model(tmp_path / "m.ttcm", init_params(NetDims(input_dim=4), 0), float("nan"))
        with pytest.raises(InvalidArgument, match="finetune"):
            load_calibrator(tmp_path / "m.ttcm")

    def test_tau_invariant(self):
        with pytest.raises(InvalidArgument):
            CalibratorModel(init_params(NetDims(input_dim=4), 0), 1.0)

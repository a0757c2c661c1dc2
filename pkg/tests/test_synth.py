import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttcal.errors import InvalidArgument
from ttcal.synth import (ClassSpec, EmbeddingSet, PerturbationSpec, ScenarioConfig,
                         generate_scenario, perturb_embeddings, sample_vmf)


def _e(dim, k=0):
    v = np.zeros(dim)
    v[k] = 1.0
    return v


def _within_class_cosine(emb):
    out = []
    for c in np.unique(emb.labels):
        x = emb.vectors[emb.labels == c]
        g = x @ x.T
        n = len(x)
        out.append((g.sum() - n) / (n * (n - 1)))
    return float(np.mean(out))


def _check_partition(part):
    ids = [set(np.unique(s.labels).tolist()) for s in (part.train, part.cal, part.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    for s in (part.train, part.cal, part.test):
        np.testing.assert_allclose(np.linalg.norm(s.vectors, axis=1), 1.0, atol=1e-6)


class TestSampleVmf:
    def test_uniform_at_zero_kappa(self):
        x = sample_vmf(_e(8), 0.0, 10000, seed=1)
        assert np.linalg.norm(x.mean(axis=0)) < 0.05

    def test_concentrated_limit(self):
        x = sample_vmf(_e(8), 1e6, 100, seed=1)
        assert np.all(x @ _e(8) > 0.999)

    def test_determinism(self):
        a = sample_vmf(_e(16), 50.0, 5000, seed=3)
        b = sample_vmf(_e(16), 50.0, 5000, seed=3)
        c = sample_vmf(_e(16), 50.0, 5000, seed=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unit_rows(self):
        x = sample_vmf(_e(5, 2), 3.0, 200, seed=0)
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)

    def test_mean_cosine_matches_bessel_ratio(self):
        # E[mu.x] = I_{d/2}(k) / I_{d/2-1}(k) for vMF on S^{d-1}
        from scipy.special import ive
        d, k = 16, 30.0
        x = sample_vmf(_e(d), k, 20000, seed=5)
        expected = ive(d / 2, k) / ive(d / 2 - 1, k)
        assert abs((x @ _e(d)).mean() - expected) < 0.005

    def test_tangent_part_is_isotropic(self):
        x = sample_vmf(_e(6), 20.0, 20000, seed=2)
        tangent = x[:, 1:]
        assert np.abs(tangent.mean(axis=0)).max() < 0.01

    @pytest.mark.parametrize("mu,kappa", [(np.array([1.0, 1.0]), 1.0), (np.array([1.0, 0.0]), np.inf),
                                          (np.array([1.0, 0.0]), np.nan)])
    def test_rejects_bad_input(self, mu, kappa):
        with pytest.raises(InvalidArgument):
            sample_vmf(mu, kappa, 3, seed=0)

    def test_kappa_monotone_in_cosine(self):
        vals = []
        for k in (1.0, 10.0, 100.0):
            x = sample_vmf(_e(16), k, 1000, seed=0)
            vals.append(float((x @ x.T).mean()))
        assert vals[0] < vals[1] < vals[2]


class TestClassSpec:
    def test_validates(self):
        ClassSpec(_e(3), 0.0, 1)
        with pytest.raises(InvalidArgument):
            ClassSpec(np.array([2.0, 0, 0]), 1.0, 1)
        with pytest.raises(InvalidArgument):
            ClassSpec(_e(3), -1.0, 1)
        with pytest.raises(InvalidArgument):
            ClassSpec(_e(3), 1.0, 0)


class TestEmbeddingSet:
    def test_rejects_non_unit(self):
        with pytest.raises(InvalidArgument):
            EmbeddingSet(np.array([[1.0, 1.0]]), np.array([0]))

    def test_labels_in_class_ids(self):
        with pytest.raises(InvalidArgument):
            EmbeddingSet(np.array([[1.0, 0.0]]), np.array([3]), class_ids=np.array([1, 2]))


class TestGenerateScenario:
    def test_samedist_small(self):
        part = generate_scenario(ScenarioConfig(n_train_classes=10, n_cal_classes=2, n_test_classes=8))
        _check_partition(part)
        assert np.unique(part.train.labels).size == 10
        assert np.unique(part.cal.labels).size == 2
        assert np.unique(part.test.labels).size == 8

    @pytest.mark.parametrize("kind", ["SameDist", "ShiftDist", "DiffDist-longtail", "DiffDist-domain"])
    def test_kinds_valid(self, kind):
        pert = PerturbationSpec("gauss-noise", 0.05) if kind == "ShiftDist" else None
        part = generate_scenario(ScenarioConfig(scenario_kind=kind, perturbation=pert,
                                                n_train_classes=6, n_cal_classes=4, n_test_classes=6))
        _check_partition(part)

    def test_longtail_counts(self):
        part = generate_scenario(ScenarioConfig(scenario_kind="DiffDist-longtail", seed=2))
        per_class = lambda s: len(s) / np.unique(s.labels).size
        assert per_class(part.cal) > per_class(part.test)

    def test_domain_is_less_compact(self):
        same = generate_scenario(ScenarioConfig(seed=1))
        dom = generate_scenario(ScenarioConfig(scenario_kind="DiffDist-domain", seed=1))
        assert _within_class_cosine(dom.test) < _within_class_cosine(same.test)

    def test_shiftdist_zero_perturbation_is_samedist(self):
        base = generate_scenario(ScenarioConfig(seed=7))
        shifted = generate_scenario(ScenarioConfig(seed=7, scenario_kind="ShiftDist",
                                                   perturbation=PerturbationSpec("gauss-noise", 0.0)))
        assert np.array_equal(base.test.vectors, shifted.test.vectors)
        assert np.array_equal(base.cal.vectors, shifted.cal.vectors)

    def test_shiftdist_perturbs_test_only(self):
        base = generate_scenario(ScenarioConfig(seed=7))
        shifted = generate_scenario(ScenarioConfig(seed=7, scenario_kind="ShiftDist",
                                                   perturbation=PerturbationSpec("gauss-noise", 0.2)))
        assert np.array_equal(base.train.vectors, shifted.train.vectors)
        assert not np.array_equal(base.test.vectors, shifted.test.vectors)

    def test_deterministic(self):
        a = generate_scenario(ScenarioConfig(seed=11))
        b = generate_scenario(ScenarioConfig(seed=11))
        for s in ("train", "cal", "test"):
            assert np.array_equal(getattr(a, s).vectors, getattr(b, s).vectors)
            assert np.array_equal(getattr(a, s).labels, getattr(b, s).labels)

    @pytest.mark.parametrize("kw", [dict(dim=0), dict(n_cal_classes=0), dict(n_test_classes=-1),
                                    dict(kappa_open=(200.0, 300.0)), dict(scenario_kind="Other")])
    def test_invalid_config(self, kw):
        with pytest.raises(InvalidArgument):
            ScenarioConfig(**kw)

    def test_open_classes_use_open_kappa(self):
        cfg = ScenarioConfig(kappa_train=(500.0, 500.0), kappa_open=(5.0, 5.0), seed=0)
        part = generate_scenario(cfg)
        assert _within_class_cosine(part.train) > _within_class_cosine(part.test) + 0.3


class TestPerturb:
    @pytest.fixture
    def emb(self):
        part = generate_scenario(ScenarioConfig(n_test_classes=10, samples_per_class=(100, 100), seed=3))
        return part.test

    def test_zero_noise_is_identity(self, emb):
        out = perturb_embeddings(emb, PerturbationSpec("gauss-noise", 0.0), seed=1)
        assert np.array_equal(out.vectors, emb.vectors)

    def test_noise_lowers_within_class_cosine(self, emb):
        out = perturb_embeddings(emb, PerturbationSpec("gauss-noise", 0.5), seed=1)
        assert _within_class_cosine(out) < _within_class_cosine(emb)
        assert np.array_equal(out.labels, emb.labels)

    def test_mean_drift_is_isometry(self, emb):
        out = perturb_embeddings(emb, PerturbationSpec("mean-drift", np.pi), seed=1)
        g0 = emb.vectors @ emb.vectors.T
        g1 = out.vectors @ out.vectors.T
        np.testing.assert_allclose(g1, g0, atol=1e-6)
        assert not np.allclose(out.vectors, emb.vectors)

    def test_concentration_decay(self, emb):
        out = perturb_embeddings(emb, PerturbationSpec("concentration-decay", 0.1), seed=1)
        np.testing.assert_allclose(np.linalg.norm(out.vectors, axis=1), 1.0, atol=1e-6)
        assert _within_class_cosine(out) < _within_class_cosine(emb)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgument):
            PerturbationSpec("blur", 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["SameDist", "DiffDist-domain"]))
def test_partition_invariants_hold_for_any_seed(seed, kind):
    part = generate_scenario(ScenarioConfig(scenario_kind=kind, seed=seed, n_train_classes=4,
                                            n_cal_classes=3, n_test_classes=3,
                                            samples_per_class=(3, 8)))
    _check_partition(part)

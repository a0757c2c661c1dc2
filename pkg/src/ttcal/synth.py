"""Synthetic labeled embeddings on the unit hypersphere.

Classes are von Mises-Fisher clusters. Three partitions with disjoint class
sets (train / cal / test) are produced per scenario:

* ``SameDist``: cal and test classes share one parameter distribution.
* ``ShiftDist``: ``SameDist`` followed by a perturbation of the test set only.
* ``DiffDist-longtail``: test classes get Zipf-distributed sizes, cal
  classes uniformly large sizes.
* ``DiffDist-domain``: test classes are less concentrated and their mean
  directions live in a random low-dimensional subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

SCENARIO_KINDS = ("SameDist", "ShiftDist", "DiffDist-longtail", "DiffDist-domain")
PERTURBATION_KINDS = ("gauss-noise", "concentration-decay", "mean-drift")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ClassSpec:
    mean_direction: np.ndarray
    kappa: float
    count: int

    def __post_init__(self):
        mu = np.asarray(self.mean_direction, dtype=np.float64)
        if not np.all(np.isfinite(mu)) or abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise InvalidArgument("mean_direction must be a unit vector")
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise InvalidArgument(f"kappa must be finite and >= 0, got {self.kappa}")
        if self.count < 1:
            raise InvalidArgument(f"count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise InvalidArgument(f"unknown perturbation kind {self.kind!r}")
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise InvalidArgument("perturbation magnitude must be finite and >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    dim: int = 16
    n_train_classes: int = 24
    n_cal_classes: int = 4
    n_test_classes: int = 36
    kappa_train: tuple[float, float] = (60.0, 120.0)
    kappa_open: tuple[float, float] = (25.0, 60.0)
    samples_per_class: tuple[int, int] = (20, 60)
    scenario_kind: str = "SameDist"
    perturbation: PerturbationSpec | None = None
    seed: int = 0
    longtail_counts: tuple[int, int] = (5, 400)
    zipf_exponent: float = 1.0
    head_counts: tuple[int, int] = (150, 300)
    domain_kappa_scale: float = 0.5
    domain_subspace_dim: int = 4

    def __post_init__(self):
        if self.dim < 2:
            raise InvalidArgument(f"dim must be >= 2, got {self.dim}")
        for name in ("n_train_classes", "n_cal_classes", "n_test_classes"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.scenario_kind not in SCENARIO_KINDS:
            raise InvalidArgument(f"unknown scenario kind {self.scenario_kind!r}")
        for lo_hi, name in ((self.kappa_train, "kappa_train"), (self.kappa_open, "kappa_open")):
            if len(lo_hi) != 2 or lo_hi[0] < 0 or lo_hi[0] > lo_hi[1]:
                raise InvalidArgument(f"{name} must be a range lo <= hi with lo >= 0")
        if self.kappa_open[0] > self.kappa_train[0] or self.kappa_open[1] > self.kappa_train[1]:
            raise InvalidArgument("kappa_open must not exceed kappa_train")
        lo, hi = self.samples_per_class
        if lo < 1 or lo > hi:
            raise InvalidArgument("samples_per_class must be a range 1 <= lo <= hi")
        if not 1 <= self.domain_subspace_dim <= self.dim:
            raise InvalidArgument("domain_subspace_dim must lie in [1, dim]")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray | None = None
    class_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidArgument("vectors must be an n x D matrix")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidArgument("every embedding row must have unit L2 norm")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.vectors.shape[0],):
                raise InvalidArgument("labels must have one entry per row")
            if self.class_ids is None:
                self.class_ids = np.unique(self.labels)
            else:
                self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
                if not np.all(np.isin(self.labels, self.class_ids)):
                    raise InvalidArgument("labels must be drawn from class_ids")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices) -> "EmbeddingSet":
        indices = np.asarray(indices, dtype=np.intp)
        labels = None if self.labels is None else self.labels[indices]
        return EmbeddingSet(self.vectors[indices], labels)

    def unlabeled(self) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors, None)


@dataclass
class Partition:
    train: EmbeddingSet
    cal: EmbeddingSet
    test: EmbeddingSet

    def __post_init__(self):
        sets = [set(p.class_ids.tolist()) for p in (self.train, self.cal, self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise InvalidArgument("train/cal/test class sets must be pairwise disjoint")


def _vmf_cosines(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Wood's rejection sampler for w = mu . x under vMF(kappa) on S^{dim-1}."""
    m = dim - 1
    b = m / (np.sqrt(4.0 * kappa * kappa + m * m) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        size = max(2 * (n - filled), 16)
        z = rng.beta(m / 2.0, m / 2.0, size=size)
        u = rng.uniform(size=size)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        ok = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        take = w[ok][: n - filled]
        out[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def _tangent_directions(mu: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vectors orthogonal to each row of ``mu``."""
    g = rng.standard_normal(mu.shape)
    g -= np.sum(g * mu, axis=1, keepdims=True) * mu
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample_vmf(mean_direction, kappa: float, n: int, seed) -> np.ndarray:
    """Draw ``n`` samples from vMF(mean_direction, kappa).

    Parameters
    ----------
    mean_direction : array_like, shape (D,)
        Unit mean direction.
    kappa : float
        Concentration, ``>= 0``. ``0`` gives the uniform distribution.
    n : int
        Number of samples.
    seed : int or numpy.random.Generator

    Returns
    -------
    ndarray, shape (n, D)
        Unit-norm rows.
    """
    mu = np.asarray(mean_direction, dtype=np.float64)
    if mu.ndim != 1 or mu.shape[0] < 2:
        raise InvalidArgument("mean_direction must be a vector of dimension >= 2")
    if not np.all(np.isfinite(mu)) or abs(np.linalg.norm(mu) - 1.0) > 1e-9:
        raise InvalidArgument("mean_direction must be a unit vector")
    if not np.isfinite(kappa) or kappa < 0:
        raise InvalidArgument(f"kappa must be finite and >= 0, got {kappa}")
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    rng = _as_rng(seed)
    w = _vmf_cosines(float(kappa), mu.shape[0], n, rng)
    mus = np.broadcast_to(mu, (n, mu.shape[0]))
    v = _tangent_directions(mus, rng)
    x = w[:, None] * mus + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    return _normalize_rows(x)


def _random_directions(k: int, dim: int, rng: np.random.Generator, basis=None) -> np.ndarray:
    if basis is None:
        return _normalize_rows(rng.standard_normal((k, dim)))
    coef = rng.standard_normal((k, basis.shape[0]))
    return _normalize_rows(coef @ basis)


def _zipf_counts(k: int, lo: int, hi: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    support = np.arange(lo, hi + 1)
    pmf = support.astype(np.float64) ** (-exponent)
    return rng.choice(support, size=k, p=pmf / pmf.sum())


def _draw_classes(first_id: int, means: np.ndarray, kappas: np.ndarray, counts: np.ndarray,
                  rng: np.random.Generator) -> EmbeddingSet:
    blocks, labels = [], []
    for offset, (mu, kappa, count) in enumerate(zip(means, kappas, counts)):
        spec = ClassSpec(mu, float(kappa), int(count))
        blocks.append(sample_vmf(spec.mean_direction, spec.kappa, spec.count, rng))
        labels.append(np.full(spec.count, first_id + offset, dtype=np.int64))
    class_ids = np.arange(first_id, first_id + len(means), dtype=np.int64)
    return EmbeddingSet(np.vstack(blocks), np.concatenate(labels), class_ids)


def generate_scenario(config: ScenarioConfig) -> Partition:
    """Build a train/cal/test partition for ``config``.

    Each partition draws from its own child of ``SeedSequence(config.seed)``,
    so e.g. ``ShiftDist`` shares its train/cal/test draws with ``SameDist``
    before the test perturbation is applied.
    """
    d = config.dim
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)]
    r_train, r_cal, r_test, r_pert = streams
    lo, hi = config.samples_per_class

    def params(k, kappa_range, rng, basis=None, kappa_scale=1.0):
        means = _random_directions(k, d, rng, basis)
        kappas = rng.uniform(*kappa_range, size=k) * kappa_scale
        counts = rng.integers(lo, hi + 1, size=k)
        return means, kappas, counts

    n_tr, n_cal, n_te = config.n_train_classes, config.n_cal_classes, config.n_test_classes
    means, kappas, counts = params(n_tr, config.kappa_train, r_train)
    train = _draw_classes(0, means, kappas, counts, r_train)

    means, kappas, counts = params(n_cal, config.kappa_open, r_cal)
    if config.scenario_kind == "DiffDist-longtail":
        counts = r_cal.integers(config.head_counts[0], config.head_counts[1] + 1, size=n_cal)
    cal = _draw_classes(n_tr, means, kappas, counts, r_cal)

    kind = config.scenario_kind
    if kind == "DiffDist-domain":
        basis = np.linalg.qr(r_test.standard_normal((d, config.domain_subspace_dim)))[0].T
        means, kappas, counts = params(n_te, config.kappa_open, r_test, basis,
                                       config.domain_kappa_scale)
    else:
        means, kappas, counts = params(n_te, config.kappa_open, r_test)
        if kind == "DiffDist-longtail":
            counts = _zipf_counts(n_te, *config.longtail_counts, config.zipf_exponent, r_test)
    test = _draw_classes(n_tr + n_cal, means, kappas, counts, r_test)

    if kind == "ShiftDist" and config.perturbation is not None:
        test = perturb_embeddings(test, config.perturbation, r_pert)
    return Partition(train, cal, test)


def _plane_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    u, v = np.linalg.qr(rng.standard_normal((dim, 2)))[0].T
    return (np.eye(dim)
            + np.sin(angle) * (np.outer(v, u) - np.outer(u, v))
            + (np.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(v, v)))


def perturb_embeddings(emb: EmbeddingSet, spec: PerturbationSpec, seed) -> EmbeddingSet:
    """Embedding-space corruption of a set; labels are carried over."""
    if spec.kind not in PERTURBATION_KINDS:
        raise InvalidArgument(f"unknown perturbation kind {spec.kind!r}")
    if spec.magnitude < 0:
        raise InvalidArgument("perturbation magnitude must be >= 0")
    x = emb.vectors
    if spec.magnitude == 0:
        return EmbeddingSet(x.copy(), None if emb.labels is None else emb.labels.copy(),
                            emb.class_ids)
    rng = _as_rng(seed)
    if spec.kind == "gauss-noise":
        out = _normalize_rows(x + spec.magnitude * rng.standard_normal(x.shape))
    elif spec.kind == "concentration-decay":
        w = _vmf_cosines(1.0 / spec.magnitude, x.shape[1], x.shape[0], rng)
        v = _tangent_directions(x, rng)
        out = _normalize_rows(w[:, None] * x + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v)
    else:
        out = _normalize_rows(x @ _plane_rotation(x.shape[1], spec.magnitude, rng).T)
    return EmbeddingSet(out, emb.labels, emb.class_ids)

"""Synthetic crowdsourced classification data on a Voronoi grid.

The generator follows the simulation protocol of the SDME method: a
spatially smooth latent proportion driven by one covariate, annotators in
four skill groups, noisy point classifications and a three-way split into
training (truth known), testing (classified only) and unsampled sites.

Randomness is split into independent substreams keyed by ``(seed, tag)`` and,
for classifications, ``(seed, tag, image_id)``, so results do not depend on
evaluation order.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, special

from .domain import MISSING, ClassificationSet, beta_from_mean_precision
from .io import SiteTable
from .spatial import SpatialGraph, build_voronoi_adjacency, connected_components, regular_grid, BoundingBox

log = logging.getLogger(__name__)

__all__ = [
    "SimulationConfig",
    "SimulatedDataset",
    "SupplementaryData",
    "simulate_dataset",
    "simulate_latent_field",
    "simulate_subjects",
    "simulate_classifications",
    "partition_sites",
    "overestimation_threshold",
    "simulate_supplementary",
]

TAG_FIELD, TAG_SUBJECTS, TAG_PARTITION, TAG_IMAGE, TAG_ASSIGN = 1, 2, 3, 4, 5


class SimulationError(ValueError):
    pass


@dataclass
class SimulationConfig:
    grid_k: int = 15
    sampled_fraction: float = 0.80
    training_fraction: float = 67 / 180
    n_subjects: int = 20
    se_means: list[float] = field(default_factory=lambda: [0.99, 0.95, 0.90, 0.80])
    sp_means: list[float] = field(default_factory=lambda: [0.99, 0.90, 0.80, 0.70])
    phi_se: float = 50.0
    phi_sp: float = 50.0
    b0: float = 1.0
    b1: float = -2.0
    phi: float = 30.0
    sigma_x: float = 1.0
    car_rho: float = 0.99
    car_tau: float = 1.0
    min_classifiers: int = 5
    max_classifiers: int = 20
    points_per_image: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.grid_k < 1:
            raise SimulationError("grid_k must be positive")
        if not 0 < self.sampled_fraction <= 1:
            raise SimulationError("sampled_fraction must lie in (0, 1]")
        if not 0 <= self.training_fraction <= 1:
            raise SimulationError("training_fraction must lie in [0, 1]")
        if len(self.se_means) != len(self.sp_means):
            raise SimulationError("se_means and sp_means need one entry per group")
        for v in list(self.se_means) + list(self.sp_means):
            if not 0 < v < 1:
                raise SimulationError("group means must lie in (0, 1)")
        for name in ("phi_se", "phi_sp", "phi", "sigma_x", "car_tau"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be positive")
        if not 0 <= self.car_rho < 1:
            raise SimulationError("car_rho must lie in [0, 1)")
        if self.n_subjects % len(self.se_means):
            raise SimulationError(f"{self.n_subjects} subjects cannot be split into {len(self.se_means)} equal groups")
        if not 1 <= self.min_classifiers <= self.max_classifiers:
            raise SimulationError("need 1 <= min_classifiers <= max_classifiers")
        if self.points_per_image < 1:
            raise SimulationError("points_per_image must be positive")

    @property
    def n_groups(self) -> int:
        return len(self.se_means)

    def partition_counts(self) -> tuple[int, int, int]:
        """(training, testing, unsampled) site counts."""
        m = self.grid_k**2
        n_sampled = int(round(self.sampled_fraction * m))
        n_train = int(round(self.training_fraction * n_sampled))
        return n_train, n_sampled - n_train, m - n_sampled

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SimulationError(f"unknown simulation config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SimulationConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class SimulatedDataset:
    config: SimulationConfig
    sites: SiteTable
    graph: SpatialGraph
    classifications: ClassificationSet
    y: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    subject_id: np.ndarray
    se: np.ndarray
    sp: np.ndarray
    group: np.ndarray

    def truth(self) -> dict:
        """Ground truth keyed for scoring and ``truth.json``."""
        sid = self.sites.site_id.tolist()
        return {
            "b": [self.config.b0, self.config.b1],
            "phi": self.config.phi,
            "y": dict(zip(map(str, sid), self.y.tolist())),
            "u": dict(zip(map(str, sid), self.u.tolist())),
            "mu": dict(zip(map(str, sid), self.mu.tolist())),
            "subjects": {
                str(s): {"se": float(a), "sp": float(b), "group": int(g) + 1}
                for s, a, b, g in zip(self.subject_id, self.se, self.sp, self.group)
            },
        }

    def realized_coverage(self) -> np.ndarray:
        """Share of sampled images each subject classified."""
        sampled = self.sites.site_id[self.sites.partition != "unsampled"]
        cs = self.classifications
        pairs = np.unique(np.stack([cs.subject, cs.image], 1), axis=0)
        counts = np.array([np.sum(pairs[:, 0] == s) for s in self.subject_id])
        return counts / max(len(sampled), 1)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def simulate_latent_field(config: SimulationConfig, graph: SpatialGraph, rng: np.random.Generator | None = None):
    """Covariate, spatial effect, mean and latent proportion per site.

    ``u`` is drawn from a proper CAR with precision ``tau (D - rho W)`` and
    centred; ``logit(mu) = b0 + b1 x + u`` and ``y ~ Beta(mu phi, (1 - mu) phi)``.
    """
    rng = _rng(config.seed, TAG_FIELD) if rng is None else rng
    m = graph.n_sites
    if len(connected_components(graph)) > 1:
        warnings.warn("adjacency graph is not connected", stacklevel=2)
    x = rng.normal(0.0, config.sigma_x, size=m)
    W = graph.adjacency_matrix()
    Q = config.car_tau * (np.diag(W.sum(axis=1)) - config.car_rho * W)
    # isolated sites have no neighbours; give them unit precision
    iso = W.sum(axis=1) == 0
    Q[iso, iso] = config.car_tau
    L = linalg.cholesky(Q, lower=True)
    u = linalg.solve_triangular(L.T, rng.standard_normal(m), lower=False)
    u -= u.mean()
    mu = special.expit(config.b0 + config.b1 * x + u)
    clipped = np.clip(mu, 1e-12, 1 - 1e-12)
    if np.any(clipped != mu):
        warnings.warn("regression mean hit 0 or 1; clamped", stacklevel=2)
    mu = clipped
    y = rng.beta(mu * config.phi, (1.0 - mu) * config.phi)
    return x, u, mu, y


def simulate_subjects(config: SimulationConfig, rng: np.random.Generator | None = None):
    """Per-subject ``(se, sp, group)`` with groups of equal size (0-based)."""
    rng = _rng(config.seed, TAG_SUBJECTS) if rng is None else rng
    per = config.n_subjects // config.n_groups
    group = np.repeat(np.arange(config.n_groups), per)
    se = np.empty(config.n_subjects)
    sp = np.empty(config.n_subjects)
    for i, g in enumerate(group):
        se[i] = rng.beta(*beta_from_mean_precision(config.se_means[g], config.phi_se))
        sp[i] = rng.beta(*beta_from_mean_precision(config.sp_means[g], config.phi_sp))
    return se, sp, group


def partition_sites(config: SimulationConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random labels ``training`` / ``testing`` / ``unsampled`` over the grid sites."""
    rng = _rng(config.seed, TAG_PARTITION) if rng is None else rng
    n_train, n_test, n_uns = config.partition_counts()
    labels = np.array(["training"] * n_train + ["testing"] * n_test + ["unsampled"] * n_uns, dtype=object)
    return labels[rng.permutation(len(labels))]


def simulate_classifications(
    config: SimulationConfig,
    site_id: np.ndarray,
    partition: np.ndarray,
    y: np.ndarray,
    se: np.ndarray,
    sp: np.ndarray,
    subject_id: np.ndarray | None = None,
) -> ClassificationSet:
    """Point classifications for every sampled image.

    Each image gets a number of classifiers drawn uniformly from
    ``min_classifiers..max_classifiers`` (capped at the number of subjects);
    each classifier sees ``points_per_image`` points whose true states are iid
    Bernoulli(y). Expert labels are recorded for training images only.
    """
    n_sub = len(se)
    subject_id = np.arange(1, n_sub + 1) if subject_id is None else np.asarray(subject_id)
    if n_sub < config.min_classifiers:
        raise SimulationError(
            f"each image needs at least {config.min_classifiers} classifiers but only {n_sub} subjects exist"
        )
    hi = min(config.max_classifiers, n_sub)
    q = config.points_per_image
    cols: list[list[np.ndarray]] = [[], [], [], [], []]
    for j in np.flatnonzero(partition != "unsampled"):
        rng = _rng(config.seed, TAG_IMAGE, site_id[j])
        n_cls = int(rng.integers(config.min_classifiers, hi + 1))
        who = np.sort(rng.choice(n_sub, size=n_cls, replace=False))
        state = (rng.random((n_cls, q)) < y[j]).astype(np.int64)
        draw = rng.random((n_cls, q))
        pos = np.where(state == 1, draw < se[who, None], draw < 1.0 - sp[who, None]).astype(np.int64)
        labelled = partition[j] == "training"
        cols[0].append(np.repeat(subject_id[who], q))
        cols[1].append(np.full(n_cls * q, site_id[j]))
        cols[2].append(np.tile(np.arange(1, q + 1), n_cls))
        cols[3].append(pos.ravel())
        cols[4].append(state.ravel() if labelled else np.full(n_cls * q, MISSING))
    if not cols[0]:
        empty = np.zeros(0, dtype=np.int64)
        return ClassificationSet(empty, empty, empty, empty, empty)
    arrays = [np.concatenate(c) for c in cols]
    return ClassificationSet(*arrays)


def simulate_dataset(config: SimulationConfig | None = None) -> SimulatedDataset:
    config = SimulationConfig() if config is None else config
    coords = regular_grid(config.grid_k, BoundingBox(0.0, 0.0, 1.0, 1.0))
    graph = build_voronoi_adjacency(coords, BoundingBox(0.0, 0.0, 1.0, 1.0))
    x, u, mu, y = simulate_latent_field(config, graph)
    se, sp, group = simulate_subjects(config)
    subject_id = np.arange(1, config.n_subjects + 1)
    partition = partition_sites(config)
    cs = simulate_classifications(config, coords.site_id, partition, y, se, sp, subject_id)
    y_obs = np.where(partition == "training", y, np.nan)
    sites = SiteTable(coords.site_id, coords.lon, coords.lat, partition, y_obs, x[:, None], ["x1"])
    return SimulatedDataset(config, sites, graph, cs, y, u, mu, subject_id, se, sp, group)


def overestimation_threshold(se: float, sp: float) -> float:
    """Latent proportion below which the apparent proportion overestimates it."""
    den = 2.0 - se - sp
    if den == 0:
        raise SimulationError("se + sp = 2 is a perfect classifier; there is no bias region")
    return (1.0 - sp) / den


# --------------------------------------------------------------------------
# single-level attenuation demo


@dataclass
class SupplementaryData:
    x: np.ndarray
    y: np.ndarray
    annotator: np.ndarray
    se: np.ndarray
    yhat: np.ndarray

    @property
    def acc(self) -> np.ndarray:
        # with se = sp, accuracy equals se whatever the prevalence
        return self.se


def simulate_supplementary(
    seed: int,
    n: int = 200,
    b: tuple[float, float] = (-5.0, 10.0),
    phi: float = 50.0,
    performance: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6),
) -> SupplementaryData:
    """Beta regression data seen through annotators with ``se = sp``.

    The apparent proportion is the expected value ``y se + (1 - y)(1 - se)``,
    so there is no point-level noise. Annotators get equal shares of the rows.
    """
    if n % len(performance):
        raise SimulationError("n must split evenly across annotators")
    rng = _rng(seed, 0)
    x = rng.uniform(0.0, 1.0, n)
    mu = special.expit(b[0] + b[1] * x)
    y = rng.beta(mu * phi, (1.0 - mu) * phi)
    annot = rng.permutation(np.repeat(np.arange(len(performance)), n // len(performance)))
    se = np.asarray(performance, dtype=float)[annot]
    yhat = y * se + (1.0 - y) * (1.0 - se)
    return SupplementaryData(x, y, annot, se, yhat)

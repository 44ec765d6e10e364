from __future__ import annotations

import numpy as np
import pytest

from sdme.model import ModelConfig, ModelSpec
from sdme.spatial import build_voronoi_adjacency, regular_grid


def toy_spec(kind: str, seed: int = 0, n_subjects: int = 4, known=(0, 3, 5), **overrides) -> ModelSpec:
    """3x3 grid, every subject scores every site with 15 points."""
    rng = np.random.default_rng(seed)
    graph = build_voronoi_adjacency(regular_grid(3))
    m = graph.n_sites
    X = np.column_stack([np.ones(m), rng.normal(size=m)])
    y_known = np.full(m, np.nan)
    y_known[list(known)] = rng.uniform(0.05, 0.95, len(known))
    subj, site = np.meshgrid(np.arange(n_subjects), np.arange(m))
    subj, site = subj.ravel(), site.ravel()
    q = np.full(len(subj), 15.0)
    k = rng.integers(0, 16, len(subj)).astype(float)
    shapes = np.column_stack([rng.uniform(5, 30, n_subjects), rng.uniform(1, 5, n_subjects)])
    cfg = ModelConfig(kind=kind, **overrides)
    return ModelSpec(
        cfg, X, graph, y_known, subj, site, obs_k=k, obs_q=q,
        prior_se=shapes, prior_sp=shapes[::-1], prior_acc=shapes, b_mean=np.array([0.5, -1.0]),
    )


def random_point(spec: ModelSpec, rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
    """A random unconstrained point with finite density (weighted: accuracies near 1)."""
    theta = rng.normal(scale=scale, size=spec.dim)
    L = spec.layout
    if spec.kind == "weighted":
        theta[L.off_acc : L.off_acc + L.n_sub] = rng.uniform(2.5, 4.0, L.n_sub)
        theta[L.off_b] = -2.0
    return theta


def central_difference(f, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    out = np.empty_like(theta)
    for i in range(len(theta)):
        d = np.zeros_like(theta)
        d[i] = h
        out[i] = (f(theta + d) - f(theta - d)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

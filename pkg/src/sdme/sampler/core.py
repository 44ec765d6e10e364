"""Multi-chain NUTS driver: warmup adaptation, thinning and draw storage."""

from __future__ import annotations

import logging
import math
import os
import pickle
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._nuts import make_transition, seed_numba
from .diagnostics import Diagnostics, diagnose

log = logging.getLogger(__name__)

__all__ = ["SamplerConfig", "Target", "PosteriorDraws", "SamplerError", "run_chains", "warmup_windows"]


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_chains: int = 3
    n_iter: int = 8000
    n_warmup: int = 4000
    thin: int = 3
    target_accept: float = 0.8
    max_depth: int = 10
    seed: int = 0
    init_retries: int = 100

    def __post_init__(self):
        if self.n_chains < 1:
            raise SamplerError("n_chains must be at least 1")
        if not self.n_iter > self.n_warmup >= 0:
            raise SamplerError("need n_iter > n_warmup >= 0")
        if self.thin < 1:
            raise SamplerError("thin must be at least 1")
        if not 0 < self.target_accept < 1:
            raise SamplerError("target_accept must lie in (0, 1)")
        if self.max_depth < 1:
            raise SamplerError("max_depth must be at least 1")

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.n_warmup) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Target:
    """A density on R^dim plus the map to named constrained quantities.

    ``logp_grad`` must be a numba-jitted ``(theta, data) -> (lp, grad)``.
    ``init`` draws a starting point from a ``numpy.random.Generator``.
    """

    logp_grad: Callable
    data: tuple
    dim: int
    names: list[str]
    constrain: Callable[[np.ndarray], np.ndarray]
    init: Callable[[np.random.Generator], np.ndarray]

    def log_density(self, theta) -> tuple[float, np.ndarray]:
        lp, g = self.logp_grad(np.ascontiguousarray(theta, dtype=float), self.data)
        return float(lp), g


@dataclass
class PosteriorDraws:
    names: list[str]
    draws: np.ndarray  # (chains, kept, parameters), constrained
    unconstrained: np.ndarray  # (chains, kept, dim)
    lp: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    accept_stat: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    n_warmup_divergent: np.ndarray
    n_post_divergent: np.ndarray
    config: SamplerConfig

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def flat(self, name: str) -> np.ndarray:
        return self.column(name).ravel()

    @property
    def divergence_rate(self) -> float:
        """Share of all post-warmup transitions (retained or thinned away) that diverged."""
        n = self.n_chains * (self.config.n_iter - self.config.n_warmup)
        return float(self.n_post_divergent.sum()) / n

    def diagnostics(self) -> Diagnostics:
        return diagnose(self.names, self.draws, int(self.n_post_divergent.sum()))


def warmup_windows(n_warmup: int, init_buffer: int = 75, term_buffer: int = 50, base: int = 25) -> tuple[int, list[int]]:
    """Start of the first slow window and the (exclusive) ends of all slow windows.

    Fast initial buffer, doubling slow windows, fast terminal buffer. Short
    warmups scale the buffers to 15% / 75% / 10%.
    """
    if n_warmup < 20:
        return n_warmup, []
    if init_buffer + base + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base = n_warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base
    slow_end = n_warmup - term_buffer
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start = end
        size *= 2
    return init_buffer, ends


class DualAveraging:
    def __init__(self, eps: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps: float):
        self.mu = math.log(10.0 * eps)
        self.t = 0
        self.hbar = 0.0
        self.log_eps = math.log(eps)
        self.log_eps_bar = 0.0

    def update(self, accept: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.hbar = (1 - eta) * self.hbar + eta * (self.target - accept)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _reasonable_step(target: Target, theta, lp, grad, m_inv, rng) -> float:
    """Double or halve the step until one leapfrog step crosses acceptance 0.8."""
    eps = 1.0
    r = rng.standard_normal(len(theta)) / np.sqrt(m_inv)
    h0 = -lp + 0.5 * np.sum(m_inv * r * r)

    def delta(e):
        r1 = r + 0.5 * e * grad
        th = theta + e * m_inv * r1
        lp1, g1 = target.log_density(th)
        r1 = r1 + 0.5 * e * g1
        h = -lp1 + 0.5 * np.sum(m_inv * r1 * r1)
        return h0 - h if np.isfinite(h) else -np.inf

    d = delta(eps)
    direction = 1 if d > math.log(0.8) else -1
    for _ in range(100):
        eps_new = eps * (2.0**direction)
        d = delta(eps_new)
        if direction == 1 and not d > math.log(0.8):
            break
        if direction == -1 and d > math.log(0.8):
            eps = eps_new
            break
        eps = eps_new
    return float(eps)


def _initial_point(target: Target, rng: np.random.Generator, retries: int, init=None):
    if init is not None:
        theta = np.asarray(init, dtype=float).copy()
        lp, g = target.log_density(theta)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return theta, lp, g
        log.warning("supplied initial point has non-finite density; drawing random inits")
    for _ in range(retries):
        theta = target.init(rng)
        lp, g = target.log_density(theta)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return theta, lp, g
    raise SamplerError(f"no finite initial point after {retries} attempts")


def _run_one(target: Target, config: SamplerConfig, chain: int, init=None):
    ss = np.random.SeedSequence([int(config.seed), int(chain)])
    rng = np.random.default_rng(ss)
    seed_numba(int(ss.generate_state(1)[0] % (2**31 - 1)))
    transition = make_transition(target.logp_grad)

    theta, lp, grad = _initial_point(target, rng, config.init_retries, init)
    dim = target.dim
    m_inv = np.ones(dim)
    eps = _reasonable_step(target, theta, lp, grad, m_inv, rng)
    da = DualAveraging(eps, config.target_accept)
    window_start, ends = warmup_windows(config.n_warmup)
    win_sum = np.zeros(dim)
    win_sq = np.zeros(dim)
    win_n = 0
    warm_div = 0

    n_kept = config.n_kept
    keep_th = np.empty((n_kept, dim))
    keep_lp = np.empty(n_kept)
    keep_div = np.zeros(n_kept, dtype=bool)
    keep_depth = np.zeros(n_kept, dtype=np.int64)
    keep_leap = np.zeros(n_kept, dtype=np.int64)
    keep_acc = np.empty(n_kept)

    k = 0
    post_div = 0
    for it in range(config.n_iter):
        theta, lp, grad, acc, n_leap, depth, div = transition(theta, lp, grad, eps, m_inv, config.max_depth, target.data)
        if it < config.n_warmup:
            warm_div += int(div)
            eps = da.update(acc)
            if ends and window_start <= it < ends[-1]:
                # Welford running variance over the current window
                win_n += 1
                delta = theta - win_sum
                win_sum += delta / win_n
                win_sq += delta * (theta - win_sum)
                if it + 1 in ends:
                    n = win_n
                    var = win_sq / max(n - 1, 1)
                    m_inv = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    eps = _reasonable_step(target, theta, lp, grad, m_inv, rng)
                    da.restart(eps)
                    win_n = 0
                    win_sum[:] = 0.0
                    win_sq[:] = 0.0
            if it + 1 == config.n_warmup:
                eps = da.final
            continue
        j = it - config.n_warmup
        if (j + 1) % config.thin == 0 and k < n_kept:
            keep_th[k] = theta
            keep_lp[k] = lp
            keep_div[k] = div
            keep_depth[k] = depth
            keep_leap[k] = n_leap
            keep_acc[k] = acc
            k += 1
        post_div += int(div)
    return {
        "theta": keep_th,
        "lp": keep_lp,
        "div": keep_div,
        "depth": keep_depth,
        "leap": keep_leap,
        "acc": keep_acc,
        "eps": eps,
        "m_inv": m_inv,
        "warm_div": warm_div,
        "post_div": post_div,
    }


def _n_workers(n_tasks: int) -> int:
    env = os.environ.get("SDME_THREADS")
    if not env:
        return 1
    try:
        return max(1, min(int(env), n_tasks))
    except ValueError:
        raise SamplerError(f"SDME_THREADS must be an integer, got {env!r}") from None


def run_chains(target: Target, config: SamplerConfig | None = None, inits: Sequence | None = None) -> PosteriorDraws:
    """Sample ``config.n_chains`` independent chains and merge them by chain index.

    Chains run in-process unless ``SDME_THREADS`` > 1, in which case they run in
    a process pool; each chain's random stream depends only on
    ``(seed, chain)``, so the result is the same either way.
    """
    config = SamplerConfig() if config is None else config
    inits = [None] * config.n_chains if inits is None else list(inits)
    workers = _n_workers(config.n_chains)
    if workers > 1:
        try:
            pickle.dumps((target, inits))
        except (pickle.PicklingError, AttributeError, TypeError) as exc:
            log.warning("target cannot be sent to worker processes (%s); running chains serially", exc)
            workers = 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(_run_one, target, config, c, inits[c]) for c in range(config.n_chains)]
            results = [f.result() for f in futs]
    else:
        results = [_run_one(target, config, c, inits[c]) for c in range(config.n_chains)]

    th = np.stack([r["theta"] for r in results])
    flat = th.reshape(-1, target.dim)
    cons = target.constrain(flat).reshape(config.n_chains, config.n_kept, -1) if len(flat) else np.zeros(
        (config.n_chains, 0, len(target.names))
    )
    out = PosteriorDraws(
        names=list(target.names),
        draws=cons,
        unconstrained=th,
        lp=np.stack([r["lp"] for r in results]),
        divergent=np.stack([r["div"] for r in results]),
        tree_depth=np.stack([r["depth"] for r in results]),
        n_leapfrog=np.stack([r["leap"] for r in results]),
        accept_stat=np.stack([r["acc"] for r in results]),
        step_size=np.array([r["eps"] for r in results]),
        inv_metric=np.stack([r["m_inv"] for r in results]),
        n_warmup_divergent=np.array([r["warm_div"] for r in results]),
        n_post_divergent=np.array([r["post_div"] for r in results]),
        config=config,
    )
    if out.n_kept and out.divergence_rate > 0.2:
        warnings.warn(
            f"{out.divergence_rate:.1%} of post-warmup transitions diverged; results are unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    return out

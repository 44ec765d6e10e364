"""Log-posterior densities for the misclassification, weighted and naive models.

The three models share a spatial beta regression for the latent proportion

    logit(mu_j) = X_j b + u_j,    y_j ~ Beta(mu_j phi, (1 - mu_j) phi)

with an intrinsic CAR prior on ``u``. They differ in how the per-annotator
apparent proportions enter:

* ``sdme``: ``q * yhat_ij ~ Binomial(q, y_j se_i + (1 - y_j)(1 - sp_i))``
* ``weighted``: ``yhat_ij ~ Beta(mu_j phi / acc_i, phi - mu_j phi / acc_i)``
* ``naive``: ``yhat_ij ~ Beta(mu_j phi, (1 - mu_j) phi)``

Everything is evaluated on an unconstrained parameter vector; the numba
kernel in :mod:`sdme._kernels` returns the density and its exact gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats

from . import _kernels as K
from .spatial import SpatialGraph, component_labels

__all__ = [
    "ModelConfig",
    "ModelSpec",
    "Layout",
    "BetaRegressionResult",
    "ConvergenceError",
    "expected_apparent",
    "direct_correction",
    "beta_lpdf_mean_precision",
    "icar_lpdf",
    "sdme_log_posterior",
    "weighted_log_posterior",
    "naive_log_posterior",
    "mle_beta_regression",
]

KINDS = {"sdme": K.KIND_SDME, "weighted": K.KIND_WEIGHTED, "naive": K.KIND_NAIVE}
LIKELIHOODS = {"binomial": K.LIK_BINOMIAL, "beta": K.LIK_BETA}


class ModelError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


# --------------------------------------------------------------------------
# closed-form pieces


def expected_apparent(y, se, sp):
    """Expected share of points labelled positive: ``y se + (1 - y)(1 - sp)``."""
    y = np.asarray(y, dtype=float)
    return y * se + (1.0 - y) * (1.0 - sp)


def direct_correction(yhat, se, sp):
    """Invert :func:`expected_apparent` for ``y``, clamped to [0, 1]."""
    se = np.asarray(se, dtype=float)
    sp = np.asarray(sp, dtype=float)
    youden = se + sp - 1.0
    if np.any(youden <= 0):
        raise ModelError("direct correction needs se + sp > 1")
    out = (np.asarray(yhat, dtype=float) - (1.0 - sp)) / youden
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def nudge_boundary(v, resolution: int):
    """Move values of exactly 0 or 1 inward by half a point out of ``resolution``."""
    v = np.asarray(v, dtype=float)
    h = 0.5 / resolution
    return np.where(v <= 0.0, h, np.where(v >= 1.0, 1.0 - h, v))


def beta_lpdf_mean_precision(value, mu, phi):
    """log Beta(value | mu phi, (1 - mu) phi); ``-inf`` outside (0, 1)."""
    value = np.asarray(value, dtype=float)
    a = mu * phi
    b = (1.0 - mu) * phi
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            special.xlogy(a - 1.0, value)
            + special.xlog1py(b - 1.0, -value)
            - special.betaln(a, b)
        )
    out = np.where((value > 0) & (value < 1), out, -np.inf)
    return float(out) if out.ndim == 0 else out


def icar_lpdf(u, tau_u: float, graph: SpatialGraph, soft_sum_to_zero: bool = True, sum_scale: float = 1e-3) -> float:
    """Unnormalised intrinsic CAR log-density in pairwise-difference form.

    ``((m - c) / 2) log tau - (tau / 2) sum_{l~t} (u_l - u_t)^2`` with ``c`` the
    number of connected components. With ``soft_sum_to_zero`` each component
    mean also gets a ``Normal(0, sum_scale / sqrt(size))`` penalty.
    """
    u = np.asarray(u, dtype=float)
    e = graph.edges
    labels = component_labels(graph)
    c = labels.max() + 1 if len(labels) else 0
    d = u[e[:, 0]] - u[e[:, 1]]
    out = 0.5 * (len(u) - c) * math.log(tau_u) - 0.5 * tau_u * float(d @ d)
    if soft_sum_to_zero:
        for k in range(c):
            members = u[labels == k]
            sd = sum_scale / math.sqrt(len(members))
            out += float(stats.norm.logpdf(members.mean(), 0.0, sd))
    return out


# --------------------------------------------------------------------------
# beta regression by maximum likelihood


@dataclass
class BetaRegressionResult:
    coef: np.ndarray
    phi: float
    se_coef: np.ndarray
    se_phi: float
    loglik: float
    n_iter: int

    def as_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "phi": self.phi,
            "se_coef": self.se_coef.tolist(),
            "se_phi": self.se_phi,
            "loglik": self.loglik,
        }


def _betareg_terms(params, X, y, w):
    beta, logphi = params[:-1], params[-1]
    phi = math.exp(logphi)
    eta = X @ beta
    mu = special.expit(eta)
    a = mu * phi
    b = phi - a
    ll = special.gammaln(phi) - special.gammaln(a) - special.gammaln(b) + (a - 1) * np.log(y) + (b - 1) * np.log1p(-y)
    ystar = special.logit(y)
    mustar = special.digamma(a) - special.digamma(b)
    dmu = phi * (ystar - mustar)
    dphi = mu * (ystar - mustar) + special.digamma(phi) - special.digamma(b) + np.log1p(-y)
    return phi, mu, a, b, ll, ystar, mustar, dmu, dphi


def _betareg_negloglik(params, X, y, w):
    phi, mu, a, b, ll, ystar, mustar, dmu, dphi = _betareg_terms(params, X, y, w)
    g1 = mu * (1 - mu)
    grad_beta = X.T @ (w * dmu * g1)
    grad_logphi = np.sum(w * dphi) * phi
    return -float(np.sum(w * ll)), -np.append(grad_beta, grad_logphi)


def _betareg_hessian(coef, phi, X, y, w):
    """Observed-information Hessian of the log-likelihood in (coef, phi)."""
    params = np.append(coef, math.log(phi))
    _, mu, a, b, _, ystar, mustar, dmu, _ = _betareg_terms(params, X, y, w)
    t1a = special.polygamma(1, a)
    t1b = special.polygamma(1, b)
    d2mu = -phi * phi * (t1a + t1b)
    dmuphi = (ystar - mustar) - phi * (mu * t1a - (1 - mu) * t1b)
    d2phi = special.polygamma(1, phi) - mu * mu * t1a - (1 - mu) ** 2 * t1b
    g1 = mu * (1 - mu)
    g2 = g1 * (1 - 2 * mu)
    p = X.shape[1]
    H = np.empty((p + 1, p + 1))
    H[:p, :p] = (X * (w * (d2mu * g1 * g1 + dmu * g2))[:, None]).T @ X
    H[:p, p] = H[p, :p] = X.T @ (w * dmuphi * g1)
    H[p, p] = np.sum(w * d2phi)
    return H


def mle_beta_regression(
    X,
    y,
    weights=None,
    max_iter: int = 500,
    tol: float = 1e-10,
) -> BetaRegressionResult:
    """Beta regression with logit mean link and constant precision.

    Maximised by BFGS on ``(coef, log phi)``; standard errors come from the
    inverse observed information at the optimum. ``weights`` multiply the
    log-likelihood contributions.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(y) != n:
        raise ModelError("X and y differ in length")
    if np.any((y <= 0) | (y >= 1)):
        raise ModelError("beta regression needs y strictly inside (0, 1)")
    if np.linalg.matrix_rank(X) < p:
        raise ModelError("design matrix is rank deficient")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    # start from least squares on the logit scale
    ystar = special.logit(y)
    beta0, *_ = np.linalg.lstsq(X, ystar, rcond=None)
    mu0 = special.expit(X @ beta0)
    resid_var = np.var(y - mu0)
    phi0 = max(np.mean(mu0 * (1 - mu0)) / max(resid_var, 1e-8) - 1.0, 1.0)
    x0 = np.append(beta0, math.log(phi0))

    res = optimize.minimize(
        _betareg_negloglik,
        x0,
        args=(X, y, w),
        jac=True,
        method="BFGS",
        options={"maxiter": max_iter, "gtol": tol},
    )
    gnorm = float(np.max(np.abs(res.jac)))
    if not res.success and gnorm > 1e-5 * max(1.0, abs(res.fun)):
        raise ConvergenceError(
            f"beta regression did not converge in {max_iter} iterations ({res.message})", last=res.x
        )
    coef = res.x[:-1]
    phi = math.exp(res.x[-1])
    H = _betareg_hessian(coef, phi, X, y, w)
    cov = np.linalg.inv(-H)
    se = np.sqrt(np.diag(cov))
    return BetaRegressionResult(coef, phi, se[:p], float(se[p]), float(-res.fun), int(res.nit))


# --------------------------------------------------------------------------
# model specification


@dataclass
class ModelConfig:
    """Priors and switches; everything needed to rebuild a model from data."""

    kind: str = "sdme"
    likelihood: str = "binomial"
    kappa: float = 50.0
    b_prior_sd: float = 5.0
    phi_prior_mean: float = 20.0
    phi_prior_sd: float = 5.0
    phi_lower: float = 10.0
    phi_upper: float = 60.0
    tau_shape: float = 0.1
    tau_rate: float = 0.1
    spatial: bool = True
    noncentered: bool = False
    unstructured: bool = False
    sigma_e_scale: float = 1.0
    use_known_y: bool | None = None
    fallback_precision: float = 20.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ModelError(f"unknown likelihood {self.likelihood!r}")
        if not self.phi_upper > self.phi_lower > 0:
            raise ModelError("phi bounds must satisfy 0 < lower < upper")
        for name in ("kappa", "b_prior_sd", "phi_prior_sd", "tau_shape", "tau_rate", "sigma_e_scale", "fallback_precision"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")

    @property
    def known_y_enters(self) -> bool:
        if self.use_known_y is None:
            return self.kind == "sdme"
        return bool(self.use_known_y) or self.kind == "sdme"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class Layout:
    """Offsets of each block inside the unconstrained parameter vector."""

    p: int
    n_sites: int
    n_free: int
    n_lat: int
    n_sub: int
    off_b: int = 0
    off_s: int = -1
    off_logtau: int = -1
    off_phi: int = -1
    off_e: int = -1
    off_logsig: int = -1
    off_y: int = -1
    off_se: int = -1
    off_sp: int = -1
    off_acc: int = -1
    dim: int = 0


@dataclass
class ModelSpec:
    """A model bound to data.

    Sites are indexed ``0..m-1`` in the row order of ``X``. ``y_known`` is NaN
    where the latent proportion is unobserved. Observations are per
    (subject, site) pairs: ``obs_k`` positives out of ``obs_q`` points, or a
    continuous ``obs_yhat`` for inputs that are not point counts.
    """

    config: ModelConfig
    X: np.ndarray
    graph: SpatialGraph | None
    y_known: np.ndarray
    obs_subject: np.ndarray
    obs_site: np.ndarray
    obs_k: np.ndarray | None = None
    obs_q: np.ndarray | None = None
    obs_yhat: np.ndarray | None = None
    subject_ids: np.ndarray | None = None
    site_ids: np.ndarray | None = None
    covariate_names: Sequence[str] | None = None
    b_mean: np.ndarray | None = None
    prior_se: np.ndarray | None = None  # (n_sub, 2) beta shapes
    prior_sp: np.ndarray | None = None
    prior_acc: np.ndarray | None = None
    fixed_se: np.ndarray | None = None
    fixed_sp: np.ndarray | None = None
    resolution: int = 15
    layout: Layout = field(init=False)

    def __post_init__(self):
        cfg = self.config
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        m, p = self.X.shape
        self.y_known = np.asarray(self.y_known, dtype=float).copy()
        if self.y_known.shape != (m,):
            raise ModelError("y_known must have one entry per site")
        self.obs_subject = np.asarray(self.obs_subject, dtype=np.int64)
        self.obs_site = np.asarray(self.obs_site, dtype=np.int64)
        n_obs = len(self.obs_subject)
        if len(self.obs_site) != n_obs:
            raise ModelError("observation arrays differ in length")
        if n_obs and (self.obs_site.min() < 0 or self.obs_site.max() >= m):
            raise ModelError("observation refers to an unknown site")
        if self.subject_ids is None:
            n_sub = int(self.obs_subject.max()) + 1 if n_obs else 0
            self.subject_ids = np.arange(n_sub)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        n_sub = len(self.subject_ids)
        if n_obs and (self.obs_subject.min() < 0 or self.obs_subject.max() >= n_sub):
            raise ModelError("observation refers to an unknown subject")
        if self.site_ids is None:
            self.site_ids = np.arange(m) if self.graph is None else self.graph.site_id.copy()
        self.site_ids = np.asarray(self.site_ids, dtype=np.int64)
        if self.graph is not None and self.graph.n_sites != m:
            raise ModelError("graph size does not match the design matrix")
        if self.covariate_names is None:
            self.covariate_names = [f"b{k}" for k in range(p)]
        self.covariate_names = list(self.covariate_names)
        if self.b_mean is None:
            self.b_mean = np.zeros(p)
        self.b_mean = np.asarray(self.b_mean, dtype=float)

        if self.obs_k is not None:
            self.obs_k = np.asarray(self.obs_k, dtype=float)
            self.obs_q = np.asarray(self.obs_q, dtype=float)
            if self.obs_yhat is None:
                self.obs_yhat = self.obs_k / self.obs_q
        elif cfg.kind == "sdme" and cfg.likelihood == "binomial":
            raise ModelError("the binomial likelihood needs point counts (obs_k, obs_q)")
        if self.obs_yhat is None:
            raise ModelError("observations need obs_yhat or point counts")
        self.obs_yhat = np.asarray(self.obs_yhat, dtype=float)
        if np.any((self.obs_yhat < 0) | (self.obs_yhat > 1)):
            raise ModelError("apparent proportions must lie in [0, 1]")

        if cfg.kind == "sdme" and self.fixed_se is None:
            for name in ("prior_se", "prior_sp"):
                if getattr(self, name) is None:
                    setattr(self, name, np.ones((n_sub, 2)))
        if cfg.kind == "weighted" and self.prior_acc is None:
            self.prior_acc = np.ones((n_sub, 2))
        for name in ("prior_se", "prior_sp", "prior_acc"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).reshape(n_sub, 2)
                if np.any(v <= 0):
                    raise ModelError(f"{name} shapes must be positive")
                setattr(self, name, v)

        self._build_layout()

    # -- construction helpers

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def n_sites(self) -> int:
        return self.X.shape[0]

    @property
    def known_mask(self) -> np.ndarray:
        return np.isfinite(self.y_known)

    @property
    def latent_sites(self) -> np.ndarray:
        if self.kind != "sdme":
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(~self.known_mask)

    def _components(self):
        if self.graph is None or not self.config.spatial:
            return np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        labels = component_labels(self.graph)
        order = np.argsort(labels, kind="stable")
        counts = np.bincount(labels)
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return ptr, order.astype(np.int64)

    def _build_layout(self):
        cfg = self.config
        m, p = self.X.shape
        ptr, members = self._components()
        self._comp_ptr, self._comp_members = ptr, members
        sizes = np.diff(ptr)
        n_free = int(np.sum(np.maximum(sizes - 1, 0)))
        n_lat = len(self.latent_sites)
        n_sub = len(self.subject_ids)
        L = Layout(p=p, n_sites=m, n_free=n_free, n_lat=n_lat, n_sub=n_sub)
        pos = p
        if n_free > 0:
            L.off_s = pos
            pos += n_free
            L.off_logtau = pos
            pos += 1
        L.off_phi = pos
        pos += 1
        if cfg.unstructured:
            L.off_e = pos
            pos += m
            L.off_logsig = pos
            pos += 1
        if n_lat:
            L.off_y = pos
            pos += n_lat
        if cfg.kind == "sdme" and self.fixed_se is None:
            L.off_se = pos
            pos += n_sub
            L.off_sp = pos
            pos += n_sub
        if cfg.kind == "weighted":
            L.off_acc = pos
            pos += n_sub
        L.dim = pos
        self.layout = L
        self._data = None

    @property
    def dim(self) -> int:
        return self.layout.dim

    def _nudge(self, v):
        # beta support is open; move exact 0/1 by half a point
        return nudge_boundary(v, self.resolution)

    def kernel_data(self) -> tuple:
        if self._data is not None:
            return self._data
        cfg = self.config
        L = self.layout
        m, p = self.X.shape
        iopt = np.zeros(K.N_IOPT, dtype=np.int64)
        iopt[K.I_KIND] = KINDS[cfg.kind]
        iopt[K.I_P] = p
        iopt[K.I_M] = m
        iopt[K.I_NFREE] = L.n_free
        iopt[K.I_OFF_B] = L.off_b
        iopt[K.I_OFF_S] = L.off_s
        iopt[K.I_OFF_LOGTAU] = L.off_logtau
        iopt[K.I_OFF_PHI] = L.off_phi
        iopt[K.I_OFF_E] = L.off_e
        iopt[K.I_OFF_LOGSIG] = L.off_logsig
        iopt[K.I_OFF_Y] = L.off_y
        iopt[K.I_NLAT] = L.n_lat
        iopt[K.I_OFF_SE] = L.off_se
        iopt[K.I_OFF_SP] = L.off_sp
        iopt[K.I_OFF_ACC] = L.off_acc
        iopt[K.I_NSUB] = L.n_sub
        iopt[K.I_LIK] = LIKELIHOODS[cfg.likelihood]
        iopt[K.I_NONCENTERED] = int(cfg.noncentered)
        iopt[K.I_USE_KNOWN] = int(cfg.known_y_enters)
        iopt[K.I_DIM] = L.dim

        fopt = np.zeros(K.N_FOPT)
        fopt[K.F_PHI_LO] = cfg.phi_lower
        fopt[K.F_PHI_HI] = cfg.phi_upper
        fopt[K.F_PHI_MEAN] = cfg.phi_prior_mean
        fopt[K.F_PHI_SD] = cfg.phi_prior_sd
        fopt[K.F_PHI_LOGZ] = self.phi_log_normaliser()
        fopt[K.F_TAU_SHAPE] = cfg.tau_shape
        fopt[K.F_TAU_RATE] = cfg.tau_rate
        fopt[K.F_KAPPA] = cfg.kappa
        fopt[K.F_SIGMA_E_SCALE] = cfg.sigma_e_scale

        if self.graph is not None and cfg.spatial and L.n_free > 0:
            edge_a = self.graph.edges[:, 0].copy()
            edge_b = self.graph.edges[:, 1].copy()
        else:
            edge_a = edge_b = np.zeros(0, dtype=np.int64)

        known = np.flatnonzero(self.known_mask)
        ky = self._nudge(self.y_known[known])
        yhat = self._nudge(self.obs_yhat)
        n_obs = len(self.obs_subject)
        if self.obs_k is not None:
            k = self.obs_k
            q = self.obs_q
            lbinom = special.gammaln(q + 1) - special.gammaln(k + 1) - special.gammaln(q - k + 1)
        else:
            k = q = lbinom = np.zeros(n_obs)
        n_sub = L.n_sub
        one = np.ones(n_sub)
        if cfg.kind == "sdme" and self.fixed_se is None:
            pa1, pb1 = self.prior_se[:, 0].copy(), self.prior_se[:, 1].copy()
            pa2, pb2 = self.prior_sp[:, 0].copy(), self.prior_sp[:, 1].copy()
        elif cfg.kind == "weighted":
            pa1, pb1 = self.prior_acc[:, 0].copy(), self.prior_acc[:, 1].copy()
            pa2, pb2 = one.copy(), one.copy()
        else:
            pa1, pb1, pa2, pb2 = one.copy(), one.copy(), one.copy(), one.copy()
        se_fixed = np.asarray(self.fixed_se if self.fixed_se is not None else one, dtype=float)
        sp_fixed = np.asarray(self.fixed_sp if self.fixed_sp is not None else one, dtype=float)

        self._data = (
            iopt,
            fopt,
            np.ascontiguousarray(self.X),
            self.b_mean.astype(float),
            np.full(p, cfg.b_prior_sd),
            edge_a.astype(np.int64),
            edge_b.astype(np.int64),
            self._comp_ptr,
            self._comp_members,
            known.astype(np.int64),
            np.log(ky),
            np.log1p(-ky),
            self.latent_sites.astype(np.int64),
            self.obs_subject.copy(),
            self.obs_site.copy(),
            np.asarray(k, dtype=float),
            np.asarray(q, dtype=float),
            np.asarray(lbinom, dtype=float),
            np.log(yhat),
            np.log1p(-yhat),
            pa1,
            pb1,
            pa2,
            pb2,
            se_fixed,
            sp_fixed,
        )
        return self._data

    def phi_log_normaliser(self) -> float:
        c = self.config
        a = (c.phi_lower - c.phi_prior_mean) / c.phi_prior_sd
        b = (c.phi_upper - c.phi_prior_mean) / c.phi_prior_sd
        return float(np.log(special.ndtr(b) - special.ndtr(a)))

    # -- evaluation

    def log_density(self, theta) -> tuple[float, np.ndarray]:
        theta = np.ascontiguousarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ModelError(f"expected a parameter vector of length {self.dim}, got {theta.shape}")
        lp, grad = K.log_density_grad(theta, self.kernel_data())
        return float(lp), grad

    def shape_faults(self, theta) -> int:
        """Count of weighted-model observations whose second beta shape is not positive."""
        _, faults = K.log_density_faults(np.ascontiguousarray(theta, dtype=float), self.kernel_data())
        return int(faults)

    # -- transforms

    def spatial_field(self, theta) -> np.ndarray:
        """Spatial effects ``u`` (n_draws, m) from unconstrained draws."""
        theta = np.atleast_2d(theta)
        L = self.layout
        out = np.zeros((theta.shape[0], L.n_sites))
        if L.off_logtau < 0:
            return out
        ptr, members = self._comp_ptr, self._comp_members
        vpos = L.off_s
        for c in range(len(ptr) - 1):
            size = ptr[c + 1] - ptr[c]
            if size < 2:
                continue
            basis = _helmert_basis(size)
            out[:, members[ptr[c] : ptr[c + 1]]] = theta[:, vpos : vpos + size - 1] @ basis.T
            vpos += size - 1
        if self.config.noncentered:
            out /= np.sqrt(np.exp(theta[:, [L.off_logtau]]))
        return out

    def constrained_names(self) -> list[str]:
        L = self.layout
        names = list(self.covariate_names)
        if L.off_logtau >= 0:
            names.append("tau_u")
        names.append("phi")
        if L.off_e >= 0:
            names.append("sigma_e")
        if L.off_logtau >= 0:
            names += [f"u[{s}]" for s in self.site_ids]
        if L.off_y >= 0:
            names += [f"y[{self.site_ids[j]}]" for j in self.latent_sites]
        if L.off_se >= 0:
            names += [f"se[{s}]" for s in self.subject_ids]
            names += [f"sp[{s}]" for s in self.subject_ids]
        if L.off_acc >= 0:
            names += [f"acc[{s}]" for s in self.subject_ids]
        return names

    def constrain(self, theta) -> np.ndarray:
        """Map unconstrained draws (n, dim) to the columns of :meth:`constrained_names`."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        L = self.layout
        c = self.config
        cols = [theta[:, L.off_b : L.off_b + L.p]]
        if L.off_logtau >= 0:
            cols.append(np.exp(theta[:, [L.off_logtau]]))
        cols.append(c.phi_lower + (c.phi_upper - c.phi_lower) * special.expit(theta[:, [L.off_phi]]))
        if L.off_e >= 0:
            cols.append(np.exp(theta[:, [L.off_logsig]]))
        if L.off_logtau >= 0:
            cols.append(self.spatial_field(theta))
        if L.off_y >= 0:
            cols.append(special.expit(theta[:, L.off_y : L.off_y + L.n_lat]))
        if L.off_se >= 0:
            cols.append(special.expit(theta[:, L.off_se : L.off_se + L.n_sub]))
            cols.append(special.expit(theta[:, L.off_sp : L.off_sp + L.n_sub]))
        if L.off_acc >= 0:
            cols.append(special.expit(theta[:, L.off_acc : L.off_acc + L.n_sub]))
        return np.hstack(cols)

    def mean_field(self, theta) -> np.ndarray:
        """Regression mean ``mu`` per site for each unconstrained draw."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        L = self.layout
        lin = theta[:, L.off_b : L.off_b + L.p] @ self.X.T + self.spatial_field(theta)
        if L.off_e >= 0:
            lin += np.exp(theta[:, [L.off_logsig]]) * theta[:, L.off_e : L.off_e + L.n_sites]
        return special.expit(lin)

    def phi_of(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        c = self.config
        return c.phi_lower + (c.phi_upper - c.phi_lower) * special.expit(theta[:, self.layout.off_phi])

    def unconstrain(
        self,
        b=None,
        u=None,
        tau_u: float = 1.0,
        phi: float | None = None,
        y_latent=None,
        se=None,
        sp=None,
        acc=None,
    ) -> np.ndarray:
        """Build an unconstrained vector from constrained values (defaults fill gaps)."""
        L = self.layout
        c = self.config
        theta = np.zeros(L.dim)
        theta[L.off_b : L.off_b + L.p] = self.b_mean if b is None else b
        if L.off_logtau >= 0:
            theta[L.off_logtau] = math.log(tau_u)
            if u is not None:
                u = np.asarray(u, dtype=float)
                if c.noncentered:
                    u = u * math.sqrt(tau_u)
                ptr, members = self._comp_ptr, self._comp_members
                vpos = L.off_s
                for k in range(len(ptr) - 1):
                    size = ptr[k + 1] - ptr[k]
                    if size < 2:
                        continue
                    block = u[members[ptr[k] : ptr[k + 1]]]
                    theta[vpos : vpos + size - 1] = _helmert_basis(size).T @ (block - block.mean())
                    vpos += size - 1
        phi = 0.5 * (c.phi_lower + c.phi_upper) if phi is None else phi
        frac = (phi - c.phi_lower) / (c.phi_upper - c.phi_lower)
        theta[L.off_phi] = special.logit(np.clip(frac, 1e-6, 1 - 1e-6))
        if L.off_e >= 0:
            theta[L.off_logsig] = math.log(0.1)

        def lg(v, n):
            v = np.broadcast_to(np.asarray(v, dtype=float), (n,))
            return special.logit(np.clip(v, 1e-6, 1 - 1e-6))

        if L.off_y >= 0:
            theta[L.off_y : L.off_y + L.n_lat] = lg(0.5 if y_latent is None else y_latent, L.n_lat)
        if L.off_se >= 0:
            theta[L.off_se : L.off_se + L.n_sub] = lg(_beta_mean(self.prior_se) if se is None else se, L.n_sub)
            theta[L.off_sp : L.off_sp + L.n_sub] = lg(_beta_mean(self.prior_sp) if sp is None else sp, L.n_sub)
        if L.off_acc >= 0:
            theta[L.off_acc : L.off_acc + L.n_sub] = lg(_beta_mean(self.prior_acc) if acc is None else acc, L.n_sub)
        return theta

    # -- term-by-term evaluation (numpy), used for diagnostics

    def term_breakdown(self, theta) -> dict[str, float]:
        """Log-density split by term, computed independently of the kernel."""
        theta = np.asarray(theta, dtype=float)
        L = self.layout
        c = self.config
        out: dict[str, float] = {}
        b = theta[L.off_b : L.off_b + L.p]
        out["prior_b"] = float(np.sum(stats.norm.logpdf(b, self.b_mean, c.b_prior_sd)))
        u = self.spatial_field(theta)[0]
        if L.off_logtau >= 0:
            tau = math.exp(theta[L.off_logtau])
            out["prior_tau"] = float(stats.gamma.logpdf(tau, c.tau_shape, scale=1.0 / c.tau_rate) + math.log(tau))
            icar = icar_lpdf(u, tau, self.graph, soft_sum_to_zero=False)
            if c.noncentered:
                # density of the standardised field: drop the Jacobian-cancelled log tau term
                icar -= 0.5 * L.n_free * math.log(tau)
            out["icar"] = icar
        eta_phi = theta[L.off_phi]
        phi = float(self.phi_of(theta)[0])
        out["prior_phi"] = float(stats.norm.logpdf(phi, c.phi_prior_mean, c.phi_prior_sd) - self.phi_log_normaliser())
        out["jacobian_phi"] = float(
            math.log(c.phi_upper - c.phi_lower) + special.log_expit(eta_phi) + special.log_expit(-eta_phi)
        )
        if L.off_e >= 0:
            sig = math.exp(theta[L.off_logsig])
            out["prior_sigma_e"] = float(stats.halfnorm.logpdf(sig, scale=c.sigma_e_scale) + math.log(sig))
            out["prior_e"] = float(np.sum(stats.norm.logpdf(theta[L.off_e : L.off_e + L.n_sites])))
        mu = self.mean_field(theta)[0]
        y = np.full(L.n_sites, np.nan)
        known = np.flatnonzero(self.known_mask)
        y[known] = self._nudge(self.y_known[known])
        if c.known_y_enters and len(known):
            out["beta_known_y"] = float(np.sum(beta_lpdf_mean_precision(y[known], mu[known], phi)))
        if L.off_y >= 0:
            eta = theta[L.off_y : L.off_y + L.n_lat]
            lat = self.latent_sites
            y[lat] = special.expit(eta)
            out["beta_latent_y"] = float(np.sum(beta_lpdf_mean_precision(y[lat], mu[lat], phi)))
            out["jacobian_y"] = float(np.sum(special.log_expit(eta) + special.log_expit(-eta)))
        i, j = self.obs_subject, self.obs_site
        yhat = self._nudge(self.obs_yhat)
        if c.kind == "sdme":
            if L.off_se >= 0:
                e1 = theta[L.off_se : L.off_se + L.n_sub]
                e2 = theta[L.off_sp : L.off_sp + L.n_sub]
                se, sp = special.expit(e1), special.expit(e2)
                out["prior_se"] = float(np.sum(stats.beta.logpdf(se, self.prior_se[:, 0], self.prior_se[:, 1])))
                out["prior_sp"] = float(np.sum(stats.beta.logpdf(sp, self.prior_sp[:, 0], self.prior_sp[:, 1])))
                out["jacobian_se_sp"] = float(
                    np.sum(special.log_expit(e1) + special.log_expit(-e1) + special.log_expit(e2) + special.log_expit(-e2))
                )
            else:
                se, sp = np.asarray(self.fixed_se, float), np.asarray(self.fixed_sp, float)
            pr = expected_apparent(y[j], se[i], sp[i])
            if c.likelihood == "binomial":
                out["observations"] = float(np.sum(stats.binom.logpmf(self.obs_k, self.obs_q, pr)))
            else:
                out["observations"] = float(np.sum(beta_lpdf_mean_precision(yhat, pr, c.kappa)))
        else:
            if c.kind == "weighted":
                e1 = theta[L.off_acc : L.off_acc + L.n_sub]
                acc = special.expit(e1)
                out["prior_acc"] = float(np.sum(stats.beta.logpdf(acc, self.prior_acc[:, 0], self.prior_acc[:, 1])))
                out["jacobian_acc"] = float(np.sum(special.log_expit(e1) + special.log_expit(-e1)))
            else:
                acc = np.ones(L.n_sub)
            a = mu[j] * phi / acc[i]
            bb = phi - a
            ok = bb > 0
            vals = np.full(len(i), -np.inf)
            vals[ok] = stats.beta.logpdf(yhat[ok], a[ok], bb[ok])
            out["observations"] = float(np.sum(vals))
        return out

    def diagnose(self, theta) -> list[str]:
        """Names of terms that are not finite at ``theta``."""
        return [k for k, v in self.term_breakdown(theta).items() if not np.isfinite(v)]


def _beta_mean(shapes):
    shapes = np.asarray(shapes, dtype=float)
    return shapes[:, 0] / shapes.sum(axis=1)


_HELMERT: dict[int, np.ndarray] = {}


def _helmert_basis(size: int) -> np.ndarray:
    """Orthonormal basis (size, size - 1) of the zero-sum subspace, matching the kernel."""
    if size not in _HELMERT:
        B = np.zeros((size, size - 1))
        for k in range(1, size):
            B[:k, k - 1] = 1.0 / math.sqrt(k * (k + 1.0))
            B[k, k - 1] = -k / math.sqrt(k * (k + 1.0))
        _HELMERT[size] = B
    return _HELMERT[size]


def _check_kind(spec: ModelSpec, kind: str):
    if spec.kind != kind:
        raise ModelError(f"spec is a {spec.kind!r} model, not {kind!r}")


def sdme_log_posterior(theta, spec: ModelSpec) -> tuple[float, np.ndarray]:
    _check_kind(spec, "sdme")
    return _evaluate(theta, spec)


def weighted_log_posterior(theta, spec: ModelSpec) -> tuple[float, np.ndarray]:
    _check_kind(spec, "weighted")
    return _evaluate(theta, spec)


def naive_log_posterior(theta, spec: ModelSpec) -> tuple[float, np.ndarray]:
    _check_kind(spec, "naive")
    return _evaluate(theta, spec)


class NonFiniteDensity(FloatingPointError):
    pass


def _evaluate(theta, spec: ModelSpec):
    lp, grad = spec.log_density(theta)
    if not np.isfinite(lp):
        bad = spec.diagnose(theta)
        if spec.kind == "weighted":
            n = spec.shape_faults(theta)
            if n:
                bad.append(f"observations ({n} with mu * w >= 1)")
        raise NonFiniteDensity(f"log density is not finite; offending terms: {bad or ['unknown']}")
    return lp, grad

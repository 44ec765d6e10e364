"""End-to-end fitting, posterior summaries, prediction and model comparison."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels as K
from .domain import (
    ClassificationSet,
    DataError,
    all_confusion_counts,
    apparent_table,
    exclude_low_accuracy,
    performance_measures,
    subject_priors,
)
from .io import SiteTable
from .model import ConvergenceError, ModelConfig, ModelError, ModelSpec, mle_beta_regression, nudge_boundary
from .sampler import PosteriorDraws, SamplerConfig, Target, run_chains
from .sampler.diagnostics import Diagnostics
from .sampler.init import initialize
from .simulate import SimulatedDataset, SimulationConfig, simulate_dataset
from .spatial import SpatialGraph, component_labels

log = logging.getLogger(__name__)

__all__ = [
    "FitData",
    "FitResult",
    "build_spec",
    "fit",
    "summarize",
    "hdi",
    "latent_posterior",
    "predict_unsampled",
    "coverage_report",
    "quintile_recovery",
    "replicate_study",
    "ComparisonReport",
]

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)
SUMMARY_COLUMNS = ["parameter", "mean", "se_mean", "sd", "2.5%", "25%", "50%", "75%", "97.5%", "n_eff", "rhat"]


@dataclass
class FitData:
    """Everything a fit consumes: sites, adjacency and point classifications."""

    sites: SiteTable
    graph: SpatialGraph
    classifications: ClassificationSet
    points_per_image: int | None = None

    @classmethod
    def from_simulation(cls, ds: SimulatedDataset) -> "FitData":
        return cls(ds.sites, ds.graph, ds.classifications, ds.config.points_per_image)


# --------------------------------------------------------------------------
# model construction


def _prior_rows(priors: dict, subjects) -> np.ndarray:
    return np.array([[priors[s].alpha, priors[s].beta] for s in subjects])


def build_spec(data: FitData, config: ModelConfig, exclude_below: float | None = None) -> ModelSpec:
    """Bind a model to data with priors derived from the training partition.

    Subject beta priors come from training-image confusion counts; the prior
    means of ``b`` from a maximum-likelihood beta regression of the known
    proportions on the covariates.
    """
    sites = data.sites
    cs = data.classifications
    if len(cs) == 0:
        raise DataError("no classifications")
    if not np.all(np.equal(sites.site_id, data.graph.site_id)):
        raise DataError("site order in sites table and graph differ")
    site_index = {int(s): j for j, s in enumerate(sites.site_id)}
    unknown = set(np.unique(cs.image).tolist()) - set(site_index)
    if unknown:
        raise DataError(f"classifications refer to unknown images {sorted(unknown)[:5]}")
    uns = set(sites.site_id[sites.partition == "unsampled"].tolist())
    leaked = uns & set(np.unique(cs.image).tolist())
    if leaked:
        raise DataError(f"unsampled sites must have no classifications; found {sorted(leaked)[:5]}")

    training_images = sites.site_id[sites.partition == "training"]
    counts = all_confusion_counts(cs, images=training_images)
    if exclude_below is not None:
        keep = exclude_low_accuracy({s: performance_measures(c) for s, c in counts.items()}, exclude_below)
        cs = cs.for_subjects(keep)
        counts = {s: c for s, c in counts.items() if s in keep}
        if len(cs) == 0:
            raise DataError("no subjects left after accuracy exclusion")

    subj, img, k, q = apparent_table(cs, data.points_per_image)
    subjects = np.unique(subj)
    sub_index = {int(s): i for i, s in enumerate(subjects)}
    obs_sub = np.array([sub_index[int(s)] for s in subj], dtype=np.int64)
    obs_site = np.array([site_index[int(j)] for j in img], dtype=np.int64)

    X = np.column_stack([np.ones(len(sites)), sites.x])
    names = ["b0"] + [f"b{k + 1}" for k in range(sites.x.shape[1])]
    known = (sites.partition == "training") & np.isfinite(sites.y_true)
    y_known = np.where(known, sites.y_true, np.nan)

    resolution = int(data.points_per_image or np.max(q))
    b_mean = np.zeros(X.shape[1])
    if known.sum() > X.shape[1]:
        try:
            b_mean = mle_beta_regression(X[known], nudge_boundary(sites.y_true[known], resolution)).coef
        except (ModelError, ConvergenceError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"prior means for b default to 0: {exc}", stacklevel=2)
    else:
        warnings.warn("too few training sites for an informative prior on b; using mean 0", stacklevel=2)

    fp = config.fallback_precision
    kw = {}
    if config.kind == "sdme":
        kw["prior_se"] = _prior_rows(subject_priors(counts, "se", fp), subjects)
        kw["prior_sp"] = _prior_rows(subject_priors(counts, "sp", fp), subjects)
    elif config.kind == "weighted":
        kw["prior_acc"] = _prior_rows(subject_priors(counts, "acc", fp), subjects)

    return ModelSpec(
        config,
        X,
        data.graph,
        y_known,
        obs_sub,
        obs_site,
        obs_k=k,
        obs_q=q,
        subject_ids=subjects,
        site_ids=sites.site_id,
        covariate_names=names,
        b_mean=b_mean,
        resolution=resolution,
        **kw,
    )


class _SpecInit:
    """Picklable init callback for the sampler."""

    def __init__(self, spec: ModelSpec, strategy: str):
        self.spec, self.strategy = spec, strategy

    def __call__(self, rng):
        return initialize(self.spec, rng, self.strategy)


def make_target(spec: ModelSpec, init_strategy: str = "data-informed") -> Target:
    return Target(
        K.log_density_grad,
        spec.kernel_data(),
        spec.dim,
        spec.constrained_names(),
        spec.constrain,
        _SpecInit(spec, init_strategy),
    )


# --------------------------------------------------------------------------
# summaries


def hdi(x, prob: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``prob`` of the draws."""
    x = np.sort(np.asarray(x, dtype=float).ravel())
    n = len(x)
    k = int(math.ceil(prob * n))
    if k >= n:
        return float(x[0]), float(x[-1])
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def summarize(names, draws: np.ndarray, diagnostics: Diagnostics | None = None) -> list[dict]:
    """Mean, MCSE, sd and percentiles per parameter; draws are (chains, draws, parameters)."""
    if draws.size == 0:
        raise ValueError("no draws to summarise")
    from .sampler.diagnostics import diagnose

    dg = diagnostics if diagnostics is not None else diagnose(names, draws)
    flat = draws.reshape(-1, draws.shape[2])
    qs = np.percentile(flat, QUANTILES, axis=0)
    sd = flat.std(axis=0, ddof=1) if len(flat) > 1 else np.zeros(flat.shape[1])
    rows = []
    for k, n in enumerate(names):
        mcse = dg.mcse_mean[k]
        if not np.isfinite(mcse) and sd[k] == 0:
            mcse = 0.0
        rows.append(
            {
                "parameter": n,
                "mean": float(flat[:, k].mean()),
                "se_mean": float(mcse),
                "sd": float(sd[k]),
                **{f"{q:g}%": float(qs[i, k]) for i, q in enumerate(QUANTILES)},
                "n_eff": float(dg.ess_bulk[k]),
                "rhat": float(dg.rhat[k]),
            }
        )
    return rows


@dataclass
class FitResult:
    kind: str
    spec: ModelSpec
    draws: PosteriorDraws
    summary: list[dict]
    diagnostics: Diagnostics
    converged: bool
    y_draws: np.ndarray  # (n_draws, n_sites)
    sites: SiteTable

    def row(self, name: str) -> dict:
        for r in self.summary:
            if r["parameter"] == name:
                return r
        raise KeyError(name)

    def mean(self, name: str) -> float:
        return self.row(name)["mean"]

    def core_parameters(self) -> list[str]:
        return [n for n in self.draws.names if not (n.startswith("u[") or n.startswith("y["))]


def _y_draws(spec: ModelSpec, draws: PosteriorDraws, seed: int) -> np.ndarray:
    """Per-site y draws: known values, sampled latent values, or predictive draws."""
    th = draws.unconstrained.reshape(-1, spec.dim)
    n = len(th)
    out = np.empty((n, spec.n_sites))
    known = spec.known_mask
    out[:, known] = spec.y_known[known]
    L = spec.layout
    if L.off_y >= 0:
        out[:, spec.latent_sites] = special.expit(th[:, L.off_y : L.off_y + L.n_lat])
    else:
        # models without latent y: posterior predictive Beta(mu phi, (1 - mu) phi)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
        mu = spec.mean_field(th)[:, ~known]
        phi = spec.phi_of(th)[:, None]
        out[:, ~known] = rng.beta(mu * phi, (1 - mu) * phi)
    return out


def fit(
    data: FitData,
    model: ModelConfig | str = "sdme",
    sampler: SamplerConfig | None = None,
    init_strategy: str = "data-informed",
    exclude_below: float | None = None,
    rhat_threshold: float = 1.1,
) -> FitResult:
    """Derive priors, sample the posterior and summarise it.

    ``converged`` is False when any non-field parameter has R-hat above
    ``rhat_threshold``; the result is returned either way.
    """
    config = ModelConfig(kind=model) if isinstance(model, str) else model
    sampler = SamplerConfig() if sampler is None else sampler
    spec = build_spec(data, config, exclude_below)
    target = make_target(spec, init_strategy)
    draws = run_chains(target, sampler)
    dg = draws.diagnostics()
    summary = summarize(draws.names, draws.draws, dg)
    core = [n for n in draws.names if not (n.startswith("u[") or n.startswith("y["))]
    worst = dg.max_rhat(core)
    converged = bool(np.isfinite(worst) and worst <= rhat_threshold)
    if not converged:
        warnings.warn(f"max R-hat over core parameters is {worst:.3f} (> {rhat_threshold})", RuntimeWarning, stacklevel=2)
    y = _y_draws(spec, draws, sampler.seed)
    return FitResult(config.kind, spec, draws, summary, dg, converged, y, data.sites)


# --------------------------------------------------------------------------
# latent field


def quintile_classes(values: np.ndarray) -> np.ndarray:
    """Class 1..5 by the empirical quintiles of ``values``."""
    edges = np.quantile(values, [0.2, 0.4, 0.6, 0.8])
    return np.searchsorted(edges, values, side="right") + 1


def latent_posterior(result: FitResult, prob: float = 0.95) -> list[dict]:
    """Per-site posterior of y with HDI and quintile class of the posterior mean."""
    y = result.y_draws
    const = np.ptp(y, axis=0) == 0
    mean = np.where(const, y[0], y.mean(axis=0))
    sd = np.where(const, 0.0, y.std(axis=0, ddof=1))
    cls = quintile_classes(mean)
    rows = []
    for j, s in enumerate(result.sites.site_id):
        lo, hi = hdi(y[:, j], prob)
        rows.append(
            {"site_id": int(s), "mean": float(mean[j]), "sd": float(sd[j]), "hdi_lo": lo, "hdi_hi": hi, "quintile": int(cls[j])}
        )
    return rows


@dataclass
class Prediction:
    rows: list[dict]
    prior_only: list[int] = field(default_factory=list)


def predict_unsampled(result: FitResult, prob: float = 0.95) -> Prediction:
    """Posterior summaries at sites with neither truth nor classifications.

    Sites whose adjacency component holds no sampled site are listed in
    ``prior_only``: their prediction rests on covariates and priors alone.
    """
    if not result.converged:
        warnings.warn("predicting from a fit that did not converge", RuntimeWarning, stacklevel=2)
    sites = result.sites
    uns = sites.partition == "unsampled"
    rows = [r for r, u in zip(latent_posterior(result, prob), uns) if u]
    labels = component_labels(result.spec.graph)
    sampled_comps = set(labels[~uns].tolist())
    prior_only = [int(s) for s, lab, u in zip(sites.site_id, labels, uns) if u and lab not in sampled_comps]
    if prior_only:
        warnings.warn(f"{len(prior_only)} unsampled sites have no sampled neighbours in their component", stacklevel=2)
    return Prediction(rows, prior_only)


def coverage_report(result: FitResult, y_true, prob: float = 0.95) -> dict:
    """Share of sites whose true y lies inside the posterior HDI, overall and by partition."""
    y_true = np.asarray(y_true, dtype=float)
    inside = np.empty(len(y_true), dtype=bool)
    for j in range(len(y_true)):
        lo, hi = hdi(result.y_draws[:, j], prob)
        inside[j] = lo <= y_true[j] <= hi
    part = result.sites.partition
    out = {"coverage": float(inside.mean()), "n_inside": int(inside.sum()), "n_sites": int(len(inside))}
    for p in ("training", "testing", "unsampled"):
        m = part == p
        out[f"coverage_{p}"] = float(inside[m].mean()) if m.any() else None
    return out


def quintile_recovery(result: FitResult, y_true) -> dict:
    """Quintile class agreement between the true field and the posterior-mean field."""
    y_true = np.asarray(y_true, dtype=float)
    est = quintile_classes(result.y_draws.mean(axis=0))
    tru = quintile_classes(y_true)
    uns = result.sites.partition == "unsampled"
    return {
        "unsampled_matches": int(np.sum(est[uns] == tru[uns])),
        "n_unsampled": int(uns.sum()),
        "all_matches": int(np.sum(est == tru)),
    }


# --------------------------------------------------------------------------
# replicated comparison


@dataclass
class ComparisonReport:
    rows: list[dict]
    n_replicates: int
    models: tuple[str, ...]

    COLUMNS = ["replicate", "seed", "model", "parameter", "group", "subject_id", "estimate", "true_value", "converged"]

    def values(self, model: str, parameter: str) -> np.ndarray:
        return np.array([r["estimate"] for r in self.rows if r["model"] == model and r["parameter"] == parameter])

    def markdown(self) -> str:
        """Across-replicate distribution of posterior means in a Table 2-like layout."""
        out = [
            f"Posterior means over {self.n_replicates} replicate(s)",
            "",
            "| model | parameter | mean | sd | 2.5% | 25% | 50% | 75% | 97.5% | true value |",
            "|---|---|---|---|---|---|---|---|---|---|",
        ]
        keys = []
        for r in self.rows:
            if r["subject_id"] is None:
                key = (r["model"], r["parameter"])
            else:
                key = (r["model"], f"{r['parameter']}_group{r['group']}")
            if key not in keys:
                keys.append(key)
        for model, par in keys:
            if "_group" in par:
                base, g = par.split("_group")
                sel = [r for r in self.rows if r["model"] == model and r["parameter"] == base and r["group"] == int(g)]
            else:
                sel = [r for r in self.rows if r["model"] == model and r["parameter"] == par and r["subject_id"] is None]
            v = np.array([r["estimate"] for r in sel])
            t = np.array([r["true_value"] for r in sel if r["true_value"] is not None], dtype=float)
            q = np.percentile(v, QUANTILES)
            sd = v.std(ddof=1) if len(v) > 1 else 0.0
            tv = f"{t.mean():.3f}" if len(t) else ""
            out.append(
                f"| {model} | {par} | {v.mean():.3f} | {sd:.3f} | " + " | ".join(f"{x:.3f}" for x in q) + f" | {tv} |"
            )
        return "\n".join(out) + "\n"


def _replicate_rows(rep, seed, model, res: FitResult, ds: SimulatedDataset) -> list[dict]:
    cfg = ds.config
    true_b = {"b0": cfg.b0, "b1": cfg.b1}
    rows = []

    def add(par, est, true, group=None, subject=None):
        rows.append(
            {
                "replicate": rep,
                "seed": seed,
                "model": model,
                "parameter": par,
                "group": group,
                "subject_id": subject,
                "estimate": est,
                "true_value": true,
                "converged": res.converged,
            }
        )

    for n in res.spec.covariate_names:
        add(n, res.mean(n), true_b.get(n))
    add("phi", res.mean("phi"), cfg.phi)
    if "tau_u" in res.draws.names:
        add("tau_u", res.mean("tau_u"), None)
    group_of = {int(s): int(g) + 1 for s, g in zip(ds.subject_id, ds.group)}
    se_of = {int(s): float(v) for s, v in zip(ds.subject_id, ds.se)}
    sp_of = {int(s): float(v) for s, v in zip(ds.subject_id, ds.sp)}
    for s in res.spec.subject_ids:
        s = int(s)
        for par, tv in (("se", se_of[s]), ("sp", sp_of[s]), ("acc", None)):
            name = f"{par}[{s}]"
            if name in res.draws.names:
                add(par, res.mean(name), tv, group_of[s], s)
    cov = coverage_report(res, ds.y)
    add("coverage", cov["coverage"], None)
    qr = quintile_recovery(res, ds.y)
    add("quintile_matches_unsampled", float(qr["unsampled_matches"]), None)
    return rows


def replicate_study(
    n_replicates: int,
    sim_config: SimulationConfig | None = None,
    sampler_config: SamplerConfig | None = None,
    models: tuple[str, ...] = ("sdme", "weighted"),
    model_overrides: dict | None = None,
) -> ComparisonReport:
    """Simulate ``n_replicates`` datasets and fit every model to each.

    Replicate ``r`` uses simulation seed ``base + r`` and sampler seed
    ``base + r``. A failed or non-converged fit is recorded, not fatal.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    sim_config = SimulationConfig() if sim_config is None else sim_config
    sampler_config = SamplerConfig() if sampler_config is None else sampler_config
    # bad settings are caller errors, so fail before any replicate runs
    model_configs = {m: ModelConfig(kind=m, **(model_overrides or {})) for m in models}
    rows: list[dict] = []
    for rep in range(n_replicates):
        seed = sim_config.seed + rep
        ds = simulate_dataset(SimulationConfig(**{**sim_config.to_dict(), "seed": seed}))
        data = FitData.from_simulation(ds)
        for model in models:
            cfg = model_configs[model]
            scfg = SamplerConfig(**{**sampler_config.to_dict(), "seed": seed})
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    res = fit(data, cfg, scfg)
                rows.extend(_replicate_rows(rep, seed, model, res, ds))
            except Exception as exc:  # recorded, not fatal
                log.warning("replicate %d model %s failed: %s", rep, model, exc)
                rows.append(
                    {
                        "replicate": rep,
                        "seed": seed,
                        "model": model,
                        "parameter": "error",
                        "group": None,
                        "subject_id": None,
                        "estimate": math.nan,
                        "true_value": None,
                        "converged": False,
                    }
                )
            log.info("replicate %d/%d model %s done", rep + 1, n_replicates, model)
    return ComparisonReport(rows, n_replicates, tuple(models))

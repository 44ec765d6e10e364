from __future__ import annotations

import numpy as np
import pytest
from scipy import special, stats

from conftest import toy_spec
from sdme.model import ModelConfig, ModelSpec
from sdme.sampler import (
    SamplerConfig,
    SamplerError,
    Target,
    ess_and_mcse,
    ess_bulk,
    ess_tail,
    run_chains,
    split_rhat,
    warmup_windows,
)
from sdme.sampler.diagnostics import DiagnosticError, diagnose, split_rhat_reason
from sdme.sampler.init import InitError, initialize
from sdme.spatial import build_voronoi_adjacency, regular_grid
from targets import beta_15_15_logit, box_wall, gaussian_precision, nowhere, std_normal

NO_DATA = (np.zeros(1),)


def _identity(x):
    return x


class _UniformInit:
    def __init__(self, dim):
        self.dim = dim

    def __call__(self, rng):
        return rng.uniform(-2, 2, self.dim)


def _target(f, dim, data=NO_DATA, constrain=_identity):
    return Target(f, data, dim, [f"p{i}" for i in range(dim)], constrain, _UniformInit(dim))


@pytest.fixture(scope="module")
def normal_run():
    return run_chains(_target(std_normal, 10), SamplerConfig(n_chains=4, n_iter=2000, n_warmup=1000, thin=1, seed=3))


class TestCalibration:
    def test_standard_normal_moments(self, normal_run):
        pd = normal_run
        dg = pd.diagnostics()
        x = pd.draws.reshape(-1, 10)
        assert np.all(np.abs(x.mean(0)) < 3 * dg.mcse_mean)
        assert np.all(np.abs(x.var(0) - 1) < 0.1)
        assert dg.rhat.max() < 1.01
        assert pd.divergence_rate < 0.01

    def test_beta_via_logit(self):
        pd = run_chains(
            _target(beta_15_15_logit, 1, constrain=special.expit),
            SamplerConfig(n_chains=4, n_iter=3000, n_warmup=1000, thin=1, seed=5),
        )
        dg = pd.diagnostics()
        s = pd.draws.ravel()
        assert abs(s.mean() - 0.5) < 3 * dg.mcse_mean[0]
        assert s.var() == pytest.approx(stats.beta.var(15, 15), rel=0.1)
        assert dg.rhat.max() < 1.01

    def test_correlated_normal(self):
        P = np.linalg.inv(np.array([[1.0, 0.9], [0.9, 1.0]]))
        pd = run_chains(_target(gaussian_precision, 2, (P,)), SamplerConfig(n_chains=4, n_iter=3000, n_warmup=1000, thin=1, seed=7))
        x = pd.draws.reshape(-1, 2)
        assert np.corrcoef(x.T)[0, 1] == pytest.approx(0.9, abs=0.05)

    def test_kolmogorov_smirnov_on_effective_draws(self):
        pd = run_chains(_target(std_normal, 1), SamplerConfig(n_chains=4, n_iter=13000, n_warmup=1000, thin=1, seed=11))
        x = pd.draws[:, :, 0]
        step = max(1, int(np.ceil(x.size / ess_bulk(x))))
        sub = x[:, ::step].ravel()
        assert len(sub) >= 10_000
        assert stats.kstest(sub, "norm").pvalue > 0.01

    def test_prior_only_model_reproduces_prior_moments(self):
        # exercises every Jacobian on the phi / tau path
        g = build_voronoi_adjacency(regular_grid(3))
        empty = np.zeros(0)
        spec = ModelSpec(
            ModelConfig(kind="naive", noncentered=True), np.ones((9, 1)), g, np.full(9, np.nan),
            empty.astype(int), empty.astype(int), obs_yhat=empty,
        )
        from sdme.inference import make_target

        pd = run_chains(make_target(spec, "prior-jitter"), SamplerConfig(n_chains=4, n_iter=4000, n_warmup=1000, thin=1, seed=1))
        dg = pd.diagnostics()
        k_phi, k_tau = pd.names.index("phi"), pd.names.index("tau_u")
        phi_mean = stats.truncnorm.mean(-2.0, 8.0, loc=20, scale=5)
        assert abs(pd.flat("phi").mean() - phi_mean) < 4 * dg.mcse_mean[k_phi]
        log_tau = np.log(pd.draws[:, :, k_tau])
        _, _, mcse = ess_and_mcse(log_tau)
        assert abs(log_tau.mean() - (special.digamma(0.1) - np.log(0.1))) < 4 * mcse


class TestBookkeeping:
    def test_retained_draw_count(self):
        cfg = SamplerConfig(n_chains=2, n_iter=307, n_warmup=100, thin=3, seed=0)
        pd = run_chains(_target(std_normal, 3), cfg)
        assert pd.draws.shape == (2, (307 - 100) // 3, 3)
        assert pd.lp.shape == pd.divergent.shape == (2, 69)

    def test_determinism(self):
        cfg = SamplerConfig(n_chains=2, n_iter=300, n_warmup=150, thin=1, seed=9)
        a = run_chains(_target(std_normal, 4), cfg)
        b = run_chains(_target(std_normal, 4), cfg)
        assert np.array_equal(a.draws, b.draws)

    def test_parallel_chains_match_serial(self, monkeypatch):
        cfg = SamplerConfig(n_chains=2, n_iter=200, n_warmup=100, thin=1, seed=2)
        serial = run_chains(_target(std_normal, 3), cfg)
        monkeypatch.setenv("SDME_THREADS", "2")
        par = run_chains(_target(std_normal, 3), cfg)
        assert np.array_equal(serial.draws, par.draws)

    def test_unpicklable_target_falls_back_to_serial(self, monkeypatch):
        cfg = SamplerConfig(n_chains=2, n_iter=100, n_warmup=50, thin=1, seed=2)
        t = Target(std_normal, NO_DATA, 2, ["a", "b"], lambda x: x, _UniformInit(2))
        serial = run_chains(t, cfg)
        monkeypatch.setenv("SDME_THREADS", "2")
        assert np.array_equal(run_chains(t, cfg).draws, serial.draws)

    def test_seed_changes_draws(self):
        a = run_chains(_target(std_normal, 2), SamplerConfig(n_chains=1, n_iter=100, n_warmup=50, seed=1))
        b = run_chains(_target(std_normal, 2), SamplerConfig(n_chains=1, n_iter=100, n_warmup=50, seed=2))
        assert not np.array_equal(a.draws, b.draws)

    def test_warmup_windows(self):
        start, ends = warmup_windows(4000)
        assert start == 75 and ends[0] == 100 and ends[-1] == 3950
        sizes = np.diff([start, *ends])
        assert np.all(sizes[1:-1] == 2 * sizes[:-2])
        assert warmup_windows(10) == (10, [])

    @pytest.mark.parametrize(
        "kw", [{"n_iter": 10, "n_warmup": 10}, {"thin": 0}, {"n_chains": 0}, {"target_accept": 1.0}]
    )
    def test_config_validation(self, kw):
        with pytest.raises(SamplerError):
            SamplerConfig(**kw)


class TestFailureModes:
    def test_no_finite_start(self):
        with pytest.raises(SamplerError, match="100 attempts"):
            run_chains(_target(nowhere, 2), SamplerConfig(n_chains=1, n_iter=10, n_warmup=5))

    def test_divergence_warning(self):
        t = Target(box_wall, NO_DATA, 10, [f"p{i}" for i in range(10)], lambda x: x, lambda r: r.uniform(-0.5, 0.5, 10))
        with pytest.warns(RuntimeWarning, match="diverged"):
            pd = run_chains(t, SamplerConfig(n_chains=1, n_iter=100, n_warmup=0, thin=1))
        assert pd.divergence_rate > 0.2


class TestDiagnostics:
    def test_iid_rhat_and_ess(self):
        x = np.random.default_rng(0).normal(size=(4, 2500))
        assert split_rhat(x) < 1.01
        assert ess_bulk(x) == pytest.approx(x.size, rel=0.1)
        assert ess_tail(x) == pytest.approx(x.size, rel=0.15)

    def test_separated_chains(self):
        rng = np.random.default_rng(1)
        x = np.vstack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
        assert split_rhat(x) > 1.1

    def test_constant_draws_are_undefined(self):
        x = np.ones((2, 100))
        r, why = split_rhat_reason(x)
        assert np.isnan(r) and why == "constant draws"
        dg = diagnose(["c"], x[:, :, None])
        assert dg.reasons == {"c": "constant draws"}
        assert dg.as_dict()["parameters"]["c"]["rhat"] is None

    def test_too_few_draws(self):
        with pytest.raises(DiagnosticError):
            split_rhat(np.zeros((2, 3)))

    def test_ar1_ess(self):
        rng = np.random.default_rng(2)
        n, rho = 20000, 0.9
        x = np.empty((4, n))
        for c in range(4):
            e = rng.normal(size=n)
            x[c, 0] = e[0] / np.sqrt(1 - rho**2)
            for t in range(1, n):
                x[c, t] = rho * x[c, t - 1] + e[t]
        ratio = ess_bulk(x) / x.size
        assert ratio == pytest.approx((1 - rho) / (1 + rho), rel=0.25)

    def test_mcse_is_calibrated(self):
        rng = np.random.default_rng(3)
        z = []
        for _ in range(100):
            e = rng.normal(size=(2, 1001))
            x = e[:, 1:] + 0.5 * e[:, :-1]  # MA(1): autocorrelated, mean 0
            _, _, mcse = ess_and_mcse(x)
            z.append(x.mean() / mcse)
        assert np.std(z) == pytest.approx(1.0, abs=0.2)

    def test_rhat_lower_bound_and_ess_upper_bound(self, normal_run):
        dg = normal_run.diagnostics()
        assert np.all(dg.rhat > 1 - 1e-3)
        assert np.all(dg.ess_bulk <= 3 * dg.n_draws)


class TestInitialize:
    def test_data_informed_is_finite_and_repeatable(self):
        from sdme.inference import FitData, build_spec
        from sdme.simulate import SimulationConfig, simulate_dataset

        spec = build_spec(FitData.from_simulation(simulate_dataset(SimulationConfig(seed=0))), ModelConfig(kind="sdme"))
        a = initialize(spec, np.random.default_rng(4), "data-informed")
        b = initialize(spec, np.random.default_rng(4), "data-informed")
        assert np.array_equal(a, b)
        assert np.isfinite(spec.log_density(a)[0])

    def test_weighted_init_has_valid_shapes(self, rng):
        spec = toy_spec("weighted")
        theta = initialize(spec, rng)
        assert spec.shape_faults(theta) == 0

    def test_prior_centres_inside_unit_interval(self, rng):
        spec = toy_spec("sdme")
        cons = spec.constrain(initialize(spec, rng, jitter=0.0))[0]
        names = spec.constrained_names()
        se = cons[[k for k, n in enumerate(names) if n.startswith(("se[", "sp["))]]
        assert np.all((se > 0) & (se < 1))

    def test_unknown_strategy(self, rng):
        with pytest.raises(InitError):
            initialize(toy_spec("naive"), rng, "oracle")

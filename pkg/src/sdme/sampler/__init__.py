"""No-U-turn sampling, adaptation and convergence diagnostics."""

from .core import PosteriorDraws, SamplerConfig, SamplerError, Target, run_chains, warmup_windows
from .diagnostics import Diagnostics, diagnose, ess_and_mcse, ess_bulk, ess_tail, split_rhat

__all__ = [
    "PosteriorDraws",
    "SamplerConfig",
    "SamplerError",
    "Target",
    "run_chains",
    "warmup_windows",
    "Diagnostics",
    "diagnose",
    "ess_and_mcse",
    "ess_bulk",
    "ess_tail",
    "split_rhat",
    "initialize",
]


def __getattr__(name):
    # model-aware initialisation imports the model module lazily
    if name == "initialize":
        from .init import initialize

        return initialize
    raise AttributeError(name)

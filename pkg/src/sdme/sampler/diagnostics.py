"""Rank-normalised split R-hat, bulk/tail ESS and Monte Carlo standard errors.

Inputs are arrays of shape ``(chains, draws)``. Undefined values (constant
draws, too few draws) are returned as NaN together with a reason string.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

__all__ = ["split_rhat", "ess_bulk", "ess_tail", "ess_mean", "ess_and_mcse", "Diagnostics", "diagnose"]


class DiagnosticError(ValueError):
    pass


def _check(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DiagnosticError("draws must have shape (chains, draws)")
    if x.shape[1] < 4:
        raise DiagnosticError("need at least 4 draws per chain")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, -half:]])


def _undefined(x: np.ndarray) -> str | None:
    if not np.all(np.isfinite(x)):
        return "non-finite draws"
    if np.ptp(x) == 0:
        return "constant draws"
    return None


def _rank_normalise(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat_raw(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def split_rhat(x) -> float:
    """max(bulk, folded) rank-normalised split R-hat; NaN if undefined."""
    return split_rhat_reason(x)[0]


def split_rhat_reason(x) -> tuple[float, str | None]:
    x = _check(x)
    reason = _undefined(x)
    if reason:
        return float("nan"), reason
    s = _split(x)
    if s.shape[0] < 2:
        return float("nan"), "fewer than 2 split chains"
    bulk = _rhat_raw(_rank_normalise(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_raw(_rank_normalise(folded)) if np.ptp(folded) > 0 else bulk
    return max(bulk, tail), None


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[1]
    c = x - x.mean(axis=1, keepdims=True)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(c, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def _ess_raw(x: np.ndarray) -> float:
    """ESS with Geyer's initial monotone positive sequence, pooled over chains."""
    m, n = x.shape
    if np.ptp(x) == 0:
        return float("nan")
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = np.empty(n)
    rho[0] = 1.0
    mean_acov = acov.mean(axis=0)
    rho[1:] = 1.0 - (w - mean_acov[1:]) / var_plus
    # sum adjacent pairs while positive
    t = 0
    pair_sums = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pair_sums.append(p)
        t += 2
    pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_bulk(x) -> float:
    x = _check(x)
    if _undefined(x):
        return float("nan")
    return _ess_raw(_rank_normalise(_split(x)))


def ess_tail(x) -> float:
    x = _check(x)
    if _undefined(x):
        return float("nan")
    s = _split(x)
    out = []
    for q in (0.05, 0.95):
        ind = (s <= np.quantile(s, q)).astype(float)
        out.append(_ess_raw(ind) if np.ptp(ind) > 0 else float("nan"))
    return float(np.nanmin(out)) if not np.all(np.isnan(out)) else float("nan")


def ess_mean(x) -> float:
    x = _check(x)
    if _undefined(x):
        return float("nan")
    return _ess_raw(_split(x))


def ess_and_mcse(x) -> tuple[float, float, float]:
    """(bulk ESS, tail ESS, MCSE of the mean)."""
    x = _check(x)
    sd = float(np.std(x, ddof=1))
    e = ess_mean(x)
    mcse = sd / np.sqrt(e) if np.isfinite(e) else (0.0 if sd == 0 else float("nan"))
    return ess_bulk(x), ess_tail(x), mcse


@dataclass
class Diagnostics:
    names: list[str]
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    mcse_mean: np.ndarray
    n_divergent: int
    n_draws: int
    reasons: dict[str, str] = field(default_factory=dict)

    def max_rhat(self, names=None) -> float:
        idx = range(len(self.names)) if names is None else [self.names.index(n) for n in names]
        vals = self.rhat[list(idx)]
        vals = vals[np.isfinite(vals)]
        return float(vals.max()) if len(vals) else float("nan")

    def as_dict(self) -> dict:
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "n_divergent": int(self.n_divergent),
            "n_draws": int(self.n_draws),
            "parameters": {
                n: {
                    "rhat": clean(self.rhat[k]),
                    "ess_bulk": clean(self.ess_bulk[k]),
                    "ess_tail": clean(self.ess_tail[k]),
                    "mcse_mean": clean(self.mcse_mean[k]),
                    **({"undefined": self.reasons[n]} if n in self.reasons else {}),
                }
                for k, n in enumerate(self.names)
            },
        }


def diagnose(names, draws: np.ndarray, n_divergent: int = 0) -> Diagnostics:
    """Diagnostics for every column of ``draws`` (chains, draws, parameters)."""
    n_par = draws.shape[2]
    rh = np.empty(n_par)
    eb = np.empty(n_par)
    et = np.empty(n_par)
    mc = np.empty(n_par)
    reasons = {}
    for k in range(n_par):
        x = draws[:, :, k]
        rh[k], why = split_rhat_reason(x)
        if why:
            reasons[names[k]] = why
        eb[k], et[k], mc[k] = ess_and_mcse(x)
    return Diagnostics(list(names), rh, eb, et, mc, int(n_divergent), int(draws.shape[0] * draws.shape[1]), reasons)

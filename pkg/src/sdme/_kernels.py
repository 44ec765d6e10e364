"""Compiled log-density and gradient for the hierarchical beta models.

All three model kinds share one kernel so that a single compiled function
serves the sampler. The kernel reads everything from a flat tuple built by
:func:`sdme.model.ModelSpec.kernel_data`; index constants below name the
slots of the integer and float option arrays.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# iopt slots
I_KIND, I_P, I_M, I_NFREE = 0, 1, 2, 3
I_OFF_B, I_OFF_S, I_OFF_LOGTAU, I_OFF_PHI = 4, 5, 6, 7
I_OFF_E, I_OFF_LOGSIG, I_OFF_Y, I_NLAT = 8, 9, 10, 11
I_OFF_SE, I_OFF_SP, I_OFF_ACC, I_NSUB = 12, 13, 14, 15
I_LIK, I_NONCENTERED, I_USE_KNOWN, I_DIM = 16, 17, 18, 19
N_IOPT = 20

# fopt slots
F_PHI_LO, F_PHI_HI, F_PHI_MEAN, F_PHI_SD, F_PHI_LOGZ = 0, 1, 2, 3, 4
F_TAU_SHAPE, F_TAU_RATE, F_KAPPA, F_SIGMA_E_SCALE = 5, 6, 7, 8
N_FOPT = 9

KIND_SDME, KIND_WEIGHTED, KIND_NAIVE = 0, 1, 2
LIK_BINOMIAL, LIK_BETA = 0, 1

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@njit(cache=True, error_model="numpy")
def digamma(x):
    r = 0.0
    while x < 6.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    t = f * (-1.0 / 12 + f * (1.0 / 120 + f * (-1.0 / 252 + f * (1.0 / 240 + f * (-1.0 / 132)))))
    return r + math.log(x) - 0.5 / x + t


@njit(cache=True, error_model="numpy")
def log_sigmoid(x):
    # log(1 / (1 + exp(-x))) without overflow
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True, error_model="numpy")
def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy")
def lbeta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@njit(cache=True, error_model="numpy")
def beta_lpdf_parts(logx, log1mx, a, b):
    """log Beta(x | a, b) and its partials in a and b."""
    lp = (a - 1.0) * logx + (b - 1.0) * log1mx - lbeta(a, b)
    dab = digamma(a + b)
    return lp, dab - digamma(a) + logx, dab - digamma(b) + log1mx


@njit(cache=True, error_model="numpy")
def beta_lpdf_sum(logx, log1mx, a, b, lg_ab, dg_ab):
    """:func:`beta_lpdf_parts` with ``lgamma(a + b)`` and ``digamma(a + b)`` supplied."""
    lp = (a - 1.0) * logx + (b - 1.0) * log1mx - math.lgamma(a) - math.lgamma(b) + lg_ab
    return lp, dg_ab - digamma(a) + logx, dg_ab - digamma(b) + log1mx


@njit(cache=True, error_model="numpy")
def sum_to_zero(v, out, start, size):
    """Isometric map from ``size - 1`` free values onto a zero-sum block.

    Writes ``out[start:start + size]``; columns of the implied basis are
    orthonormal, so the map has a constant Jacobian.
    """
    n = size - 1
    acc = 0.0
    for i in range(size):
        out[start + i] = 0.0
    for i in range(n, 0, -1):
        w = v[i - 1] / math.sqrt(i * (i + 1.0))
        acc += w
        out[start + i - 1] += acc
        out[start + i] -= w * i


@njit(cache=True, error_model="numpy")
def sum_to_zero_grad(gz, start, size, gv, vstart):
    """Transpose of :func:`sum_to_zero` applied to ``gz[start:start+size]``."""
    n = size - 1
    csum = 0.0
    for k in range(1, n + 1):
        csum += gz[start + k - 1]
        gv[vstart + k - 1] += (csum - k * gz[start + k]) / math.sqrt(k * (k + 1.0))



@njit(cache=True, error_model="numpy")
def _evaluate(theta, data, want_grad):
    (
        iopt,
        fopt,
        X,
        b_mean,
        b_sd,
        edge_a,
        edge_b,
        comp_ptr,
        comp_members,
        known_site,
        known_logy,
        known_log1my,
        lat_site,
        obs_sub,
        obs_site,
        obs_k,
        obs_q,
        obs_lbinom,
        obs_logyhat,
        obs_log1myhat,
        pa1,
        pb1,
        pa2,
        pb2,
        se_fixed,
        sp_fixed,
    ) = data

    kind = iopt[I_KIND]
    p = iopt[I_P]
    m = iopt[I_M]
    nsub = iopt[I_NSUB]
    dim = iopt[I_DIM]

    grad = np.zeros(dim)
    lp = 0.0
    faults = 0

    # regression coefficients
    ob = iopt[I_OFF_B]
    for k in range(p):
        z = (theta[ob + k] - b_mean[k]) / b_sd[k]
        lp += -0.5 * z * z - math.log(b_sd[k]) - LOG_SQRT_2PI
        grad[ob + k] -= z / b_sd[k]

    # spatial effects: free values -> zero-sum field per component
    otau = iopt[I_OFF_LOGTAU]
    os_ = iopt[I_OFF_S]
    noncentered = iopt[I_NONCENTERED] == 1
    zfield = np.zeros(m)
    u = np.zeros(m)
    tau = 1.0
    logtau = 0.0
    scale = 1.0
    if otau >= 0:
        logtau = theta[otau]
        tau = math.exp(logtau)
        shape = fopt[F_TAU_SHAPE]
        rate = fopt[F_TAU_RATE]
        # Gamma(shape, rate) on tau plus log-Jacobian of tau = exp(logtau)
        lp += shape * math.log(rate) - math.lgamma(shape) + shape * logtau - rate * tau
        grad[otau] += shape - rate * tau
        vpos = os_
        for c in range(len(comp_ptr) - 1):
            size = comp_ptr[c + 1] - comp_ptr[c]
            if size < 2:
                continue
            buf = np.empty(size)
            sum_to_zero(theta[vpos : vpos + size - 1], buf, 0, size)
            for r in range(size):
                zfield[comp_members[comp_ptr[c] + r]] = buf[r]
            vpos += size - 1
        if noncentered:
            scale = 1.0 / math.sqrt(tau)
        for j in range(m):
            u[j] = zfield[j] * scale

    # unstructured noise, non-centred
    oe = iopt[I_OFF_E]
    osig = iopt[I_OFF_LOGSIG]
    sig = 0.0
    if oe >= 0:
        logsig = theta[osig]
        sig = math.exp(logsig)
        s0 = fopt[F_SIGMA_E_SCALE]
        # half-normal(0, s0) on sigma plus log-Jacobian
        lp += math.log(2.0) - LOG_SQRT_2PI - math.log(s0) - 0.5 * (sig / s0) ** 2 + logsig
        grad[osig] += 1.0 - (sig / s0) ** 2
        for j in range(m):
            e = theta[oe + j]
            lp += -0.5 * e * e - LOG_SQRT_2PI
            grad[oe + j] -= e

    # linear predictor
    mu = np.empty(m)
    for j in range(m):
        s = u[j]
        if oe >= 0:
            s += sig * theta[oe + j]
        for k in range(p):
            s += X[j, k] * theta[ob + k]
        mu[j] = sigmoid(s)
    g_mu = np.zeros(m)
    g_phi = 0.0

    # precision on [lo, hi], truncated-normal prior
    oph = iopt[I_OFF_PHI]
    lo = fopt[F_PHI_LO]
    hi = fopt[F_PHI_HI]
    eta = theta[oph]
    sg = sigmoid(eta)
    phi = lo + (hi - lo) * sg
    zphi = (phi - fopt[F_PHI_MEAN]) / fopt[F_PHI_SD]
    lp += -0.5 * zphi * zphi - math.log(fopt[F_PHI_SD]) - LOG_SQRT_2PI - fopt[F_PHI_LOGZ]
    g_phi -= zphi / fopt[F_PHI_SD]
    lp += math.log(hi - lo) + log_sigmoid(eta) + log_sigmoid(-eta)
    grad[oph] += 1.0 - 2.0 * sg

    lg_phi = math.lgamma(phi)
    dg_phi = digamma(phi)

    # latent proportions: known sites enter as data, latent sites as parameters
    y = np.zeros(m)
    g_y = np.zeros(m)
    if kind == KIND_SDME or iopt[I_USE_KNOWN] == 1:
        for r in range(len(known_site)):
            j = known_site[r]
            a = mu[j] * phi
            b = phi - a
            t, da, db = beta_lpdf_sum(known_logy[r], known_log1my[r], a, b, lg_phi, dg_phi)
            lp += t
            g_mu[j] += phi * (da - db)
            g_phi += mu[j] * da + (1.0 - mu[j]) * db
            y[j] = math.exp(known_logy[r])
    oy = iopt[I_OFF_Y]
    nlat = iopt[I_NLAT]
    if oy >= 0:
        for r in range(nlat):
            j = lat_site[r]
            ey = theta[oy + r]
            ly = log_sigmoid(ey)
            l1 = log_sigmoid(-ey)
            a = mu[j] * phi
            b = phi - a
            t, da, db = beta_lpdf_sum(ly, l1, a, b, lg_phi, dg_phi)
            # density plus log-Jacobian of the logit transform
            lp += t + ly + l1
            g_mu[j] += phi * (da - db)
            g_phi += mu[j] * da + (1.0 - mu[j]) * db
            yv = sigmoid(ey)
            grad[oy + r] += a * (1.0 - yv) - b * yv
            y[j] = yv

    # annotator performance and its beta priors
    ose = iopt[I_OFF_SE]
    osp = iopt[I_OFF_SP]
    oacc = iopt[I_OFF_ACC]
    perf1 = np.ones(nsub)
    perf2 = np.ones(nsub)
    g_p1 = np.zeros(nsub)
    g_p2 = np.zeros(nsub)
    if kind == KIND_SDME and ose >= 0:
        for i in range(nsub):
            e1 = theta[ose + i]
            e2 = theta[osp + i]
            perf1[i] = sigmoid(e1)
            perf2[i] = sigmoid(e2)
            lp += (pa1[i]) * log_sigmoid(e1) + (pb1[i]) * log_sigmoid(-e1) - lbeta(pa1[i], pb1[i])
            lp += (pa2[i]) * log_sigmoid(e2) + (pb2[i]) * log_sigmoid(-e2) - lbeta(pa2[i], pb2[i])
    elif kind == KIND_SDME:
        for i in range(nsub):
            perf1[i] = se_fixed[i]
            perf2[i] = sp_fixed[i]
    elif kind == KIND_WEIGHTED:
        for i in range(nsub):
            e1 = theta[oacc + i]
            perf1[i] = sigmoid(e1)
            lp += (pa1[i]) * log_sigmoid(e1) + (pb1[i]) * log_sigmoid(-e1) - lbeta(pa1[i], pb1[i])

    # observation layer
    nobs = len(obs_sub)
    if kind == KIND_SDME:
        lik = iopt[I_LIK]
        kappa = fopt[F_KAPPA]
        lg_k = math.lgamma(kappa)
        dg_k = digamma(kappa)
        for o in range(nobs):
            i = obs_sub[o]
            j = obs_site[o]
            se = perf1[i]
            sp = perf2[i]
            yv = y[j]
            pr = yv * se + (1.0 - yv) * (1.0 - sp)
            onem = yv * (1.0 - se) + (1.0 - yv) * sp
            if lik == LIK_BINOMIAL:
                k = obs_k[o]
                q = obs_q[o]
                lp += obs_lbinom[o] + k * math.log(pr) + (q - k) * math.log(onem)
                dp = k / pr - (q - k) / onem
            else:
                t, da, db = beta_lpdf_sum(obs_logyhat[o], obs_log1myhat[o], pr * kappa, onem * kappa, lg_k, dg_k)
                lp += t
                dp = kappa * (da - db)
            g_p1[i] += dp * yv
            g_p2[i] -= dp * (1.0 - yv)
            g_y[j] += dp * (se + sp - 1.0)
    else:
        for o in range(nobs):
            i = obs_sub[o]
            j = obs_site[o]
            w = 1.0 / perf1[i]
            a = mu[j] * phi * w
            b = phi - a
            if b <= 0.0:
                faults += 1
                continue
            t, da, db = beta_lpdf_sum(obs_logyhat[o], obs_log1myhat[o], a, b, lg_phi, dg_phi)
            lp += t
            g_mu[j] += (da - db) * phi * w
            g_phi += da * mu[j] * w + db * (1.0 - mu[j] * w)
            # d a / d acc = -mu phi / acc^2
            g_p1[i] -= (da - db) * mu[j] * phi * w * w


    # ICAR pairwise differences on the zero-sum field
    g_z = np.zeros(m)
    if otau >= 0:
        pen = 0.0
        for e in range(len(edge_a)):
            a_ = edge_a[e]
            b_ = edge_b[e]
            d = zfield[a_] - zfield[b_]
            pen += d * d
            g_z[a_] -= d
            g_z[b_] += d
        if noncentered:
            # u = z / sqrt(tau): the tau terms of the ICAR density cancel the Jacobian
            lp += -0.5 * pen
        else:
            nfree = iopt[I_NFREE]
            lp += 0.5 * nfree * logtau - 0.5 * tau * pen
            grad[otau] += 0.5 * nfree - 0.5 * tau * pen
            for j in range(m):
                g_z[j] *= tau

    if faults > 0:
        return -np.inf, grad, faults
    if not want_grad:
        return lp, grad, faults

    # ---- chain rule back to the unconstrained coordinates
    if oy >= 0:
        for r in range(nlat):
            j = lat_site[r]
            yv = y[j]
            grad[oy + r] += g_y[j] * yv * (1.0 - yv)
    if kind == KIND_SDME and ose >= 0:
        for i in range(nsub):
            s1 = perf1[i]
            s2 = perf2[i]
            grad[ose + i] += g_p1[i] * s1 * (1.0 - s1) + pa1[i] * (1.0 - s1) - pb1[i] * s1
            grad[osp + i] += g_p2[i] * s2 * (1.0 - s2) + pa2[i] * (1.0 - s2) - pb2[i] * s2
    elif kind == KIND_WEIGHTED:
        for i in range(nsub):
            s1 = perf1[i]
            grad[oacc + i] += g_p1[i] * s1 * (1.0 - s1) + pa1[i] * (1.0 - s1) - pb1[i] * s1

    grad[oph] += g_phi * (hi - lo) * sg * (1.0 - sg)

    g_lin = np.empty(m)
    for j in range(m):
        g_lin[j] = g_mu[j] * mu[j] * (1.0 - mu[j])
    for k in range(p):
        s = 0.0
        for j in range(m):
            s += X[j, k] * g_lin[j]
        grad[ob + k] += s
    if oe >= 0:
        gs = 0.0
        for j in range(m):
            grad[oe + j] += g_lin[j] * sig
            gs += g_lin[j] * theta[oe + j]
        grad[osig] += gs * sig

    if otau >= 0:
        if noncentered:
            gl = 0.0
            for j in range(m):
                g_z[j] += g_lin[j] * scale
                gl += g_lin[j] * u[j]
            grad[otau] += -0.5 * gl
        else:
            for j in range(m):
                g_z[j] += g_lin[j]
        vpos = os_
        for c in range(len(comp_ptr) - 1):
            size = comp_ptr[c + 1] - comp_ptr[c]
            if size < 2:
                continue
            buf = np.empty(size)
            for r in range(size):
                buf[r] = g_z[comp_members[comp_ptr[c] + r]]
            sum_to_zero_grad(buf, 0, size, grad, vpos)
            vpos += size - 1
    return lp, grad, faults


@njit(cache=True, error_model="numpy")
def log_density_grad(theta, data):
    lp, grad, _ = _evaluate(theta, data, True)
    return lp, grad


@njit(cache=True, error_model="numpy")
def log_density_faults(theta, data):
    lp, _, faults = _evaluate(theta, data, False)
    return lp, faults

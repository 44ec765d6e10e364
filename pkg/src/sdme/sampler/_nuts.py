"""Compiled no-U-turn transition with multinomial trajectory sampling.

The tree is built iteratively: each doubling extends the trajectory by a
subtree of ``2**depth`` leapfrog steps, and U-turns inside the subtree are
detected on the fly with the checkpoint scheme of iterative NUTS (momentum
and running momentum sums stored at even leaves, checked at odd leaves).
"""

from __future__ import annotations

import functools
import math

import numpy as np
from numba import njit

MAX_ENERGY_ERROR = 1000.0


@njit(cache=True, error_model="numpy")
def seed_numba(seed):
    np.random.seed(seed)


@njit(cache=True, error_model="numpy")
def _popcount(n):
    c = 0
    while n:
        c += n & 1
        n >>= 1
    return c


@njit(cache=True, error_model="numpy")
def _trailing_ones(n):
    c = 0
    while n & 1:
        c += 1
        n >>= 1
    return c


@njit(cache=True, error_model="numpy")
def _is_turning(m_inv, r_left, r_right, r_sum):
    s_l = 0.0
    s_r = 0.0
    for k in range(len(r_sum)):
        rs = r_sum[k] - 0.5 * (r_left[k] + r_right[k])
        s_l += m_inv[k] * r_left[k] * rs
        s_r += m_inv[k] * r_right[k] * rs
    return s_l <= 0.0 or s_r <= 0.0


@njit(cache=True, error_model="numpy")
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@functools.lru_cache(maxsize=None)
def make_transition(logp_grad):
    """Compile one NUTS transition for a jitted ``logp_grad(theta, data) -> (lp, grad)``."""

    @njit(error_model="numpy")
    def kinetic(r, m_inv):
        s = 0.0
        for k in range(len(r)):
            s += m_inv[k] * r[k] * r[k]
        return 0.5 * s

    @njit(error_model="numpy")
    def transition(theta0, lp0, grad0, eps, m_inv, max_depth, data):
        dim = len(theta0)
        r0 = np.empty(dim)
        for k in range(dim):
            r0[k] = np.random.standard_normal() / math.sqrt(m_inv[k])
        h0 = -lp0 + kinetic(r0, m_inv)

        # trajectory ends
        th_l = theta0.copy()
        r_l = r0.copy()
        g_l = grad0.copy()
        th_r = theta0.copy()
        r_r = r0.copy()
        g_r = grad0.copy()
        # current proposal
        th_p = theta0.copy()
        g_p = grad0.copy()
        lp_p = lp0
        logw = 0.0
        r_sum = r0.copy()

        r_ckpts = np.zeros((max_depth + 1, dim))
        rs_ckpts = np.zeros((max_depth + 1, dim))
        # subtree scratch
        th = np.empty(dim)
        r = np.empty(dim)
        g = np.empty(dim)
        sub_th = np.empty(dim)
        sub_g = np.empty(dim)
        sub_rsum = np.empty(dim)

        sum_accept = 0.0
        n_leap = 0
        diverged = False
        depth = 0
        while depth < max_depth:
            forward = np.random.random() < 0.5
            step = eps if forward else -eps
            if forward:
                th[:] = th_r
                r[:] = r_r
                g[:] = g_r
            else:
                th[:] = th_l
                r[:] = r_l
                g[:] = g_l
            n_sub = 1 << depth
            sub_logw = -np.inf
            sub_lp = 0.0
            sub_rsum[:] = 0.0
            turned = False
            for n in range(n_sub):
                # leapfrog
                for k in range(dim):
                    r[k] += 0.5 * step * g[k]
                    th[k] += step * m_inv[k] * r[k]
                lp, gnew = logp_grad(th, data)
                g[:] = gnew
                for k in range(dim):
                    r[k] += 0.5 * step * g[k]
                n_leap += 1
                h = -lp + kinetic(r, m_inv)
                dh = h - h0
                if not math.isfinite(dh):
                    dh = np.inf
                if dh > MAX_ENERGY_ERROR:
                    diverged = True
                    break
                sum_accept += 1.0 if dh <= 0.0 else math.exp(-dh)
                leaf_w = -dh
                sub_logw = _logaddexp(sub_logw, leaf_w)
                if np.random.random() < math.exp(leaf_w - sub_logw):
                    sub_th[:] = th
                    sub_g[:] = g
                    sub_lp = lp
                for k in range(dim):
                    sub_rsum[k] += r[k]
                # U-turn checks inside the subtree
                if n % 2 == 0:
                    i_max = _popcount(n >> 1)
                    r_ckpts[i_max, :] = r
                    rs_ckpts[i_max, :] = sub_rsum
                else:
                    i_max = _popcount(n >> 1)
                    i_min = i_max - _trailing_ones(n) + 1
                    for i in range(i_max, i_min - 1, -1):
                        part = sub_rsum - rs_ckpts[i] + r_ckpts[i]
                        if _is_turning(m_inv, r_ckpts[i], r, part):
                            turned = True
                            break
                    if turned:
                        break
            if diverged or turned:
                break
            # biased progressive sampling between old tree and new subtree
            if np.random.random() < math.exp(min(0.0, sub_logw - logw)):
                th_p[:] = sub_th
                g_p[:] = sub_g
                lp_p = sub_lp
            logw = _logaddexp(logw, sub_logw)
            if forward:
                th_r[:] = th
                r_r[:] = r
                g_r[:] = g
            else:
                th_l[:] = th
                r_l[:] = r
                g_l[:] = g
            for k in range(dim):
                r_sum[k] += sub_rsum[k]
            depth += 1
            if _is_turning(m_inv, r_l, r_r, r_sum):
                break
        accept = sum_accept / max(n_leap, 1)
        return th_p, lp_p, g_p, accept, n_leap, depth, diverged

    return transition

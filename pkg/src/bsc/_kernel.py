"""Compiled log density and gradient for the flat parameter layout.

Mirrors ``model._evaluate_numpy`` loop for loop; the two are cross-checked in
the test suite.
"""

import math

import numpy as np
from numba import njit

# indices into the packed hyperparameter array
HP_FIELDS = ("delta_mu", "delta_sd", "k_mu", "k_sd", "alpha_mu", "alpha_sd", "b_mu", "b_sd",
             "gamma_sigma", "gamma_kappa", "gamma_beta")


def pack_hyper(h) -> np.ndarray:
    vals = [getattr(h, k) for k in HP_FIELDS]
    vals[-3:] = [math.log(x) for x in vals[-3:]]
    return np.array(vals, dtype=np.float64)


@njit(cache=True, inline="always")
def _half_cauchy(u, log_gamma):
    a = u - log_gamma
    x = 2.0 * a
    softplus = max(x, 0.0) + math.log1p(math.exp(-abs(x)))
    return u - softplus, -math.tanh(a)


# strict IEEE arithmetic: the result must not depend on the inlining context
@njit(cache=True)
def log_density(v, y, rows, cols, pmeans, inv_r2, hp, const, g, want_grad):
    T, J = y.shape
    L = pmeans.shape[1]
    n = rows.shape[0]
    oB = T * L
    oD = oB + J * L
    oK = oD + T
    oA = oK + J
    oKM = oA + n
    oKS = oKM + 1
    oBM = oKS + 1
    oBS = oBM + L
    oS = oBS + L
    delta_mu, delta_sd, k_mu, k_sd = hp[0], hp[1], hp[2], hp[3]
    alpha_mu, alpha_sd, b_mu, b_sd = hp[4], hp[5], hp[6], hp[7]
    lg_sigma, lg_kappa, lg_beta = hp[8], hp[9], hp[10]

    kappa_mu = v[oKM]
    log_kappa_sd = v[oKS]
    log_sigma = v[oS]
    bad = log_kappa_sd > 700.0 or log_sigma < -350.0 or log_sigma > 350.0
    for m in range(L):
        if v[oBS + m] > 700.0:
            bad = True
    if bad:
        if want_grad:
            g[:] = np.nan
        return -np.inf
    kappa_sd = math.exp(log_kappa_sd)
    inv_var = math.exp(-2.0 * log_sigma)

    # loadings stored transposed so inner loops run over societies contiguously
    BT = np.empty((L, J))
    beta_sd = np.empty(L)
    for m in range(L):
        beta_sd[m] = math.exp(v[oBS + m])
    for m in range(L):
        for j in range(J):
            BT[m, j] = v[oBM + m] + beta_sd[m] * v[oB + j * L + m]
    kappa = np.empty(J)
    for j in range(J):
        kappa[j] = kappa_mu + kappa_sd * v[oK + j]

    resid = np.empty((T, J))
    for t in range(T):
        dt = v[oD + t]
        for j in range(J):
            resid[t, j] = y[t, j] - dt - kappa[j]
        for m in range(L):
            f = v[t * L + m]
            for j in range(J):
                resid[t, j] -= f * BT[m, j]
    for k in range(n):
        resid[rows[k], cols[k]] -= v[oA + k]
    ss = 0.0
    for t in range(T):
        for j in range(J):
            ss += resid[t, j] * resid[t, j]
    lp = -T * J * log_sigma - 0.5 * ss * inv_var

    acc = 0.0
    for t in range(T):
        for m in range(L):
            z = v[t * L + m] - pmeans[t, m]
            acc += z * z * inv_r2[m]
    for t in range(T):
        z = (v[oD + t] - delta_mu) / delta_sd
        acc += z * z
    for k in range(n):
        z = (v[oA + k] - alpha_mu) / alpha_sd
        acc += z * z
    for j in range(J):
        acc += v[oK + j] * v[oK + j]
    for i in range(J * L):
        acc += v[oB + i] * v[oB + i]
    zk = (kappa_mu - k_mu) / k_sd
    acc += zk * zk
    for m in range(L):
        z = (v[oBM + m] - b_mu) / b_sd
        acc += z * z
    lp -= 0.5 * acc

    hs, dhs = _half_cauchy(log_sigma, lg_sigma)
    hk, dhk = _half_cauchy(log_kappa_sd, lg_kappa)
    lp += hs + hk + const
    for m in range(L):
        hb, _ = _half_cauchy(v[oBS + m], lg_beta)
        lp += hb

    if not math.isfinite(lp):
        if want_grad:
            g[:] = np.nan
        return -np.inf
    if not want_grad:
        return lp

    for t in range(T):
        for j in range(J):
            resid[t, j] *= inv_var
    G = resid
    # F
    for t in range(T):
        for m in range(L):
            s = 0.0
            for j in range(J):
                s += G[t, j] * BT[m, j]
            g[t * L + m] = s - (v[t * L + m] - pmeans[t, m]) * inv_r2[m]
    # loadings
    dBT = np.zeros((L, J))
    colsum = np.zeros(J)
    for t in range(T):
        for j in range(J):
            colsum[j] += G[t, j]
        for m in range(L):
            f = v[t * L + m]
            for j in range(J):
                dBT[m, j] += G[t, j] * f
    for m in range(L):
        g[oBM + m] = -(v[oBM + m] - b_mu) / (b_sd * b_sd)
        g[oBS + m] = 0.0
    for j in range(J):
        for m in range(L):
            braw = v[oB + j * L + m]
            g[oB + j * L + m] = dBT[m, j] * beta_sd[m] - braw
            g[oBM + m] += dBT[m, j]
            g[oBS + m] += dBT[m, j] * braw
    for m in range(L):
        _, dhb = _half_cauchy(v[oBS + m], lg_beta)
        g[oBS + m] = g[oBS + m] * beta_sd[m] + dhb
    # time and society effects
    total = 0.0
    dks = 0.0
    for t in range(T):
        s = 0.0
        for j in range(J):
            s += G[t, j]
        g[oD + t] = s - (v[oD + t] - delta_mu) / (delta_sd * delta_sd)
        total += s
    for j in range(J):
        g[oK + j] = colsum[j] * kappa_sd - v[oK + j]
        dks += colsum[j] * v[oK + j]
    for k in range(n):
        g[oA + k] = G[rows[k], cols[k]] - (v[oA + k] - alpha_mu) / (alpha_sd * alpha_sd)
    g[oKM] = total - zk / k_sd
    g[oKS] = dks * kappa_sd + dhk
    g[oS] = -T * J + ss * inv_var + dhs
    return lp

"""Pure-Python Gibbs chain kernels.

Fallback twin of the compiled module ``_chains_cy``. Both consume
pre-drawn standard-normal and Gamma(shape, 1) arrays, so for identical
inputs they produce bit-identical chains. Keep the arithmetic here in
exact lockstep with the .pyx file.

Conventions shared by all kernels:
  * ``nj``/``qbar``/``ssj`` are per-route signal counts, signal means and
    centered sums of squares; routes with ``nj == 0`` are allowed only
    where noted.
  * ``z`` holds standard normal draws, one row per iteration; ``g_*``
    hold Gamma(shape, 1) draws whose shape already includes the data
    counts, so an inverse-gamma draw with scale ``s`` is ``s / g``.
  * Draws with iteration index ``>= burnin`` are returned.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "hier_simple_chain",
    "hier_regression_chain",
    "independent_chain",
    "pooling_chain",
    "pooling_regression_chain",
]

IS_COMPILED = False


def hier_simple_chain(
    nj,
    qbar,
    ssj,
    mu_j_init,
    mu_init,
    sigma2_init,
    xi2_init,
    delta_sigma,
    mu0,
    sigma_mu2,
    delta_xi,
    z,
    g_sigma,
    g_xi,
    burnin,
):
    """Four-block cycle: route means, experience variance, grand mean,
    route heterogeneity. Routes with no signals draw from N(mu, xi2)."""
    total = g_sigma.shape[0]
    n_routes = nj.shape[0]
    kept = total - burnin
    mu_j = np.array(mu_j_init, dtype=np.float64)
    mu = float(mu_init)
    sigma2 = float(sigma2_init)
    xi2 = float(xi2_init)

    out_mu_j = np.empty((kept, n_routes))
    out_mu = np.empty(kept)
    out_sigma2 = np.empty(kept)
    out_xi2 = np.empty(kept)

    for it in range(total):
        for j in range(n_routes):
            if nj[j] > 0:
                denom = nj[j] * xi2 + sigma2
                mean = (nj[j] * xi2 * qbar[j] + sigma2 * mu) / denom
                var = xi2 * sigma2 / denom
            else:
                mean = mu
                var = xi2
            mu_j[j] = mean + math.sqrt(var) * z[it, j]

        resid = 0.0
        for j in range(n_routes):
            if nj[j] > 0:
                dev = qbar[j] - mu_j[j]
                resid += ssj[j] + nj[j] * dev * dev
        sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

        mu_bar = 0.0
        for j in range(n_routes):
            mu_bar += mu_j[j]
        mu_bar /= n_routes
        denom = n_routes * sigma_mu2 + xi2
        mean = (n_routes * sigma_mu2 * mu_bar + xi2 * mu0) / denom
        var = sigma_mu2 * xi2 / denom
        mu = mean + math.sqrt(var) * z[it, n_routes]

        spread = 0.0
        for j in range(n_routes):
            dev = mu_j[j] - mu
            spread += dev * dev
        xi2 = (delta_xi + 0.5 * spread) / g_xi[it]

        if it >= burnin:
            k = it - burnin
            out_mu_j[k, :] = mu_j
            out_mu[k] = mu
            out_sigma2[k] = sigma2
            out_xi2[k] = xi2

    return out_mu_j, out_mu, out_sigma2, out_xi2


def hier_regression_chain(
    nj,
    qbar,
    ssj,
    dist,
    theta_init,
    gamma_init,
    mu_init,
    sigma2_init,
    xi2_init,
    delta_sigma,
    mu0,
    sigma_mu2,
    delta_xi,
    gamma0,
    sigma_gamma2,
    z,
    g_sigma,
    g_xi,
    burnin,
):
    """Five-block cycle adding a distance slope: route intercepts, slope,
    experience variance, grand mean, heterogeneity."""
    total = g_sigma.shape[0]
    n_routes = nj.shape[0]
    kept = total - burnin
    theta = np.array(theta_init, dtype=np.float64)
    gamma = float(gamma_init)
    mu = float(mu_init)
    sigma2 = float(sigma2_init)
    xi2 = float(xi2_init)

    out_theta = np.empty((kept, n_routes))
    out_gamma = np.empty(kept)
    out_mu = np.empty(kept)
    out_sigma2 = np.empty(kept)
    out_xi2 = np.empty(kept)

    for it in range(total):
        for j in range(n_routes):
            if nj[j] > 0:
                gbar = qbar[j] - gamma * dist[j]
                denom = nj[j] * xi2 + sigma2
                mean = (nj[j] * xi2 * gbar + sigma2 * mu) / denom
                var = xi2 * sigma2 / denom
            else:
                mean = mu
                var = xi2
            theta[j] = mean + math.sqrt(var) * z[it, j]

        nd = 0.0
        gd = 0.0
        for j in range(n_routes):
            if nj[j] > 0:
                nd += nj[j] * dist[j] * dist[j]
                gd += dist[j] * nj[j] * (qbar[j] - theta[j])
        denom = nd * sigma_gamma2 + sigma2
        mean = (sigma_gamma2 * gd + sigma2 * gamma0) / denom
        var = sigma_gamma2 * sigma2 / denom
        gamma = mean + math.sqrt(var) * z[it, n_routes]

        resid = 0.0
        for j in range(n_routes):
            if nj[j] > 0:
                dev = qbar[j] - theta[j] - gamma * dist[j]
                resid += ssj[j] + nj[j] * dev * dev
        sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

        theta_bar = 0.0
        for j in range(n_routes):
            theta_bar += theta[j]
        theta_bar /= n_routes
        denom = n_routes * sigma_mu2 + xi2
        mean = (n_routes * sigma_mu2 * theta_bar + xi2 * mu0) / denom
        var = sigma_mu2 * xi2 / denom
        mu = mean + math.sqrt(var) * z[it, n_routes + 1]

        spread = 0.0
        for j in range(n_routes):
            dev = theta[j] - mu
            spread += dev * dev
        xi2 = (delta_xi + 0.5 * spread) / g_xi[it]

        if it >= burnin:
            k = it - burnin
            out_theta[k, :] = theta
            out_gamma[k] = gamma
            out_mu[k] = mu
            out_sigma2[k] = sigma2
            out_xi2[k] = xi2

    return out_theta, out_gamma, out_mu, out_sigma2, out_xi2


def independent_chain(
    nj,
    qbar,
    ssj,
    prior_mean,
    prior_var,
    mu_j_init,
    sigma2_init,
    delta_sigma,
    z,
    g_sigma,
    burnin,
):
    """Two-block cycle for independent learning: per-route conjugate means
    against fixed route priors, then a shared experience variance.

    Callers pass only routes with ``nj > 0``; unobserved routes keep
    their prior untouched and consume no randomness.
    """
    total = g_sigma.shape[0]
    n_routes = nj.shape[0]
    kept = total - burnin
    mu_j = np.array(mu_j_init, dtype=np.float64)
    sigma2 = float(sigma2_init)

    out_mu_j = np.empty((kept, n_routes))
    out_sigma2 = np.empty(kept)

    for it in range(total):
        for j in range(n_routes):
            denom = nj[j] * prior_var[j] + sigma2
            mean = (nj[j] * prior_var[j] * qbar[j] + sigma2 * prior_mean[j]) / denom
            var = prior_var[j] * sigma2 / denom
            mu_j[j] = mean + math.sqrt(var) * z[it, j]

        resid = 0.0
        for j in range(n_routes):
            dev = qbar[j] - mu_j[j]
            resid += ssj[j] + nj[j] * dev * dev
        sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

        if it >= burnin:
            k = it - burnin
            out_mu_j[k, :] = mu_j
            out_sigma2[k] = sigma2

    return out_mu_j, out_sigma2


def pooling_chain(
    n_total,
    q_pool,
    ss_pool,
    prior_mean,
    prior_var,
    mu_init,
    sigma2_init,
    delta_sigma,
    z,
    g_sigma,
    burnin,
):
    """Two-block cycle for full information pooling: one shared mean
    against all signals, plus the experience variance."""
    total = g_sigma.shape[0]
    kept = total - burnin
    mu = float(mu_init)
    sigma2 = float(sigma2_init)

    out_mu = np.empty(kept)
    out_sigma2 = np.empty(kept)

    for it in range(total):
        denom = n_total * prior_var + sigma2
        mean = (n_total * prior_var * q_pool + sigma2 * prior_mean) / denom
        var = prior_var * sigma2 / denom
        mu = mean + math.sqrt(var) * z[it]

        dev = q_pool - mu
        resid = ss_pool + n_total * dev * dev
        sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

        if it >= burnin:
            k = it - burnin
            out_mu[k] = mu
            out_sigma2[k] = sigma2

    return out_mu, out_sigma2


def pooling_regression_chain(
    nj,
    qbar,
    ssj,
    dist,
    theta_init,
    gamma_init,
    sigma2_init,
    prior_mean,
    prior_var,
    gamma0,
    sigma_gamma2,
    delta_sigma,
    z,
    g_sigma,
    burnin,
):
    """Three-block cycle for pooled learning with a distance slope.

    Only observed routes are passed (``nj > 0`` everywhere).
    """
    total = g_sigma.shape[0]
    n_routes = nj.shape[0]
    kept = total - burnin
    theta = float(theta_init)
    gamma = float(gamma_init)
    sigma2 = float(sigma2_init)

    n_total = 0.0
    for j in range(n_routes):
        n_total += nj[j]

    out_theta = np.empty(kept)
    out_gamma = np.empty(kept)
    out_sigma2 = np.empty(kept)

    for it in range(total):
        acc = 0.0
        for j in range(n_routes):
            acc += nj[j] * (qbar[j] - gamma * dist[j])
        g_pool = acc / n_total
        denom = n_total * prior_var + sigma2
        mean = (n_total * prior_var * g_pool + sigma2 * prior_mean) / denom
        var = prior_var * sigma2 / denom
        theta = mean + math.sqrt(var) * z[it, 0]

        nd = 0.0
        gd = 0.0
        for j in range(n_routes):
            nd += nj[j] * dist[j] * dist[j]
            gd += dist[j] * nj[j] * (qbar[j] - theta)
        denom = nd * sigma_gamma2 + sigma2
        mean = (sigma_gamma2 * gd + sigma2 * gamma0) / denom
        var = sigma_gamma2 * sigma2 / denom
        gamma = mean + math.sqrt(var) * z[it, 1]

        resid = 0.0
        for j in range(n_routes):
            dev = qbar[j] - theta - gamma * dist[j]
            resid += ssj[j] + nj[j] * dev * dev
        sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

        if it >= burnin:
            k = it - burnin
            out_theta[k] = theta
            out_gamma[k] = gamma
            out_sigma2[k] = sigma2

    return out_theta, out_gamma, out_sigma2

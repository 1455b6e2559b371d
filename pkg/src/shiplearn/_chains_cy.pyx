# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Gibbs chain kernels.

Twin of ``_chains_py``: identical block order and arithmetic, so both
produce bit-identical chains from the same pre-drawn randomness. Any
change here must be mirrored in the pure module.
"""

from libc.math cimport sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()

IS_COMPILED = True


def hier_simple_chain(
    double[::1] nj,
    double[::1] qbar,
    double[::1] ssj,
    double[::1] mu_j_init,
    double mu_init,
    double sigma2_init,
    double xi2_init,
    double delta_sigma,
    double mu0,
    double sigma_mu2,
    double delta_xi,
    double[:, ::1] z,
    double[::1] g_sigma,
    double[::1] g_xi,
    int burnin,
):
    cdef int total = g_sigma.shape[0]
    cdef int n_routes = nj.shape[0]
    cdef int kept = total - burnin
    cdef int it, j, k
    cdef double mu = mu_init
    cdef double sigma2 = sigma2_init
    cdef double xi2 = xi2_init
    cdef double denom, mean, var, resid, dev, mu_bar, spread

    mu_j_arr = np.array(mu_j_init, dtype=np.float64)
    cdef double[::1] mu_j = mu_j_arr

    out_mu_j_arr = np.empty((kept, n_routes))
    out_mu_arr = np.empty(kept)
    out_sigma2_arr = np.empty(kept)
    out_xi2_arr = np.empty(kept)
    cdef double[:, ::1] out_mu_j = out_mu_j_arr
    cdef double[::1] out_mu = out_mu_arr
    cdef double[::1] out_sigma2 = out_sigma2_arr
    cdef double[::1] out_xi2 = out_xi2_arr

    with nogil:
        for it in range(total):
            for j in range(n_routes):
                if nj[j] > 0:
                    denom = nj[j] * xi2 + sigma2
                    mean = (nj[j] * xi2 * qbar[j] + sigma2 * mu) / denom
                    var = xi2 * sigma2 / denom
                else:
                    mean = mu
                    var = xi2
                mu_j[j] = mean + sqrt(var) * z[it, j]

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
            mu = mean + sqrt(var) * z[it, n_routes]

            spread = 0.0
            for j in range(n_routes):
                dev = mu_j[j] - mu
                spread += dev * dev
            xi2 = (delta_xi + 0.5 * spread) / g_xi[it]

            if it >= burnin:
                k = it - burnin
                for j in range(n_routes):
                    out_mu_j[k, j] = mu_j[j]
                out_mu[k] = mu
                out_sigma2[k] = sigma2
                out_xi2[k] = xi2

    return out_mu_j_arr, out_mu_arr, out_sigma2_arr, out_xi2_arr


def hier_regression_chain(
    double[::1] nj,
    double[::1] qbar,
    double[::1] ssj,
    double[::1] dist,
    double[::1] theta_init,
    double gamma_init,
    double mu_init,
    double sigma2_init,
    double xi2_init,
    double delta_sigma,
    double mu0,
    double sigma_mu2,
    double delta_xi,
    double gamma0,
    double sigma_gamma2,
    double[:, ::1] z,
    double[::1] g_sigma,
    double[::1] g_xi,
    int burnin,
):
    cdef int total = g_sigma.shape[0]
    cdef int n_routes = nj.shape[0]
    cdef int kept = total - burnin
    cdef int it, j, k
    cdef double gamma = gamma_init
    cdef double mu = mu_init
    cdef double sigma2 = sigma2_init
    cdef double xi2 = xi2_init
    cdef double denom, mean, var, resid, dev, theta_bar, spread, gbar, nd, gd

    theta_arr = np.array(theta_init, dtype=np.float64)
    cdef double[::1] theta = theta_arr

    out_theta_arr = np.empty((kept, n_routes))
    out_gamma_arr = np.empty(kept)
    out_mu_arr = np.empty(kept)
    out_sigma2_arr = np.empty(kept)
    out_xi2_arr = np.empty(kept)
    cdef double[:, ::1] out_theta = out_theta_arr
    cdef double[::1] out_gamma = out_gamma_arr
    cdef double[::1] out_mu = out_mu_arr
    cdef double[::1] out_sigma2 = out_sigma2_arr
    cdef double[::1] out_xi2 = out_xi2_arr

    with nogil:
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
                theta[j] = mean + sqrt(var) * z[it, j]

            nd = 0.0
            gd = 0.0
            for j in range(n_routes):
                if nj[j] > 0:
                    nd += nj[j] * dist[j] * dist[j]
                    gd += dist[j] * nj[j] * (qbar[j] - theta[j])
            denom = nd * sigma_gamma2 + sigma2
            mean = (sigma_gamma2 * gd + sigma2 * gamma0) / denom
            var = sigma_gamma2 * sigma2 / denom
            gamma = mean + sqrt(var) * z[it, n_routes]

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
            mu = mean + sqrt(var) * z[it, n_routes + 1]

            spread = 0.0
            for j in range(n_routes):
                dev = theta[j] - mu
                spread += dev * dev
            xi2 = (delta_xi + 0.5 * spread) / g_xi[it]

            if it >= burnin:
                k = it - burnin
                for j in range(n_routes):
                    out_theta[k, j] = theta[j]
                out_gamma[k] = gamma
                out_mu[k] = mu
                out_sigma2[k] = sigma2
                out_xi2[k] = xi2

    return out_theta_arr, out_gamma_arr, out_mu_arr, out_sigma2_arr, out_xi2_arr


def independent_chain(
    double[::1] nj,
    double[::1] qbar,
    double[::1] ssj,
    double[::1] prior_mean,
    double[::1] prior_var,
    double[::1] mu_j_init,
    double sigma2_init,
    double delta_sigma,
    double[:, ::1] z,
    double[::1] g_sigma,
    int burnin,
):
    cdef int total = g_sigma.shape[0]
    cdef int n_routes = nj.shape[0]
    cdef int kept = total - burnin
    cdef int it, j, k
    cdef double sigma2 = sigma2_init
    cdef double denom, mean, var, resid, dev

    mu_j_arr = np.array(mu_j_init, dtype=np.float64)
    cdef double[::1] mu_j = mu_j_arr

    out_mu_j_arr = np.empty((kept, n_routes))
    out_sigma2_arr = np.empty(kept)
    cdef double[:, ::1] out_mu_j = out_mu_j_arr
    cdef double[::1] out_sigma2 = out_sigma2_arr

    with nogil:
        for it in range(total):
            for j in range(n_routes):
                denom = nj[j] * prior_var[j] + sigma2
                mean = (nj[j] * prior_var[j] * qbar[j] + sigma2 * prior_mean[j]) / denom
                var = prior_var[j] * sigma2 / denom
                mu_j[j] = mean + sqrt(var) * z[it, j]

            resid = 0.0
            for j in range(n_routes):
                dev = qbar[j] - mu_j[j]
                resid += ssj[j] + nj[j] * dev * dev
            sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

            if it >= burnin:
                k = it - burnin
                for j in range(n_routes):
                    out_mu_j[k, j] = mu_j[j]
                out_sigma2[k] = sigma2

    return out_mu_j_arr, out_sigma2_arr


def pooling_chain(
    double n_total,
    double q_pool,
    double ss_pool,
    double prior_mean,
    double prior_var,
    double mu_init,
    double sigma2_init,
    double delta_sigma,
    double[::1] z,
    double[::1] g_sigma,
    int burnin,
):
    cdef int total = g_sigma.shape[0]
    cdef int kept = total - burnin
    cdef int it, k
    cdef double mu = mu_init
    cdef double sigma2 = sigma2_init
    cdef double denom, mean, var, resid, dev

    out_mu_arr = np.empty(kept)
    out_sigma2_arr = np.empty(kept)
    cdef double[::1] out_mu = out_mu_arr
    cdef double[::1] out_sigma2 = out_sigma2_arr

    with nogil:
        for it in range(total):
            denom = n_total * prior_var + sigma2
            mean = (n_total * prior_var * q_pool + sigma2 * prior_mean) / denom
            var = prior_var * sigma2 / denom
            mu = mean + sqrt(var) * z[it]

            dev = q_pool - mu
            resid = ss_pool + n_total * dev * dev
            sigma2 = (delta_sigma + 0.5 * resid) / g_sigma[it]

            if it >= burnin:
                k = it - burnin
                out_mu[k] = mu
                out_sigma2[k] = sigma2

    return out_mu_arr, out_sigma2_arr


def pooling_regression_chain(
    double[::1] nj,
    double[::1] qbar,
    double[::1] ssj,
    double[::1] dist,
    double theta_init,
    double gamma_init,
    double sigma2_init,
    double prior_mean,
    double prior_var,
    double gamma0,
    double sigma_gamma2,
    double delta_sigma,
    double[:, ::1] z,
    double[::1] g_sigma,
    int burnin,
):
    cdef int total = g_sigma.shape[0]
    cdef int n_routes = nj.shape[0]
    cdef int kept = total - burnin
    cdef int it, j, k
    cdef double theta = theta_init
    cdef double gamma = gamma_init
    cdef double sigma2 = sigma2_init
    cdef double denom, mean, var, resid, dev, acc, g_pool, nd, gd
    cdef double n_total = 0.0

    for j in range(n_routes):
        n_total += nj[j]

    out_theta_arr = np.empty(kept)
    out_gamma_arr = np.empty(kept)
    out_sigma2_arr = np.empty(kept)
    cdef double[::1] out_theta = out_theta_arr
    cdef double[::1] out_gamma = out_gamma_arr
    cdef double[::1] out_sigma2 = out_sigma2_arr

    with nogil:
        for it in range(total):
            acc = 0.0
            for j in range(n_routes):
                acc += nj[j] * (qbar[j] - gamma * dist[j])
            g_pool = acc / n_total
            denom = n_total * prior_var + sigma2
            mean = (n_total * prior_var * g_pool + sigma2 * prior_mean) / denom
            var = prior_var * sigma2 / denom
            theta = mean + sqrt(var) * z[it, 0]

            nd = 0.0
            gd = 0.0
            for j in range(n_routes):
                nd += nj[j] * dist[j] * dist[j]
                gd += dist[j] * nj[j] * (qbar[j] - theta)
            denom = nd * sigma_gamma2 + sigma2
            mean = (sigma_gamma2 * gd + sigma2 * gamma0) / denom
            var = sigma_gamma2 * sigma2 / denom
            gamma = mean + sqrt(var) * z[it, 1]

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

    return out_theta_arr, out_gamma_arr, out_sigma2_arr

"""Compiled naive Bayes fit/score loops shared by the model and the conformal predictor.

Both code paths call the same kernels so that a model fitted through the
public API and one refit inside a transductive p-value computation produce
bit-identical nonconformity scores.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
RELATIVE_VARIANCE_FLOOR = 1e-9
ABSOLUTE_VARIANCE_FLOOR = 1e-12
POSTERIOR_FLOOR = 1e-300
MAX_NONCONFORMITY = -math.log(POSTERIOR_FLOOR)


@njit(cache=True)
def fit_kernel(X, y, n_classes, cat, n_cat, smoothing, abs_floor,
               priors, means, variances, tables, floor):
    """Fill the parameter arrays in place.  ``abs_floor <= 0`` selects the relative floor."""
    n, d = X.shape
    counts = np.zeros(n_classes)
    for i in range(n):
        counts[y[i]] += 1.0
    for c in range(n_classes):
        priors[c] = counts[c] / n
    sums = np.zeros(n_classes)
    n_obs = np.zeros(n_classes)
    sq = np.zeros(n_classes)
    for j in range(d):
        if cat[j]:
            k = n_cat[j]
            for c in range(n_classes):
                for q in range(tables.shape[2]):
                    tables[c, j, q] = 0.0
                n_obs[c] = 0.0
            for i in range(n):
                x = X[i, j]
                if not math.isnan(x):
                    tables[y[i], j, int(x)] += 1.0
                    n_obs[y[i]] += 1.0
            for c in range(n_classes):
                denom = n_obs[c] + smoothing * k
                for q in range(k):
                    tables[c, j, q] = (tables[c, j, q] + smoothing) / denom
                means[c, j] = 0.0
                variances[c, j] = 1.0
            floor[j] = 0.0
            continue

        g_sum = 0.0
        g_n = 0.0
        for c in range(n_classes):
            sums[c] = 0.0
            n_obs[c] = 0.0
            sq[c] = 0.0
        for i in range(n):
            x = X[i, j]
            if not math.isnan(x):
                g_sum += x
                g_n += 1.0
                sums[y[i]] += x
                n_obs[y[i]] += 1.0
        if g_n > 0:
            g_mean = g_sum / g_n
            g_sq = 0.0
            for i in range(n):
                x = X[i, j]
                if not math.isnan(x):
                    g_sq += (x - g_mean) * (x - g_mean)
            g_var = g_sq / g_n
        else:
            g_mean = 0.0
            g_var = 1.0
        if abs_floor > 0:
            f = abs_floor
        else:
            f = max(RELATIVE_VARIANCE_FLOOR * g_var, ABSOLUTE_VARIANCE_FLOOR)
        floor[j] = f
        for c in range(n_classes):
            if n_obs[c] > 0:
                means[c, j] = sums[c] / n_obs[c]
        for i in range(n):
            x = X[i, j]
            if not math.isnan(x):
                dev = x - means[y[i], j]
                sq[y[i]] += dev * dev
        for c in range(n_classes):
            if n_obs[c] > 0:
                v = sq[c] / n_obs[c]
            else:
                means[c, j] = g_mean
                v = g_var
            variances[c, j] = max(v, f)


@njit(cache=True)
def derive_kernel(priors, variances, tables, cat, n_cat, log_priors, log_norm, inv_two_var, log_cat):
    n_classes, d = variances.shape
    for c in range(n_classes):
        log_priors[c] = math.log(priors[c])
        for j in range(d):
            log_norm[c, j] = -0.5 * (LOG_2PI + math.log(variances[c, j]))
            inv_two_var[c, j] = 0.5 / variances[c, j]
            for q in range(tables.shape[2]):
                log_cat[c, j, q] = math.log(tables[c, j, q]) if (cat[j] and q < n_cat[j]) else 0.0


@njit(cache=True)
def log_joint_kernel(X, log_priors, means, log_norm, inv_two_var, log_cat, cat, n_cat, out):
    """``out[i, c] = log P(c) + sum_j log p(x_ij | c)``; missing or unseen values add nothing."""
    m, d = X.shape
    n_classes = log_priors.shape[0]
    for i in range(m):
        for c in range(n_classes):
            acc = 0.0
            for j in range(d):
                x = X[i, j]
                if math.isnan(x):
                    continue
                if cat[j]:
                    k = int(x)
                    if k >= 0 and k < n_cat[j] and k == x:
                        acc += log_cat[c, j, k]
                else:
                    diff = x - means[c, j]
                    acc += log_norm[c, j] - diff * diff * inv_two_var[c, j]
            out[i, c] = log_priors[c] + acc


@njit(cache=True)
def log_normalizer(s, i):
    """Row maximum and ``sum(exp(s - max))``, kept apart to avoid rounding
    ``max + log(total)`` when scores are huge in magnitude."""
    n_classes = s.shape[1]
    top = s[i, 0]
    for c in range(1, n_classes):
        if s[i, c] > top:
            top = s[i, c]
    total = 0.0
    for c in range(n_classes):
        total += math.exp(s[i, c] - top)
    return top, total


@njit(cache=True)
def nonconformity_kernel(s, labels, out):
    for i in range(s.shape[0]):
        top, total = log_normalizer(s, i)
        a = (top - s[i, labels[i]]) + math.log(total)
        out[i] = a if a < MAX_NONCONFORMITY else MAX_NONCONFORMITY


@njit(cache=True)
def posterior_kernel(s, out):
    for i in range(s.shape[0]):
        top, total = log_normalizer(s, i)
        for c in range(s.shape[1]):
            out[i, c] = math.exp(s[i, c] - top) / total


@njit(cache=True)
def transductive_counts_kernel(bag_X, bag_y, tests, n_classes, cat, n_cat, k_max,
                               smoothing, abs_floor, counts):
    """p-value numerators: for each test row and candidate label, refit on the
    augmented bag and count members at least as nonconforming as the test row."""
    nb, d = bag_X.shape
    n = nb + 1
    Xa = np.empty((n, d))
    ya = np.empty(n, dtype=np.int64)
    for i in range(nb):
        ya[i] = bag_y[i]
        for j in range(d):
            Xa[i, j] = bag_X[i, j]
    priors = np.empty(n_classes)
    means = np.empty((n_classes, d))
    variances = np.empty((n_classes, d))
    tables = np.empty((n_classes, d, k_max))
    floor = np.empty(d)
    log_priors = np.empty(n_classes)
    log_norm = np.empty((n_classes, d))
    inv_two_var = np.empty((n_classes, d))
    log_cat = np.empty((n_classes, d, k_max))
    s = np.empty((n, n_classes))
    alphas = np.empty(n)
    for t in range(tests.shape[0]):
        for j in range(d):
            Xa[n - 1, j] = tests[t, j]
        for c in range(n_classes):
            ya[n - 1] = c
            fit_kernel(Xa, ya, n_classes, cat, n_cat, smoothing, abs_floor,
                       priors, means, variances, tables, floor)
            derive_kernel(priors, variances, tables, cat, n_cat,
                          log_priors, log_norm, inv_two_var, log_cat)
            log_joint_kernel(Xa, log_priors, means, log_norm, inv_two_var, log_cat, cat, n_cat, s)
            nonconformity_kernel(s, ya, alphas)
            k = 0
            for i in range(n):
                if alphas[i] >= alphas[n - 1]:
                    k += 1
            counts[t, c] = k

"""Mixture fitting for the imputation schemes.

Diagonal-GMM EM, Lloyd's k-means, and a stochastic-EM fit of a discretized
logistic mixture, together with the masked component posteriors the samplers
condition on. Everything runs in float64 regardless of the input dtype.
"""

from __future__ import annotations

import logging

import numpy as np

from .params import (
    SCALE_FLOOR,
    VARIANCE_FLOOR,
    FitReport,
    GmmParams,
    LogisticsParams,
    ResampleTable,
)

log = logging.getLogger("lexsel.imputers")

_LOG_2PI = float(np.log(2.0 * np.pi))
# moment estimator: a logistic with scale s has standard deviation s*pi/sqrt(3)
_LOGISTIC_SD_TO_SCALE = float(np.sqrt(3.0) / np.pi)


def _as_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) matrix, got shape {x.shape}")
    return x


def _logsumexp_rows(a):
    hi = a.max(axis=1)
    out = hi + np.log(np.exp(a - hi[:, None]).sum(axis=1))
    # rows that are uniformly -inf stay -inf instead of producing nan
    return np.where(np.isfinite(hi), out, hi)


def _softmax_rows(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _gmm_masked_loglik(x, z, means, variances):
    """Per-row, per-component Gaussian log-density summed over observed coords.

    x: (n, d); z: (n, d) in {0,1} or None for fully observed. Returns (n, K).
    """
    diff = x[:, None, :] - means[None, :, :]
    ll = -0.5 * (diff * diff / variances[None] + np.log(variances)[None] + _LOG_2PI)
    if z is not None:
        ll = ll * z[:, None, :]
    return ll.sum(axis=2)


def gmm_component_posterior(params, x, z):
    """p(k | x restricted to the coordinates with z_d = 1).

    Accepts a single row (d,) or a batch (n, d); rows with no observed
    coordinate get the mixture weights verbatim.
    """
    single = np.asarray(x).ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if x2.shape != z2.shape or x2.shape[1] != params.n_features:
        raise ValueError("x and z must both be (n, d) with d matching the mixture")
    logp = _gmm_masked_loglik(x2, z2, params.means, params.variances)
    logp = logp + np.log(params.weights)[None, :]
    post = _softmax_rows(logp)
    none_observed = z2.sum(axis=1) == 0
    if np.any(none_observed):
        post[none_observed] = params.weights
    return post[0] if single else post


def _reseed_empty_gmm_components(means, variances, weights, empty, x, row_ll, report, iteration):
    """Move dead components onto the worst-explained row. Mutates in place."""
    order = np.argsort(row_ll)
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    for rank, k in enumerate(np.flatnonzero(empty)):
        i = int(order[rank % x.shape[0]])
        means[k] = x[i]
        variances[k] = global_var
        weights[k] = 1.0 / x.shape[0]
        report.reseeds.append({"iteration": int(iteration), "component": int(k), "row": i})
    weights /= weights.sum()


def fit_gmm_em(x, n_components, seed, max_iter=200, tol=1e-5, dequantize=False):
    """Diagonal-covariance EM. Returns (GmmParams, FitReport).

    The report's ll_trace holds the mean per-row log-likelihood of each EM
    iterate; it is non-decreasing apart from iterations that had to re-seed
    an empty component (those are recorded in report.reseeds).
    """
    x = _as_matrix(x)
    n, d = x.shape
    k = int(n_components)
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= n_components <= n rows, got K={k}, n={n}")
    rng = np.random.default_rng(seed)
    if dequantize:
        x = x + rng.random(x.shape)

    means = x[rng.choice(n, size=k, replace=False)].copy()
    variances = np.tile(np.maximum(x.var(axis=0), VARIANCE_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)
    report = FitReport(kind="gmm")

    prev_ll = -np.inf
    for it in range(max_iter):
        logp = _gmm_masked_loglik(x, None, means, variances) + np.log(weights)[None, :]
        row_ll = _logsumexp_rows(logp)
        resp = np.exp(logp - row_ll[:, None])
        nk = resp.sum(axis=0)

        empty = nk < 1e-8
        if np.any(empty):
            _reseed_empty_gmm_components(means, variances, weights, empty, x, row_ll, report, it)
            prev_ll = -np.inf
            continue

        ll = float(row_ll.mean())
        report.ll_trace.append(ll)
        if it > 0 and ll - prev_ll < tol:
            break
        prev_ll = ll

        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        ex2 = (resp.T @ (x * x)) / nk[:, None]
        variances = np.maximum(ex2 - means * means, VARIANCE_FLOOR)

    weights = weights / weights.sum()
    return GmmParams(weights, means, variances), report


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = x[rng.integers(n)]
            continue
        centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def assign_rows(centers, rows):
    """Nearest-center label for each row under the full Euclidean distance."""
    rows = _as_matrix(rows)
    d2 = ((rows[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def fit_kmeans(x, n_clusters, seed, max_iter=200):
    """Lloyd's iterations to an assignment fixpoint. Returns (centers, FitReport).

    report.wcss_trace is non-increasing except across an empty-cluster
    re-seed, which moves the cluster onto the point farthest from its center.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    k = int(n_clusters)
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= n_clusters <= n rows, got K={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    report = FitReport(kind="kmeans")

    prev_assign = None
    for it in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        nearest = d2[np.arange(n), assign]

        counts = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            order = np.argsort(-nearest)
            for rank, j in enumerate(empty):
                i = int(order[rank % n])
                centers[j] = x[i]
                report.reseeds.append({"iteration": it, "cluster": int(j), "row": i})
            prev_assign = None
            continue

        report.wcss_trace.append(float(nearest.sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        for j in range(k):
            centers[j] = x[assign == j].mean(axis=0)
        prev_assign = assign

    return centers, report


def build_resample_table(params, x_val):
    """table[k][i] proportional to the component-k density at validation row i."""
    x_val = _as_matrix(x_val)
    ll = _gmm_masked_loglik(x_val, None, params.means, params.variances).T  # (K, n_val)
    good = np.isfinite(ll.max(axis=1))
    table = np.empty_like(ll)
    if np.any(good):
        table[good] = _softmax_rows(ll[good])
    if np.any(~good):
        log.warning(
            "resample table: %d component(s) had no finite density on the "
            "validation set; falling back to uniform rows", int((~good).sum()),
        )
        table[~good] = 1.0 / x_val.shape[0]
    return ResampleTable(table)


def discretized_logistic_logpmf(x, mu, s, v_max=255):
    """log P(x) for a logistic(mu, s) binned onto the integer grid {0..v_max}.

    Interior bins integrate the density over [x-1/2, x+1/2); the edge bins
    absorb the tails, so the pmf telescopes to exactly 1 over the grid.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("scales must be positive")
    if np.any(x != np.round(x)) or np.any((x < 0) | (x > v_max)):
        raise ValueError(f"values must be integers in [0, {v_max}]")
    upper = _sigmoid((x + 0.5 - mu) / s)
    lower = _sigmoid((x - 0.5 - mu) / s)
    upper = np.where(x >= v_max, 1.0, upper)
    lower = np.where(x <= 0, 0.0, lower)
    return np.log(np.maximum(upper - lower, 1e-300))


def _sigmoid(a):
    out = np.multiply(a, 0.5)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def _logistic_masked_logpmf(x, z, params):
    """Summed log-pmf over observed coordinates, (n, K)."""
    lp = discretized_logistic_logpmf(
        x[:, None, :], params.centers[None], params.scales[None], params.v_max
    )
    if z is not None:
        lp = lp * z[:, None, :]
    return lp.sum(axis=2)


def logistic_component_posterior(params, x, z):
    """p(k | observed coordinates) under the discretized logistic mixture."""
    single = np.asarray(x).ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if x2.shape != z2.shape or x2.shape[1] != params.n_features:
        raise ValueError("x and z must both be (n, d) with d matching the mixture")
    # only observed coordinates enter, so off-grid values behind z_d = 0 are fine
    masked = np.where(z2 > 0, x2, 0.0)
    logp = _logistic_masked_logpmf(masked, z2, params) + np.log(params.weights)[None, :]
    post = _softmax_rows(logp)
    none_observed = z2.sum(axis=1) == 0
    if np.any(none_observed):
        post[none_observed] = params.weights
    return post[0] if single else post


def _moment_match_logistic(rows):
    mu = rows.mean(axis=0)
    s = np.maximum(rows.std(axis=0) * _LOGISTIC_SD_TO_SCALE, SCALE_FLOOR)
    return mu, s


def fit_logistics(x, n_components, seed, v_max=255, max_iter=100, tol=1e-4,
                  holdout_fraction=0.1):
    """Stochastic EM for the discretized logistic mixture on grid data.

    K-means supplies the initial centers; each epoch samples hard component
    assignments from the posterior and moment-matches centers and scales per
    component. The returned parameters are the epoch with the best training
    log-likelihood, so the fit never ends below its initialization.
    """
    x = _as_matrix(x)
    if np.any(x != np.round(x)) or np.any((x < 0) | (x > v_max)):
        raise ValueError(f"values must be integers in [0, {v_max}]")
    n = x.shape[0]
    k = int(n_components)
    n_distinct = np.unique(x, axis=0).shape[0]
    if k < 1 or k > n_distinct:
        raise ValueError(f"need 1 <= n_components <= distinct rows ({n_distinct}), got {k}")
    rng = np.random.default_rng(seed)

    n_hold = int(n * holdout_fraction) if n >= 20 else 0
    perm = rng.permutation(n)
    hold, train = x[perm[:n_hold]], x[perm[n_hold:]]
    n_tr = train.shape[0]

    centers, _ = fit_kmeans(train, k, rng)
    labels = assign_rows(centers, train)
    mu = np.empty((k, x.shape[1]))
    s = np.empty_like(mu)
    for j in range(k):
        rows = train[labels == j] if np.any(labels == j) else train
        mu[j], s[j] = _moment_match_logistic(rows)
    counts = np.maximum(np.bincount(labels, minlength=k), 1)
    w = counts / counts.sum()

    report = FitReport(kind="logistics")
    best = (-np.inf, w, mu, s)
    for epoch in range(max_iter):
        params = LogisticsParams(w, mu, s, v_max=v_max)
        logp = _logistic_masked_logpmf(train, None, params) + np.log(w)[None, :]
        ll = float(_logsumexp_rows(logp).mean())
        report.ll_trace.append(ll)
        if ll > best[0]:
            best = (ll, w, mu, s)

        post = _softmax_rows(logp)
        draws = rng.random(n_tr)
        labels = np.minimum((post.cumsum(axis=1) < draws[:, None]).sum(axis=1), k - 1)
        counts = np.bincount(labels, minlength=k)
        mu, s, w = mu.copy(), s.copy(), np.maximum(counts, 1) / n_tr
        w /= w.sum()
        worst = np.argsort(_logsumexp_rows(logp))
        for j in range(k):
            if counts[j] == 0:
                mu[j] = train[int(worst[j % n_tr])]
                s[j] = np.maximum(train.std(axis=0) * _LOGISTIC_SD_TO_SCALE, SCALE_FLOOR)
                report.reseeds.append({"iteration": epoch, "component": int(j)})
                continue
            mu[j], s[j] = _moment_match_logistic(train[labels == j])

        window = report.ll_trace[-10:]
        if len(window) == 10 and np.mean(window[5:]) - np.mean(window[:5]) < tol:
            break

    params = LogisticsParams(best[1], best[2], best[3], v_max=v_max)
    if n_hold:
        logp = _logistic_masked_logpmf(hold, None, params) + np.log(params.weights)[None, :]
        report.held_out_ll = float(_logsumexp_rows(logp).mean())
    return params, report

"""Conditional imputation schemes p(x_tilde | x, z).

Every scheme fills the coordinates with z_d = 0 and copies the observed
coordinates through bit-exactly. `impute_draws` exposes the underlying full
replacement row so callers can blend it with a relaxed mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fitting import (
    assign_rows,
    build_resample_table,
    discretized_logistic_logpmf,
    fit_gmm_em,
    fit_kmeans,
    fit_logistics,
    gmm_component_posterior,
    logistic_component_posterior,
)
from .params import FitReport, GmmParams, LogisticsParams, ResampleTable

KINDS = (
    "constant",
    "marginal",
    "gaussian_std",
    "gmm",
    "gmm_means",
    "gmm_dataset",
    "kmeans_dataset",
    "logistics",
    "logistics_means",
)
MIXTURE_KINDS = frozenset(
    {"gmm", "gmm_means", "gmm_dataset", "kmeans_dataset", "logistics", "logistics_means"}
)
VALIDATION_KINDS = frozenset({"marginal", "gmm_dataset", "kmeans_dataset"})
TRAIN_FIT_KINDS = MIXTURE_KINDS
DEFAULT_COMPONENTS = 10

SERIAL_VERSION = 1


class ImputerStateError(RuntimeError):
    """Raised when a scheme is sampled before its parameters were fitted."""


@dataclass(frozen=True)
class ImputerSpec:
    kind: str
    c: float | None = None
    n_components: int | None = None
    v_max: int = 255

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown imputer kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "constant":
            if self.c is None:
                raise ValueError("constant imputation requires c")
        elif self.c is not None:
            raise ValueError(f"c is only meaningful for kind 'constant', not {self.kind!r}")
        if self.n_components is not None:
            if self.kind not in MIXTURE_KINDS:
                raise ValueError(f"n_components does not apply to kind {self.kind!r}")
            if int(self.n_components) < 1:
                raise ValueError("n_components must be >= 1")

    def resolved_components(self):
        return DEFAULT_COMPONENTS if self.n_components is None else int(self.n_components)


@dataclass(frozen=True, eq=False)
class FittedImputer:
    """Immutable fitted state; safe to share across samplers with their own rngs."""

    spec: ImputerSpec
    gmm: GmmParams | None = None
    logistics: LogisticsParams | None = None
    centers: np.ndarray | None = None
    x_val: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    resample: ResampleTable | None = None
    report: FitReport | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("centers", "x_val"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)
        if self.val_labels is not None:
            labels = np.array(self.val_labels, dtype=np.int64)
            labels.flags.writeable = False
            object.__setattr__(self, "val_labels", labels)

    def _require(self, name):
        value = getattr(self, name)
        if value is None:
            raise ImputerStateError(
                f"imputer kind {self.spec.kind!r} needs fitted {name!r}; call fit_imputer first"
            )
        return value


def fit_imputer(spec, x_train=None, x_val=None, seed=0, max_iter=200, tol=1e-5,
                dequantize=False):
    """Fit whatever state the scheme needs and return an immutable FittedImputer.

    constant and gaussian_std need no data; marginal needs x_val only; the
    mixture and cluster kinds fit on x_train, with x_val additionally required
    by the dataset-resampling kinds.
    """
    kind = spec.kind
    report = FitReport(kind=kind)
    if kind in TRAIN_FIT_KINDS:
        if x_train is None:
            raise ValueError(f"kind {kind!r} requires x_train")
        x_train = np.asarray(x_train, dtype=np.float64)
    if kind in VALIDATION_KINDS:
        if x_val is None or np.asarray(x_val).shape[0] == 0:
            raise ValueError(f"kind {kind!r} requires a non-empty x_val")
        x_val = np.asarray(x_val, dtype=np.float64)

    if kind in ("constant", "gaussian_std"):
        return FittedImputer(spec, report=report)
    if kind == "marginal":
        return FittedImputer(spec, x_val=x_val, report=report)

    k = spec.resolved_components()
    if kind in ("gmm", "gmm_means", "gmm_dataset"):
        gmm, report = fit_gmm_em(x_train, k, seed, max_iter=max_iter, tol=tol,
                                 dequantize=dequantize)
        resample = build_resample_table(gmm, x_val) if kind == "gmm_dataset" else None
        return FittedImputer(spec, gmm=gmm, x_val=x_val, resample=resample, report=report)
    if kind == "kmeans_dataset":
        centers, report = fit_kmeans(x_train, k, seed, max_iter=max_iter)
        return FittedImputer(spec, centers=centers, x_val=x_val,
                             val_labels=assign_rows(centers, x_val), report=report)
    # logistics and logistics_means
    params, report = fit_logistics(x_train, k, seed, v_max=spec.v_max, max_iter=max_iter)
    return FittedImputer(spec, logistics=params, report=report)


def _categorical_rows(probs, u):
    """One index per row from row-wise probabilities, inverse-cdf on u in [0,1)."""
    k = probs.shape[1]
    return np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), k - 1)


def _check_xz(x, z):
    x = np.asarray(x)
    z = np.asarray(z)
    if x.ndim != 2 or x.shape != z.shape:
        raise ValueError(f"x and z must share a (n, d) shape, got {x.shape} and {z.shape}")
    zf = z.astype(np.float64, copy=False)
    if not np.all((zf == 0.0) | (zf == 1.0)):
        raise ValueError("z must be binary")
    return x, zf


def _sample_logistic_rows(params, comp, rng):
    u = np.clip(rng.random((comp.shape[0], params.n_features)), 1e-12, 1.0 - 1e-12)
    cont = params.centers[comp] + params.scales[comp] * (np.log(u) - np.log1p(-u))
    return np.clip(np.rint(cont), 0.0, float(params.v_max))


def _nearest_masked_center(centers, x, z, u_tie):
    """Index of the closest center over the observed coordinates; exact ties
    (any row with no observed coordinate, in particular) resolve uniformly."""
    d2 = ((x[:, None, :] - centers[None]) ** 2 * z[:, None, :]).sum(axis=2)
    best = d2.argmin(axis=1)
    low = d2.min(axis=1)
    tied = (d2 == low[:, None]).sum(axis=1) > 1
    for i in np.flatnonzero(tied):
        choices = np.flatnonzero(d2[i] == low[i])
        best[i] = choices[int(u_tie[i] * choices.size)]
    return best


def impute_draws(fitted, x, z, rng):
    """Full replacement rows (n, d) in float64; z only steers the conditioning.

    The caller blends these with the mask; coordinates that stay observed are
    drawn anyway so a relaxed mask can interpolate every coordinate.
    """
    x, z = _check_xz(x, z)
    spec = fitted.spec
    n, d = x.shape
    xf = x.astype(np.float64, copy=False)
    kind = spec.kind

    if kind == "constant":
        return np.full((n, d), float(spec.c))
    if kind == "gaussian_std":
        return rng.standard_normal((n, d))
    if kind == "marginal":
        x_val = fitted._require("x_val")
        return x_val[rng.integers(x_val.shape[0], size=n)]

    if kind in ("gmm", "gmm_means", "gmm_dataset"):
        gmm = fitted._require("gmm")
        post = gmm_component_posterior(gmm, xf, z)
        comp = _categorical_rows(post, rng.random(n))
        if kind == "gmm":
            return gmm.means[comp] + np.sqrt(gmm.variances[comp]) * rng.standard_normal((n, d))
        if kind == "gmm_means":
            return gmm.means[comp]
        table = fitted._require("resample").table
        x_val = fitted._require("x_val")
        rows = np.empty(n, dtype=np.int64)
        u = rng.random(n)
        for k in np.unique(comp):
            sel = comp == k
            rows[sel] = np.searchsorted(table[k].cumsum(), u[sel], side="right")
        return x_val[np.minimum(rows, x_val.shape[0] - 1)]

    if kind == "kmeans_dataset":
        centers = fitted._require("centers")
        x_val = fitted._require("x_val")
        labels = fitted._require("val_labels")
        cluster = _nearest_masked_center(centers, xf, z, rng.random(n))
        u = rng.random(n)
        rows = np.empty(n, dtype=np.int64)
        for k in np.unique(cluster):
            sel = cluster == k
            members = np.flatnonzero(labels == k)
            if members.size == 0:
                # a cluster may hold no validation rows; fall back to all of them
                rows[sel] = (u[sel] * x_val.shape[0]).astype(np.int64)
            else:
                rows[sel] = members[(u[sel] * members.size).astype(np.int64)]
        return x_val[rows]

    # logistics and logistics_means
    params = fitted._require("logistics")
    post = logistic_component_posterior(params, xf, z)
    comp = _categorical_rows(post, rng.random(n))
    if kind == "logistics_means":
        return params.centers[comp]
    return _sample_logistic_rows(params, comp, rng)


def impute(fitted, x, z, rng):
    """One imputation draw: x_tilde with x kept bit-exact wherever z_d = 1."""
    x = np.asarray(x)
    draws = impute_draws(fitted, x, z, rng).astype(x.dtype, copy=False)
    return np.where(np.asarray(z) != 0, x, draws)


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def imputer_to_json(fitted):
    spec = fitted.spec
    doc = {
        "version": SERIAL_VERSION,
        "kind": spec.kind,
        "c": spec.c,
        "n_components": spec.n_components,
        "v_max": spec.v_max,
        "centers": _arr(fitted.centers),
        "x_val": _arr(fitted.x_val),
        "val_labels": _arr(fitted.val_labels),
    }
    if fitted.gmm is not None:
        doc["gmm"] = {
            "weights": fitted.gmm.weights.tolist(),
            "means": fitted.gmm.means.tolist(),
            "variances": fitted.gmm.variances.tolist(),
        }
    if fitted.logistics is not None:
        doc["logistics"] = {
            "weights": fitted.logistics.weights.tolist(),
            "centers": fitted.logistics.centers.tolist(),
            "scales": fitted.logistics.scales.tolist(),
            "v_max": fitted.logistics.v_max,
        }
    if fitted.resample is not None:
        doc["resample"] = fitted.resample.table.tolist()
    if fitted.report is not None:
        doc["report"] = fitted.report.to_dict()
    return doc


def imputer_from_json(doc):
    if doc.get("version") != SERIAL_VERSION:
        raise ValueError(f"unsupported imputer document version {doc.get('version')!r}")
    spec = ImputerSpec(
        kind=doc["kind"],
        c=doc.get("c"),
        n_components=doc.get("n_components"),
        v_max=doc.get("v_max", 255),
    )
    gmm = None
    if doc.get("gmm") is not None:
        g = doc["gmm"]
        gmm = GmmParams(g["weights"], g["means"], g["variances"])
    logistics = None
    if doc.get("logistics") is not None:
        g = doc["logistics"]
        logistics = LogisticsParams(g["weights"], g["centers"], g["scales"],
                                    v_max=g.get("v_max", 255))
    resample = None
    if doc.get("resample") is not None:
        resample = ResampleTable(np.asarray(doc["resample"]))
    report = None
    if doc.get("report") is not None:
        report = FitReport(**doc["report"])
    return FittedImputer(
        spec,
        gmm=gmm,
        logistics=logistics,
        centers=doc.get("centers"),
        x_val=doc.get("x_val"),
        val_labels=doc.get("val_labels"),
        resample=resample,
        report=report,
    )


def save_imputer(path, fitted):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(imputer_to_json(fitted), fh)


def load_imputer(path):
    with open(path, encoding="utf-8") as fh:
        return imputer_from_json(json.load(fh))


def constant_imputer(c=0.0):
    """Shorthand for the ready-to-use constant scheme."""
    return fit_imputer(ImputerSpec("constant", c=float(c)))


def mask_dependent(spec):
    """True when the replacement distribution itself depends on z (the
    posterior-conditioned kinds), which rules out differentiating through it."""
    return spec.kind in ("gmm", "gmm_means", "gmm_dataset", "kmeans_dataset",
                         "logistics", "logistics_means")

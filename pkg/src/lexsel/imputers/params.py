"""Parameter containers for the conditional imputation schemes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANCE_FLOOR = 1e-4
SCALE_FLOOR = 1e-3

_SIMPLEX_TOL = 1e-8


def _frozen_f64(a, shape_hint=None):
    out = np.array(a, dtype=np.float64)
    if shape_hint is not None and out.ndim != shape_hint:
        raise ValueError(f"expected {shape_hint}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


def _check_simplex(w, what):
    if np.any(w < -_SIMPLEX_TOL) or abs(float(w.sum()) - 1.0) > _SIMPLEX_TOL:
        raise ValueError(f"{what} must form a probability simplex")


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Diagonal Gaussian mixture: weights (K,), means (K, D), variances (K, D)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_f64(self.weights, 1))
        object.__setattr__(self, "means", _frozen_f64(self.means, 2))
        object.__setattr__(self, "variances", _frozen_f64(self.variances, 2))
        _check_simplex(self.weights, "gmm weights")
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have equal shapes")
        if self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("component count mismatch")
        if np.any(self.variances < VARIANCE_FLOOR - 1e-12):
            raise ValueError(f"variances must stay at or above {VARIANCE_FLOOR}")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def n_features(self):
        return self.means.shape[1]


@dataclass(frozen=True, eq=False)
class LogisticsParams:
    """Mixture of per-dimension discretized logistics on the grid {0..v_max}."""

    weights: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    v_max: int = 255

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_f64(self.weights, 1))
        object.__setattr__(self, "centers", _frozen_f64(self.centers, 2))
        object.__setattr__(self, "scales", _frozen_f64(self.scales, 2))
        _check_simplex(self.weights, "logistics weights")
        if self.centers.shape != self.scales.shape:
            raise ValueError("centers and scales must have equal shapes")
        if self.centers.shape[0] != self.weights.shape[0]:
            raise ValueError("component count mismatch")
        if np.any(self.scales < SCALE_FLOOR - 1e-12):
            raise ValueError(f"scales must stay at or above {SCALE_FLOOR}")
        if int(self.v_max) < 1:
            raise ValueError("v_max must be a positive integer")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def n_features(self):
        return self.centers.shape[1]


@dataclass(frozen=True, eq=False)
class ResampleTable:
    """Per-component categorical distribution over validation rows, (K, n_val)."""

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", _frozen_f64(self.table, 2))
        if np.any(self.table < -_SIMPLEX_TOL):
            raise ValueError("resample probabilities must be non-negative")
        sums = self.table.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _SIMPLEX_TOL):
            raise ValueError("each component row must sum to 1")

    @property
    def n_components(self):
        return self.table.shape[0]


@dataclass
class FitReport:
    """Fitting diagnostics: per-iteration traces plus any re-seeding events."""

    kind: str
    ll_trace: list = field(default_factory=list)
    wcss_trace: list = field(default_factory=list)
    held_out_ll: float | None = None
    reseeds: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "kind": self.kind,
            "ll_trace": [float(v) for v in self.ll_trace],
            "wcss_trace": [float(v) for v in self.wcss_trace],
            "held_out_ll": None if self.held_out_ll is None else float(self.held_out_ll),
            "reseeds": list(self.reseeds),
            "notes": list(self.notes),
        }

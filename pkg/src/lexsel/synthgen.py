"""Synthetic binary-classification generators with per-instance ground
truth over which features matter.

Inputs are 11-dim iid standard normal. Each dataset mixes two branch
functions, switched on the sign of the last feature, and the label is
drawn with P(y=1 | x) = 1 / (1 + f(x)). The ground-truth mask of an
instance is the feature set of the branch it took, plus the switch
feature itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_FEATURES = 11
EXP_CLAMP = 30.0

DATASET_NAMES = ("S1", "S2", "S3")

# 0-indexed feature sets of each branch function; the switch feature
# (index 10) is appended to every ground-truth mask.
_BRANCH_FEATURES = {
    "A": (0, 1),
    "B": (2, 3, 4, 5),
    "C": (6, 7, 8, 9),
}

_DATASET_BRANCHES = {
    "S1": ("A", "B"),
    "S2": ("A", "C"),
    "S3": ("B", "C"),
}


def _clamped_exp(e):
    return np.exp(np.clip(e, -EXP_CLAMP, EXP_CLAMP))


def branch_a(x):
    """exp(x1 * x2)"""
    return _clamped_exp(x[:, 0] * x[:, 1])


def branch_b(x):
    """exp(sum of squares of x3..x6, minus 4)"""
    return _clamped_exp((x[:, 2:6] ** 2).sum(axis=1) - 4.0)


def branch_c(x):
    """exp(-10 sin(0.2 x7) + |x8| + x9 + exp(-x10) - 2.4)"""
    e = (-10.0 * np.sin(0.2 * x[:, 6]) + np.abs(x[:, 7]) + x[:, 8]
         + np.exp(-x[:, 9]) - 2.4)
    return _clamped_exp(e)


_BRANCH_FN = {"A": branch_a, "B": branch_b, "C": branch_c}


def switch_values(name: str, x: np.ndarray) -> np.ndarray:
    """f(x) for the named dataset: first branch where x11 < 0, second
    branch where x11 >= 0."""
    if name not in _DATASET_BRANCHES:
        raise ValueError(f"unknown dataset {name!r}; expected one of "
                         f"{DATASET_NAMES}")
    lo, hi = _DATASET_BRANCHES[name]
    take_hi = x[:, 10] >= 0
    out = _BRANCH_FN[lo](x)
    out[take_hi] = _BRANCH_FN[hi](x)[take_hi]
    return out


def posterior_y1(name: str, x: np.ndarray) -> np.ndarray:
    """P(y=1 | x) = 1 / (1 + f(x))."""
    return 1.0 / (1.0 + switch_values(name, x))


def ground_truth_mask(name: str, x: np.ndarray) -> np.ndarray:
    """Per-instance {0,1} mask of the features the label depends on."""
    if name not in _DATASET_BRANCHES:
        raise ValueError(f"unknown dataset {name!r}; expected one of "
                         f"{DATASET_NAMES}")
    lo, hi = _DATASET_BRANCHES[name]
    z = np.zeros((x.shape[0], N_FEATURES), dtype=np.int8)
    take_hi = x[:, 10] >= 0
    for idx in _BRANCH_FEATURES[lo]:
        z[~take_hi, idx] = 1
    for idx in _BRANCH_FEATURES[hi]:
        z[take_hi, idx] = 1
    z[:, 10] = 1
    return z


@dataclass
class Dataset:
    name: str
    seed: int
    x_train: np.ndarray
    y_train: np.ndarray
    z_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    z_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    z_test: np.ndarray

    def split(self, which: str):
        if which not in ("train", "val", "test"):
            raise ValueError(f"unknown split {which!r}")
        return (getattr(self, f"x_{which}"), getattr(self, f"y_{which}"),
                getattr(self, f"z_{which}"))

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


def gen_synthetic(name: str, n_train: int = 10000, n_test: int = 10000,
                  seed: int = 0, val_fraction: float = 0.2) -> Dataset:
    """Draw a full dataset. The validation rows are carved out of the
    training budget, so train+val == n_train."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((0x5E1EC7, seed)))
    n_total = n_train + n_test
    x = rng.standard_normal((n_total, N_FEATURES))
    p1 = posterior_y1(name, x)
    y = (rng.random(n_total) < p1).astype(np.int64)
    z = ground_truth_mask(name, x)
    n_val = int(round(n_train * val_fraction))
    n_tr = n_train - n_val
    sl_tr = slice(0, n_tr)
    sl_va = slice(n_tr, n_train)
    sl_te = slice(n_train, n_total)
    return Dataset(
        name=name, seed=seed,
        x_train=x[sl_tr], y_train=y[sl_tr], z_train=z[sl_tr],
        x_val=x[sl_va], y_val=y[sl_va], z_val=z[sl_va],
        x_test=x[sl_te], y_test=y[sl_te], z_test=z[sl_te],
    )


# -- CSV round-trip -------------------------------------------------------------

_X_COLS = [f"x{i}" for i in range(1, N_FEATURES + 1)]
_Z_COLS = [f"z{i}" for i in range(1, N_FEATURES + 1)]
HEADER = _X_COLS + ["y"] + _Z_COLS + ["split"]


def save_csv(dataset: Dataset, path):
    """Write all three splits to one CSV. Floats use 17 significant
    digits, which round-trips IEEE doubles exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for split in ("train", "val", "test"):
            x, y, z = dataset.split(split)
            for i in range(x.shape[0]):
                row = [f"{v:.17g}" for v in x[i]]
                row.append(str(int(y[i])))
                row.extend(str(int(b)) for b in z[i])
                row.append(split)
                writer.writerow(row)


def load_csv(path, name: str = "", seed: int = -1) -> Dataset:
    path = Path(path)
    xs = {"train": [], "val": [], "test": []}
    ys = {"train": [], "val": [], "test": []}
    zs = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != HEADER:
            raise ValueError(f"{path}: unexpected header {header[:4]}...")
        for row in reader:
            split = row[-1]
            if split not in xs:
                raise ValueError(f"{path}: unknown split label {split!r}")
            xs[split].append([float(v) for v in row[:N_FEATURES]])
            ys[split].append(int(row[N_FEATURES]))
            zs[split].append([int(v) for v in
                              row[N_FEATURES + 1:2 * N_FEATURES + 1]])

    def fx(key):
        return np.asarray(xs[key], dtype=np.float64).reshape(-1, N_FEATURES)

    def fz(key):
        return np.asarray(zs[key], dtype=np.int8).reshape(-1, N_FEATURES)

    def fy(key):
        return np.asarray(ys[key], dtype=np.int64)

    return Dataset(
        name=name or path.stem, seed=seed,
        x_train=fx("train"), y_train=fy("train"), z_train=fz("train"),
        x_val=fx("val"), y_val=fy("val"), z_val=fz("val"),
        x_test=fx("test"), y_test=fy("test"), z_test=fz("test"),
    )

"""Selection-quality metrics and the sweep harnesses built on them.

Metrics compare sampled masks against per-instance ground truth: the
three rates are averaged first over masks, then over instances, and
accuracy takes the argmax of mask-averaged class probabilities. Each
instance's mask and imputation noise is seeded from a hash of its own
feature row, so shuffling the test set cannot change the result.

The sweep drivers train one run per (preset, value, seed) cell, record
failures without stopping, and aggregate surviving seeds into one CSV
row per cell.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import lexmodel as lx
from . import maskdist as md
from . import synthgen as sg
from . import trainer as tr
from .imputers import FittedImputer, ImputerSpec, fit_imputer, impute
from .lexmodel import LexConfig

log = logging.getLogger(__name__)

CSV_COLUMNS = ("dataset", "preset", "rate_or_constant_or_lambda",
               "seed_count", "acc_mean", "acc_std", "tpr_mean", "tpr_std",
               "fpr_mean", "fpr_std", "fdr_mean", "fdr_std", "eff_rate_mean")

SWEEP_PRESETS = ("gaussian_std", "constant", "surrogate_constant")

# accuracy above the analytic ceiling by this much marks a run whose
# selector is smuggling label information through the mask itself
ENCODING_MARGIN = 0.05


@dataclass
class SelectionMetrics:
    tpr: float
    fpr: float
    fdr: float
    accuracy: float
    n_mask_samples: int
    per_mask_accuracy: float | None = None
    eff_rate: float | None = None
    encoding_flag: bool | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionMetrics":
        return cls(**d)


class TrainedModel(NamedTuple):
    lex: LexConfig
    theta: object
    gamma: object
    fitted: FittedImputer


def _binary(v, name):
    v = np.asarray(v)
    if not np.isin(v, (0, 1)).all():
        raise ValueError(f"{name} must be a binary vector")
    return v.astype(np.float64)


def mask_metrics(z, z_star):
    """(tpr, fpr, fdr) of one selection against one ground-truth mask.

    An empty selection discovers nothing, falsely or otherwise, so its
    fdr is 0; a denominator of zero in the other two rates reads the
    same way.
    """
    z = _binary(z, "z")
    zs = _binary(z_star, "z_star")
    if z.shape != zs.shape or z.ndim != 1:
        raise ValueError("z and z_star must be equal-length vectors")
    hit = float((z * zs).sum())
    sel = float(z.sum())
    pos = float(zs.sum())
    neg = float(len(zs) - pos)
    tpr = hit / pos if pos > 0 else 0.0
    fpr = (sel - hit) / neg if neg > 0 else 0.0
    fdr = (sel - hit) / sel if sel > 0 else 0.0
    return tpr, fpr, fdr


def _batch_metrics(hard, z_star):
    """Vectorized per-(instance, mask) rates; hard (B, M, D), z_star (B, D)."""
    zs = z_star[:, None, :]
    hit = (hard * zs).sum(axis=2)
    sel = hard.sum(axis=2)
    pos = zs.sum(axis=2)
    neg = hard.shape[2] - pos
    tpr = np.divide(hit, pos, out=np.zeros_like(hit), where=pos > 0)
    fpr = np.divide(sel - hit, neg, out=np.zeros_like(hit), where=neg > 0)
    fdr = np.divide(sel - hit, sel, out=np.zeros_like(hit), where=sel > 0)
    return tpr, fpr, fdr


def analytic_ceiling(name: str, x: np.ndarray) -> float:
    """Best possible accuracy on these rows under the generating law."""
    p = sg.posterior_y1(name, x)
    return float(np.maximum(p, 1.0 - p).mean())


def _ceiling_or_none(dataset) -> float | None:
    """Ceiling for datasets from the synthetic families, None otherwise.
    Replicate files carry names like s3_rep0, so match on the prefix."""
    family = dataset.name.upper().split("_")[0]
    if family not in sg.DATASET_NAMES:
        return None
    return analytic_ceiling(family, dataset.split("test")[0])


def _base_entropy(rng) -> int:
    if rng is None:
        return 0
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63))


def _row_rng(base: int, row: np.ndarray) -> np.random.Generator:
    digest = hashlib.blake2b(np.ascontiguousarray(row).tobytes(),
                             digest_size=8).digest()
    return np.random.default_rng(
        np.random.SeedSequence((base, int.from_bytes(digest, "little"))))


def evaluate_model(model: TrainedModel, test, n_masks: int = 100,
                   rng=0, *, chunk: int = 1000,
                   ceiling: float | None = None) -> SelectionMetrics:
    """Mask-sampled selection rates plus mask-averaged accuracy.

    test is the (x, y, z_star) triple of a held-out split. rng may be a
    Generator or an integer seed; each instance then draws its masks and
    imputation noise from a generator keyed on (that seed, a hash of the
    instance's features), which makes the result independent of row
    order. When a ceiling is given, accuracy exceeding it by more than
    ENCODING_MARGIN sets encoding_flag.
    """
    x, y, z_star = test
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    z_star = np.asarray(z_star, dtype=np.float64)
    n, d = x.shape
    spec = model.lex.mask_spec()
    base = _base_entropy(rng)

    tprs = np.empty(n)
    fprs = np.empty(n)
    fdrs = np.empty(n)
    hits = np.empty(n)
    mask_hits = np.empty(n)
    rate_sum = 0.0
    for start in range(0, n, chunk):
        xb = x[start:start + chunk]
        b = xb.shape[0]
        logits = lx.selector_logits(model.gamma, xb)
        hard = np.empty((b, n_masks, d))
        xt = np.empty((b * n_masks, d))
        for i in range(b):
            g = _row_rng(base, xb[i])
            sample = md.sample_masks(spec, logits[i:i + 1], n_masks, g)
            hard[i] = sample.hard[0]
            xt[i * n_masks:(i + 1) * n_masks] = impute(
                model.fitted, np.repeat(xb[i:i + 1], n_masks, axis=0),
                hard[i], g)
        tpr, fpr, fdr = _batch_metrics(hard, z_star[start:start + chunk])
        tprs[start:start + b] = tpr.mean(axis=1)
        fprs[start:start + b] = fpr.mean(axis=1)
        fdrs[start:start + b] = fdr.mean(axis=1)
        probs = lx._class_probs(model.theta, xt).reshape(b, n_masks, -1)
        yb = y[start:start + chunk]
        hits[start:start + b] = probs.mean(axis=1).argmax(axis=1) == yb
        mask_hits[start:start + b] = \
            (probs.argmax(axis=2) == yb[:, None]).mean(axis=1)
        rate_sum += float(md.expected_selection(spec, logits).sum()) / d

    acc = float(hits.mean())
    return SelectionMetrics(
        tpr=float(tprs.mean()), fpr=float(fprs.mean()),
        fdr=float(fdrs.mean()), accuracy=acc, n_mask_samples=n_masks,
        per_mask_accuracy=float(mask_hits.mean()),
        eff_rate=rate_sum / n,
        encoding_flag=None if ceiling is None
        else bool(acc > ceiling + ENCODING_MARGIN))


# -- sweep harness ---------------------------------------------------------------


def _preset_lex(lex: LexConfig, preset: str, constant: float) -> LexConfig:
    if preset == "gaussian_std":
        return dataclasses.replace(lex, imputer=ImputerSpec("gaussian_std"),
                                   regime="free_insitu")
    if preset == "constant":
        return dataclasses.replace(
            lex, imputer=ImputerSpec("constant", c=float(constant)),
            regime="free_insitu")
    if preset == "surrogate_constant":
        return dataclasses.replace(
            lex, imputer=ImputerSpec("constant", c=float(constant)),
            regime="fixed_theta_insitu")
    raise ValueError(f"unknown sweep preset {preset!r}; choose from "
                     f"{SWEEP_PRESETS}")


def _run_cell(args):
    """One (preset, value, seed) training-plus-evaluation cell.

    Module-level so worker processes can receive it; returns the cell
    key with either a metrics payload or a failure description.
    """
    (base, dataset, preset, value, seed, lex_cell, n_masks, eval_seed,
     ceiling, out_dir, surrogate_kwargs) = args
    key = {"preset": preset, "value": value, "seed": seed}
    try:
        cfg = dataclasses.replace(base, lex=lex_cell, seed=seed)
        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / f"{preset}_{value:g}_s{seed}"
        if preset == "surrogate_constant":
            _, _, record, theta, gamma = tr.surrogate_pipeline(
                cfg, dataset, out_dir=run_dir, **(surrogate_kwargs or {}))
            fitted = fit_imputer(lex_cell.imputer)
        else:
            fitted = fit_imputer(lex_cell.imputer)
            record, theta, gamma = tr.train(cfg, dataset, fitted,
                                            out_dir=run_dir)
        if record.aborted:
            return key, None, record, "numerical abort: " + json.dumps(
                record.diagnostics)
        model = TrainedModel(lex_cell, theta, gamma, fitted)
        metrics = evaluate_model(model, dataset.split("test"),
                                 n_masks=n_masks, rng=eval_seed,
                                 ceiling=ceiling)
        if run_dir is not None:
            (run_dir / "eval.json").write_text(
                json.dumps(metrics.to_dict(), indent=2))
        return key, metrics, record, None
    except Exception:
        return key, None, None, traceback.format_exc()


def _aggregate(dataset_name, results):
    """Fold per-cell outcomes into CSV rows plus a failure list."""
    cells = {}
    failures = []
    records = {}
    for key, metrics, record, err in results:
        tag = (key["preset"], key["value"])
        if err is not None:
            failures.append({**key, "error": err})
            if record is not None:
                records[(key["preset"], key["value"], key["seed"])] = record
            continue
        records[(key["preset"], key["value"], key["seed"])] = record
        cells.setdefault(tag, []).append(metrics)
    rows = []
    for (preset, value) in sorted(cells):
        ms = cells[(preset, value)]
        def stat(field):
            vals = np.asarray([getattr(m, field) for m in ms])
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            return float(vals.mean()), std
        acc, acc_s = stat("accuracy")
        tpr, tpr_s = stat("tpr")
        fpr, fpr_s = stat("fpr")
        fdr, fdr_s = stat("fdr")
        eff, _ = stat("eff_rate")
        rows.append({
            "dataset": dataset_name, "preset": preset,
            "rate_or_constant_or_lambda": value, "seed_count": len(ms),
            "acc_mean": acc, "acc_std": acc_s, "tpr_mean": tpr,
            "tpr_std": tpr_s, "fpr_mean": fpr, "fpr_std": fpr_s,
            "fdr_mean": fdr, "fdr_std": fdr_s, "eff_rate_mean": eff,
        })
    return rows, failures, records


def _execute(cells, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


def _finish(dataset, results, out_dir):
    rows, failures, records = _aggregate(dataset.name, results)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out_dir / "sweep.csv")
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2))
    return {"rows": rows, "failures": failures, "records": records}


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def sweep_rates(base: tr.TrainConfig, dataset, rates, seeds, *,
                presets=SWEEP_PRESETS, constant=0.0, n_masks=100,
                eval_seed=0, out_dir=None, jobs=1,
                surrogate_kwargs=None):
    """Full factorial over selection rate, seed and imputation preset.

    Rates must land on integer subset sizes for the dataset's width.
    """
    d = base.lex.n_features
    ks = []
    for rate in rates:
        k = round(rate * d)
        if abs(rate * d - k) > 1e-9 or not 1 <= k <= d:
            raise ValueError(f"rate {rate!r} does not give an integer "
                             f"subset size for {d} features")
        ks.append(k)
    ceiling = _ceiling_or_none(dataset)
    cells = []
    for rate, k in zip(rates, ks):
        for preset in presets:
            lex_cell = dataclasses.replace(
                _preset_lex(base.lex, preset, constant),
                selection="subset", k=k, lam=0.0)
            for seed in seeds:
                cells.append((base, dataset, preset, float(rate), seed,
                              lex_cell, n_masks, eval_seed, ceiling,
                              out_dir, surrogate_kwargs))
    return _finish(dataset, _execute(cells, jobs), out_dir)


def sweep_constant(base: tr.TrainConfig, dataset, constants, seeds, *,
                   presets=("constant", "surrogate_constant"), n_masks=100,
                   eval_seed=0, out_dir=None, jobs=1,
                   surrogate_kwargs=None):
    """Vary the imputation constant at the base config's fixed subset size."""
    if base.lex.selection != "subset":
        raise ValueError("constant sweep expects a subset-mode base config")
    ceiling = _ceiling_or_none(dataset)
    cells = []
    for c in constants:
        for preset in presets:
            if preset == "gaussian_std":
                raise ValueError("constant sweep varies constant-style "
                                 "presets only")
            lex_cell = _preset_lex(base.lex, preset, float(c))
            for seed in seeds:
                cells.append((base, dataset, preset, float(c), seed,
                              lex_cell, n_masks, eval_seed, ceiling,
                              out_dir, surrogate_kwargs))
    return _finish(dataset, _execute(cells, jobs), out_dir)


def sweep_lambda(base: tr.TrainConfig, dataset, lambdas, seeds, *,
                 n_masks=100, eval_seed=0, out_dir=None, jobs=1):
    """Sparsity-penalty sweep; reports the effective selection rate per λ.

    The base config must be in independent-gate mode with the density
    penalty. Adjacent aggregated rates that increase with λ are logged
    as warnings; hard ordering claims live with the callers.
    """
    if base.lex.selection != "bernoulli":
        raise ValueError("lambda sweep expects a bernoulli-mode base config")
    ceiling = _ceiling_or_none(dataset)
    preset = base.lex.imputer.kind
    cells = []
    for lam in lambdas:
        lex_cell = dataclasses.replace(base.lex, lam=float(lam))
        for seed in seeds:
            cells.append((base, dataset, preset, float(lam), seed,
                          lex_cell, n_masks, eval_seed, ceiling,
                          out_dir, None))
    out = _finish(dataset, _execute(cells, jobs), out_dir)
    check_rate_monotonicity(out["rows"])
    return out


def check_rate_monotonicity(rows):
    """Log every adjacent pair where the selection rate rises with the
    penalty; returns the offending (low, high) row pairs."""
    rows = sorted(rows, key=lambda r: r["rate_or_constant_or_lambda"])
    bad = []
    for lo, hi in zip(rows, rows[1:]):
        if hi["eff_rate_mean"] > lo["eff_rate_mean"] + 1e-12:
            bad.append((lo, hi))
            log.warning(
                "effective selection rate rose from %.4f to %.4f between "
                "lambda=%g and lambda=%g",
                lo["eff_rate_mean"], hi["eff_rate_mean"],
                lo["rate_or_constant_or_lambda"],
                hi["rate_or_constant_or_lambda"])
    return bad


__all__ = [
    "CSV_COLUMNS",
    "SWEEP_PRESETS",
    "ENCODING_MARGIN",
    "SelectionMetrics",
    "TrainedModel",
    "mask_metrics",
    "analytic_ceiling",
    "evaluate_model",
    "write_csv",
    "sweep_rates",
    "sweep_constant",
    "sweep_lambda",
    "check_rate_monotonicity",
]

"""Regime-aware training loops with reproducible named RNG streams.

One master seed is split into independent streams (init, shuffle, mask
noise, imputation noise, targets, surrogate, eval) so changing how many
draws one consumer takes never perturbs the others. Every run emits a
RunRecord holding the resolved configuration, per-epoch traces, final
metrics and parameter checksums; (seed, config) determines the record
bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import diffnet as dn
from . import lexmodel as lx
from . import maskdist as md
from ._backend import BACKEND
from .gradest import EstimatorConfig, MovingAverageBaseline, build_surrogate
from .imputers import FittedImputer, ImputerSpec, fit_imputer, impute
from .lexmodel import LexConfig, RegimeContext

STREAM_NAMES = ("init", "shuffle", "mask", "impute", "targets",
                "surrogate", "eval")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings around one LexConfig. The regime lives on
    the model config; defaults follow the standard protocol (Adam,
    lr 1e-4, weight decay 1e-3, batch 1000) at a desk-scale epoch count."""

    lex: LexConfig
    epochs: int = 200
    batch_size: int = 1000
    lr: float = 1e-4
    weight_decay: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0   # epochs between snapshots; 0 = final only
    selector_bias_init: float | None = None   # output-bias override at init

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def regime(self) -> str:
        return self.lex.regime


@dataclass
class RunRecord:
    """Everything one training run produced, JSON-serializable."""

    config: dict
    seed: int
    epoch_loss: list = field(default_factory=list)
    epoch_selection_rate: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    version: str = __version__
    backend: str = BACKEND
    aborted: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- config (de)serialization ----------------------------------------------------


def mlp_spec_to_dict(spec: dn.MlpSpec) -> dict:
    return {"sizes": list(spec.sizes), "out_act": spec.out_act}


def mlp_spec_from_dict(d: dict) -> dn.MlpSpec:
    return dn.MlpSpec(tuple(d["sizes"]), d.get("out_act", "identity"))


def imputer_spec_to_dict(spec: ImputerSpec) -> dict:
    out = {"kind": spec.kind}
    if spec.c is not None:
        out["c"] = spec.c
    if spec.n_components is not None:
        out["n_components"] = spec.n_components
    if spec.v_max != 255:
        out["v_max"] = spec.v_max
    return out


def imputer_spec_from_dict(d: dict) -> ImputerSpec:
    return ImputerSpec(kind=d["kind"], c=d.get("c"),
                       n_components=d.get("n_components"),
                       v_max=d.get("v_max", 255))


def lex_config_to_dict(cfg: LexConfig) -> dict:
    return {
        "predictor": mlp_spec_to_dict(cfg.predictor),
        "selector": mlp_spec_to_dict(cfg.selector),
        "imputer": imputer_spec_to_dict(cfg.imputer),
        "selection": cfg.selection,
        "k": cfg.k,
        "lam": cfg.lam,
        "tau": cfg.tau,
        "estimator": dataclasses.asdict(cfg.estimator),
        "n_mask_samples": cfg.n_mask_samples,
        "n_imputation_samples": cfg.n_imputation_samples,
        "regime": cfg.regime,
    }


def lex_config_from_dict(d: dict) -> LexConfig:
    return LexConfig(
        predictor=mlp_spec_from_dict(d["predictor"]),
        selector=mlp_spec_from_dict(d["selector"]),
        imputer=imputer_spec_from_dict(d["imputer"]),
        selection=d["selection"],
        k=d.get("k"),
        lam=d.get("lam", 0.0),
        tau=d.get("tau", 0.5),
        estimator=EstimatorConfig(**d["estimator"]),
        n_mask_samples=d.get("n_mask_samples", 10),
        n_imputation_samples=d.get("n_imputation_samples", 1),
        regime=d.get("regime", "free_insitu"),
    )


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "lex": lex_config_to_dict(cfg.lex),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
        "seed": cfg.seed,
        "checkpoint_every": cfg.checkpoint_every,
        "selector_bias_init": cfg.selector_bias_init,
    }


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(
        lex=lex_config_from_dict(d["lex"]),
        epochs=d.get("epochs", 200),
        batch_size=d.get("batch_size", 1000),
        lr=d.get("lr", 1e-4),
        weight_decay=d.get("weight_decay", 1e-3),
        seed=d.get("seed", 0),
        checkpoint_every=d.get("checkpoint_every", 0),
        selector_bias_init=d.get("selector_bias_init"),
    )


# -- run plumbing ----------------------------------------------------------------


def rng_streams(seed: int) -> dict:
    """Independent generators per consumer, all derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(child)
            for name, child in zip(STREAM_NAMES, children)}


def _frozen_view(store: dn.ParamStore) -> dn.ParamStore:
    """Same arrays, no gradients: evaluations through this view leave
    the live parameters' gradient path untouched."""
    out = dn.ParamStore(spec=store.spec)
    for name, p in store.params.items():
        out.params[name] = dn.Tensor(p.data)
    return out


def _snapshot(*stores):
    return [{name: p.data.copy() for name, p in s.params.items()}
            for s in stores]


def _restore(stores, snaps):
    for store, snap in zip(stores, snaps):
        for name, arr in snap.items():
            store.params[name].data = arr.copy()


def _checkpoint_arrays(theta, gamma):
    out = {}
    for prefix, store in (("predictor", theta), ("selector", gamma)):
        for name, p in store.params.items():
            out[f"{prefix}.{name}"] = p.data
    return out


def mask_averaged_accuracy(theta, gamma, fitted, spec, x, y, n_masks, rng):
    """Accuracy of argmax over mask-averaged class probabilities."""
    logits = lx.selector_logits(gamma, x)
    sample = md.sample_masks(spec, logits, n_masks, rng)
    xt = impute(fitted, np.repeat(x, n_masks, axis=0), sample.hard_flat(), rng)
    probs = lx._class_probs(theta, xt)
    mean_probs = probs.reshape(x.shape[0], n_masks, -1).mean(axis=1)
    return float((mean_probs.argmax(axis=1) == np.asarray(y)).mean())


def train(cfg: TrainConfig, dataset, fitted: FittedImputer,
          ctx: RegimeContext | None = None, out_dir=None):
    """Run the configured optimization; returns (RunRecord, theta, gamma).

    theta is updated by plain backprop of the bound where the regime
    permits; gamma always follows the configured mask-gradient
    estimator. A non-finite loss aborts the run, restoring the last
    completed epoch's parameters and recording diagnostics.
    """
    lex = cfg.lex
    regime = lex.regime
    ctx = lx.validate_regime(regime, ctx)
    x, y, _ = dataset.split("train")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    if d != lex.n_features:
        raise ValueError(f"dataset has {d} features, config says "
                         f"{lex.n_features}")
    if cfg.batch_size > n:
        raise ValueError("batch_size exceeds the training set size")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for store in (ctx.frozen_predictor, ctx.surrogate):
        if store is not None \
                and lx._store_dtype(store) != np.dtype(np.float64):
            raise ValueError("context networks must be float64; pass "
                             "dtype=np.float64 when initializing them")

    streams = rng_streams(cfg.seed)
    spec = lex.mask_spec()
    est = lex.estimator
    theta_trainable = regime in ("free_insitu", "surrogate_posthoc")
    if regime in ("fixed_theta_insitu", "self_posthoc"):
        theta = ctx.frozen_predictor
        sizes = theta.spec.sizes
        if sizes[0] != lex.n_features or sizes[-1] != lex.n_classes:
            raise ValueError("frozen predictor shape does not match config")
        gamma = dn.init_mlp(lex.selector, streams["init"], dtype=np.float64)
    else:
        theta, gamma = lx.init_networks(lex, streams["init"])
    if cfg.selector_bias_init is not None:
        last = len(lex.selector.sizes) - 2
        gamma.params[f"b{last}"].data[:] = cfg.selector_bias_init
    theta_view = _frozen_view(theta)
    frozen_checksum = None if theta_trainable else theta.checksum()

    baseline = MovingAverageBaseline(est.baseline_decay) \
        if est.baseline == "moving_average" else None
    needs_detached = est.kind in ("rebar", "rebar_st") and est.eta != 0.0
    use_penalty = lex.selection == "bernoulli" and lex.lam > 0.0
    n_eval = min(1024, n)
    eval_idx = streams["eval"].choice(n, size=n_eval, replace=False)
    trained = (theta, gamma) if theta_trainable else (gamma,)

    record = RunRecord(config=train_config_to_dict(cfg), seed=cfg.seed)
    t_start = time.monotonic()
    last_good = _snapshot(theta, gamma)

    def _abort(epoch, step, value, logits_np):
        _restore((theta, gamma), last_good)
        diag = {
            "epoch": epoch,
            "step": step,
            "loss": float(value),
            "selector_logit_min": float(logits_np.min()),
            "selector_logit_max": float(logits_np.max()),
            "theta_checksum": theta.checksum(),
            "gamma_checksum": gamma.checksum(),
        }
        if out_dir is not None:
            ck = out_dir / "last_good.ckpt"
            dn.save_checkpoint(ck, _checkpoint_arrays(theta, gamma),
                               meta={"epoch": epoch, "aborted": True})
            diag["checkpoint"] = str(ck)
            dump = out_dir / "abort_diagnostics.json"
            dump.write_text(json.dumps(diag, indent=2))
            diag["dump"] = str(dump)
        record.aborted = True
        record.diagnostics = diag
        record.wall_clock = time.monotonic() - t_start
        return record

    for epoch in range(cfg.epochs):
        order = streams["shuffle"].permutation(n)
        losses = []
        rates = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            targets = lx.regime_targets(regime, ctx, xb, y[idx],
                                        streams["targets"])
            logits = dn.mlp_logits(gamma, dn.Tensor(xb))
            logits_np = np.asarray(logits.data, dtype=np.float64)
            sample = md.sample_masks(spec, logits_np, lex.n_mask_samples,
                                     streams["mask"])
            obj_live = lx.masked_nll_objective(
                theta, fitted, xb, targets, sample.hard_flat(),
                lex.n_imputation_samples, streams["impute"])
            obj_side = lx.masked_nll_objective(
                theta_view, fitted, xb, targets, sample.hard_flat(),
                lex.n_imputation_samples, streams["impute"],
                draws=obj_live.draws) if needs_detached else obj_live
            b = baseline.current() if baseline is not None else 0.0
            surrogate, g = build_surrogate(est, spec, logits, sample,
                                           obj_side, streams["mask"],
                                           baseline=b,
                                           hard_objective_fn=obj_live)
            loss_value = float(g.mean())
            if use_penalty:
                penalty = lx.regularizer("l1", logits, lex.lam)
                surrogate = dn.add(surrogate, dn.tsum(penalty))
                loss_value += float(penalty.data.mean())
            if not np.isfinite(loss_value):
                return _abort(epoch, step, loss_value, logits_np), theta, gamma
            total = dn.mul(surrogate,
                           dn.Tensor(np.asarray(1.0 / idx.shape[0])))
            theta.zero_grad()
            gamma.zero_grad()
            dn.backward(total, *trained)
            for store in trained:
                dn.adam_step(store, cfg.lr, weight_decay=cfg.weight_decay)
            if baseline is not None:
                baseline.update(g)
            losses.append(loss_value)
            rates.append(float(
                md.expected_selection(spec, logits_np).mean() / d))
        record.epoch_loss.append(float(np.mean(losses)))
        record.epoch_selection_rate.append(float(np.mean(rates)))
        record.epoch_accuracy.append(mask_averaged_accuracy(
            theta, gamma, fitted, spec, x[eval_idx], y[eval_idx],
            lex.n_mask_samples, streams["eval"]))
        last_good = _snapshot(theta, gamma)
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            dn.save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.ckpt",
                               _checkpoint_arrays(theta, gamma),
                               meta={"epoch": epoch + 1})

    if frozen_checksum is not None and theta.checksum() != frozen_checksum:
        raise RuntimeError("frozen predictor changed during training")
    record.final = {
        "loss": record.epoch_loss[-1],
        "selection_rate": record.epoch_selection_rate[-1],
        "train_accuracy": record.epoch_accuracy[-1],
        "theta_checksum": theta.checksum(),
        "gamma_checksum": gamma.checksum(),
    }
    record.wall_clock = time.monotonic() - t_start
    if out_dir is not None:
        dn.save_checkpoint(out_dir / "final.ckpt",
                           _checkpoint_arrays(theta, gamma),
                           meta={"epochs": cfg.epochs, "seed": cfg.seed})
        record.save(out_dir / "run_record.json")
    return record, theta, gamma


def surrogate_pipeline(cfg: TrainConfig, dataset, *, out_dir=None,
                       surrogate_hidden=(300, 300), surrogate_epochs=150,
                       surrogate_batch=256, surrogate_lr=1e-3):
    """Two-stage protocol: first fit a restricted predictor on random
    half-density masks, then train the selector against it.

    With regime fixed_theta_insitu the surrogate IS the frozen
    predictor; with surrogate_posthoc it only provides the targets and a
    fresh predictor trains jointly. Returns (surrogate, surrogate
    losses, RunRecord, theta, gamma)."""
    lex = cfg.lex
    if lex.imputer.kind != "constant":
        raise ValueError("two-stage training requires constant imputation")
    if lex.regime not in ("fixed_theta_insitu", "surrogate_posthoc"):
        raise ValueError("two-stage training needs a fixed-predictor or "
                         "surrogate-target regime")
    x, y, _ = dataset.split("train")
    streams = rng_streams(cfg.seed)
    sur_spec = dn.MlpSpec((lex.n_features, *surrogate_hidden, lex.n_classes))
    surrogate, sur_losses = lx.restricted_predictor_train(
        sur_spec, x, y, streams["surrogate"], constant=float(lex.imputer.c),
        epochs=surrogate_epochs, batch_size=surrogate_batch, lr=surrogate_lr)
    before = surrogate.checksum()
    if lex.regime == "fixed_theta_insitu":
        ctx = RegimeContext(frozen_predictor=surrogate)
    else:
        ctx = RegimeContext(surrogate=surrogate)
    fitted = fit_imputer(lex.imputer)
    record, theta, gamma = train(cfg, dataset, fitted, ctx, out_dir=out_dir)
    record.final["surrogate_checksum_before"] = before
    record.final["surrogate_checksum_after"] = surrogate.checksum()
    if out_dir is not None:
        record.save(Path(out_dir) / "run_record.json")
    return surrogate, sur_losses, record, theta, gamma


__all__ = [
    "STREAM_NAMES",
    "TrainConfig",
    "RunRecord",
    "mlp_spec_to_dict",
    "mlp_spec_from_dict",
    "imputer_spec_to_dict",
    "imputer_spec_from_dict",
    "lex_config_to_dict",
    "lex_config_from_dict",
    "train_config_to_dict",
    "train_config_from_dict",
    "rng_streams",
    "mask_averaged_accuracy",
    "train",
    "surrogate_pipeline",
]

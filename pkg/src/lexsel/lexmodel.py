"""Feature-selection classifier built from a selector and a predictor.

The selector network maps an input to per-feature logits defining a mask
distribution. A drawn mask hides part of the input, an imputer fills the
hidden coordinates, and the predictor classifies the blend. Training
maximizes a multi-sample lower bound on the log-likelihood of the
targets under the mask distribution; four regimes control which parts
are trained and where the targets come from.

Network parameters are kept in float64 throughout this layer: the fused
dense kernels require one dtype end to end, and the exactness checks on
the bound need double precision anyway.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffnet as dn
from . import maskdist as md
from .gradest import EstimatorConfig
from .imputers import FittedImputer, ImputerSpec, impute, impute_draws

LOG_PROB_FLOOR = -30.0
EXACT_MIXTURE_MAX_DIM = 12

SELECTION_MODES = ("bernoulli", "subset")
REGIMES = ("free_insitu", "fixed_theta_insitu", "self_posthoc",
           "surrogate_posthoc")
PRESETS = ("l2x", "invase", "realx", "lex-gaussian", "lex-gmm")


class CapabilityError(RuntimeError):
    """An exact computation was requested outside its tractable range."""


class NumericalError(RuntimeError):
    """Non-finite values survived clamping. Carries a diagnostics dict."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class LexConfig:
    """Static description of one selector/predictor pair.

    selection "bernoulli" draws each feature independently and can carry
    an expected-size penalty lam; "subset" draws exactly k features and
    embeds the budget in the distribution itself (lam must stay 0).
    """

    predictor: dn.MlpSpec
    selector: dn.MlpSpec
    imputer: ImputerSpec
    selection: str = "bernoulli"
    k: int | None = None
    lam: float = 0.0
    tau: float = 0.5
    estimator: EstimatorConfig = EstimatorConfig()
    n_mask_samples: int = 10
    n_imputation_samples: int = 1
    regime: str = "free_insitu"

    def __post_init__(self):
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        d = self.predictor.sizes[0]
        if self.selector.sizes[0] != d or self.selector.sizes[-1] != d:
            raise ValueError("selector must map n_features to n_features "
                             f"logits, got {self.selector.sizes}")
        if self.predictor.sizes[-1] < 2:
            raise ValueError("predictor needs at least 2 output classes")
        if self.selection == "subset":
            if self.k is None or not 1 <= self.k <= d:
                raise ValueError(f"subset selection needs 1 <= k <= {d}")
            if self.lam != 0.0:
                raise ValueError("the size penalty is incompatible with "
                                 "fixed-size selection")
        else:
            if self.k is not None:
                raise ValueError("k only applies to subset selection")
            if self.lam < 0.0:
                raise ValueError("lam must be >= 0")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.n_mask_samples < 1 or self.n_imputation_samples < 1:
            raise ValueError("sample counts must be >= 1")

    @property
    def n_features(self) -> int:
        return self.predictor.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.predictor.sizes[-1]

    def mask_spec(self) -> md.MaskDistSpec:
        return md.MaskDistSpec(self.selection, k=self.k, tau=self.tau)


@dataclass
class RegimeContext:
    """External networks a regime may depend on."""

    frozen_predictor: dn.ParamStore | None = None
    surrogate: dn.ParamStore | None = None


def validate_regime(regime: str, ctx: RegimeContext | None) -> RegimeContext:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    ctx = ctx if ctx is not None else RegimeContext()
    if regime in ("fixed_theta_insitu", "self_posthoc") \
            and ctx.frozen_predictor is None:
        raise ValueError(f"{regime} requires a frozen predictor")
    if regime == "surrogate_posthoc" and ctx.surrogate is None:
        raise ValueError("surrogate_posthoc requires a target-providing model")
    return ctx


def init_networks(cfg: LexConfig, rng: np.random.Generator,
                  dtype=np.float64):
    """Fresh (predictor, selector) parameter stores."""
    theta = dn.init_mlp(cfg.predictor, rng, dtype=dtype)
    gamma = dn.init_mlp(cfg.selector, rng, dtype=dtype)
    return theta, gamma


def _store_dtype(store: dn.ParamStore):
    return store["w0"].data.dtype


def _class_probs(store: dn.ParamStore, x: np.ndarray) -> np.ndarray:
    xt = dn.Tensor(np.ascontiguousarray(x, dtype=_store_dtype(store)))
    with dn.no_grad():
        p = dn.softmax(dn.mlp_logits(store, xt))
    return np.asarray(p.data, dtype=np.float64)


def selector_logits(gamma: dn.ParamStore, x: np.ndarray) -> np.ndarray:
    """Per-feature selection logits for a batch, as a plain array."""
    xt = dn.Tensor(np.ascontiguousarray(x, dtype=_store_dtype(gamma)))
    with dn.no_grad():
        out = dn.mlp_logits(gamma, xt)
    return np.asarray(out.data, dtype=np.float64)


# -- predictive quantities -------------------------------------------------------


def _check_mask(x: np.ndarray, z: np.ndarray):
    if z.shape != x.shape:
        raise ValueError(f"mask shape {z.shape} != input shape {x.shape}")
    if np.any((z != 0.0) & (z != 1.0)):
        raise ValueError("mask entries must be 0 or 1")


def masked_predictive(theta: dn.ParamStore, fitted: FittedImputer,
                      x: np.ndarray, z: np.ndarray, n_draws: int = 1,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one input with the unselected coordinates
    drawn from the imputer, averaged over n_draws fills."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a single row")
    _check_mask(x, z)
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    # constant fills (and fully observed rows) are deterministic
    k = 1 if fitted.spec.kind == "constant" or np.all(z == 1.0) else n_draws
    rng = np.random.default_rng(0) if rng is None else rng
    xt = impute(fitted, np.repeat(x[None], k, axis=0),
                np.repeat(z[None], k, axis=0), rng)
    return _class_probs(theta, xt).mean(axis=0)


def _all_masks(d: int) -> np.ndarray:
    codes = np.arange(1 << d, dtype=np.int64)
    return ((codes[:, None] >> np.arange(d)[None, :]) & 1).astype(np.float64)


def _batched_masked_probs(theta, fitted, x, masks, n_draws, rng):
    m = masks.shape[0]
    k = 1 if fitted.spec.kind == "constant" else n_draws
    xt = impute(fitted, np.repeat(x[None], m * k, axis=0),
                np.repeat(masks, k, axis=0), rng)
    probs = _class_probs(theta, xt)
    return probs.reshape(m, k, -1).mean(axis=1)


def predictive_mixture(theta: dn.ParamStore, gamma: dn.ParamStore,
                       fitted: FittedImputer, x: np.ndarray,
                       spec: md.MaskDistSpec, *, mode: str = "auto",
                       n_mask_samples: int = 10, n_draws: int = 1,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities averaged over the selector's mask
    distribution: exact enumeration when tractable, else Monte Carlo
    with n_mask_samples draws."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a single row")
    if mode not in ("auto", "exact", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    d = x.shape[0]
    exact_ok = spec.kind == "bernoulli" and d <= EXACT_MIXTURE_MAX_DIM
    if mode == "exact" and not exact_ok:
        if spec.kind != "bernoulli":
            raise CapabilityError(
                "exact enumeration covers only bernoulli selection")
        raise CapabilityError(
            f"exact enumeration needs d <= {EXACT_MIXTURE_MAX_DIM}, got {d}")
    rng = np.random.default_rng(0) if rng is None else rng
    logits = selector_logits(gamma, x[None])[0]
    if mode == "exact" or (mode == "auto" and exact_ok):
        masks = _all_masks(d)
        logp1 = -np.logaddexp(0.0, -logits)
        logp0 = -np.logaddexp(0.0, logits)
        pmf = np.exp(masks @ logp1 + (1.0 - masks) @ logp0)
        per_mask = _batched_masked_probs(theta, fitted, x, masks, n_draws, rng)
        return pmf @ per_mask
    sample = md.sample_masks(spec, logits[None], n_mask_samples, rng)
    per_mask = _batched_masked_probs(theta, fitted, x, sample.hard[0],
                                     n_draws, rng)
    return per_mask.mean(axis=0)


# -- training objective ----------------------------------------------------------


def masked_nll_objective(theta: dn.ParamStore, fitted: FittedImputer,
                         x: np.ndarray, y: np.ndarray,
                         hard_flat: np.ndarray, n_draws: int,
                         rng: np.random.Generator, draws=None):
    """Build the per-example loss as a graph function of mask rows.

    hard_flat holds l masks per example, example-major. Imputation
    values are drawn here once, conditioned on those hard masks, so hard
    and relaxed evaluations blend the same fills. Callers evaluating the
    same batch through two parameter views pass the first closure's
    `draws` back in to reuse the fills. The returned callable maps a
    (rows, d) mask tensor to the (batch,) negated multi-sample bound;
    its dtype must match the predictor's.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    rows = hard_flat.shape[0]
    if rows % n != 0:
        raise ValueError("mask rows must be a whole number per example")
    l = rows // n
    k = int(n_draws)
    if k < 1:
        raise ValueError("n_draws must be >= 1")
    dt = _store_dtype(theta)
    xk = np.repeat(x, l * k, axis=0)
    zk = np.repeat(hard_flat, k, axis=0)
    if draws is None:
        draws = impute_draws(fitted, xk, zk, rng)
    x_obs = dn.Tensor(xk.astype(dt))
    fills = dn.Tensor(draws.astype(dt))
    one = dn.Tensor(np.asarray(1.0, dtype=dt))
    log_norm = dn.Tensor(np.asarray(math.log(l * k), dtype=dt))
    y_rep = np.repeat(np.asarray(y, dtype=np.int64), l * k)

    def per_example_loss(mask_flat):
        m = dn.repeat_rows(mask_flat, k) if k > 1 else mask_flat
        blend = dn.add(dn.mul(m, x_obs), dn.mul(dn.sub(one, m), fills))
        logp = dn.log_softmax(dn.mlp_logits(theta, blend))
        picked = dn.clip(dn.gather_cols(logp, y_rep),
                         lo=LOG_PROB_FLOOR, hi=0.0)
        grouped = dn.reshape(picked, (n, l * k))
        bound = dn.sub(dn.logsumexp(grouped, axis=-1), log_norm)
        return dn.neg(bound)

    per_example_loss.draws = draws
    return per_example_loss


@dataclass
class IwaeSample:
    """Bound evaluation record retained for gradient estimation."""

    masks: md.MaskSample
    selector_logits: np.ndarray   # (batch, d)
    log_prob: np.ndarray          # (batch, l); ordered scores for subsets
    per_example_bound: np.ndarray  # (batch,)


def iwae_objective(theta: dn.ParamStore, gamma: dn.ParamStore,
                   fitted: FittedImputer, x: np.ndarray, y: np.ndarray,
                   spec: md.MaskDistSpec, n_mask_samples: int = 10,
                   n_draws: int = 1,
                   rng: np.random.Generator | None = None):
    """Negated multi-sample bound summed over a batch.

    Per-mask label log-probabilities are clamped to [-30, 0] before the
    log-mean-exp. Returns (loss, record); a non-finite bound after
    clamping raises NumericalError with per-example diagnostics.
    """
    if n_mask_samples < 1 or n_draws < 1:
        raise ValueError("sample counts must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    logits = selector_logits(gamma, x)
    sample = md.sample_masks(spec, logits, n_mask_samples, rng)
    objective = masked_nll_objective(theta, fitted, x, y, sample.hard_flat(),
                                     n_draws, rng)
    with dn.no_grad():
        per_loss = objective(
            dn.Tensor(sample.hard_flat().astype(_store_dtype(theta))))
    bound = -np.asarray(per_loss.data, dtype=np.float64)
    if not np.all(np.isfinite(bound)):
        bad = np.flatnonzero(~np.isfinite(bound))
        raise NumericalError(
            f"non-finite bound for {bad.size} of {bound.size} examples",
            diagnostics={
                "example_indices": bad[:16].tolist(),
                "selector_logit_min": float(logits.min()),
                "selector_logit_max": float(logits.max()),
            })
    logits_rep = np.repeat(logits, n_mask_samples, axis=0)
    order = sample.order_flat() if spec.kind == "subset" else None
    logp = md.logprob_np(spec, logits_rep, sample.hard_flat(), order)
    record = IwaeSample(masks=sample, selector_logits=logits,
                        log_prob=logp.reshape(x.shape[0], n_mask_samples),
                        per_example_bound=bound)
    return float(-bound.sum()), record


def regularizer(mode: str, logits, lam: float):
    """Expected-selection-size penalty, one value per row.

    "l1" charges lam per expected selected feature, which has the closed
    form lam * sum_d sigmoid(logit_d) for independent masks. "subset"
    embeds its budget in the distribution, so the penalty is zero.
    """
    if mode not in ("l1", "subset"):
        raise ValueError(f"unknown regularizer mode {mode!r}")
    if lam < 0.0:
        raise ValueError("lam must be >= 0")
    t = dn.as_tensor(logits)
    if t.data.ndim == 1:
        t = dn.reshape(t, (1, t.data.shape[0]))
    if mode == "subset":
        return dn.Tensor(np.zeros(t.data.shape[0], dtype=t.data.dtype))
    per_row = dn.tsum(dn.sigmoid(t), axis=1)
    return dn.mul(per_row, dn.Tensor(np.asarray(lam, dtype=t.data.dtype)))


# -- regimes ---------------------------------------------------------------------


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def regime_targets(regime: str, ctx: RegimeContext | None, x: np.ndarray,
                   y: np.ndarray,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Training targets for a batch: dataset labels for the in-situ
    regimes, labels sampled from the frozen predictor (self_posthoc) or
    from the external model (surrogate_posthoc) otherwise."""
    ctx = validate_regime(regime, ctx)
    y = np.asarray(y, dtype=np.int64)
    if regime in ("free_insitu", "fixed_theta_insitu"):
        return y
    rng = np.random.default_rng(0) if rng is None else rng
    source = ctx.frozen_predictor if regime == "self_posthoc" else ctx.surrogate
    probs = _class_probs(source, np.asarray(x, dtype=np.float64))
    return _sample_rows(probs, rng.random(probs.shape[0]))


def restricted_predictor_train(spec: dn.MlpSpec, x: np.ndarray,
                               y: np.ndarray, rng: np.random.Generator, *,
                               constant: float = 0.0, epochs: int = 60,
                               batch_size: int = 128, lr: float = 1e-3,
                               weight_decay: float = 0.0,
                               dtype=np.float64):
    """Train a predictor to classify under masks drawn iid Bernoulli(0.5)
    with constant fills, so its output tracks the conditional given any
    observed subset. Returns (store, per-epoch mean losses)."""
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    store = dn.init_mlp(spec, rng, dtype=dtype)
    bs = min(int(batch_size), n)
    losses = []
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb = x[idx]
            zb = (rng.random(xb.shape) < 0.5).astype(dtype)
            xt = zb * xb + (1.0 - zb) * dtype(constant)
            logp = dn.log_softmax(dn.mlp_logits(store, dn.Tensor(xt)))
            nll = dn.neg(dn.tmean(dn.gather_cols(logp, y[idx])))
            store.zero_grad()
            dn.backward(nll, store)
            dn.adam_step(store, lr, weight_decay=weight_decay)
            total += float(nll.data) * idx.shape[0]
        losses.append(total / n)
    return store, losses


# -- presets ---------------------------------------------------------------------


def preset_config(name: str, n_features: int, n_classes: int = 2, *,
                  k: int = 5, lam: float = 0.1, n_components: int = 10,
                  hidden: tuple = (100, 100), tau: float = 0.5) -> LexConfig:
    """Named configurations.

    l2x, invase and realx reproduce the standard baselines as special
    cases of this model family; lex-gaussian and lex-gmm pair subset
    selection with distribution-aware imputers.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    pred = dn.MlpSpec((n_features, *hidden, n_classes))
    sel = dn.MlpSpec((n_features, *hidden, n_features))
    zero = ImputerSpec("constant", c=0.0)
    if name == "l2x":
        return LexConfig(pred, sel, zero, selection="subset", k=k, tau=tau,
                         estimator=EstimatorConfig(kind="pathwise_st", tau=tau),
                         regime="surrogate_posthoc")
    if name == "invase":
        return LexConfig(pred, sel, zero, selection="bernoulli", lam=lam,
                         tau=tau,
                         estimator=EstimatorConfig(kind="reinforce",
                                                   baseline="moving_average"),
                         regime="free_insitu")
    if name == "realx":
        return LexConfig(pred, sel, zero, selection="bernoulli", lam=lam,
                         tau=tau,
                         estimator=EstimatorConfig(kind="reinforce",
                                                   baseline="moving_average"),
                         regime="fixed_theta_insitu")
    if name == "lex-gaussian":
        return LexConfig(pred, sel, ImputerSpec("gaussian_std"),
                         selection="subset", k=k, tau=tau,
                         estimator=EstimatorConfig(kind="rebar", tau=tau),
                         regime="free_insitu")
    return LexConfig(pred, sel, ImputerSpec("gmm", n_components=n_components),
                     selection="subset", k=k, tau=tau,
                     estimator=EstimatorConfig(kind="rebar", tau=tau),
                     regime="free_insitu")


__all__ = [
    "LOG_PROB_FLOOR",
    "EXACT_MIXTURE_MAX_DIM",
    "SELECTION_MODES",
    "REGIMES",
    "PRESETS",
    "CapabilityError",
    "NumericalError",
    "LexConfig",
    "RegimeContext",
    "validate_regime",
    "init_networks",
    "selector_logits",
    "masked_predictive",
    "predictive_mixture",
    "masked_nll_objective",
    "IwaeSample",
    "iwae_objective",
    "regularizer",
    "regime_targets",
    "restricted_predictor_train",
    "preset_config",
]

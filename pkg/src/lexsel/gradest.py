"""Monte Carlo gradient estimators for the selector logits.

All estimators share one objective contract: `objective_fn(mask)` receives a
(B*L, D) mask Tensor (rows grouped per example, draws contiguous) and returns
per-example values as a (B,) Tensor, applying whatever reduction over the L
draws the objective calls for. The score-function pieces treat those values as
constants; the pathwise pieces differentiate through the mask argument.

`build_surrogate` assembles a single scalar whose numeric value equals the
summed hard-mask objective and whose gradient with respect to the supplied
logits node is the chosen estimator, so one backward pass serves both the
selector and anything upstream of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet as dn
from . import maskdist as md

KINDS = ("reinforce", "pathwise_st", "rebar", "rebar_st")
BASELINES = ("none", "moving_average")


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "rebar"
    tau: float = 0.5
    eta: float = 1.0
    baseline: str = "none"
    baseline_decay: float = 0.99

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; choose from {KINDS}")
        if not self.tau > 0.0:
            raise ValueError("tau must be positive")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; choose from {BASELINES}")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline decay must lie in [0, 1)")


class MovingAverageBaseline:
    """Exponential moving average of past objective values.

    `current()` is read before `update()` so the control variate never sees
    the samples it is applied to, keeping the score estimator unbiased.
    """

    def __init__(self, decay=0.99):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.decay = decay
        self.value = None

    def current(self):
        return 0.0 if self.value is None else self.value

    def update(self, values):
        mean = float(np.mean(values))
        if self.value is None:
            self.value = mean
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * mean


def _per_example_logprob(spec, logits_rep, sample):
    lp = md.logprob_graph(spec, logits_rep, sample)  # (B*L,)
    return dn.tsum(dn.reshape(lp, (sample.batch, sample.n_samples)), axis=1)


def _grad_carrier(values, coef):
    """(values - stop(values)) weighted by detached coef: zero value, live grad."""
    return dn.tsum(dn.mul(dn.sub(values, dn.stop_grad(values)), dn.Tensor(coef)))


def build_surrogate(cfg, spec, logits, sample, objective_fn, rng,
                    baseline=0.0, hard_objective_fn=None):
    """Scalar surrogate whose value is the summed hard objective and whose
    gradient is the cfg.kind estimator. logits is a (B, D) Tensor node.

    hard_objective_fn, when given, evaluates the hard masks instead of
    objective_fn (the trainer routes it through live predictor parameters
    while the relaxed evaluations run on detached copies).
    """
    n_draws = sample.n_samples
    rep = dn.repeat_rows(logits, n_draws)
    hard_eval = hard_objective_fn if hard_objective_fn is not None else objective_fn

    if cfg.kind == "pathwise_st":
        relaxed = md.relaxed_graph(spec, rep, sample)
        st = dn.straight_through(relaxed, sample.hard_flat())
        f = hard_eval(st)
        return dn.tsum(f), np.array(f.data, copy=True)

    hard = dn.Tensor(sample.hard_flat().astype(logits.data.dtype))
    f_hard = hard_eval(hard)
    g = np.array(f_hard.data, dtype=np.float64, copy=True)
    logp = _per_example_logprob(spec, rep, sample)

    if cfg.kind == "reinforce" or cfg.eta == 0.0:
        coef = (g - baseline).astype(logits.data.dtype)
        return dn.add(dn.tsum(f_hard), _grad_carrier(logp, coef)), g

    relaxed = md.relaxed_graph(spec, rep, sample)
    cond = md.conditional_relaxed_graph(spec, rep, sample, rng)
    if cfg.kind == "rebar_st":
        relaxed = dn.straight_through(relaxed, sample.hard_flat())
        cond = dn.straight_through(cond, sample.hard_flat())
    f_rel = objective_fn(relaxed)
    f_cond = objective_fn(cond)
    eta = float(cfg.eta)
    coef = (g - eta * np.asarray(f_cond.data, dtype=np.float64) - baseline
            ).astype(logits.data.dtype)
    ones = np.ones(sample.batch, dtype=logits.data.dtype)
    surrogate = dn.add(
        dn.add(dn.tsum(f_hard), _grad_carrier(logp, coef)),
        dn.mul(dn.sub(_grad_carrier(f_rel, ones), _grad_carrier(f_cond, ones)), eta),
    )
    return surrogate, g


def _leaf_gradient(spec, logits, build):
    leaf = dn.Tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
    surrogate = build(leaf)
    dn.backward(surrogate)
    return leaf.grad


def reinforce_grad(objective_fn, spec, logits, sample, baseline=0.0):
    """Per-example score-function gradient (B, D) of E[objective]."""
    cfg = EstimatorConfig(kind="reinforce")
    return _leaf_gradient(
        spec, logits,
        lambda leaf: build_surrogate(cfg, spec, leaf, sample, objective_fn,
                                     rng=None, baseline=baseline)[0],
    )


def pathwise_st_grad(objective_fn, spec, logits, sample):
    """Straight-through gradient: hard forward, relaxed backward. Biased."""
    cfg = EstimatorConfig(kind="pathwise_st", tau=spec.tau)
    return _leaf_gradient(
        spec, logits,
        lambda leaf: build_surrogate(cfg, spec, leaf, sample, objective_fn,
                                     rng=None)[0],
    )


def rebar_grad(objective_fn, spec, logits, rng, eta=1.0, sample=None,
               n_samples=1, straight_through_relaxation=False):
    """Relaxation-as-control-variate gradient; unbiased for any tau, eta.

    With eta=0 the relaxed passes are skipped and the result equals
    reinforce_grad on the same sample. The straight-through variation swaps
    hard values into the forward of both relaxed evaluations (for objectives
    only defined on binary masks) at the price of bias.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if sample is None:
        sample = md.sample_masks(spec, logits, n_samples, rng)
    kind = "rebar_st" if straight_through_relaxation else "rebar"
    cfg = EstimatorConfig(kind=kind, tau=spec.tau, eta=eta)
    return _leaf_gradient(
        spec, logits,
        lambda leaf: build_surrogate(cfg, spec, leaf, sample, objective_fn,
                                     rng=rng)[0],
    )


def conditional_relaxed_sample(logits, hard, rng, tau):
    """Relaxed Bernoulli sample conditioned on its binary outcome (numpy).

    Marginalizing the hard outcome recovers the unconditional relaxed law,
    and thresholding at 1/2 reproduces `hard` exactly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    hard = np.asarray(hard, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-logits))
    v = np.clip(rng.random(hard.shape), 1e-12, 1.0 - 1e-12)
    vp = np.where(hard == 1.0, v * p + (1.0 - p), v * (1.0 - p))
    vp = np.clip(vp, 1e-12, 1.0 - 1e-12)
    pre = logits + np.log(vp) - np.log1p(-vp)
    return 1.0 / (1.0 + np.exp(-pre / tau))

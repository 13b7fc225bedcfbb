"""Mask distributions over feature subsets.

Two families:

* bernoulli: independent per-feature gates, logistic-noise relaxation
  (hard gate = sign of the perturbed logit, relaxed gate = tempered
  sigmoid of the same perturbation, so thresholding the relaxed sample
  at 0.5 reproduces the hard one).
* subset: exactly-k masks via Gumbel top-k. The realized order makes the
  score term a Plackett-Luce prefix likelihood; the relaxation is an
  iterative tempered softmax with soft exclusion, whose coordinatewise
  sum is clamped into [0, 1].

Both families support conditional relaxed resampling given the hard
sample, which is what gives a REBAR-style estimator its second
control-variate leg. Sampling is plain numpy; *_graph functions rebuild
the differentiable parts on the tape from stored or fresh noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lexsel import diffnet as dn

_UCLIP = 1e-12
NEG_BIG = -1e30  # additive exclusion for masked logsumexp


@dataclass(frozen=True)
class MaskDistSpec:
    kind: str  # bernoulli | subset
    k: int | None = None
    tau: float = 0.5

    def __post_init__(self):
        if self.kind not in ("bernoulli", "subset"):
            raise ValueError(f"unknown mask distribution {self.kind!r}")
        if self.kind == "subset":
            if self.k is None or self.k < 1:
                raise ValueError("subset mode needs k >= 1")
        elif self.k is not None:
            raise ValueError("k only applies to subset mode")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class MaskSample:
    """L mask draws per batch row plus the noise that produced them."""

    hard: np.ndarray          # (B, L, D) in {0, 1}
    relaxed: np.ndarray       # (B, L, D) in [0, 1]
    aux: dict                 # noise records, keyed per family
    order: np.ndarray | None  # (B, L, k) int64, subset mode only

    @property
    def batch(self) -> int:
        return self.hard.shape[0]

    @property
    def n_samples(self) -> int:
        return self.hard.shape[1]

    @property
    def n_features(self) -> int:
        return self.hard.shape[2]

    def hard_flat(self) -> np.ndarray:
        b, l, d = self.hard.shape
        return self.hard.reshape(b * l, d)

    def relaxed_flat(self) -> np.ndarray:
        b, l, d = self.relaxed.shape
        return self.relaxed.reshape(b * l, d)

    def order_flat(self) -> np.ndarray:
        b, l, k = self.order.shape
        return self.order.reshape(b * l, k)


def _uniform(rng, shape, dtype):
    u = rng.random(shape).astype(dtype, copy=False)
    return np.clip(u, _UCLIP, 1.0 - _UCLIP)


def _logistic_noise(rng, shape, dtype):
    u = _uniform(rng, shape, dtype)
    return np.log(u) - np.log1p(-u)


def _gumbel_noise(rng, shape, dtype):
    u = _uniform(rng, shape, dtype)
    return -np.log(-np.log(u))


def _np_sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# -- sampling --------------------------------------------------------------------


def sample_masks(spec: MaskDistSpec, logits: np.ndarray, n_samples: int,
                 rng: np.random.Generator) -> MaskSample:
    """Draw (B, L, D) hard and relaxed masks from per-row logits (B, D)."""
    logits = np.asarray(logits)
    b, d = logits.shape
    dtype = logits.dtype
    if spec.kind == "bernoulli":
        eps = _logistic_noise(rng, (b, n_samples, d), dtype)
        pre = logits[:, None, :] + eps
        relaxed = _np_sigmoid(pre / spec.tau)
        hard = (pre > 0).astype(dtype)
        return MaskSample(hard=hard, relaxed=relaxed, aux={"eps": eps},
                          order=None)
    if spec.k > d:
        raise ValueError(f"subset k={spec.k} exceeds {d} features")
    g = _gumbel_noise(rng, (b, n_samples, d), dtype)
    phi = logits[:, None, :] + g
    order = np.argsort(-phi, axis=2)[:, :, :spec.k].astype(np.int64)
    hard = np.zeros_like(phi)
    np.put_along_axis(hard, order, 1.0, axis=2)
    relaxed = _relaxed_topk_np(phi.reshape(b * n_samples, d), spec
                               ).reshape(b, n_samples, d)
    return MaskSample(hard=hard, relaxed=relaxed, aux={"gumbel": g},
                      order=order)


def _relaxed_topk_np(phi: np.ndarray, spec: MaskDistSpec) -> np.ndarray:
    """Iterative softmax with soft exclusion, numpy forward only."""
    s = np.zeros_like(phi)
    total = np.zeros_like(phi)
    for j in range(spec.k):
        scaled = (phi + s) / spec.tau
        scaled = scaled - scaled.max(axis=1, keepdims=True)
        kappa = np.exp(scaled)
        kappa /= kappa.sum(axis=1, keepdims=True)
        total += kappa
        if j < spec.k - 1:
            s = s + np.log(np.clip(1.0 - kappa, _UCLIP, 1.0))
    return np.clip(total, 0.0, 1.0)


# -- log-probabilities -------------------------------------------------------------


def logprob_graph(spec: MaskDistSpec, logits_flat, sample: MaskSample):
    """log p(hard sample | logits) as a tape node, one value per flat row.

    logits_flat is a (B*L, D) Tensor (rows repeated per draw)."""
    logits_flat = dn.as_tensor(logits_flat)
    if spec.kind == "bernoulli":
        z = sample.hard_flat().astype(logits_flat.dtype)
        term = dn.add(dn.mul(dn.log_sigmoid(logits_flat), z),
                      dn.mul(dn.log_sigmoid(dn.neg(logits_flat)), 1.0 - z))
        return dn.tsum(term, axis=1)
    return _pl_prefix_logprob_graph(logits_flat, sample.order_flat())


def _pl_prefix_logprob_graph(logits_flat, order: np.ndarray):
    """Plackett-Luce ordered prefix: sum_i [logit_{o_i} - lse(remaining_i)]."""
    n, d = logits_flat.shape
    k = order.shape[1]
    rows = np.arange(n)
    excl = np.zeros((n, d), dtype=logits_flat.dtype)
    total = None
    for i in range(k):
        lse = dn.logsumexp(dn.add(logits_flat, dn.Tensor(excl.copy())),
                           axis=-1)
        term = dn.sub(dn.gather_cols(logits_flat, order[:, i]), lse)
        total = term if total is None else dn.add(total, term)
        excl[rows, order[:, i]] = NEG_BIG
    return total


def logprob_np(spec: MaskDistSpec, logits: np.ndarray, hard: np.ndarray,
               order: np.ndarray | None = None) -> np.ndarray:
    """Same quantities as logprob_graph, plain numpy. logits (N, D),
    hard (N, D), order (N, k) for subset mode."""
    logits = np.asarray(logits, dtype=np.float64)
    if spec.kind == "bernoulli":
        logp1 = -np.log1p(np.exp(-np.abs(logits)))
        logp1 = np.where(logits > 0, logp1, logits + logp1)  # log sigma(l)
        logp0 = logp1 - logits                               # log sigma(-l)
        return (hard * logp1 + (1.0 - hard) * logp0).sum(axis=1)
    if order is None:
        raise ValueError("subset logprob needs the realized order")
    n, d = logits.shape
    rows = np.arange(n)
    excl = np.zeros((n, d))
    total = np.zeros(n)
    for i in range(order.shape[1]):
        masked = logits + excl
        m = masked.max(axis=1)
        lse = m + np.log(np.exp(masked - m[:, None]).sum(axis=1))
        total += logits[rows, order[:, i]] - lse
        excl[rows, order[:, i]] = NEG_BIG
    return total


# -- differentiable relaxations -----------------------------------------------------


def relaxed_graph(spec: MaskDistSpec, logits_flat, sample: MaskSample):
    """Rebuild the relaxed sample differentiably from the stored noise."""
    logits_flat = dn.as_tensor(logits_flat)
    n, d = logits_flat.shape
    if spec.kind == "bernoulli":
        eps = sample.aux["eps"].reshape(n, d)
        pre = dn.add(logits_flat, dn.Tensor(eps))
        return dn.sigmoid(dn.div(pre, spec.tau))
    g = sample.aux["gumbel"].reshape(n, d)
    phi = dn.add(logits_flat, dn.Tensor(g))
    return _relaxed_topk_graph(phi, spec)


def _relaxed_topk_graph(phi, spec: MaskDistSpec):
    s = None
    total = None
    for j in range(spec.k):
        scaled = dn.div(phi if s is None else dn.add(phi, s), spec.tau)
        kappa = dn.softmax(scaled)
        total = kappa if total is None else dn.add(total, kappa)
        if j < spec.k - 1:
            log1m = dn.log(dn.clip(dn.sub(1.0, kappa), lo=_UCLIP))
            s = log1m if s is None else dn.add(s, log1m)
    return dn.clip(total, lo=0.0, hi=1.0)


def conditional_relaxed_graph(spec: MaskDistSpec, logits_flat,
                              sample: MaskSample, rng: np.random.Generator):
    """Relaxed mask resampled conditionally on the hard sample, on the
    tape. Fresh noise comes from rng."""
    logits_flat = dn.as_tensor(logits_flat)
    n, d = logits_flat.shape
    if spec.kind == "bernoulli":
        hard = sample.hard_flat().astype(logits_flat.dtype)
        v = _uniform(rng, (n, d), logits_flat.data.dtype)
        p = dn.sigmoid(logits_flat)
        # v' maps v into the uniform slice consistent with the gate:
        # (1-p, 1) when the gate fired, (0, 1-p) when it did not, so
        # v' = h (v p + 1 - p) + (1-h) v (1-p)
        vp = dn.add(dn.mul(dn.sub(1.0, p), hard + v * (1.0 - hard)),
                    dn.mul(p, v * hard))
        vp = dn.clip(vp, lo=_UCLIP, hi=1.0 - _UCLIP)
        pre = dn.add(logits_flat,
                     dn.sub(dn.log(vp), dn.log(dn.sub(1.0, vp))))
        return dn.sigmoid(dn.div(pre, spec.tau))
    return _conditional_topk_graph(logits_flat, sample, spec, rng)


def _conditional_topk_graph(logits_flat, sample: MaskSample,
                            spec: MaskDistSpec, rng: np.random.Generator):
    """Conditional perturbed scores given the realized order, rebuilt
    top-down with truncated Gumbels, then relaxed as usual.

    The running maximum over the not-yet-chosen set at step i is
    Gumbel(lse_i) truncated below the previous maximum; unchosen
    coordinates are truncated below the last chosen one."""
    n, d = logits_flat.shape
    order = sample.order_flat()
    k = order.shape[1]
    dtype = logits_flat.data.dtype
    rows = np.arange(n)
    u_chosen = _uniform(rng, (n, k), dtype)
    u_rest = _uniform(rng, (n, d), dtype)

    excl = np.zeros((n, d), dtype=dtype)
    phi_hat_terms = []
    prev_m = None
    for i in range(k):
        lse = dn.logsumexp(dn.add(logits_flat, dn.Tensor(excl.copy())),
                           axis=-1)
        gu = dn.Tensor(-np.log(-np.log(u_chosen[:, i])))
        if prev_m is None:
            m = dn.add(lse, gu)  # unconstrained max over everything
        else:
            # truncated below prev_m: lse - log(exp(lse - prev_m) - log u)
            neg_log_u = dn.Tensor(-np.log(u_chosen[:, i]))
            m = dn.sub(lse, dn.log(dn.add(dn.exp(dn.sub(lse, prev_m)),
                                          neg_log_u)))
        onehot = np.zeros((n, d), dtype=dtype)
        onehot[rows, order[:, i]] = 1.0
        phi_hat_terms.append(dn.mul(dn.reshape(m, (n, 1)), dn.Tensor(onehot)))
        excl[rows, order[:, i]] = NEG_BIG
        prev_m = m

    # unchosen coordinates: Gumbel(logit_d) truncated below m_k
    mk = dn.reshape(prev_m, (n, 1))
    neg_log_u = dn.Tensor(-np.log(u_rest))
    rest = dn.sub(logits_flat,
                  dn.log(dn.add(dn.exp(dn.sub(logits_flat, mk)), neg_log_u)))
    unchosen = (sample.hard_flat() < 0.5).astype(dtype)
    phi_hat = dn.mul(rest, dn.Tensor(unchosen))
    for term in phi_hat_terms:
        phi_hat = dn.add(phi_hat, term)
    return _relaxed_topk_graph(phi_hat, spec)


# -- expected selection -------------------------------------------------------------


def expected_selection(spec: MaskDistSpec, logits):
    """E[number of selected features] per row. Differentiable when given
    a Tensor (bernoulli); constant k in subset mode."""
    if spec.kind == "subset":
        n = logits.shape[0]
        if isinstance(logits, dn.Tensor):
            return dn.Tensor(np.full(n, float(spec.k),
                                     dtype=logits.data.dtype))
        return np.full(n, float(spec.k), dtype=np.asarray(logits).dtype)
    if isinstance(logits, dn.Tensor):
        return dn.tsum(dn.sigmoid(logits), axis=1)
    return _np_sigmoid(np.asarray(logits)).sum(axis=1)

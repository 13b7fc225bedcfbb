import itertools

import numpy as np
import pytest

import lexsel.diffnet as dn
import lexsel.maskdist as md
from lexsel import lexmodel as lx
from lexsel import synthgen as sg
from lexsel.gradest import EstimatorConfig
from lexsel.imputers import ImputerSpec, ImputerStateError, FittedImputer, fit_imputer
from lexsel.lexmodel import (
    CapabilityError,
    LexConfig,
    NumericalError,
    RegimeContext,
    iwae_objective,
    masked_nll_objective,
    masked_predictive,
    predictive_mixture,
    preset_config,
    regime_targets,
    regularizer,
    restricted_predictor_train,
    selector_logits,
    validate_regime,
)

D = 8
C = 2


def _mlp(sizes, rng, scale=None):
    store = dn.init_mlp(dn.MlpSpec(sizes), rng, dtype=np.float64)
    if scale is not None:
        for p in store.params.values():
            p.data *= scale
    return store


@pytest.fixture(scope="module")
def small_model():
    rng = np.random.default_rng(0)
    theta = _mlp((D, 16, C), rng)
    gamma = _mlp((D, 16, D), rng)
    return theta, gamma


@pytest.fixture(scope="module")
def const_imp():
    return fit_imputer(ImputerSpec("constant", c=0.0))


def _degenerate_selector(pattern):
    """Selector whose logits are +-30 following the given 0/1 pattern."""
    store = _mlp((D, 16, D), np.random.default_rng(1))
    store["w0"].data[:] = 0.0
    store["b0"].data[:] = 0.0
    store["w1"].data[:] = 0.0
    store["b1"].data[:] = np.where(np.asarray(pattern) == 1.0, 30.0, -30.0)
    return store


BSPEC = md.MaskDistSpec("bernoulli", tau=0.5)


def _cfg(**kw):
    base = dict(
        predictor=dn.MlpSpec((D, 16, C)),
        selector=dn.MlpSpec((D, 16, D)),
        imputer=ImputerSpec("constant", c=0.0),
    )
    base.update(kw)
    return LexConfig(**base)


# -- configuration ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(selection="topk")
    with pytest.raises(ValueError):
        _cfg(selection="subset")                    # k missing
    with pytest.raises(ValueError):
        _cfg(selection="subset", k=5, lam=0.1)      # penalty with subset
    with pytest.raises(ValueError):
        _cfg(k=3)                                   # k without subset
    with pytest.raises(ValueError):
        _cfg(lam=-0.1)
    with pytest.raises(ValueError):
        _cfg(tau=0.0)
    with pytest.raises(ValueError):
        _cfg(regime="offline")
    with pytest.raises(ValueError):
        _cfg(selector=dn.MlpSpec((D, 16, D + 1)))
    with pytest.raises(ValueError):
        _cfg(n_mask_samples=0)
    with pytest.raises(ValueError):
        _cfg(n_imputation_samples=0)


def test_config_properties():
    cfg = _cfg(selection="subset", k=3)
    assert cfg.n_features == D
    assert cfg.n_classes == C
    spec = cfg.mask_spec()
    assert spec.kind == "subset" and spec.k == 3 and spec.tau == 0.5


def test_regime_context_requirements(small_model):
    theta, _ = small_model
    assert validate_regime("free_insitu", None) is not None
    for regime in ("fixed_theta_insitu", "self_posthoc"):
        with pytest.raises(ValueError):
            validate_regime(regime, RegimeContext())
        validate_regime(regime, RegimeContext(frozen_predictor=theta))
    with pytest.raises(ValueError):
        validate_regime("surrogate_posthoc", RegimeContext())
    validate_regime("surrogate_posthoc", RegimeContext(surrogate=theta))


def test_preset_configs():
    l2x = preset_config("l2x", 11, k=5)
    assert l2x.selection == "subset" and l2x.k == 5
    assert l2x.estimator.kind == "pathwise_st"
    assert l2x.regime == "surrogate_posthoc"
    assert l2x.imputer.kind == "constant" and l2x.imputer.c == 0.0

    invase = preset_config("invase", 11, lam=0.2)
    assert invase.selection == "bernoulli" and invase.lam == 0.2
    assert invase.estimator.kind == "reinforce"
    assert invase.regime == "free_insitu"

    realx = preset_config("realx", 11)
    assert realx.regime == "fixed_theta_insitu"
    assert realx.imputer.kind == "constant"

    lg = preset_config("lex-gaussian", 11, k=5)
    assert lg.imputer.kind == "gaussian_std"
    assert lg.estimator.kind == "rebar"

    lm = preset_config("lex-gmm", 11, n_components=4)
    assert lm.imputer.kind == "gmm"
    assert lm.imputer.n_components == 4

    with pytest.raises(ValueError):
        preset_config("shap", 11)


# -- masked predictive -----------------------------------------------------------

def test_masked_predictive_all_ones_is_plain_forward(small_model, const_imp):
    theta, _ = small_model
    rng = np.random.default_rng(2)
    x = rng.standard_normal(D)
    gauss = fit_imputer(ImputerSpec("gaussian_std"))
    with dn.no_grad():
        direct = dn.softmax(dn.mlp_logits(theta, dn.Tensor(x[None]))).data[0]
    for fitted in (const_imp, gauss):
        got = masked_predictive(theta, fitted, x, np.ones(D),
                                n_draws=5, rng=np.random.default_rng(3))
        assert np.array_equal(got, direct)


def test_masked_predictive_constant_is_deterministic(small_model, const_imp):
    theta, _ = small_model
    rng = np.random.default_rng(4)
    x = rng.standard_normal(D)
    z = (rng.random(D) < 0.5).astype(float)
    a = masked_predictive(theta, const_imp, x, z, n_draws=1,
                          rng=np.random.default_rng(0))
    b = masked_predictive(theta, const_imp, x, z, n_draws=64,
                          rng=np.random.default_rng(99))
    assert np.array_equal(a, b)


def test_masked_predictive_linear_gaussian_closed_form():
    rng = np.random.default_rng(0)
    gstd = fit_imputer(ImputerSpec("gaussian_std"))
    lin = dn.ParamStore(spec=dn.MlpSpec((D, C)))
    w = rng.standard_normal((D, C))
    b = rng.standard_normal(C)
    lin.add("w0", w)
    lin.add("b0", b)
    x = rng.standard_normal(D)
    z = np.array([1, 0, 1, 0, 0, 1, 0, 0], dtype=np.float64)
    # with a linear score the class-1 probability is E[sigmoid(t)] with
    # t normal; integrate that exactly by Gauss-Hermite quadrature
    dw = w[:, 1] - w[:, 0]
    mu = (z * x) @ dw + (b[1] - b[0])
    s2 = ((1.0 - z) * dw**2).sum()
    nodes, wts = np.polynomial.hermite.hermgauss(201)
    sig = 1.0 / (1.0 + np.exp(-(mu + np.sqrt(2.0 * s2) * nodes)))
    exact = (wts / np.sqrt(np.pi) * sig).sum()
    m2 = (wts / np.sqrt(np.pi) * sig**2).sum()
    n = 10**5
    got = masked_predictive(lin, gstd, x, z, n_draws=n,
                            rng=np.random.default_rng(5))
    se = np.sqrt(max(m2 - exact**2, 1e-30) / n)
    assert abs(got[1] - exact) < 4.0 * se


def test_masked_predictive_validation(small_model, const_imp):
    theta, _ = small_model
    x = np.zeros(D)
    with pytest.raises(ValueError):
        masked_predictive(theta, const_imp, x, np.full(D, 0.5))
    with pytest.raises(ValueError):
        masked_predictive(theta, const_imp, np.zeros((2, D)), np.ones(D))
    with pytest.raises(ValueError):
        masked_predictive(theta, const_imp, x, np.ones(D - 1))
    with pytest.raises(ValueError):
        masked_predictive(theta, const_imp, x, np.ones(D), n_draws=0)
    unfitted = FittedImputer(spec=ImputerSpec("gmm", n_components=2))
    with pytest.raises(ImputerStateError):
        masked_predictive(theta, unfitted, x, np.zeros(D),
                          rng=np.random.default_rng(0))


# -- predictive mixture ----------------------------------------------------------

def test_mixture_exact_matches_independent_enumeration(small_model, const_imp):
    theta, gamma = small_model
    x = np.random.default_rng(6).standard_normal(D)
    mix = predictive_mixture(theta, gamma, const_imp, x, BSPEC, mode="exact")
    logits = selector_logits(gamma, x[None])[0]
    sig = 1.0 / (1.0 + np.exp(-logits))
    acc = np.zeros(C)
    for bits in itertools.product([0.0, 1.0], repeat=D):
        z = np.array(bits)
        acc += np.prod(np.where(z == 1.0, sig, 1.0 - sig)) \
            * masked_predictive(theta, const_imp, x, z)
    assert np.abs(acc - mix).max() < 1e-8


def test_mixture_degenerate_selector_equals_masked_predictive(
        small_model, const_imp):
    theta, _ = small_model
    pattern = np.array([1.0, 0.0] * (D // 2))
    gamma = _degenerate_selector(pattern)
    x = np.random.default_rng(7).standard_normal(D)
    mix = predictive_mixture(theta, gamma, const_imp, x, BSPEC, mode="exact")
    direct = masked_predictive(theta, const_imp, x, pattern)
    assert np.abs(mix - direct).max() < 1e-9


def test_mixture_exact_vs_monte_carlo_d3(const_imp):
    rng = np.random.default_rng(8)
    theta = _mlp((3, 8, C), rng)
    gamma = _mlp((3, 8, 3), rng)
    x = rng.standard_normal(3)
    spec = md.MaskDistSpec("bernoulli", tau=0.5)
    exact = predictive_mixture(theta, gamma, const_imp, x, spec, mode="exact")
    n = 10**4
    mc = predictive_mixture(theta, gamma, const_imp, x, spec, mode="mc",
                            n_mask_samples=n, rng=np.random.default_rng(9))
    # per-mask probabilities live in [0,1], so SE <= 0.5/sqrt(n)
    assert np.abs(exact - mc).max() < 4.0 * 0.5 / np.sqrt(n)


def test_mixture_is_simplex(small_model):
    theta, gamma = small_model
    gauss = fit_imputer(ImputerSpec("gaussian_std"))
    x = np.random.default_rng(10).standard_normal(D)
    for mode in ("exact", "mc"):
        p = predictive_mixture(theta, gamma, gauss, x, BSPEC, mode=mode,
                               n_draws=3, rng=np.random.default_rng(11))
        assert np.all(p >= 0.0)
        assert abs(p.sum() - 1.0) < 1e-12


def test_mixture_capability_errors(const_imp):
    rng = np.random.default_rng(12)
    d_big = 13
    theta = _mlp((d_big, 8, C), rng)
    gamma = _mlp((d_big, 8, d_big), rng)
    x = rng.standard_normal(d_big)
    with pytest.raises(CapabilityError):
        predictive_mixture(theta, gamma, const_imp, x, BSPEC, mode="exact")
    sub = md.MaskDistSpec("subset", k=3, tau=0.5)
    with pytest.raises(CapabilityError):
        predictive_mixture(theta, gamma, const_imp, x, sub, mode="exact")
    # auto falls back to sampling
    p = predictive_mixture(theta, gamma, const_imp, x, BSPEC, mode="auto",
                           n_mask_samples=64, rng=np.random.default_rng(13))
    assert abs(p.sum() - 1.0) < 1e-12


# -- multi-sample bound ----------------------------------------------------------

def test_iwae_single_sample_equals_drawn_logprob(small_model, const_imp):
    theta, gamma = small_model
    rng = np.random.default_rng(14)
    x = rng.standard_normal((6, D))
    y = rng.integers(0, C, 6)
    loss, rec = iwae_objective(theta, gamma, const_imp, x, y, BSPEC,
                               n_mask_samples=1, n_draws=1,
                               rng=np.random.default_rng(15))
    z = rec.masks.hard[:, 0, :]
    xt = z * x
    with dn.no_grad():
        lp = dn.log_softmax(dn.mlp_logits(theta, dn.Tensor(xt))).data
    direct = np.clip(lp[np.arange(6), y], -30.0, 0.0)
    assert np.allclose(rec.per_example_bound, direct, atol=1e-14)
    assert loss == pytest.approx(-rec.per_example_bound.sum(), abs=1e-12)


def test_iwae_deterministic_selector_constant_is_exact(small_model, const_imp):
    theta, _ = small_model
    pattern = np.array([1.0, 0.0] * (D // 2))
    gamma = _degenerate_selector(pattern)
    rng = np.random.default_rng(16)
    x = rng.standard_normal((4, D))
    y = rng.integers(0, C, 4)
    xt = np.where(pattern == 1.0, x, 0.0)
    with dn.no_grad():
        lp = dn.log_softmax(dn.mlp_logits(theta, dn.Tensor(xt))).data
    direct = np.clip(lp[np.arange(4), y], -30.0, 0.0)
    for l, k in ((1, 1), (7, 3), (10, 1)):
        _, rec = iwae_objective(theta, gamma, const_imp, x, y, BSPEC,
                                n_mask_samples=l, n_draws=k,
                                rng=np.random.default_rng(17))
        assert np.allclose(rec.per_example_bound, direct, atol=1e-12)


def test_iwae_bound_ordering(const_imp):
    rng = np.random.default_rng(0)
    theta = _mlp((D, 16, C), rng, scale=5.0)
    gamma = _mlp((D, 16, D), rng)
    x = rng.standard_normal((4, D))
    y = rng.integers(0, C, 4)
    exact = np.mean([
        np.log(predictive_mixture(theta, gamma, const_imp, x[i], BSPEC,
                                  mode="exact")[y[i]])
        for i in range(4)
    ])
    b1, b10 = [], []
    for i in range(1000):
        r = np.random.default_rng(1000 + i)
        _, r1 = iwae_objective(theta, gamma, const_imp, x, y, BSPEC,
                               n_mask_samples=1, rng=r)
        _, r10 = iwae_objective(theta, gamma, const_imp, x, y, BSPEC,
                                n_mask_samples=10, rng=r)
        b1.append(r1.per_example_bound.mean())
        b10.append(r10.per_example_bound.mean())
    b1 = np.asarray(b1)
    b10 = np.asarray(b10)
    se1 = b1.std() / np.sqrt(b1.size)
    se10 = b10.std() / np.sqrt(b10.size)
    gap_lo = b10.mean() - b1.mean()
    gap_hi = exact - b10.mean()
    assert gap_lo > 3.0 * np.hypot(se1, se10)
    assert gap_hi > 3.0 * se10


def test_iwae_nonfinite_raises_with_diagnostics(small_model, const_imp):
    theta, gamma = small_model
    poisoned = theta.copy()
    poisoned["w1"].data[0, 0] = np.nan   # past the relu, so it reaches the loss
    x = np.random.default_rng(18).standard_normal((3, D))
    y = np.zeros(3, dtype=np.int64)
    with pytest.raises(NumericalError) as exc:
        iwae_objective(poisoned, gamma, const_imp, x, y, BSPEC,
                       rng=np.random.default_rng(19))
    diag = exc.value.diagnostics
    assert diag["example_indices"]
    assert "selector_logit_min" in diag


def test_iwae_retains_mask_record(small_model, const_imp):
    theta, gamma = small_model
    rng = np.random.default_rng(20)
    x = rng.standard_normal((5, D))
    y = rng.integers(0, C, 5)
    _, rec = iwae_objective(theta, gamma, const_imp, x, y, BSPEC,
                            n_mask_samples=4, rng=np.random.default_rng(21))
    assert rec.masks.hard.shape == (5, 4, D)
    assert np.all((rec.masks.relaxed >= 0.0) & (rec.masks.relaxed <= 1.0))
    assert rec.selector_logits.shape == (5, D)
    logits_rep = np.repeat(rec.selector_logits, 4, axis=0)
    expect = md.logprob_np(BSPEC, logits_rep, rec.masks.hard_flat())
    assert np.allclose(rec.log_prob.ravel(), expect, atol=1e-12)

    sub = md.MaskDistSpec("subset", k=3, tau=0.5)
    _, rec_s = iwae_objective(theta, gamma, const_imp, x, y, sub,
                              n_mask_samples=4, rng=np.random.default_rng(22))
    assert rec_s.masks.order is not None
    assert np.all(rec_s.masks.hard.sum(axis=2) == 3)


def test_masked_nll_objective_rejects_ragged_rows(small_model, const_imp):
    theta, _ = small_model
    x = np.zeros((3, D))
    with pytest.raises(ValueError):
        masked_nll_objective(theta, const_imp, x, np.zeros(3, dtype=int),
                             np.zeros((7, D)), 1, np.random.default_rng(0))


# -- selection-size penalty ------------------------------------------------------

def test_regularizer_closed_forms():
    out = regularizer("l1", np.zeros((1, 11)), 1.0)
    assert out.data[0] == pytest.approx(5.5, abs=1e-12)
    tiny = regularizer("l1", np.full((1, 4), -40.0), 2.0)
    assert tiny.data[0] < 1e-15
    zero = regularizer("subset", np.random.standard_normal((3, 5)), 0.0)
    assert np.array_equal(zero.data, np.zeros(3))
    with pytest.raises(ValueError):
        regularizer("l2", np.zeros((1, 3)), 1.0)
    with pytest.raises(ValueError):
        regularizer("l1", np.zeros((1, 3)), -1.0)


def test_regularizer_matches_monte_carlo():
    logits = np.random.default_rng(1).uniform(-2.0, 2.0, 6)
    n = 10**5
    sample = md.sample_masks(md.MaskDistSpec("bernoulli"),
                             np.tile(logits, (n, 1)), 1,
                             np.random.default_rng(2))
    sizes = sample.hard[:, 0, :].sum(axis=1)
    closed = float(regularizer("l1", logits[None], 1.0).data[0])
    se = sizes.std() / np.sqrt(n)
    assert abs(sizes.mean() - closed) < 4.0 * se


def test_regularizer_gradient_is_scaled_sigmoid_slope():
    logits = np.array([[0.3, -1.2, 2.0]])
    lam = 0.7
    leaf = dn.Tensor(logits, requires_grad=True)
    dn.backward(dn.tsum(regularizer("l1", leaf, lam)))
    sig = 1.0 / (1.0 + np.exp(-logits))
    assert np.allclose(leaf.grad, lam * sig * (1.0 - sig), atol=1e-12)


# -- regimes ---------------------------------------------------------------------

def test_regime_targets_identity(small_model):
    theta, _ = small_model
    y = np.array([0, 1, 1, 0])
    x = np.zeros((4, D))
    for regime in ("free_insitu", "fixed_theta_insitu"):
        ctx = RegimeContext(frozen_predictor=theta)
        assert np.array_equal(regime_targets(regime, ctx, x, y), y)


def test_regime_targets_deterministic_predictor():
    store = dn.ParamStore(spec=dn.MlpSpec((D, C)))
    w = np.zeros((D, C))
    w[0, 0], w[0, 1] = 1e4, -1e4   # saturated on the sign of feature 1
    store.add("w0", w)
    store.add("b0", np.zeros(C))
    x = np.random.default_rng(24).standard_normal((50, D))
    with dn.no_grad():
        want = dn.mlp_logits(store, dn.Tensor(x)).data.argmax(axis=1)
    got = regime_targets("self_posthoc", RegimeContext(frozen_predictor=store),
                         x, np.zeros(50), np.random.default_rng(25))
    assert np.array_equal(got, want)


def test_regime_targets_sampled_rate(small_model):
    theta, _ = small_model
    x = np.repeat(np.random.default_rng(26).standard_normal((1, D)),
                  20000, axis=0)
    from lexsel.lexmodel import _class_probs
    p1 = _class_probs(theta, x[:1])[0, 1]
    got = regime_targets("surrogate_posthoc", RegimeContext(surrogate=theta),
                         x, np.zeros(20000), np.random.default_rng(27))
    se = np.sqrt(p1 * (1.0 - p1) / 20000)
    assert abs((got == 1).mean() - p1) < 3.0 * se


def test_regime_targets_missing_context_raises(small_model):
    x = np.zeros((2, D))
    y = np.zeros(2)
    with pytest.raises(ValueError):
        regime_targets("self_posthoc", None, x, y)
    with pytest.raises(ValueError):
        regime_targets("surrogate_posthoc", RegimeContext(), x, y)


# -- surrogate training ----------------------------------------------------------

def _feature1_data(n, rng):
    x = rng.standard_normal((n, 4))
    p1 = 1.0 / (1.0 + np.exp(-2.0 * x[:, 0]))
    y = (rng.random(n) < p1).astype(np.int64)
    return x, y


def test_restricted_training_makes_progress():
    x, y = _feature1_data(4000, np.random.default_rng(0))
    store, losses = restricted_predictor_train(
        dn.MlpSpec((4, 32, 32, 2)), x, y, np.random.default_rng(1), epochs=30)
    fresh = dn.init_mlp(dn.MlpSpec((4, 32, 32, 2)), np.random.default_rng(9),
                        dtype=np.float64)
    r = np.random.default_rng(10)
    xm = np.where(r.random(x.shape) < 0.5, x, 0.0)

    def nll(s):
        with dn.no_grad():
            lp = dn.log_softmax(dn.mlp_logits(s, dn.Tensor(xm))).data
        return -lp[np.arange(len(y)), y].mean()

    assert nll(store) < nll(fresh)
    assert losses[-1] < losses[0]


def test_restricted_prediction_ignores_irrelevant_features():
    x, y = _feature1_data(4000, np.random.default_rng(0))
    store, _ = restricted_predictor_train(
        dn.MlpSpec((4, 32, 32, 2)), x, y, np.random.default_rng(1), epochs=30)
    from lexsel.lexmodel import _class_probs
    xt = np.random.default_rng(2).standard_normal((500, 4))
    only_first = np.zeros_like(xt)
    only_first[:, 0] = xt[:, 0]
    tv = 0.5 * np.abs(_class_probs(store, only_first)
                      - _class_probs(store, xt)).sum(axis=1)
    assert tv.mean() < 0.05


def test_restricted_full_input_accuracy_near_plain_classifier():
    ds = sg.gen_synthetic("S3", n_train=10000, n_test=10000, seed=0)
    from lexsel.lexmodel import _class_probs
    sur, _ = restricted_predictor_train(
        dn.MlpSpec((11, 300, 300, 2)), ds.x_train, ds.y_train,
        np.random.default_rng(7), epochs=150, batch_size=256)
    plain = dn.init_mlp(dn.MlpSpec((11, 100, 100, 2)),
                        np.random.default_rng(3), dtype=np.float64)
    rng = np.random.default_rng(3)
    for _ in range(40):
        order = rng.permutation(len(ds.x_train))
        for s0 in range(0, len(ds.x_train), 128):
            idx = order[s0:s0 + 128]
            lp = dn.log_softmax(
                dn.mlp_logits(plain, dn.Tensor(ds.x_train[idx])))
            loss = dn.neg(dn.tmean(dn.gather_cols(lp, ds.y_train[idx])))
            plain.zero_grad()
            dn.backward(loss, plain)
            dn.adam_step(plain, 1e-3)
    acc_sur = (_class_probs(sur, ds.x_test).argmax(1) == ds.y_test).mean()
    acc_pl = (_class_probs(plain, ds.x_test).argmax(1) == ds.y_test).mean()
    assert acc_pl - acc_sur < 0.02

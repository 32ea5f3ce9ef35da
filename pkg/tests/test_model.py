import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from losspath.errors import ConfigError, NumericError, ShapeError
from losspath.model import (
    LossSpec,
    ModelSpec,
    batch_grad,
    empirical_loss,
    factored,
    forward,
    grad_check,
    init_params,
    ntk_gram,
    output_factored,
    per_sample_grad,
    per_sample_grads,
    sample_losses,
    unpack,
)
from losspath.numkit import Rng

SPECS = {
    "linear": ModelSpec("linear", 3),
    "features": ModelSpec("features", 3, feature="rff", feature_dim=10, feature_seed=2),
    "mlp2": ModelSpec("mlp2", 3, width=8),
    "mlp2-ntk": ModelSpec("mlp2", 3, width=8, scaling="ntk"),
}
LOSSES = {
    "square": LossSpec("square"),
    "logistic": LossSpec("logistic"),
    "reg-square": LossSpec("reg-square", lam=0.2),
}


def _point(seed, d=3):
    g = np.random.default_rng(seed)
    return g.standard_normal(d), np.array([1.0 if g.random() < 0.5 else -1.0])


def _mlp2_loop(spec, w, x):
    """Scalar-by-scalar forward pass of the two-layer network."""
    P = unpack(spec, w)
    s = 1.0 / math.sqrt(spec.width) if spec.scaling == "ntk" else 1.0
    out = []
    for k in range(spec.d_out):
        acc = 0.0
        for j in range(spec.width):
            h = P["b1"][j] + sum(P["W1"][j, i] * x[i] for i in range(spec.d_in))
            a = math.log1p(math.exp(h)) if spec.activation == "softplus" else max(h, 0.0)
            acc += P["C"][k, j] * a
        out.append(s * acc)
    return np.array(out)


def test_mlp2_forward_matches_scalar_loop():
    for spec in (SPECS["mlp2"], SPECS["mlp2-ntk"], ModelSpec("mlp2", 3, 2, width=5, activation="relu")):
        w = init_params(spec, Rng(1))
        X = np.random.default_rng(2).standard_normal((4, 3))
        F = forward(spec, w, X)
        for i in range(4):
            np.testing.assert_allclose(F[i], _mlp2_loop(spec, w, X[i]), rtol=1e-13, atol=1e-14)


def test_zero_init_and_seed_determinism():
    assert not np.any(init_params(ModelSpec("mlp2", 3, width=4, zero_init=True), Rng(0)))
    a = init_params(SPECS["mlp2"], Rng(9))
    b = init_params(SPECS["mlp2"], Rng(9))
    assert a.tobytes() == b.tobytes()


def test_first_layer_init_std():
    d = 20
    spec = ModelSpec("mlp2", d, width=100)
    for seed in range(10):
        W1 = unpack(spec, init_params(spec, Rng(seed)))["W1"]
        assert abs(W1.std() / (1 / math.sqrt(d)) - 1.0) < 0.2
    ntk = ModelSpec("mlp2", d, width=100, scaling="ntk")
    assert abs(unpack(ntk, init_params(ntk, Rng(0)))["W1"].std() - 1.0) < 0.2


def test_loss_values_at_simple_points():
    lin = ModelSpec("linear", 2)
    w = np.array([1.0, 0.0])
    x = np.array([[2.0, 5.0]])
    assert sample_losses(lin, LossSpec("square"), w, x, [[2.0]])[0] == 0.0
    assert sample_losses(lin, LossSpec("logistic"), np.zeros(2), x, [[1.0]])[0] == pytest.approx(math.log(2), abs=1e-15)
    assert sample_losses(lin, LossSpec("reg-square", lam=0.0), np.zeros(2), x, [[1.0]])[0] == 0.5
    assert sample_losses(lin, LossSpec("reg-square", lam=2.0), w, x, [[0.0]])[0] == pytest.approx(2.0 + 1.0)


def test_logistic_is_stable_at_large_margins():
    lin = ModelSpec("linear", 1)
    vals = sample_losses(lin, LossSpec("logistic"), np.array([1.0]), [[800.0], [-800.0]], [[1.0], [1.0]])
    assert vals[0] == 0.0 and vals[1] == pytest.approx(800.0)


def test_linear_square_gradient_by_hand():
    g = per_sample_grad(ModelSpec("linear", 3), LossSpec("square"), np.zeros(3), [1.0, 0.0, 0.0], [1.0])
    np.testing.assert_array_equal(g, [-1.0, 0.0, 0.0])


def test_gradient_vanishes_at_stationary_point():
    spec = SPECS["mlp2"]
    w = init_params(spec, Rng(3))
    x = np.random.default_rng(0).standard_normal(3)
    y = forward(spec, w, x[None])[0]
    g = per_sample_grad(spec, LossSpec("square"), w, x, y)
    assert np.abs(g).max() <= 1e-12


@pytest.mark.parametrize("model", sorted(SPECS))
@pytest.mark.parametrize("loss", sorted(LOSSES))
def test_grad_check_on_random_probes(model, loss):
    spec = SPECS[model]
    for k in range(3):
        x, y = _point(k)
        w = init_params(spec, Rng(k).child("w"))
        assert grad_check(spec, LOSSES[loss], w, x, y) <= 1e-5


def test_frozen_blocks_have_zero_gradient():
    spec = ModelSpec("mlp2", 3, width=4, freeze_first=True, freeze_bias=True)
    w = init_params(spec, Rng(0))
    x, y = _point(1)
    g = per_sample_grad(spec, LossSpec("square"), w, x, y)
    assert not np.any(g[: 3 * 4 + 4])
    assert np.any(g[16:])


def test_batch_grad_matches_sequential_loop():
    spec, loss = SPECS["mlp2"], LossSpec("logistic")
    w = init_params(spec, Rng(4))
    g = np.random.default_rng(5)
    X = g.standard_normal((5, 3))
    Y = np.sign(g.standard_normal((5, 1)))
    ref = np.zeros(spec.n_params)
    for i in range(5):
        ref += per_sample_grad(spec, loss, w, X[i], Y[i])
    ref /= 5
    np.testing.assert_allclose(batch_grad(spec, loss, w, X, Y), ref, atol=1e-14)
    np.testing.assert_allclose(batch_grad(spec, loss, w, X, Y, [2]), per_sample_grad(spec, loss, w, X[2], Y[2]),
                               atol=1e-15)


def test_opposite_gradients_cancel():
    spec = ModelSpec("linear", 1)
    g = batch_grad(spec, LossSpec("square"), np.zeros(1), [[1.0], [1.0]], [[1.0], [-1.0]])
    assert g[0] == 0.0


def test_batch_grad_rejects_bad_indices():
    spec = ModelSpec("linear", 1)
    with pytest.raises(ConfigError):
        batch_grad(spec, LossSpec(), np.zeros(1), [[1.0]], [[1.0]], [])
    with pytest.raises(ConfigError):
        batch_grad(spec, LossSpec(), np.zeros(1), [[1.0]], [[1.0]], [3])


def test_ntk_gram_linear_is_data_gram():
    X = np.random.default_rng(0).standard_normal((4, 3))
    spec = ModelSpec("linear", 3)
    for w in (np.zeros(3), np.ones(3)):
        np.testing.assert_allclose(ntk_gram(spec, w, X), X @ X.T, atol=1e-14)


def _fd_output_jacobian(spec, w, X, h=1e-6):
    J = np.zeros((len(X), spec.n_params))
    for c in range(spec.n_params):
        wp, wm = w.copy(), w.copy()
        wp[c] += h
        wm[c] -= h
        J[:, c] = (forward(spec, wp, X) - forward(spec, wm, X))[:, 0] / (2 * h)
    return J


def test_ntk_gram_matches_stacked_jacobian():
    spec = ModelSpec("mlp2", 3, width=16)
    w = init_params(spec, Rng(2))
    X = np.random.default_rng(3).standard_normal((4, 3))
    J = _fd_output_jacobian(spec, w, X)
    np.testing.assert_allclose(ntk_gram(spec, w, X), J @ J.T, rtol=1e-7, atol=1e-9)
    single = ntk_gram(spec, w, X[:1])
    assert single.shape == (1, 1) and single[0, 0] >= 0


def test_ntk_gram_needs_scalar_output():
    with pytest.raises(ConfigError):
        ntk_gram(ModelSpec("linear", 2, 2), np.zeros(4), np.ones((1, 2)))


def test_explicit_jacobian_matches_finite_differences():
    spec, loss = SPECS["mlp2"], LossSpec("square")
    w = init_params(spec, Rng(6))
    g = np.random.default_rng(7)
    X, Y = g.standard_normal((3, 3)), g.standard_normal((3, 1))
    J = per_sample_grads(spec, loss, w, X, Y)
    h = 1e-6
    for c in range(0, spec.n_params, 5):
        wp, wm = w.copy(), w.copy()
        wp[c] += h
        wm[c] -= h
        num = (sample_losses(spec, loss, wp, X, Y) - sample_losses(spec, loss, wm, X, Y)) / (2 * h)
        np.testing.assert_allclose(J[:, c], num, rtol=1e-6, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(SPECS)), st.sampled_from(sorted(LOSSES)))
def test_factored_quantities_match_explicit_jacobian(seed, model, loss):
    spec = SPECS[model]
    w = init_params(spec, Rng(seed))
    g = np.random.default_rng(seed)
    X = g.standard_normal((5, 3))
    Y = np.sign(g.standard_normal((5, 1)))
    fac = factored(spec, LOSSES[loss], w, X, Y)
    J = fac.explicit()
    v = g.standard_normal(spec.n_params)
    scale = max(1.0, np.abs(J).max() ** 2)
    np.testing.assert_allclose(fac.sqnorms(), np.sum(J * J, axis=1), rtol=1e-12, atol=1e-12 * scale)
    np.testing.assert_allclose(fac.gram(), J @ J.T, rtol=1e-12, atol=1e-12 * scale)
    np.testing.assert_allclose(fac.dot(v), J @ v, rtol=1e-11, atol=1e-11 * scale)
    np.testing.assert_allclose(fac.mean([0, 3]), J[[0, 3]].mean(axis=0), atol=1e-13 * scale)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linear", "features"]))
def test_square_gradient_is_residual_times_output_gradient(seed, model):
    spec = SPECS[model]
    g = np.random.default_rng(seed)
    w = g.standard_normal(spec.n_params)
    X, Y = g.standard_normal((4, 3)), g.standard_normal((4, 1))
    r = forward(spec, w, X) - Y
    Jf = output_factored(spec, w, X).explicit()
    np.testing.assert_allclose(per_sample_grads(spec, LossSpec("square"), w, X, Y), r * Jf, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["square", "logistic"]))
def test_gradient_norm_through_tangent_kernel(seed, loss):
    spec = SPECS["mlp2"]
    w = init_params(spec, Rng(seed))
    g = np.random.default_rng(seed)
    X = g.standard_normal((4, 3))
    Y = np.sign(g.standard_normal((4, 1)))
    F = forward(spec, w, X)
    if loss == "square":
        slope = (F - Y)[:, 0]
    else:
        slope = -Y[:, 0] / (1.0 + np.exp(Y[:, 0] * F[:, 0]))
    theta = np.diag(ntk_gram(spec, w, X))
    sq = factored(spec, LossSpec(loss), w, X, Y).sqnorms()
    np.testing.assert_allclose(sq, slope ** 2 * theta, rtol=1e-10, atol=1e-10)


def test_loss_cap_rescales_loss_and_gradient():
    spec = SPECS["mlp2"]
    w = init_params(spec, Rng(0))
    x, y = _point(0)
    a = per_sample_grad(spec, LossSpec("logistic"), w, x, y)
    b = per_sample_grad(spec, LossSpec("logistic", cap=4.0), w, x, y)
    np.testing.assert_allclose(b, a / 4.0, rtol=1e-14)


def test_empirical_loss_is_mean():
    spec = ModelSpec("linear", 1)
    assert empirical_loss(spec, LossSpec(), np.array([1.0]), [[1.0], [3.0]], [[0.0], [0.0]]) == pytest.approx(2.5)


def test_shape_and_spec_errors():
    spec = ModelSpec("linear", 2)
    with pytest.raises(ShapeError):
        forward(spec, np.zeros(3), np.ones((1, 2)))
    with pytest.raises(ShapeError):
        forward(spec, np.zeros(2), np.ones((1, 3)))
    with pytest.raises(ConfigError):
        ModelSpec("conv", 2)
    with pytest.raises(ConfigError):
        ModelSpec("mlp2", 2)
    with pytest.raises(ConfigError):
        LossSpec("hinge")
    with pytest.raises(ConfigError):
        LossSpec("reg-square", lam=-1.0)
    with pytest.raises(ConfigError):
        sample_losses(ModelSpec("linear", 1, 2), LossSpec("logistic"), np.zeros(2), [[1.0]], [[1.0, 1.0]])


def test_non_finite_forward_names_layer():
    spec = ModelSpec("mlp2", 1, width=2)
    w = np.array([np.inf, 0.0, 0.0, 0.0, 1.0, 1.0])
    with pytest.raises(NumericError, match="layer 1"):
        forward(spec, w, [[1.0]])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from losspath.errors import ConfigError
from losspath.flow import FlowConfig, Problem, integrate_gf, integrate_sgf
from losspath.lpk import (
    accumulate,
    eval_at,
    gamma_gf,
    gamma_sgf,
    gamma_trace,
    gram_sum_residual,
    km_residual,
    km_sum,
    read_gram_csv,
    write_gamma_trace_csv,
    write_gram_csv,
)
from losspath.model import LossSpec, ModelSpec, init_params
from losspath.numkit import Rng

LIN1 = ModelSpec("linear", 1)


def quad(points):
    z = np.asarray(points, dtype=np.float64)
    return Problem(LIN1, LossSpec("square"), np.ones((len(z), 1)), z[:, None])


def small_mlp(seed, n=6, loss="logistic"):
    spec = ModelSpec("mlp2", 2, width=5)
    g = np.random.default_rng(seed)
    X = g.standard_normal((n, 2))
    Y = np.sign(g.standard_normal((n, 1))) if loss == "logistic" else g.standard_normal((n, 1))
    return Problem(spec, LossSpec(loss), X, Y), init_params(spec, Rng(seed))


def test_constant_gradients_give_constant_kernel():
    T = 2.0
    tr = integrate_gf(quad([-1.0, 1.0]), FlowConfig(0.01, T, record="full"), np.zeros(1))
    acc = accumulate(tr, "full")
    np.testing.assert_allclose(acc.diag, [T, T], rtol=1e-12)
    np.testing.assert_allclose(acc.gram, [[T, -T], [-T, T]], rtol=1e-12)
    assert acc.total == pytest.approx(0.0, abs=1e-12)
    assert gamma_gf(tr) == 0.0


def test_zero_gradients_give_zero_kernel():
    tr = integrate_gf(quad([1.0, 1.0]), FlowConfig(0.1, 1.0, record="full"), np.ones(1))
    acc = accumulate(tr, "full")
    assert not np.any(acc.gram) and acc.total == 0.0
    assert gamma_gf(tr) == 0.0
    assert gram_sum_residual(tr) == 0.0


def test_two_point_kernel_trace_matches_integral():
    T = 1.0
    tr = integrate_gf(quad([0.0, 2.0]), FlowConfig(1e-4, T), np.zeros(1))
    assert abs(accumulate(tr).trace - (2 * T + 1 - math.exp(-2 * T))) <= 1e-3
    assert gram_sum_residual(tr) <= 1e-3


def test_two_point_gamma_matches_closed_form():
    tr = integrate_gf(quad([0.0, 2.0]), FlowConfig(1e-5, 1.0), np.zeros(1))
    exact = math.sqrt((1 - math.exp(-2)) / 2) * math.sqrt(2 + 1 - math.exp(-2))
    assert exact == pytest.approx(1.113, abs=5e-4)
    assert abs(gamma_gf(tr) - exact) <= 1e-4


def test_gram_sum_residual_is_first_order():
    r = [gram_sum_residual(integrate_gf(quad([0.0, 2.0]), FlowConfig(eta, 1.0), np.zeros(1)))
         for eta in (2e-3, 1e-3)]
    assert 1.6 <= r[0] / r[1] <= 2.4


def test_total_sum_equals_step_direction_sum():
    prob, w0 = small_mlp(0)
    tr = integrate_gf(prob, FlowConfig(0.05, 1.0, record="full"), w0)
    full = accumulate(tr, "full")
    diag = accumulate(tr, "diag")
    assert full.total == pytest.approx(diag.total, rel=1e-10)
    np.testing.assert_allclose(full.diag, diag.diag, rtol=1e-12)
    np.testing.assert_allclose(np.diag(full.gram), diag.diag, rtol=1e-12)


def _alternating_sgf_oracle(points, sched, w0):
    """Per-interval integrals of the two-point quadratic with singleton batches."""
    n = len(points)
    w = w0
    total = 0.0
    for (i,) in sched:
        z = points[i]
        a = w - z
        B = a * a * (1 - math.exp(-2)) / 2
        D = 0.0
        for zp in points:
            c = z - zp
            D += a * a * (1 - math.exp(-2)) / 2 + 2 * c * a * (1 - math.exp(-1)) + c * c
        total += math.sqrt(B) * math.sqrt(D)
        w = z + a * math.exp(-1)
    return 2.0 / n * total


def test_gamma_sgf_alternating_singletons():
    pts = [0.0, 2.0]
    sched = np.array([[0], [1], [0], [1]])
    tr = integrate_sgf(quad(pts), FlowConfig(1e-4, 4.0, batch=1), np.array([1.0]), schedule=sched)
    assert abs(gamma_sgf(tr) - _alternating_sgf_oracle(pts, sched, 1.0)) <= 1e-3


def test_gamma_sgf_single_full_interval_is_gamma_gf():
    prob, w0 = small_mlp(1)
    cfg = FlowConfig(1e-3, 1.0, batch=prob.n)
    tr = integrate_sgf(prob, cfg, w0, Rng(0))
    gf = integrate_gf(prob, cfg, w0)
    # the batch factor is the Riemann sum of the loss drop, so they agree to O(eta)
    assert gamma_sgf(tr) == pytest.approx(gamma_gf(gf), rel=1e-3)


def test_gamma_sgf_zero_gradients_and_mode_errors():
    tr = integrate_sgf(quad([1.0, 1.0]), FlowConfig(0.5, 2.0, batch=1), np.ones(1), Rng(0))
    assert gamma_sgf(tr) == 0.0
    gf = integrate_gf(quad([0.0, 2.0]), FlowConfig(0.5, 1.0), np.zeros(1))
    with pytest.raises(ConfigError):
        gamma_sgf(gf)
    with pytest.raises(ConfigError):
        gram_sum_residual(tr)
    with pytest.raises(ConfigError):
        accumulate(gf, "full")
    with pytest.raises(ConfigError):
        accumulate(gf, "sparse")


def test_km_residual_zero_horizon():
    tr = integrate_gf(quad([0.0, 2.0]), FlowConfig(0.1, 0.0), np.zeros(1), probes=(np.ones((1, 1)), [[5.0]]))
    assert km_residual(tr)[0] == 0.0


def test_km_residual_training_probe_is_first_order():
    res = {}
    for eta in (1e-3, 5e-4):
        tr = integrate_gf(quad([0.0, 2.0]), FlowConfig(eta, 1.0), np.zeros(1), probes=(np.ones((1, 1)), [[2.0]]))
        res[eta] = km_residual(tr)[0]
    assert res[1e-3] <= 5 * 1e-3
    assert 1.6 <= res[1e-3] / res[5e-4] <= 2.4


def test_km_sum_is_mean_kernel_row():
    prob, w0 = small_mlp(2)
    Xp = np.random.default_rng(9).standard_normal((3, 2))
    Yp = np.array([[1.0], [-1.0], [1.0]])
    tr = integrate_gf(prob, FlowConfig(0.05, 1.0, record="full"), w0, probes=(Xp, Yp))
    np.testing.assert_allclose(km_sum(tr), tr.probe_cross.mean(axis=1), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(km_residual(tr, Xp, Yp), km_residual(tr), atol=1e-12)


def test_km_residual_needs_probes():
    tr = integrate_gf(quad([0.0, 2.0]), FlowConfig(0.5, 1.0), np.zeros(1))
    with pytest.raises(ConfigError):
        km_residual(tr)


def test_eval_at_constant_gradients():
    T = 2.0
    tr = integrate_gf(quad([-1.0, 1.0]), FlowConfig(0.01, T), np.zeros(1))
    K = eval_at(tr, ([[1.0]], [[3.0]]), ([[1.0]], [[-2.0]]))
    assert K[0, 0] == pytest.approx(T * (-3.0) * 2.0, rel=1e-12)
    assert eval_at(tr, ([[1.0]], [[3.0]]), ([[1.0]], [[3.0]]))[0, 0] >= 0


def test_eval_at_coarse_stride_is_close():
    spec = ModelSpec("mlp2", 2, width=16)
    g = np.random.default_rng(3)
    prob = Problem(spec, LossSpec("logistic"), g.standard_normal((8, 2)), np.sign(g.standard_normal((8, 1))))
    w0 = init_params(spec, Rng(3))
    z = (g.standard_normal((2, 2)), [[1.0], [-1.0]])
    fine = eval_at(integrate_gf(prob, FlowConfig(1e-3, 0.5, checkpoint_every=1), w0), z, z)
    coarse = eval_at(integrate_gf(prob, FlowConfig(1e-3, 0.5, checkpoint_every=8), w0), z, z)
    assert np.abs(coarse - fine).max() <= 0.02 * np.abs(fine).max()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["logistic", "square"]))
def test_kernel_is_psd_and_cauchy_schwarz(seed, loss):
    prob, w0 = small_mlp(seed, loss=loss)
    tr = integrate_gf(prob, FlowConfig(0.1, 2.0, record="full", checkpoint_every=5), w0)
    acc = accumulate(tr, "full")
    K = acc.gram
    np.testing.assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K)
    d = np.diag(K)
    assert np.all(d >= 0)
    assert np.all(np.abs(K) <= np.sqrt(np.outer(d, d)) * (1 + 1e-12) + 1e-15)
    for _, _, G in tr.segments:
        assert np.linalg.eigvalsh(G).min() >= -1e-8 * max(np.trace(G), 1e-300)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["logistic", "square"]))
def test_gamma_respects_lipschitz_envelope(seed, loss):
    prob, w0 = small_mlp(seed, loss=loss)
    T = 2.0
    tr = integrate_gf(prob, FlowConfig(0.05, T), w0)
    L = math.sqrt(tr.sqnorms.max())
    cap = max(tr.loss_drop, 0.0)
    assert gamma_gf(tr) <= 2 * math.sqrt(cap) * L * math.sqrt(T / tr.n) * (1 + 1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_interval_diagonals_add_up(seed, m):
    prob, w0 = small_mlp(seed)
    tr = integrate_sgf(prob, FlowConfig(0.25, 3.0, batch=m), w0, Rng(seed))
    acc = accumulate(tr)
    assert acc.interval_diag.sum() == pytest.approx(acc.trace, rel=1e-12)
    assert np.all(acc.interval_batch >= 0)
    assert math.isfinite(gamma_sgf(tr))


def test_gamma_trace_ends_at_gamma():
    prob, w0 = small_mlp(4)
    tr = integrate_gf(prob, FlowConfig(0.05, 2.0, checkpoint_every=4), w0)
    t, g = gamma_trace(tr)
    assert t[0] == 0.0 and g[0] == 0.0
    assert g[-1] == pytest.approx(gamma_gf(tr), rel=1e-12)
    sg = integrate_sgf(prob, FlowConfig(0.25, 3.0, batch=2), w0, Rng(0))
    t, g = gamma_trace(sg)
    np.testing.assert_array_equal(t, [0, 1, 2, 3])
    assert g[-1] == pytest.approx(gamma_sgf(sg), rel=1e-12)


def test_negative_drop_clamps_gamma():
    tr = integrate_gf(quad([0.0, 2.0]), FlowConfig(2.5, 25.0), np.zeros(1))
    assert tr.loss_drop < 0
    assert gamma_gf(tr) == 0.0


def test_csv_round_trips(tmp_path):
    K = np.array([[2.0, -1.0 / 3], [-1.0 / 3, 0.5]])
    write_gram_csv(K, tmp_path / "gram.csv")
    assert (tmp_path / "gram.csv").read_text().splitlines()[0] == "i,j,value"
    np.testing.assert_array_equal(read_gram_csv(tmp_path / "gram.csv"), K)
    write_gamma_trace_csv(np.array([0.0, 1.0]), np.array([0.0, 0.25]), tmp_path / "g.csv", gaps=np.array([0.1, 0.2]))
    assert (tmp_path / "g.csv").read_text().splitlines() == ["time,gamma,gap", "0.0,0.0,0.1", "1.0,0.25,0.2"]

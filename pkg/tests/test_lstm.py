import numpy as np
import pytest

from framegate.lstm import (LSTMStack, LSTMStackConfig, cell_step,
                            cell_step_backward, init_cell_params,
                            time_weights, weighted_output_sum,
                            weighted_output_sum_backward)
from framegate.nn_core import Parameter, grad_check, zero_grads


def zeroed_cell(in_size, hidden):
    p = init_cell_params(np.random.default_rng(0), in_size, hidden, "cell")
    p.wx.value[:] = 0.0
    p.wh.value[:] = 0.0
    p.b.value[:] = 0.0
    return p


# --- single cell -------------------------------------------------------------

def test_cell_all_zero_parameters():
    p = zeroed_cell(3, 4)
    x = np.random.default_rng(1).standard_normal((2, 3))
    h, c, _ = cell_step(x, np.zeros((2, 4)), np.zeros((2, 4)), p)
    assert np.array_equal(h, np.zeros((2, 4)))
    assert np.array_equal(c, np.zeros((2, 4)))


def test_cell_saturated_forget_gate_preserves_state():
    p = zeroed_cell(3, 4)
    p.b.value[4:8] = 1e6  # forget-gate bias slice
    v = np.random.default_rng(2).standard_normal((2, 4))
    x = np.random.default_rng(3).standard_normal((2, 3))
    h, c, _ = cell_step(x, np.zeros((2, 4)), v, p)
    assert np.allclose(c, v, atol=1e-12)


def test_cell_default_init_has_forget_bias_one():
    p = init_cell_params(np.random.default_rng(4), 3, 5, "cell")
    assert np.array_equal(p.b.value[5:10], np.ones(5))
    assert np.array_equal(p.b.value[:5], np.zeros(5))
    assert np.abs(p.wx.value).max() <= 1.0 / np.sqrt(5)


def test_cell_bptt_gradients_vs_finite_differences():
    rng = np.random.default_rng(5)
    p = init_cell_params(rng, 3, 4, "cell")
    xp = Parameter("x", rng.standard_normal((2, 3)))
    hp = Parameter("h0", rng.standard_normal((2, 4)))
    cp = Parameter("c0", rng.standard_normal((2, 4)))
    rh = rng.standard_normal((2, 4))
    rc = rng.standard_normal((2, 4))

    def loss_fn():
        h, c, cache = cell_step(xp.value, hp.value, cp.value, p)
        dx, dh_prev, dc_prev = cell_step_backward(rh, rc, cache)
        xp.grad += dx
        hp.grad += dh_prev
        cp.grad += dc_prev
        return float((h * rh).sum() + (c * rc).sum())

    report = grad_check(loss_fn, [p.wx, p.wh, p.b, xp, hp, cp],
                        h=1e-5, tolerance=1e-5)
    assert report.passed, report.per_param


def test_cell_shape_mismatch():
    p = init_cell_params(np.random.default_rng(0), 3, 4, "cell")
    with pytest.raises(ValueError):
        cell_step(np.zeros((2, 5)), np.zeros((2, 4)), np.zeros((2, 4)), p)


# --- stack -------------------------------------------------------------------

def test_stack_single_layer_single_step_equals_cell():
    rng = np.random.default_rng(6)
    cfg = LSTMStackConfig(num_layers=1, hidden_size=4, max_frames=1,
                          dropout_p=0.0)
    stack = LSTMStack(cfg, 3, rng)
    x = rng.standard_normal((2, 1, 3))
    out, _ = stack.forward(x, "infer")
    h, _, _ = cell_step(x[:, 0, :], np.zeros((2, 4)), np.zeros((2, 4)),
                        stack.layers[0])
    assert np.array_equal(out[:, 0, :], h)


def test_stack_residual_with_zero_second_layer_passes_input():
    rng = np.random.default_rng(7)
    cfg = LSTMStackConfig(num_layers=2, hidden_size=4, max_frames=3,
                          residual=True, dropout_p=0.0)
    stack = LSTMStack(cfg, 4, rng)
    for prm in (stack.layers[1].wx, stack.layers[1].wh, stack.layers[1].b):
        prm.value[:] = 0.0
    x = rng.standard_normal((2, 3, 4))
    out, _ = stack.forward(x, "infer")

    one_layer = LSTMStack(LSTMStackConfig(num_layers=1, hidden_size=4,
                                          max_frames=3, dropout_p=0.0), 4, rng)
    for a, b in zip(one_layer.parameters(), stack.layers[0].__dict__.values()):
        if isinstance(b, Parameter):
            a.value[:] = b.value
    first, _ = one_layer.forward(x, "infer")
    assert np.array_equal(out, first)


def test_stack_residual_needs_two_layers():
    with pytest.raises(ValueError):
        LSTMStack(LSTMStackConfig(num_layers=1, hidden_size=4, max_frames=2,
                                  residual=True), 4, np.random.default_rng(0))


def test_stack_full_bptt_gradients():
    rng = np.random.default_rng(8)
    cfg = LSTMStackConfig(num_layers=2, hidden_size=8, max_frames=4,
                          residual=False, dropout_p=0.0)
    stack = LSTMStack(cfg, 5, rng)
    x = rng.standard_normal((3, 4, 5))
    valid = np.array([4, 3, 1])
    readout = rng.standard_normal((3, 8))

    def loss_fn():
        out, tape = stack.forward(x, "train")
        y, w = weighted_output_sum(out, valid)
        d = weighted_output_sum_backward(readout, w)
        stack.backward(d, tape)
        return float((y * readout).sum())

    report = grad_check(loss_fn, stack.parameters(), h=1e-5, tolerance=1e-5)
    assert report.passed, report.per_param


def test_stack_residual_bptt_gradients_with_dropout():
    rng = np.random.default_rng(9)
    cfg = LSTMStackConfig(num_layers=3, hidden_size=6, max_frames=4,
                          residual=True, dropout_p=0.3)
    stack = LSTMStack(cfg, 6, rng)
    x = rng.standard_normal((2, 4, 6))
    valid = np.array([4, 2])
    readout = rng.standard_normal((2, 6))

    def loss_fn():
        drop_rng = np.random.default_rng(99)  # fixed masks across calls
        out, tape = stack.forward(x, "train", drop_rng)
        y, w = weighted_output_sum(out, valid)
        d = weighted_output_sum_backward(readout, w)
        stack.backward(d, tape)
        return float((y * readout).sum())

    # h=1e-4: the 3-layer dropout chain leaves some coordinates with tiny
    # gradients where smaller steps are roundoff-dominated
    report = grad_check(loss_fn, stack.parameters(), h=1e-4, tolerance=1e-5)
    assert report.passed, report.per_param


def test_stack_parameter_sharing_sums_per_step_gradients():
    rng = np.random.default_rng(10)
    cfg = LSTMStackConfig(num_layers=1, hidden_size=4, max_frames=3,
                          dropout_p=0.0)
    stack = LSTMStack(cfg, 3, rng)
    x = rng.standard_normal((2, 3, 3))
    dout = rng.standard_normal((2, 3, 4))

    zero_grads(stack.parameters())
    out, tape = stack.forward(x, "train")
    stack.backward(dout, tape)
    shared = stack.layers[0].wx.grad.copy()

    # replay each step separately against the recorded states: summed
    # per-step gradients must equal the shared-parameter gradient
    zero_grads(stack.parameters())
    caches = tape[0][0]
    dh_next = np.zeros((2, 4))
    dc = np.zeros((2, 4))
    for t in (2, 1, 0):
        _, dh_next, dc = cell_step_backward(dout[:, t, :] + dh_next, dc,
                                            caches[t])
    assert np.allclose(stack.layers[0].wx.grad, shared, atol=1e-12)


def test_stack_masking_beyond_valid_len():
    rng = np.random.default_rng(11)
    cfg = LSTMStackConfig(num_layers=2, hidden_size=5, max_frames=6,
                          dropout_p=0.0)
    stack = LSTMStack(cfg, 4, rng)
    x = rng.standard_normal((3, 6, 4))
    valid = np.array([6, 4, 2])
    readout = rng.standard_normal((3, 5))

    def agg_and_grads(features):
        zero_grads(stack.parameters())
        out, tape = stack.forward(features, "train")
        y, w = weighted_output_sum(out, valid)
        stack.backward(weighted_output_sum_backward(readout, w), tape)
        return y, [p.grad.copy() for p in stack.parameters()]

    y1, g1 = agg_and_grads(x)
    x2 = x.copy()
    x2[1, 4:, :] = 77.0
    x2[2, 2:, :] = -55.0
    y2, g2 = agg_and_grads(x2)
    assert np.array_equal(y1, y2)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


# --- weighted output sum -----------------------------------------------------

def test_weighted_sum_single_step():
    out = np.random.default_rng(12).standard_normal((3, 1, 4))
    y, _ = weighted_output_sum(out, np.array([1, 1, 1]))
    assert np.allclose(y, out[:, 0, :], atol=1e-15)


def test_weights_match_frame_count_90():
    w = time_weights(np.array([90]), 90)[0]
    assert w[0] == pytest.approx(1.0 / 90)
    assert w[89] == 1.0
    assert np.all(np.diff(w) > 0)


def test_weighted_sum_constant_output():
    v = np.random.default_rng(13).standard_normal(5)
    out = np.tile(v, (2, 4, 1))
    y, _ = weighted_output_sum(out, np.array([4, 4]))
    # direct summation oracle: sum of t/4 for t=1..4 is 2.5
    oracle = sum((t / 4.0) * v for t in range(1, 5))
    assert np.allclose(y[0], oracle, atol=1e-12)
    assert np.allclose(y[0], 2.5 * v, atol=1e-12)


def test_weighted_sum_short_sample_renormalizes():
    w = time_weights(np.array([3]), 6)[0]
    assert np.allclose(w[:3], [1 / 3, 2 / 3, 1.0])
    assert np.all(w[3:] == 0.0)


def test_weighted_sum_final_weight_exactly_one():
    for length in (1, 2, 7, 90):
        w = time_weights(np.array([length]), 90)[0]
        assert w[length - 1] == 1.0


def test_weighted_sum_backward_distributes_weights():
    rng = np.random.default_rng(14)
    out = rng.standard_normal((2, 3, 4))
    valid = np.array([3, 2])
    y, w = weighted_output_sum(out, valid)
    dy = rng.standard_normal((2, 4))
    dout = weighted_output_sum_backward(dy, w)
    assert np.allclose(dout[0, 2], dy[0] * 1.0)
    assert np.allclose(dout[0, 0], dy[0] / 3.0)
    assert np.all(dout[1, 2] == 0.0)


def test_weighted_sum_rejects_bad_valid_len():
    with pytest.raises(ValueError):
        weighted_output_sum(np.zeros((1, 3, 2)), np.array([4]))

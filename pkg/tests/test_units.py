import numpy as np
import pytest

from cubicrnn import units as U
from cubicrnn.errors import ConfigError
from cubicrnn.gradcheck import check_conv_lstm, check_cubic_lstm, check_fc_lstm
from cubicrnn.tensor import ConvKernel


def test_fc_zero_everything():
    c, h = U.fc_lstm_step(np.zeros(3), (np.zeros(4), np.zeros(4)), np.zeros((7, 16)), np.zeros(16))
    assert not c.any() and not h.any()


def test_fc_zero_weights_unit_cell():
    c, h = U.fc_lstm_step(np.zeros(3), (np.ones(4), np.zeros(4)), np.zeros((7, 16)), np.zeros(16))
    np.testing.assert_allclose(c, 0.5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(h, 0.23105857863000487, rtol=1e-14)


def test_fc_saturated_forget_gate():
    n = 4
    bias = np.full(4 * n, -20.0)
    bias[n:2 * n] = 20.0
    prev = np.full(n, 0.7)
    c, h = U.fc_lstm_step(np.zeros(2), (prev, np.zeros(n)), np.zeros((2 + n, 4 * n)), bias)
    np.testing.assert_allclose(c, prev, atol=1e-6)
    np.testing.assert_allclose(c, 0.6999999964960388, rtol=1e-12)
    assert np.all(np.abs(h) < 1e-6)


def test_fc_shape_errors():
    with pytest.raises(ConfigError):
        U.fc_lstm_step(np.zeros(3), (np.zeros(4), np.zeros(4)), np.zeros((6, 16)), np.zeros(16))


def test_conv_lstm_zero():
    k = ConvKernel.zeros(3, 3, 5, 12)
    s = U.conv_lstm_step(np.zeros((4, 4, 2)), U.TemporalState(np.zeros((4, 4, 3)),
                                                            np.zeros((4, 4, 3))), k)
    assert not s.cell.any() and not s.hidden.any()


def test_conv_lstm_channel_errors():
    prev = U.TemporalState(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))
    with pytest.raises(ConfigError):
        U.conv_lstm_step(np.zeros((4, 4, 2)), prev, ConvKernel.zeros(3, 3, 4, 12))
    with pytest.raises(ConfigError):
        U.conv_lstm_step(np.zeros((4, 4, 2)), prev, ConvKernel.zeros(3, 3, 5, 8))


def test_conv_lstm_1x1_grid_equals_fc():
    rng = np.random.default_rng(0)
    dx, n = 3, 4
    w = rng.normal(size=(1, 1, dx + n, 4 * n))
    b = rng.normal(size=4 * n)
    x = rng.normal(size=dx)
    c0, h0 = rng.normal(size=n), rng.normal(size=n)
    s = U.conv_lstm_step(x.reshape(1, 1, dx), U.TemporalState(c0.reshape(1, 1, n),
                                                              h0.reshape(1, 1, n)), ConvKernel(w, b))
    c, h = U.fc_lstm_step(x, (c0, h0), w[0, 0], b)
    np.testing.assert_array_equal(s.cell.reshape(-1), c)
    np.testing.assert_array_equal(s.hidden.reshape(-1), h)


def _states(rng, shape):
    return (U.TemporalState(rng.normal(size=shape), rng.normal(size=shape)),
            U.SpatialState(rng.normal(size=shape), rng.normal(size=shape)))


def test_cubic_zero():
    p = U.CubicCellParams.init(2, 3, 2, np.random.default_rng(0)).zeros_like()
    z = np.zeros((4, 4, 3))
    t, s, y = U.cubic_lstm_step(np.zeros((4, 4, 2)), U.TemporalState(z, z), U.SpatialState(z, z), p)
    assert not (t.cell.any() or t.hidden.any() or s.cell.any() or s.hidden.any() or y.any())


def test_cubic_shapes_and_params():
    rng = np.random.default_rng(1)
    p = U.CubicCellParams.init(2, 3, 5, rng)
    assert p.temporal.weights.shape == (1, 1, 8, 12)
    assert p.spatial.weights.shape == (5, 5, 8, 12)
    assert p.output.weights.shape == (1, 1, 6, 5)
    tp, sp = _states(rng, (6, 7, 3))
    t, s, y = U.cubic_lstm_step(rng.normal(size=(6, 7, 2)), tp, sp, p)
    assert t.cell.shape == t.hidden.shape == s.cell.shape == s.hidden.shape == (6, 7, 3)
    assert y.shape == (6, 7, 5)


def test_cubic_mismatch_errors():
    rng = np.random.default_rng(2)
    p = U.CubicCellParams.init(2, 3, 2, rng)
    tp, sp = _states(rng, (4, 4, 3))
    with pytest.raises(ConfigError):
        U.cubic_lstm_step(np.zeros((4, 4, 1)), tp, sp, p)
    bad = U.SpatialState(np.zeros((4, 4, 2)), np.zeros((4, 4, 2)))
    with pytest.raises(ConfigError):
        U.cubic_lstm_step(np.zeros((4, 4, 2)), tp, bad, p)
    with pytest.raises(ConfigError):
        U.CubicCellParams(p.temporal, ConvKernel.zeros(5, 5, 7, 12), p.output)


def test_forget_bias_init():
    p = U.CubicCellParams.init(1, 2, 1, np.random.default_rng(0), forget_bias=1.0)
    np.testing.assert_array_equal(p.temporal.bias, [0, 0, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(p.spatial.bias, [0, 0, 1, 1, 0, 0, 0, 0])


def test_temporal_branch_reduces_to_conv_lstm():
    rng = np.random.default_rng(3)
    dx, n = 2, 3
    p = U.CubicCellParams.init(dx, n, 2, rng, temporal_kernel=3)
    p.temporal.weights[:, :, dx:dx + n, :] = 0.0  # block reading H' of the previous layer
    tp, sp = _states(rng, (5, 5, n))
    x = rng.normal(size=(5, 5, dx))
    t, _, _ = U.cubic_lstm_step(x, tp, sp, p)
    reduced = ConvKernel(np.concatenate([p.temporal.weights[:, :, :dx],
                                         p.temporal.weights[:, :, dx + n:]], axis=2),
                         p.temporal.bias)
    ref = U.conv_lstm_step(x, tp, reduced)
    np.testing.assert_array_equal(t.cell, ref.cell)
    np.testing.assert_array_equal(t.hidden, ref.hidden)


def test_output_branch_has_no_activation():
    rng = np.random.default_rng(4)
    p = U.CubicCellParams.init(1, 2, 1, rng)
    p.output.weights[...] = 0.0
    p.output.bias[...] = 7.5
    tp, sp = _states(rng, (3, 3, 2))
    _, _, y = U.cubic_lstm_step(rng.normal(size=(3, 3, 1)), tp, sp, p)
    assert np.all(y == 7.5)


@pytest.mark.parametrize("check", [check_fc_lstm, check_conv_lstm, check_cubic_lstm])
def test_unit_gradients(check):
    results = check(np.random.default_rng(11))
    for r in results:
        assert r.error < 1e-4, (r.target, r.error)


def test_cubic_gradient_targets_cover_every_input():
    names = {r.target for r in check_cubic_lstm(np.random.default_rng(12))}
    for key in ("x", "temporal.cell", "temporal.hidden", "spatial.cell", "spatial.hidden",
                "temporal.weights", "spatial.weights", "output.weights", "output.bias"):
        assert f"cubic_lstm_step[{key}]" in names

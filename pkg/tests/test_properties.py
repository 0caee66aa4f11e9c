import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cubicrnn import data as D
from cubicrnn import tensor as T
from cubicrnn import units as U
from cubicrnn.train import AdamSlot, adam_step

seeds = st.integers(0, 2**32 - 1)
quick = settings(max_examples=40, deadline=None)


@quick
@given(seeds, st.integers(2, 6), st.integers(2, 6), st.sampled_from([1, 3, 5]),
       st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_without_bias(seed, h, w, k, a, b):
    rng = np.random.default_rng(seed)
    kern = T.ConvKernel(rng.normal(size=(k, k, 2, 3)), np.zeros(3))
    x, y = rng.normal(size=(h, w, 2)), rng.normal(size=(h, w, 2))
    lhs = T.conv2d(a * x + b * y, kern)
    rhs = a * T.conv2d(x, kern) + b * T.conv2d(y, kern)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def _random_step(seed, scale):
    rng = np.random.default_rng(seed)
    p = U.CubicCellParams.init(2, 3, 2, rng, spatial_kernel=3)
    for k in (p.temporal, p.spatial, p.output):
        k.weights[...] = rng.normal(scale=scale, size=k.weights.shape)
        k.bias[...] = rng.normal(scale=scale, size=k.bias.shape)
    shape = (4, 5, 3)
    tprev = U.TemporalState(rng.normal(scale=scale, size=shape), rng.normal(size=shape))
    sprev = U.SpatialState(rng.normal(scale=scale, size=shape), rng.normal(size=shape))
    x = rng.normal(scale=scale, size=(4, 5, 2))
    return x, tprev, sprev, p


@quick
@given(seeds, st.floats(0.01, 30.0))
def test_gates_and_state_bounds(seed, scale):
    x, tprev, sprev, p = _random_step(seed, scale)
    (t, s, y), cache = U.cubic_lstm_forward(x, tprev, sprev, p)
    for g in (cache.g_temporal, cache.g_spatial):
        for gate in (g.i, g.f, g.o):
            assert np.all(gate >= 0.0) and np.all(gate <= 1.0)
        assert np.all(np.abs(g.c) <= 1.0)
    assert np.all(np.abs(t.cell) <= np.abs(tprev.cell) + 1.0)
    assert np.all(np.abs(s.cell) <= np.abs(sprev.cell) + 1.0)
    assert np.all(np.abs(t.hidden) <= 1.0) and np.all(np.abs(s.hidden) <= 1.0)
    for arr in (t.cell, t.hidden, s.cell, s.hidden, y):
        assert np.all(np.isfinite(arr))


@quick
@given(seeds, st.sampled_from([1, 3]))
def test_temporal_branch_reduction(seed, k):
    rng = np.random.default_rng(seed)
    dx, n = 2, 3
    p = U.CubicCellParams.init(dx, n, 1, rng, temporal_kernel=k, spatial_kernel=3)
    p.temporal.bias[...] = rng.normal(size=p.temporal.bias.shape)
    p.temporal.weights[:, :, dx:dx + n, :] = 0.0
    tprev = U.TemporalState(rng.normal(size=(4, 4, n)), rng.normal(size=(4, 4, n)))
    sprev = U.SpatialState(rng.normal(size=(4, 4, n)), rng.normal(size=(4, 4, n)))
    x = rng.normal(size=(4, 4, dx))
    t, _, _ = U.cubic_lstm_step(x, tprev, sprev, p)
    reduced = T.ConvKernel(np.concatenate([p.temporal.weights[:, :, :dx],
                                           p.temporal.weights[:, :, dx + n:]], axis=2),
                           p.temporal.bias)
    ref = U.conv_lstm_step(x, tprev, reduced)
    assert t.cell.tobytes() == ref.cell.tobytes()
    assert t.hidden.tobytes() == ref.hidden.tobytes()


@quick
@given(st.lists(st.floats(-1e6, 1e6).filter(lambda v: v == 0 or abs(v) > 1e-12),
                min_size=1, max_size=8), st.floats(1e-6, 1.0))
def test_adam_moves_against_gradient(grads, lr):
    # subnormal gradients give updates that underflow to zero, hence the filter
    g = np.array(grads)
    p = np.zeros_like(g)
    slot = AdamSlot.fresh(p)
    adam_step(p, g, slot, lr)
    assert np.all(np.sign(p) == -np.sign(g))
    assert np.all(np.abs(p) <= lr * (1 + 1e-9))
    assert np.all(slot.v >= 0)


@quick
@given(seeds, st.integers(1, 3), st.integers(8, 20), st.integers(2, 12))
def test_sprites_stay_inside(seed, n, size, steps):
    glyphs = D.builtin_glyphs(4)
    s = D.gen_sequence(seed, n, size, steps, glyphs, context_len=1, speed_range=(0.0, 9.0))
    for f in s.frames:
        assert f.shape == (size, size, 1)
        assert f.min() >= 0.0 and f.max() <= 1.0
    # total ink never drops below one glyph: nothing leaves the frame
    for f in s.frames:
        assert f.sum() >= min(g.sum() for g in glyphs)


@quick
@given(st.floats(0.0, 40.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_bounce_stays_in_range(hi, p0, v0):
    p = abs(p0) * int(hi)
    v = v0 * 3 * max(hi, 1.0)
    sprite = D.GlyphSprite(np.ones((1, 1)), (p, p), (v, v))
    for _ in range(5):
        sprite = D.step_sprite(sprite, int(hi) + 1)
        assert 0.0 <= sprite.position[0] <= int(hi)
        assert abs(sprite.velocity[0]) == abs(v)


@quick
@given(seeds, st.integers(1, 9), st.integers(1, 9))
def test_pgm_bytes_bound(seed, h, w):
    f = np.random.default_rng(seed).random((h, w, 1))
    b = D.to_bytes(f)
    assert b.dtype == np.uint8
    assert np.all(np.abs(b / 255.0 - f[:, :, 0]) <= 1 / 510 + 1e-12)

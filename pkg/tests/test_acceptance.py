"""Acceptance suite: one test per criterion, each at its stated tolerance."""

import math
import struct
import time

import numpy as np
import pytest

from cubicrnn import checkpoint as C
from cubicrnn import grid as G
from cubicrnn import train as TR
from cubicrnn import units as U
from cubicrnn.ablation import AblationSettings, run_ablation
from cubicrnn.cli import main
from cubicrnn.data import builtin_glyphs, gen_sequence, load_idx_images, read_pgm, write_pgm
from cubicrnn.tensor import ConvKernel


@pytest.mark.criterion(1, "gradient-check suite")
def test_gradcheck_suite(capsys):
    start = time.perf_counter()
    code = main(["gradcheck"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    print(out)
    assert code == 0
    for target in ("conv2d", "fc_lstm_step", "conv_lstm_step", "cubic_lstm_step[temporal.weights]",
                   "cubic_lstm_step[spatial.weights]", "cubic_lstm_step[output.weights]",
                   "cubic_lstm_step[temporal.hidden]", "cubic_lstm_step[spatial.hidden]",
                   "grid"):
        assert target in out
    assert elapsed < 120.0


@pytest.mark.criterion(2, "spatial carry and parameter structure")
def test_spatial_carry_structure(monkeypatch):
    calls = []
    original = U.cubic_lstm_forward

    def wrapped(x, tprev, sprev, params, with_output=True):
        out, cache = original(x, tprev, sprev, params, with_output)
        calls.append((tprev, sprev, params, out))
        return out, cache

    monkeypatch.setattr(U, "cubic_lstm_forward", wrapped)
    start = time.perf_counter()
    J, L = 2, 3
    cfg = G.GridConfig(spatial_layers=L, output_layers=J, state_channels=3, frame_height=6,
                       frame_width=6, context_len=L, predict_len=4, spatial_kernel=3)
    g = G.CubicGrid.init(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    for _, a in g.named_parameters():
        a[...] = rng.normal(scale=0.5, size=a.shape)
    ctx = [rng.random(cfg.frame_shape) for _ in range(L)]
    G.encode_decode(g, ctx, 4)
    steps = len(calls) // (J * L)
    assert steps == 5 and len(calls) == 5 * J * L
    cell = {(t, j, l): calls[(t * J + j) * L + l] for t in range(steps)
            for j in range(J) for l in range(L)}
    for t in range(steps):
        sets = g.encoder if t == 0 else g.decoder
        for j in range(J):
            sprev = cell[t, j, 0][1]
            if t == 0:
                assert not sprev.cell.any() and not sprev.hidden.any()
            else:
                leaving = cell[t - 1, j, L - 1][3][1]
                assert sprev.cell.tobytes() == leaving.cell.tobytes()
                assert sprev.hidden.tobytes() == leaving.hidden.tobytes()
            for l in range(L):
                params = cell[t, j, l][2]
                # temporal: one parameter set per cell, reused at every step of a phase
                assert params is sets[j][l]
                if t > 1:
                    assert params is cell[t - 1, j, l][2]
                # spatial: every cell in a step has its own parameters
                for other in range(l):
                    q = cell[t, j, other][2]
                    assert q is not params
                    assert not np.shares_memory(q.spatial.weights, params.spatial.weights)
                if l > 0:
                    prev_out = cell[t, j, l - 1][3][1]
                    assert cell[t, j, l][1].hidden is prev_out.hidden
                if t > 0:
                    assert cell[t, j, l][0].hidden is cell[t - 1, j, l][3][0].hidden
    assert time.perf_counter() - start < 1.0


@pytest.mark.criterion(3, "temporal branch reduces to ConvLSTM")
def test_reduction_100_instances():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(100):
        dx, n = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        k = int(rng.choice([1, 3]))
        p = U.CubicCellParams.init(dx, n, 1, rng, temporal_kernel=k, spatial_kernel=3)
        p.temporal.bias[...] = rng.normal(size=p.temporal.bias.shape)
        p.temporal.weights[:, :, dx:dx + n, :] = 0.0
        tprev = U.TemporalState(rng.normal(size=(h, w, n)), rng.normal(size=(h, w, n)))
        sprev = U.SpatialState(rng.normal(size=(h, w, n)), rng.normal(size=(h, w, n)))
        x = rng.normal(size=(h, w, dx))
        t, _, _ = U.cubic_lstm_step(x, tprev, sprev, p)
        reduced = ConvKernel(np.concatenate([p.temporal.weights[:, :, :dx],
                                             p.temporal.weights[:, :, dx + n:]], axis=2),
                             p.temporal.bias)
        ref = U.conv_lstm_step(x, tprev, reduced)
        assert t.cell.tobytes() == ref.cell.tobytes()
        assert t.hidden.tobytes() == ref.hidden.tobytes()
    assert time.perf_counter() - start < 5.0


@pytest.mark.criterion(4, "overfit one bouncing square")
def test_overfit_smoke():
    start = time.perf_counter()
    square = builtin_glyphs(4)[0]
    sample = gen_sequence(3, 1, 16, 15, [square], context_len=10)
    targets = np.stack(sample.targets)
    baseline = float(np.mean(np.sum((targets - targets.mean()) ** 2, axis=(1, 2, 3))))
    cfg = G.GridConfig(spatial_layers=2, output_layers=1, state_channels=8, frame_height=16,
                       frame_width=16, context_len=10, predict_len=5)
    g = G.CubicGrid.init(cfg, seed=0, dtype=np.float32)
    log = TR.train(g, TR.FixedSource([sample]),
                   TR.TrainConfig(learning_rate=1e-3, learning_rate_after=1e-3, lr_switch=2000,
                                  batch_size=1, total_iterations=2000, loss_kind="mse"))
    final = log.records[-1].loss
    print(f"baseline {baseline:.4f} final {final:.4f} ratio {final / baseline:.4f}")
    assert final < 0.2 * baseline
    assert time.perf_counter() - start < 600.0


@pytest.mark.criterion(5, "1x3 grid beats 3x1 grid")
def test_directional_ablation():
    start = time.perf_counter()
    settings = AblationSettings()
    assert settings.state_channels == 16 and settings.frame_size == 32
    assert settings.num_glyphs == 1 and settings.iterations == 3000 and len(settings.seeds) == 3
    result = run_ablation(settings)
    wide, tall = result.median((1, 3)), result.median((3, 1))
    print(f"median val MSE 1x3 {wide:.4f} {result.scores((1, 3))}")
    print(f"median val MSE 3x1 {tall:.4f} {result.scores((3, 1))}")
    assert wide < tall
    assert time.perf_counter() - start < 2 * 3600.0


CONFIG = """\
grid.spatial_layers = 2
grid.state_channels = 3
grid.spatial_kernel = 3
data.frame_size = 12
data.glyph_size = 4
data.num_glyphs = 1
data.context_len = 3
data.predict_len = 2
data.val_count = 2
train.batch_size = 2
train.total_iterations = 6
train.eval_every = 3
train.checkpoint_every = 3
paths.checkpoint = run/model.ckpt
paths.metrics = run/metrics.csv
paths.output_dir = run
"""


def _run_pipeline(root):
    (root / "run.cfg").write_text(CONFIG)
    assert main(["train", "--config", "run.cfg"]) == 0
    assert main(["predict", "--checkpoint", "run/model.ckpt", "--seed", "7",
                 "--output-dir", "pred"]) == 0
    files = ["run/metrics.csv", "run/model.ckpt"] + sorted(
        f"pred/{p.name}" for p in (root / "pred").iterdir())
    return {f: (root / f).read_bytes() for f in files}


@pytest.mark.criterion(6, "determinism of metrics, checkpoints and frames")
def test_determinism(tmp_path, monkeypatch):
    outputs = []
    for name in ("first", "second"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        outputs.append(_run_pipeline(d))
    assert list(outputs[0]) == list(outputs[1])
    assert "pred/pred_01.pgm" in outputs[0]
    for f in outputs[0]:
        assert outputs[0][f] == outputs[1][f], f


@pytest.mark.criterion(7, "IDX, PGM and checkpoint round-trips")
def test_format_round_trips(tmp_path):
    idx = tmp_path / "glyphs.idx"
    idx.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 3) + bytes([0, 51, 102, 153, 204, 255,
                                                                 255, 0, 255, 0, 255, 0]))
    imgs = load_idx_images(idx)
    np.testing.assert_array_equal(imgs[0], [[0.0, 0.2, 0.4], [0.6, 0.8, 1.0]])
    np.testing.assert_array_equal(imgs[1], [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

    frame = np.random.default_rng(0).random((13, 9, 1))
    write_pgm(frame, tmp_path / "f.pgm")
    assert np.max(np.abs(read_pgm(tmp_path / "f.pgm") - frame)) <= 1 / 510

    cfg = G.GridConfig(spatial_layers=2, output_layers=2, state_channels=2, frame_height=6,
                       frame_width=6, context_len=2, predict_len=2, spatial_kernel=3)
    g = G.CubicGrid.init(cfg, seed=4)
    state = TR.TrainState.fresh(g)
    TR.train(g, TR.FixedSource([gen_sequence(1, 1, 6, 4, builtin_glyphs(4), context_len=2)]),
             TR.TrainConfig(total_iterations=2, batch_size=1), state)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    C.save_checkpoint(first, C.snapshot("grid.state_channels = 2\n", g, state))
    C.save_checkpoint(second, C.load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.criterion(8, "zero model reports ln 2 per pixel")
def test_constant_predictor_oracle(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text(CONFIG)
    assert main(["train", "--config", "run.cfg", "--set", "total_iterations=0"]) == 0
    ck = C.load_checkpoint("run/model.ckpt")
    for a in ck.params.values():
        a[...] = 0.0
    C.save_checkpoint("run/zero.ckpt", ck)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "run/zero.ckpt", "--seeds", "0:4"]) == 0
    out = capsys.readouterr().out
    bce = float(next(l for l in out.splitlines() if l.startswith("per-frame BCE")).split()[-1])
    pixels = 12 * 12
    samples = [gen_sequence(s, 1, 12, 5, builtin_glyphs(4), context_len=3) for s in range(4)]
    assert all(set(np.unique(np.stack(s.frames))) <= {0.0, 1.0} for s in samples)
    assert abs(bce / pixels - math.log(2)) < 1e-9

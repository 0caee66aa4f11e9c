"""Finite-difference verification of every hand-written backward pass.

Each check builds a small random 64-bit instance, contracts the outputs with
fixed random weights to get a scalar loss, and compares the analytic
gradient of every input against a central difference. The difference is
evaluated on an extended-precision copy of the inputs so forward roundoff
cannot swamp gradient entries that are legitimately tiny.

Functions are looked up through their modules at call time, so patching
``cubicrnn.units.cubic_lstm_backward`` (for instance) is seen here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import grid as G
from . import tensor as T
from . import train
from . import units as U

EPS = 1e-5
TOL = 1e-4
WIDE = np.longdouble


@dataclass(frozen=True)
class CheckResult:
    target: str
    error: float
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _compare(prefix: str, loss: Callable[[dict], object], inputs: dict[str, np.ndarray],
             analytic: dict[str, np.ndarray]) -> list[CheckResult]:
    """Check ``analytic[name]`` against the central difference of ``loss``.

    ``loss`` receives a dict of arrays shaped like ``inputs``.
    """
    wide = {k: np.array(v, dtype=WIDE) for k, v in inputs.items()}
    out = []
    for name in inputs:
        fd = T.finite_diff_grad(lambda _: loss(wide), wide[name], EPS)
        out.append(CheckResult(f"{prefix}[{name}]", T.max_rel_error(analytic[name], fd)))
    return out


def _kernel(a, w, b):
    return T.ConvKernel(a[w], a[b])


# -- tensor ops ---------------------------------------------------------------

def check_conv2d(rng, shape=(4, 4, 2), k=3, out=3, name="conv2d") -> list[CheckResult]:
    inputs = {"input": rng.normal(size=shape),
              "weights": rng.normal(size=(k, k, shape[2], out)),
              "bias": rng.normal(size=out)}
    r = rng.normal(size=shape[:2] + (out,))

    def loss(a):
        return np.sum(r * T.conv2d(a["input"], _kernel(a, "weights", "bias")))

    dx, dk = T.conv2d_backward(inputs["input"], _kernel(inputs, "weights", "bias"), r)
    return _compare(name, loss, inputs, {"input": dx, "weights": dk.weights, "bias": dk.bias})


def check_conv2d_concat(rng) -> list[CheckResult]:
    inputs = {"part0": rng.normal(size=(4, 4, 2)), "part1": rng.normal(size=(4, 4, 1)),
              "weights": rng.normal(size=(3, 3, 3, 2)), "bias": rng.normal(size=2)}
    r = rng.normal(size=(4, 4, 2))

    def loss(a):
        return np.sum(r * T.conv2d_concat([a["part0"], a["part1"]], _kernel(a, "weights", "bias")))

    (d0, d1), dk = T.conv2d_concat_backward([inputs["part0"], inputs["part1"]],
                                           _kernel(inputs, "weights", "bias"), r)
    return _compare("conv2d_concat", loss, inputs,
                    {"part0": d0, "part1": d1, "weights": dk.weights, "bias": dk.bias})


def check_activations(rng) -> list[CheckResult]:
    out = []
    for name, fwd, bwd in (("sigmoid", T.sigmoid, T.sigmoid_backward),
                           ("tanh", T.tanh_act, T.tanh_backward)):
        x = rng.normal(scale=2.0, size=(4, 4, 3))
        r = rng.normal(size=x.shape)
        out += _compare(name, lambda a, f=fwd: np.sum(r * f(a["x"])), {"x": x},
                        {"x": bwd(fwd(x), r)})
    return out


def check_elementwise(rng) -> list[CheckResult]:
    a0, b0 = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
    r = rng.normal(size=a0.shape)
    da, db = T.elementwise_mul_backward(a0, b0, r)
    out = _compare("elementwise_mul", lambda a: np.sum(r * T.elementwise_mul(a["a"], a["b"])),
                   {"a": a0, "b": b0}, {"a": da, "b": db})
    da, db = T.elementwise_add_backward(r)
    out += _compare("elementwise_add", lambda a: np.sum(r * T.elementwise_add(a["a"], a["b"])),
                    {"a": a0, "b": b0}, {"a": da, "b": db})
    a1 = rng.normal(size=(3, 3, 1))
    r = rng.normal(size=(3, 3, 3))
    da, db = T.split_channels(r, [2, 1])
    out += _compare("concat_channels",
                    lambda a: np.sum(r * T.concat_channels([a["a"], a["b"]])),
                    {"a": a0, "b": a1}, {"a": da, "b": db})
    return out


def tensor_checks(rng) -> list[CheckResult]:
    return (check_conv2d(rng)
            + check_conv2d(rng, shape=(6, 6, 4), k=5, out=2, name="conv2d_5x5")
            + check_conv2d_concat(rng)
            + check_activations(rng)
            + check_elementwise(rng))


# -- recurrent units ----------------------------------------------------------

def check_fc_lstm(rng, dx=3, n=4) -> list[CheckResult]:
    inputs = {"x": rng.normal(size=dx), "cell": rng.normal(size=n),
              "hidden": rng.normal(size=n),
              "weight": rng.normal(scale=0.5, size=(dx + n, 4 * n)),
              "bias": rng.normal(scale=0.5, size=4 * n)}
    rc, rh = rng.normal(size=n), rng.normal(size=n)

    def loss(a):
        c, h = U.fc_lstm_step(a["x"], (a["cell"], a["hidden"]), a["weight"], a["bias"])
        return np.sum(rc * c) + np.sum(rh * h)

    _, cache = U.fc_lstm_forward(inputs["x"], (inputs["cell"], inputs["hidden"]),
                                 inputs["weight"], inputs["bias"])
    d_x, (d_c, d_h), d_w, d_b = U.fc_lstm_backward(cache, rc, rh)
    return _compare("fc_lstm_step", loss, inputs,
                    {"x": d_x, "cell": d_c, "hidden": d_h, "weight": d_w, "bias": d_b})


def check_conv_lstm(rng, hw=5, dx=2, n=3, k=3) -> list[CheckResult]:
    inputs = {"x": rng.normal(size=(hw, hw, dx)), "cell": rng.normal(size=(hw, hw, n)),
              "hidden": rng.normal(size=(hw, hw, n)),
              "weights": rng.normal(scale=0.3, size=(k, k, dx + n, 4 * n)),
              "bias": rng.normal(scale=0.3, size=4 * n)}
    rc, rh = rng.normal(size=(hw, hw, n)), rng.normal(size=(hw, hw, n))

    def loss(a):
        s = U.conv_lstm_step(a["x"], U.TemporalState(a["cell"], a["hidden"]),
                             _kernel(a, "weights", "bias"))
        return np.sum(rc * s.cell) + np.sum(rh * s.hidden)

    _, cache = U.conv_lstm_forward(inputs["x"], U.TemporalState(inputs["cell"], inputs["hidden"]),
                                   _kernel(inputs, "weights", "bias"))
    d_x, d_prev, d_k = U.conv_lstm_backward(cache, U.TemporalState(rc, rh))
    return _compare("conv_lstm_step", loss, inputs,
                    {"x": d_x, "cell": d_prev.cell, "hidden": d_prev.hidden,
                     "weights": d_k.weights, "bias": d_k.bias})


def check_cubic_lstm(rng, hw=4, dx=2, n=3, out=2) -> list[CheckResult]:
    params = U.CubicCellParams.init(dx, n, out, rng, dtype=np.float64)
    inputs = {"x": rng.normal(size=(hw, hw, dx))}
    for key in ("temporal.cell", "temporal.hidden", "spatial.cell", "spatial.hidden"):
        inputs[key] = rng.normal(size=(hw, hw, n))
    for kname, k in params.kernels().items():
        inputs[f"{kname}.weights"] = k.weights
        inputs[f"{kname}.bias"] = rng.normal(scale=0.3, size=k.bias.shape)
    proj = {k: rng.normal(size=(hw, hw, n)) for k in ("tc", "th", "sc", "sh")}
    ry = rng.normal(size=(hw, hw, out))

    def unpack(a):
        p = U.CubicCellParams(*(_kernel(a, f"{k}.weights", f"{k}.bias")
                                for k in ("temporal", "spatial", "output")))
        return (a["x"], U.TemporalState(a["temporal.cell"], a["temporal.hidden"]),
                U.SpatialState(a["spatial.cell"], a["spatial.hidden"]), p)

    def loss(a):
        t, s, y = U.cubic_lstm_step(*unpack(a))
        return (np.sum(proj["tc"] * t.cell) + np.sum(proj["th"] * t.hidden)
                + np.sum(proj["sc"] * s.cell) + np.sum(proj["sh"] * s.hidden)
                + np.sum(ry * y))

    _, cache = U.cubic_lstm_forward(*unpack(inputs))
    d_x, d_t, d_s, d_p = U.cubic_lstm_backward(
        cache, U.TemporalState(proj["tc"], proj["th"]),
        U.SpatialState(proj["sc"], proj["sh"]), ry)
    analytic = {"x": d_x, "temporal.cell": d_t.cell, "temporal.hidden": d_t.hidden,
                "spatial.cell": d_s.cell, "spatial.hidden": d_s.hidden}
    for kname, k in d_p.kernels().items():
        analytic[f"{kname}.weights"] = k.weights
        analytic[f"{kname}.bias"] = k.bias
    return _compare("cubic_lstm_step", loss, inputs, analytic)


def unit_checks(rng) -> list[CheckResult]:
    return check_fc_lstm(rng) + check_conv_lstm(rng) + check_cubic_lstm(rng)


# -- end-to-end grid ----------------------------------------------------------

def check_grid(seed: int = 0, context_len: int = 2, predict_len: int = 2,
               size: int = 6) -> list[CheckResult]:
    """MSE prediction loss of a (1 output x 2 spatial, c=2) grid, every parameter tensor."""
    cfg = G.GridConfig(spatial_layers=2, output_layers=1, state_channels=2,
                       frame_height=size, frame_width=size, context_len=context_len,
                       predict_len=predict_len)
    grid = G.CubicGrid.init(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, a in grid.named_parameters():
        if name.endswith("bias"):
            a[...] = rng.normal(scale=0.1, size=a.shape)
    context = [rng.random((size, size, 1)) for _ in range(context_len)]
    targets = [rng.random((size, size, 1)) for _ in range(predict_len)]

    result = G.rollout(grid, context, predict_len, keep_tape=True)
    _, d_preds = train.mse_loss(result.predictions, targets)
    grads = dict(G.rollout_backward(grid, result, d_preds).named_parameters())

    wide = grid.astype(WIDE)
    wctx = [c.astype(WIDE) for c in context]
    wtgt = [t.astype(WIDE) for t in targets]

    def loss(_):
        preds = G.encode_decode(wide, wctx, predict_len)
        return sum(np.sum((p - t) ** 2) for p, t in zip(preds, wtgt)) / predict_len

    out = []
    for name, a in wide.named_parameters():
        fd = T.finite_diff_grad(loss, a, EPS)
        out.append(CheckResult(f"grid[{name}]", T.max_rel_error(grads[name], fd)))
    return out


def run_suite(quick: bool = False, seed: int = 0) -> list[CheckResult]:
    """All checks; ``quick`` keeps only the recurrent-unit steps."""
    rng = np.random.default_rng(seed)
    if quick:
        return unit_checks(rng)
    return tensor_checks(rng) + unit_checks(rng) + check_grid(seed)

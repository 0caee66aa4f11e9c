"""``cubicrnn`` command line: train, eval, predict, gradcheck, viz, ablation.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numeric divergence. Every command finishes validating its inputs
before it creates or overwrites any output file.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .ablation import format_rows, run_ablation, settings_with
from .checkpoint import load_checkpoint, restore, save_checkpoint, snapshot, write_atomic
from .config import RunConfig
from .data import read_pgm, to_bytes, write_pgm, write_pgm_bytes
from .errors import ConfigError, DivergenceError, FormatError, UsageError
from .grid import CubicGrid, rollout, visualize_states
from .train import MetricsWriter, TrainState, per_frame_errors, train

log = logging.getLogger("cubicrnn")


# -- shared helpers -----------------------------------------------------------

def _load_model(args) -> tuple[RunConfig, CubicGrid]:
    """Config (checkpoint echo, or ``--config``) and a grid holding the checkpoint."""
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if args.config:
        cfg = RunConfig.from_file(args.config, args.set)
    else:
        cfg = RunConfig.from_text(ckpt.config_text, f"{path} (config echo)", args.set)
    grid = CubicGrid.zeros(cfg.grid_config(), dtype=cfg.dtype)
    restore(ckpt, grid)
    return cfg, grid


def _parse_seeds(text: str) -> range:
    """``a:b`` (end exclusive) or a single seed."""
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            seeds = range(int(a), int(b))
        else:
            seeds = range(int(text), int(text) + 1)
    except ValueError:
        raise UsageError(f"bad seed range {text!r}, expected A:B") from None
    if len(seeds) == 0:
        raise UsageError(f"seed range {text!r} is empty")
    return seeds


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _parse_cell(text: str) -> tuple[int, int]:
    try:
        j, l = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad cell index {text!r}, expected J,L") from None
    return j, l


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, args.set)
    glyphs = cfg.glyphs()
    tcfg = cfg.train_config()
    text = cfg.to_text()
    grid = CubicGrid.init(cfg.grid_config(), seed=cfg["train.seed"], dtype=cfg.dtype)
    ckpt_path = Path(cfg["paths.checkpoint"])
    state = TrainState.fresh(grid)
    resumed = False
    if args.resume:
        if not ckpt_path.is_file():
            raise ConfigError(f"--resume given but no checkpoint at {ckpt_path}")
        state = restore(load_checkpoint(ckpt_path), grid)
        resumed = True
        log.info("resuming from iteration %d", state.iteration)
    source = cfg.source(glyphs)
    val = cfg.samples(cfg.val_seeds(), glyphs) if tcfg.eval_every else []

    metrics_path = Path(cfg["paths.metrics"])
    for p in (ckpt_path, metrics_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(metrics_path, text.splitlines(), append=resumed)

    def on_checkpoint(g, s):
        save_checkpoint(ckpt_path, snapshot(text, g, s))

    try:
        result = train(grid, source, tcfg, state=state, val_samples=val, metrics=metrics,
                       on_checkpoint=on_checkpoint)
    finally:
        metrics.close()
    save_checkpoint(ckpt_path, snapshot(text, grid, state))
    final = [r for r in result.records if r.phase == "final"]
    if final:
        print(f"iteration {final[-1].iteration} final {tcfg.loss_kind} {final[-1].loss!r}")
    else:
        print(f"iteration {state.iteration} (nothing to train)")
    print(f"checkpoint {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg, grid = _load_model(args)
    if args.last_batch:
        tcfg = cfg.train_config()
        it = load_checkpoint(args.checkpoint).iteration
        if it == 0:
            raise UsageError("checkpoint has no training iterations, so no last batch")
        seeds = cfg.source([]).seeds(it - 1, tcfg.batch_size)
    elif args.seeds:
        seeds = _parse_seeds(args.seeds)
    else:
        seeds = cfg.val_seeds()
        if len(seeds) == 0:
            raise UsageError("configured validation set is empty; pass --seeds A:B")
    samples = cfg.samples(seeds)
    mse = []
    bce = []
    for s in samples:
        preds = rollout(grid, s.context, s.predict_len).predictions
        m, b = per_frame_errors(preds, s.targets)
        mse.append(m)
        bce.append(b)
    mse_steps = np.mean(mse, axis=0)
    bce_steps = np.mean(bce, axis=0)
    mse_all = float(np.mean([np.mean(m) for m in mse]))
    bce_all = float(np.mean([np.mean(b) for b in bce]))

    rows = [("step", "mse", "bce")]
    rows += [(k + 1, repr(float(m)), repr(float(b)))
             for k, (m, b) in enumerate(zip(mse_steps, bce_steps))]
    rows.append(("mean", repr(mse_all), repr(bce_all)))
    out = Path(args.output) if args.output else Path(args.checkpoint).with_name("eval.csv")
    write_atomic(out, _csv_text(rows).encode("utf-8"))

    print(f"sequences {len(samples)} (seeds {seeds.start}:{seeds.stop})")
    print(f"per-frame MSE {mse_all!r}")
    print(f"per-frame BCE {bce_all!r}")
    print("step  mse  bce")
    for k, (m, b) in enumerate(zip(mse_steps, bce_steps)):
        print(f"{k + 1:4d}  {m:.6f}  {b:.6f}")
    print(f"report {out}")
    return 0


def _montage(rows: Sequence[Sequence[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Frames laid out left to right, one strip per row, on a black background."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.zeros((len(rows) * (h + gap) - gap, ncol * (w + gap) - gap), dtype=np.uint8)
    for i, row in enumerate(rows):
        for k, frame in enumerate(row):
            y, x = i * (h + gap), k * (w + gap)
            out[y:y + h, x:x + w] = to_bytes(frame)
    return out


def cmd_predict(args) -> int:
    cfg, grid = _load_model(args)
    n_ctx, n_pred = cfg["data.context_len"], cfg["data.predict_len"]
    truth = None
    if args.input_dir:
        files = sorted(Path(args.input_dir).glob("*.pgm"))
        if len(files) != n_ctx:
            raise UsageError(f"{args.input_dir} holds {len(files)} PGM frames, "
                             f"model needs exactly {n_ctx}")
        context = []
        for f in files:
            frame = read_pgm(f)
            if frame.shape != grid.config.frame_shape:
                raise UsageError(f"{f} is {frame.shape[1]}x{frame.shape[0]}, model expects "
                                 f"{grid.config.frame_width}x{grid.config.frame_height}")
            context.append(frame)
    else:
        sample = cfg.samples([args.seed])[0]
        context, truth = sample.context, sample.targets
    preds = rollout(grid, context, n_pred).predictions

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, p in enumerate(preds):
        write_pgm(p, out / f"pred_{k:02d}.pgm")
    strips = [context] + ([truth] if truth is not None else []) + [preds]
    write_pgm_bytes(_montage(strips), out / "montage.pgm")
    print(f"wrote {len(preds)} frames and montage.pgm to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(quick=args.quick, seed=args.seed)
    width = max(len(r.target) for r in results)
    for r in results:
        print(f"{r.target:<{width}}  {r.error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED {r.target}: relative error {r.error:.3e} >= {r.tol:g}",
                  file=sys.stderr)
        return 1
    print(f"all {len(results)} checks under {gradcheck.TOL:g}")
    return 0


def cmd_viz(args) -> int:
    cfg, grid = _load_model(args)
    cell = _parse_cell(args.cell)
    J, L = grid.config.output_layers, grid.config.spatial_layers
    if not (0 <= cell[0] < J and 0 <= cell[1] < L):
        raise UsageError(f"cell {args.cell} outside the {J} x {L} grid (0-based)")
    seed = cfg.val_seeds().start if args.seed is None else args.seed
    sample = cfg.samples([seed])[0]
    state = rollout(grid, sample.context, 1).state
    images = visualize_states(state, cell)
    n = grid.config.state_channels
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images):
        kind = "temporal" if k < n else "spatial"
        write_pgm_bytes(img, out / f"h_{kind}_{k % n:02d}.pgm")
    print(f"wrote {len(images)} images to {out}")
    return 0


def cmd_ablation(args) -> int:
    if args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    seeds = tuple(_parse_seeds(args.seeds))
    settings = settings_with(iterations=args.iterations, seeds=seeds,
                             context_len=args.context_len, predict_len=args.predict_len)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = run_ablation(settings)
    write_atomic(out, _csv_text(format_rows(result)).encode("utf-8"))
    for shape in settings.shapes:
        print(f"{shape[0]} x {shape[1]}: median val MSE {result.median(shape):.4f} "
              f"over seeds {list(seeds)}")
    print(f"report {out}")
    return 0


# -- argument parsing ---------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--config", help="config file (default: the checkpoint's own config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cubicrnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", action="store_true",
                   help="continue from the configured checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-frame MSE and BCE on seeded sequences")
    _add_model_args(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--seeds", help="sequence seeds A:B, end exclusive (default: validation set)")
    group.add_argument("--last-batch", action="store_true",
                       help="evaluate on the checkpoint's last training batch")
    p.add_argument("--output", help="CSV report path (default: eval.csv beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted frames as PGM")
    _add_model_args(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--seed", type=int, help="generate the input sequence from this seed")
    group.add_argument("--input-dir", help="directory of context PGM frames (sorted by name)")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--quick", action="store_true", help="recurrent unit steps only")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz", help="dump one cell's hidden channels after the first decoder step")
    _add_model_args(p)
    p.add_argument("--seed", type=int, help="sequence seed (default: first validation seed)")
    p.add_argument("--cell", default="0,0", help="0-based J,L index (default 0,0)")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablation", help="1x3 vs 3x1 grid shape comparison")
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--seeds", default="0:3")
    p.add_argument("--context-len", type=int, default=5)
    p.add_argument("--predict-len", type=int, default=5)
    p.add_argument("--output", default="ablation.csv")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3

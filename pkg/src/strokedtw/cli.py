"""Command-line entry point: ``strokedtw <subcommand> ...``.

Every subcommand is deterministic for a fixed ``--seed``. Failures print
a one-line diagnostic on stderr and exit nonzero:

    2  bad usage (argparse)
    3  missing input file
    4  malformed input
    5  invalid flag combination or mismatched inputs
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .adaptive import AdaptState, AggregationMode, adapt_step
from .dataio import DatasetRecord, SynthKind, SynthSpec, StrokeFormatError, read_records, synth_generate, write_records
from .dtw import PointMetric, dtw
from .metrics import evaluate, reports_to_csv
from .render import (
    DEFAULT_HEIGHT,
    DEFAULT_STROKE_WIDTH,
    DegradeConfig,
    RasterImage,
    Transform,
    degrade,
    draw_strokes,
    fit_transform,
    rasterize,
    read_pgm,
    write_pgm,
)
from .strokes import normalize_height, points_for_width, resample_equidistant
from .trainer import TrainConfig, _derived_seed, load_checkpoint, predict_strokes, save_checkpoint, train

EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CONFLICT = 5

# distinct colors for overlay strokes (RGB)
PALETTE = ((220, 30, 30), (30, 120, 220), (20, 160, 60), (230, 140, 0), (150, 50, 190), (0, 170, 170))


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, f"input file not found: {path}")
    return p


def _load_records(path) -> list[DatasetRecord]:
    p = _need_file(path)
    try:
        recs = read_records(p)
    except StrokeFormatError as exc:
        raise CliError(EXIT_FORMAT, f"malformed record file: {exc}") from None
    except UnicodeDecodeError:
        raise CliError(EXIT_FORMAT, f"malformed record file: {path}: not UTF-8 text") from None
    if not recs:
        raise CliError(EXIT_FORMAT, f"record file has no records: {path}")
    return recs


def _check_outputs(inputs: Sequence, outputs: Sequence) -> None:
    ins = {os.path.realpath(p) for p in inputs if p is not None}
    for o in outputs:
        if o is not None and os.path.realpath(o) in ins:
            raise CliError(EXIT_CONFLICT, f"refusing to overwrite input file: {o}")


def _pair_by_id(preds: list[DatasetRecord], gts: list[DatasetRecord]):
    by_id = {r.id: r for r in preds}
    missing = [g.id for g in gts if g.id not in by_id]
    if missing:
        raise CliError(EXIT_CONFLICT, f"no prediction for record id(s): {', '.join(missing[:5])}")
    return [(by_id[g.id], g) for g in sorted(gts, key=lambda r: r.id)]


def _load_degrade(path: Optional[str]) -> Optional[DegradeConfig]:
    if path is None:
        return None
    p = _need_file(path)
    try:
        return DegradeConfig.from_text(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(EXIT_FORMAT, f"bad degrade config {path}: {exc}") from None


def _safe_name(rid: str) -> str:
    if rid in (".", "..") or any(c in rid for c in '/\\:*?"<>|') or rid.startswith("-"):
        raise CliError(EXIT_FORMAT, f"record id {rid!r} cannot be used as a file name")
    return rid


def _load_image(directory: Path, rid: str) -> tuple[RasterImage, Transform]:
    pgm = _need_file(directory / f"{rid}.pgm")
    tf = _need_file(directory / f"{rid}.tf")
    try:
        return read_pgm(pgm), Transform.loads(tf.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(EXIT_FORMAT, f"malformed image or sidecar for {rid!r}: {exc}") from None


def _write_text(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    kinds = list(SynthKind) if args.kind is None else [SynthKind(args.kind)]
    recs = []
    for k in range(args.count):
        kind = kinds[k % len(kinds)]
        seq = synth_generate(SynthSpec(kind, seed=_derived_seed(args.seed, k), n_points=args.points,
                                       jitter=args.jitter))
        recs.append(DatasetRecord(f"{kind.value}_{k:04d}", seq, kind.value))
    write_records(args.output, recs)


def cmd_resample(args) -> None:
    _check_outputs([args.input], [args.output])
    out = []
    for rec in _load_records(args.input):
        norm, _ = normalize_height(rec.seq)
        _, width = fit_transform(norm, args.height)
        count = max(points_for_width(width, args.density), 2 * rec.seq.n_strokes)
        out.append(replace(rec, seq=resample_equidistant(rec.seq, count)))
    write_records(args.output, out)


def cmd_render(args) -> None:
    recs = _load_records(args.input)
    cfg = _load_degrade(args.degrade)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(recs):
        name = _safe_name(rec.id)
        img, tf = rasterize(rec.seq, args.height, args.stroke_width)
        if cfg is not None:
            img = degrade(img, replace(cfg, seed=_derived_seed(args.seed, cfg.seed, k)))
        write_pgm(outdir / f"{name}.pgm", img)
        (outdir / f"{name}.tf").write_text(tf.dumps(), encoding="utf-8")


def _format_path(path: np.ndarray) -> str:
    return ";".join(f"{i},{j}" for i, j in path)


def cmd_align(args) -> None:
    _check_outputs([args.pred, args.gt], [args.output])
    pairs = _pair_by_id(_load_records(args.pred), _load_records(args.gt))
    lines = ["id\tcost\tpath\n"]
    for pred, gt in pairs:
        try:
            cost, path = dtw(pred.seq.points, gt.seq.points, args.metric, args.band_radius)
        except ValueError as exc:
            raise CliError(EXIT_CONFLICT, f"cannot align {gt.id!r}: {exc}") from None
        lines.append(f"{gt.id}\t{cost!r}\t{_format_path(path)}\n")
    _write_text(args.output, "".join(lines))


def cmd_adapt_gt(args) -> None:
    _check_outputs([args.gt, args.pred], [args.output, args.log])
    pairs = _pair_by_id(_load_records(args.pred), _load_records(args.gt))
    out = []
    log = io.StringIO()
    w = csv.writer(log, lineterminator="\n")
    w.writerow(("epoch", "instance_id", "transform"))
    for k, (pred, gt) in enumerate(pairs):
        state = AdaptState.start(gt.id, gt.seq, seed=_derived_seed(args.seed, k))
        for epoch in range(args.epochs):
            try:
                state, _, _ = adapt_step(pred.seq, state, args.metric, args.band_radius, args.temperature,
                                         mode=args.mode, epoch=epoch)
            except ValueError as exc:
                raise CliError(EXIT_CONFLICT, f"cannot adapt {gt.id!r}: {exc}") from None
        for c in state.changes:
            w.writerow((c.epoch, c.instance_id, str(c.transform)))
        out.append(replace(gt, seq=state.gt))
    write_records(args.output, out)
    if args.log is not None:
        Path(args.log).write_text(log.getvalue(), encoding="utf-8")


def cmd_train(args) -> None:
    inputs = [args.input, args.eval, args.degrade]
    _check_outputs(inputs, [args.checkpoint, args.history])
    recs = _load_records(args.input)
    evals = _load_records(args.eval) if args.eval else None
    try:
        cfg = TrainConfig(
            lr=args.lr, batch_size=args.batch_size, decay_every=args.decay_every, metric=args.metric,
            band_radius=args.band_radius, epochs=args.epochs, pretrain_epochs=args.pretrain_epochs,
            seed=args.seed, window=args.window, hidden=args.hidden, stride=args.density,
            height=args.height, stroke_width=args.stroke_width, alignment=args.alignment,
            temperature=args.temperature, max_steps=args.max_steps, warmup_steps=args.warmup_steps,
            degrade=_load_degrade(args.degrade), eval_every=args.eval_every,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFLICT, f"invalid training options: {exc}") from None
    model, history = train(recs, cfg, evals)
    save_checkpoint(args.checkpoint, model)
    if args.history is not None:
        Path(args.history).write_text(history.to_csv(), encoding="utf-8")


def cmd_predict(args) -> None:
    _check_outputs([args.checkpoint, args.input], [args.output])
    try:
        model = load_checkpoint(_need_file(args.checkpoint))
    except ValueError as exc:
        raise CliError(EXIT_FORMAT, f"bad checkpoint: {exc}") from None
    images = Path(args.images)
    out = []
    for rec in _load_records(args.input):
        img, tf = _load_image(images, _safe_name(rec.id))
        if img.height != model.height:
            raise CliError(EXIT_CONFLICT, f"image {rec.id!r} is {img.height}px high, model expects {model.height}")
        pred = predict_strokes(model, img, tf, max_strokes=max(1, len(rec.seq) // 2))
        out.append(DatasetRecord(rec.id, pred, rec.transcript))
    write_records(args.output, out)


def cmd_eval(args) -> None:
    _check_outputs([args.pred, args.gt], [args.output])
    pairs = _pair_by_id(_load_records(args.pred), _load_records(args.gt))
    reports = []
    for pred, gt in pairs:
        img = tf = None
        if args.images is not None:
            img, tf = _load_image(Path(args.images), _safe_name(gt.id))
        try:
            reports.append((gt.id, evaluate(pred.seq, gt.seq, img, tf)))
        except ValueError as exc:
            raise CliError(EXIT_CONFLICT, f"cannot evaluate {gt.id!r}: {exc}") from None
    _write_text(args.output, reports_to_csv(reports))


def _write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def cmd_overlay(args) -> None:
    _check_outputs([args.image, args.strokes, args.transform], [args.output])
    try:
        img = read_pgm(_need_file(args.image))
    except ValueError as exc:
        raise CliError(EXIT_FORMAT, f"malformed image {args.image}: {exc}") from None
    tf_path = args.transform or str(Path(args.image).with_suffix(".tf"))
    try:
        tf = Transform.loads(_need_file(tf_path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(EXIT_FORMAT, f"malformed transform sidecar {tf_path}: {exc}") from None
    recs = _load_records(args.strokes)
    if args.id is None:
        if len(recs) != 1:
            raise CliError(EXIT_CONFLICT, f"{args.strokes} holds {len(recs)} records; pick one with --id")
        rec = recs[0]
    else:
        found = [r for r in recs if r.id == args.id]
        if not found:
            raise CliError(EXIT_CONFLICT, f"record id {args.id!r} not in {args.strokes}")
        rec = found[0]
    # grey page, strokes in cycling colors, each stroke start marked with a dot
    rgb = np.repeat(img.pixels[:, :, None] * 0.6 + 0.4 * 255.0, 3, axis=2)
    for k, stroke in enumerate(rec.seq.strokes):
        px = tf.apply(stroke)
        cov = draw_strokes(np.zeros(img.pixels.shape), [px], args.line_width)
        draw_strokes(cov, [np.repeat(px[:1], 2, axis=0)], 3.0 * args.line_width)
        color = np.array(PALETTE[k % len(PALETTE)], dtype=np.float64)
        rgb = rgb * (1.0 - cov[:, :, None]) + color * cov[:, :, None]
    _write_ppm(args.output, np.clip(np.rint(rgb), 0, 255))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _pos_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _add_align_flags(p):
    p.add_argument("--metric", choices=[m.value for m in PointMetric], default="l1")
    p.add_argument("--band-radius", type=_nonneg_int, default=None,
                   help="Sakoe-Chiba radius (default: max(|n-m|, ceil(0.1*max(n,m))))")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strokedtw", allow_abbrev=False,
                                     description="Stroke trajectory alignment, rendering and training tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)

    p = add("synth", "write synthetic stroke records")
    p.add_argument("output")
    p.add_argument("--count", type=_pos_int, default=10)
    p.add_argument("--points", type=_pos_int, default=40)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--kind", choices=[k.value for k in SynthKind], default=None)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_synth)

    p = add("resample", "resample records to equidistant points (count set by rendered width / density)")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--density", type=_pos_int, default=4, help="pixels of image width per point")
    p.add_argument("--height", type=_pos_int, default=DEFAULT_HEIGHT)
    p.set_defaults(func=cmd_resample)

    p = add("render", "rasterize records to PGM images with transform sidecars")
    p.add_argument("input")
    p.add_argument("outdir")
    p.add_argument("--height", type=_pos_int, default=DEFAULT_HEIGHT)
    p.add_argument("--stroke-width", type=_pos_float, default=DEFAULT_STROKE_WIDTH)
    p.add_argument("--degrade", default=None, help="key=value degradation config file")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_render)

    p = add("align", "DTW-align predictions to GT records by id")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("-o", "--output", default=None)
    _add_align_flags(p)
    p.set_defaults(func=cmd_align)

    p = add("adapt-gt", "repair GT stroke order/direction against fixed predictions")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("output")
    p.add_argument("--log", default=None, help="CSV change log (epoch, instance_id, transform)")
    p.add_argument("--epochs", type=_nonneg_int, default=10)
    p.add_argument("--temperature", type=_pos_float, default=1.0)
    p.add_argument("--mode", choices=[m.value for m in AggregationMode], default="average")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    _add_align_flags(p)
    p.set_defaults(func=cmd_adapt_gt)

    p = add("train", "train the reference model on rendered records")
    p.add_argument("input")
    p.add_argument("checkpoint")
    p.add_argument("--history", default=None, help="CSV training history")
    p.add_argument("--eval", default=None, help="records evaluated after each epoch (default: training set)")
    p.add_argument("--epochs", type=_nonneg_int, default=10)
    p.add_argument("--pretrain-epochs", type=_nonneg_int, default=0,
                   help="epochs before adaptive GT starts")
    p.add_argument("--temperature", type=_pos_float, default=1.0)
    p.add_argument("--lr", type=_pos_float, default=1e-4)
    p.add_argument("--batch-size", type=_pos_int, default=32)
    p.add_argument("--decay-every", type=_pos_int, default=180_000, help="instances per 0.96 LR decay")
    p.add_argument("--hidden", type=_pos_int, default=64)
    p.add_argument("--window", type=_nonneg_int, default=4)
    p.add_argument("--density", type=_pos_int, default=4, help="column stride and GT point density")
    p.add_argument("--height", type=_pos_int, default=DEFAULT_HEIGHT)
    p.add_argument("--stroke-width", type=_pos_float, default=DEFAULT_STROKE_WIDTH)
    p.add_argument("--alignment", choices=["dtw", "index"], default="dtw")
    p.add_argument("--max-steps", type=_nonneg_int, default=None)
    p.add_argument("--warmup-steps", type=_nonneg_int, default=0)
    p.add_argument("--eval-every", type=_nonneg_int, default=1)
    p.add_argument("--degrade", default=None)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    _add_align_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("predict", "run a checkpoint over rendered images")
    p.add_argument("checkpoint")
    p.add_argument("input", help="records naming the images (ids) and their stroke counts")
    p.add_argument("images", help="directory written by 'render'")
    p.add_argument("output")
    p.set_defaults(func=cmd_predict)

    p = add("eval", "score predictions against GT (and ink pixels with --images)")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--images", default=None, help="directory written by 'render'")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_eval)

    p = add("overlay", "draw strokes over an image (binary PPM output)")
    p.add_argument("image")
    p.add_argument("strokes")
    p.add_argument("output")
    p.add_argument("--id", default=None)
    p.add_argument("--transform", default=None, help="sidecar file (default: IMAGE with .tf suffix)")
    p.add_argument("--line-width", type=_pos_float, default=1.0)
    p.set_defaults(func=cmd_overlay)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "metric", None) is not None:
        args.metric = PointMetric(args.metric)
    try:
        args.func(args)
    except CliError as exc:
        print(f"strokedtw {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"strokedtw {args.command}: error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "),
              file=sys.stderr)
        return EXIT_MISSING
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""A small differentiable trajectory predictor and its training loop.

The model reads a window of image columns around every ``stride``-th
column, plus a few sinusoids of the column position, and emits one
prediction per window: a displacement (dx, dy) plus SOS and EOS logits.
Without the position terms, windows over a plain horizontal bar are
identical and the model could not tell them apart. It is a two-layer
tanh network with no recurrence, small enough to train on a laptop, yet
it exercises the full loss and every gradient path. It is not meant to
match a CNN+BiLSTM in capacity.

Displacements are emitted in units of one column stride and converted
to stroke coordinates with the rasterizer transform. The first displacement
is taken from a fixed anchor at the image's left-center, so the
prediction origin is itself learned.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adaptive import AdaptState, AggregationMode, adapt_step
from .dataio import DatasetRecord
from .dtw import PointMetric, min_feasible_band
from .metrics import avg_dtw_distance
from .render import DEFAULT_HEIGHT, DegradeConfig, RasterImage, Transform, degrade, rasterize
from .strokes import (
    RelativeSequence,
    StrokeSequence,
    cumulative_points,
    normalize_height,
    points_for_width,
    resample_equidistant,
)
from .targets import Alignment, CompositeGrad, LossConfig, composite_loss, eos_pad

PARAM_NAMES = ("W1", "b1", "W2", "b2")
POSITION_PERIODS = (16.0, 32.0, 64.0, 128.0, 256.0)  # pixels
IDENTITY = Transform(1.0, 0.0, 0.0)


@dataclass(eq=False)
class ReferenceModel:
    window: int
    hidden: int
    stride: int
    height: int
    n_periods: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, window: int = 4, hidden: int = 64, stride: int = 4, height: int = DEFAULT_HEIGHT,
             seed: int = 0, zero_output: bool = False, output_scale: float = 0.01,
             n_periods: int = len(POSITION_PERIODS)) -> "ReferenceModel":
        if not 0 <= n_periods <= len(POSITION_PERIODS):
            raise ValueError(f"n_periods must be in 0..{len(POSITION_PERIODS)}")
        rng = np.random.default_rng(seed)
        n_in = height * (2 * window + 1) + 2 * n_periods
        W1 = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(hidden, n_in))
        b1 = np.zeros(hidden)
        b2 = np.zeros(4)
        if zero_output:
            W2 = np.zeros((4, hidden))
        else:
            W2 = rng.normal(0.0, output_scale / math.sqrt(hidden), size=(4, hidden))
            # start by stepping one stride rightward per output
            b2[0] = 1.0
        return cls(window, hidden, stride, height, n_periods, W1, b1, W2, b2)

    @property
    def n_inputs(self) -> int:
        return self.height * (2 * self.window + 1) + 2 * self.n_periods

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def n_outputs(self, width: int) -> int:
        return -(-width // self.stride)

    def copy(self) -> "ReferenceModel":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})


def column_features(model: ReferenceModel, img: RasterImage) -> np.ndarray:
    """Ink darkness in ``[0, 1]`` over each output's column window, then position sinusoids."""
    if img.height != model.height:
        raise ValueError(f"model expects images {model.height}px high, got {img.height}")
    w = model.window
    ink = (255.0 - img.pixels) / 255.0
    padded = np.pad(ink, ((0, 0), (w, w)))
    centers = np.arange(model.n_outputs(img.width)) * model.stride + model.stride // 2
    cols = centers[:, None] + np.arange(2 * w + 1)[None, :]  # index into padded
    cols = np.minimum(cols, padded.shape[1] - 1)
    valid = (centers[:, None] + np.arange(-w, w + 1)[None, :]) < img.width
    win = padded[:, cols] * valid[None, :, :]  # (h, L, 2w+1)
    X = win.transpose(1, 0, 2).reshape(len(centers), -1)
    if model.n_periods == 0:
        return X
    phase = 2.0 * np.pi * centers[:, None] / np.array(POSITION_PERIODS[:model.n_periods])[None, :]
    return np.concatenate([X, np.sin(phase), np.cos(phase)], axis=1)


@dataclass
class _Cache:
    X: np.ndarray
    H: np.ndarray
    out: np.ndarray
    unit: float


def _forward(model, img, transform):
    X = column_features(model, img)
    H = np.tanh(X @ model.W1.T + model.b1)
    out = H @ model.W2.T + model.b2
    return _Cache(X, H, out, model.stride / transform.scale)


def anchor_point(img: RasterImage, transform: Transform) -> np.ndarray:
    return transform.invert([0.0, (img.height - 1) / 2.0])[0]


def _to_relative(out, unit, anchor):
    n = len(out)
    sos = np.zeros(n, dtype=bool)
    sos[0] = True
    return RelativeSequence(anchor + unit * out[0, :2], unit * out[1:, :2], sos, np.zeros(n, dtype=bool))


def forward(model: ReferenceModel, img: RasterImage, transform: Optional[Transform] = None):
    """Predict a trajectory for ``img``.

    Returns ``(relative_sequence, sos_logits, eos_logits)``, one entry per
    stride column, in stroke coordinates (pixel coordinates when
    ``transform`` is None).
    """
    transform = IDENTITY if transform is None else transform
    c = _forward(model, img, transform)
    rel = _to_relative(c.out, c.unit, anchor_point(img, transform))
    return rel, c.out[:, 2].copy(), c.out[:, 3].copy()


def backward(model: ReferenceModel, img: RasterImage, grads: CompositeGrad,
             transform: Optional[Transform] = None, cache: Optional[_Cache] = None) -> dict[str, np.ndarray]:
    """Parameter gradients of the loss whose output gradients are ``grads``."""
    transform = IDENTITY if transform is None else transform
    c = _forward(model, img, transform) if cache is None else cache
    d_out = np.zeros_like(c.out)
    d_out[0, :2] = c.unit * np.asarray(grads.origin)
    d_out[1:, :2] = c.unit * np.asarray(grads.deltas)
    d_out[:, 2] = grads.sos_logits
    d_out[:, 3] = grads.eos_logits
    dW2 = d_out.T @ c.H
    db2 = d_out.sum(axis=0)
    d_pre = (d_out @ model.W2) * (1.0 - c.H * c.H)
    dW1 = d_pre.T @ c.X
    db1 = d_pre.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def predict_strokes(model: ReferenceModel, img: RasterImage, transform: Optional[Transform] = None,
                    trim_eos: bool = True, split_sos: bool = True,
                    max_strokes: Optional[int] = None) -> StrokeSequence:
    """Absolute predicted strokes.

    With ``trim_eos`` the sequence ends at the first point whose EOS logit
    is positive. With ``split_sos`` strokes start wherever the SOS logit
    is positive, unless that would exceed ``max_strokes``.
    """
    rel, sos_logits, eos_logits = forward(model, img, transform)
    pts = cumulative_points(rel.origin, rel.deltas)
    n = len(pts)
    if trim_eos and (eos_logits > 0).any():
        n = int(np.argmax(eos_logits > 0)) + 1
    sos = np.zeros(n, dtype=bool)
    if split_sos:
        sos[:] = sos_logits[:n] > 0
    sos[0] = True
    if max_strokes is not None and sos.sum() > max_strokes:
        sos[:] = False
        sos[0] = True
    return StrokeSequence(pts[:n], sos, np.zeros(n, dtype=bool))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    lr_decay: float = 0.96
    decay_every: int = 180_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    metric: PointMetric = PointMetric.L1
    band_radius: Optional[int] = None
    epochs: int = 10
    pretrain_epochs: int = 0
    seed: int = 0
    window: int = 4
    hidden: int = 64
    stride: int = 4
    height: int = DEFAULT_HEIGHT
    stroke_width: float = 2.0
    eos_duplicates: int = 20
    w_coord: float = 1.0
    w_sos: float = 1.0
    w_eos: float = 1.0
    alignment: Alignment = Alignment.DTW
    temperature: float = 1.0
    adapt_mode: AggregationMode = AggregationMode.AVERAGE
    max_steps: Optional[int] = None
    warmup_steps: int = 0
    warmup_band_radius: int = 1
    degrade: Optional[DegradeConfig] = None
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.decay_every <= 0 or self.epochs < 0:
            raise ValueError("learning rate, batch size and decay period must be positive")
        self.metric = PointMetric(self.metric)
        self.alignment = Alignment(self.alignment)
        self.adapt_mode = AggregationMode(self.adapt_mode)

    def loss_config(self, band_radius: Optional[int] = None) -> LossConfig:
        band = self.band_radius if band_radius is None else band_radius
        return LossConfig(self.metric, band, self.w_coord, self.w_sos, self.w_eos, alignment=self.alignment)


def learning_rate(cfg: TrainConfig, instances_seen: int) -> float:
    """Stepwise decay: multiply by ``lr_decay`` after every ``decay_every`` instances."""
    return cfg.lr * cfg.lr_decay ** (instances_seen // cfg.decay_every)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(eq=False)
class Instance:
    """A record prepared for training: normalized GT, its image, and the resampled target."""

    id: str
    norm_gt: StrokeSequence
    image: RasterImage
    transform: Transform
    target: StrokeSequence


def prepare_instance(rec: DatasetRecord, height: int = DEFAULT_HEIGHT, stroke_width: float = 2.0,
                     density: int = 4) -> Instance:
    norm, _ = normalize_height(rec.seq)
    img, tf = rasterize(norm, height, stroke_width)
    count = max(points_for_width(img.width, density), 2 * norm.n_strokes)
    return Instance(rec.id, norm, img, tf, resample_equidistant(norm, count))


@dataclass
class EpochStats:
    epoch: int
    loss: float
    change_fraction: float
    eval_avg_dtw: float
    steps: int
    lr: float


@dataclass
class History:
    epochs: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    adapt_states: dict[str, AdaptState] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "loss", "change_fraction", "eval_avg_dtw_l1", "steps", "lr"))
        for e in self.epochs:
            w.writerow((e.epoch, f"{e.loss:.10g}", f"{e.change_fraction:.10g}",
                        "" if math.isnan(e.eval_avg_dtw) else f"{e.eval_avg_dtw:.10g}", e.steps, f"{e.lr:.10g}"))
        return buf.getvalue()


def evaluate_model(model: ReferenceModel, instances: Sequence[Instance], metric=PointMetric.L1) -> float:
    """Mean unit-height average DTW distance of predictions against the normalized GTs."""
    scores = []
    for inst in instances:
        pred = predict_strokes(model, inst.image, inst.transform, max_strokes=len(inst.norm_gt) // 2)
        scores.append(avg_dtw_distance(pred, inst.norm_gt, metric))
    return float(np.mean(scores))


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def train(dataset: Sequence[DatasetRecord], cfg: TrainConfig,
          eval_set: Optional[Sequence[DatasetRecord]] = None,
          model: Optional[ReferenceModel] = None) -> tuple[ReferenceModel, History]:
    """Fit the reference model with Adam on the composite loss.

    The first ``warmup_steps`` optimizer steps align with a narrow band
    (``warmup_band_radius``, widened only as far as needed for a path).
    Adaptive GT kicks in after ``pretrain_epochs``: each instance gets one
    :func:`adapt_step` per epoch against the model's current prediction
    before its loss is computed.
    """
    if not dataset:
        raise ValueError("empty dataset")
    instances = [prepare_instance(r, cfg.height, cfg.stroke_width, cfg.stride) for r in dataset]
    evals = instances if eval_set is None else [prepare_instance(r, cfg.height, cfg.stroke_width, cfg.stride)
                                                for r in eval_set]
    if model is None:
        model = ReferenceModel.init(cfg.window, cfg.hidden, cfg.stride, cfg.height, seed=cfg.seed)
    params = model.params()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history = History()
    states = {inst.id: AdaptState.start(inst.id, inst.target, seed=_derived_seed(cfg.seed, 1, k))
              for k, inst in enumerate(instances)}
    history.adapt_states = states
    seen = 0
    steps = 0
    for epoch in range(cfg.epochs):
        adapting = epoch >= cfg.pretrain_epochs
        order = rng.permutation(len(instances))
        losses = []
        changed = 0
        for b0 in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = order[b0:b0 + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for idx in batch:
                inst = instances[idx]
                img = inst.image
                if cfg.degrade is not None:
                    img = degrade(img, replace(cfg.degrade, seed=_derived_seed(cfg.seed, 2, epoch, int(idx))))
                cache = _forward(model, img, inst.transform)
                rel = _to_relative(cache.out, cache.unit, anchor_point(img, inst.transform))
                state = states[inst.id]
                if adapting:
                    pred = StrokeSequence(cumulative_points(rel.origin, rel.deltas), rel.sos, rel.eos)
                    state, did, _ = adapt_step(pred, state, cfg.metric, cfg.band_radius, cfg.temperature,
                                               mode=cfg.adapt_mode, epoch=epoch)
                    states[inst.id] = state
                    changed += did
                if steps < cfg.warmup_steps:
                    # narrow window first: keeps the alignment near-proportional while the model is crude.
                    # EOS copies would skew the proportions, so they join after warmup.
                    target = eos_pad(state.gt, 0)
                    band = max(cfg.warmup_band_radius, min_feasible_band(len(cache.out), len(target)))
                    lcfg = cfg.loss_config(band)
                else:
                    target = eos_pad(state.gt, cfg.eos_duplicates)
                    lcfg = cfg.loss_config()
                bd, g = composite_loss(rel, cache.out[:, 2], cache.out[:, 3], target, lcfg)
                losses.append(bd.total)
                for k, v in backward(model, img, g, inst.transform, cache).items():
                    acc[k] += v
            for k in acc:
                acc[k] /= len(batch)
            lr = learning_rate(cfg, seen)
            opt.step(params, acc, lr)
            seen += len(batch)
            steps += 1
            history.step_losses.append(float(np.mean(losses[-len(batch):])))
        if not losses:
            break
        do_eval = cfg.eval_every > 0 and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1)
        history.epochs.append(EpochStats(
            epoch=epoch,
            loss=float(np.mean(losses)),
            change_fraction=changed / len(losses) if adapting else 0.0,
            eval_avg_dtw=evaluate_model(model, evals) if do_eval else math.nan,
            steps=steps,
            lr=learning_rate(cfg, seen),
        ))
    return model, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"STRKREF\x00"
VERSION = 1


def save_checkpoint(path, model: ReferenceModel) -> None:
    """Binary blob: magic, version, hyperparameters, then each named tensor as LE float64."""
    parts = [MAGIC, struct.pack("<IIIIII", VERSION, model.window, model.hidden, model.stride, model.height,
                                model.n_periods)]
    parts.append(struct.pack("<I", len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(getattr(model, name), dtype="<f8")
        raw = name.encode("ascii")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ReferenceModel:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, window, hidden, stride, height, n_periods = take("<IIIIII")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(take(f"<{nlen}s")[0]).decode("ascii")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(data):
            raise ValueError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    model = ReferenceModel(window, hidden, stride, height, n_periods, **{k: tensors[k] for k in PARAM_NAMES})
    if model.W1.shape != (hidden, model.n_inputs) or model.W2.shape != (4, hidden):
        raise ValueError(f"{path}: tensor shapes do not match the stored hyperparameters")
    return model

"""Training targets and the composite loss.

The coordinate term is the DTW alignment cost between the cumulative sum
of predicted displacements and the GT points. SOS labels come from that
same alignment (the first prediction matched to each GT stroke head), EOS
labels mark every prediction from the first one matched to an EOS point.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from .dtw import PointMetric, dtw, dtw_grad, path_costs
from .strokes import RelativeSequence, StrokeSequence, cumulative_points

EOS_DUPLICATES = 20


def eos_pad(gt: StrokeSequence, k: int = EOS_DUPLICATES) -> StrokeSequence:
    """Append ``k`` copies of the final point; flag it and the copies as EOS."""
    if k < 0:
        raise ValueError("k must be >= 0")
    pts = np.concatenate([gt.points, np.repeat(gt.points[-1:], k, axis=0)])
    sos = np.concatenate([gt.sos, np.zeros(k, dtype=bool)])
    eos = np.zeros(len(pts), dtype=bool)
    eos[len(gt) - 1:] = True
    return StrokeSequence(pts, sos, eos)


def sos_labels_from_alignment(path, gt: StrokeSequence, n_pred: Optional[int] = None) -> np.ndarray:
    """True at the first prediction index aligned to each GT stroke head."""
    path = np.asarray(path)
    n = int(path[:, 0].max()) + 1 if n_pred is None else n_pred
    labels = np.zeros(n, dtype=bool)
    heads = path[gt.sos[path[:, 1]]]
    for j in np.unique(heads[:, 1]):
        labels[heads[heads[:, 1] == j, 0].min()] = True
    return labels


def eos_labels_from_alignment(path, gt: StrokeSequence, n_pred: Optional[int] = None) -> np.ndarray:
    """True from the first prediction aligned to any GT EOS point onward."""
    path = np.asarray(path)
    n = int(path[:, 0].max()) + 1 if n_pred is None else n_pred
    labels = np.zeros(n, dtype=bool)
    hits = path[gt.eos[path[:, 1]], 0]
    if len(hits):
        labels[hits.min():] = True
    return labels


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_tokens(logits, labels):
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if logits.shape != labels.shape:
        raise ValueError(f"{len(logits)} logits but {len(labels)} labels")
    if len(logits) == 0:
        raise ValueError("no tokens")
    return logits, labels


def token_losses(logits, labels, pos_weight: float = 1.0) -> np.ndarray:
    """Per-index weighted binary cross-entropy on ``sigmoid(logit)``."""
    logits, labels = _check_tokens(logits, labels)
    return np.where(labels, pos_weight * _softplus(-logits), _softplus(logits))


def weighted_token_loss(logits, labels, pos_weight: float = 1.0) -> float:
    return float(token_losses(logits, labels, pos_weight).mean())


def weighted_token_loss_grad(logits, labels, pos_weight: float = 1.0) -> np.ndarray:
    logits, labels = _check_tokens(logits, labels)
    s = _sigmoid(logits)
    g = np.where(labels, pos_weight * (s - 1.0), s)
    return g / len(logits)


def index_path(n: int, m: int) -> np.ndarray:
    """Proportional index pairing; the identity when ``n == m``.

    Every index of the longer sequence appears once, paired with its
    rounded position on the shorter one, so the result is still a valid
    monotone, continuous path.
    """
    if n >= m:
        i = np.arange(n)
        j = np.rint(i * (m - 1) / max(n - 1, 1)).astype(np.int64)
    else:
        j = np.arange(m)
        i = np.rint(j * (n - 1) / max(m - 1, 1)).astype(np.int64)
    return np.column_stack([i, j])


class Alignment(str, Enum):
    DTW = "dtw"
    INDEX = "index"


@dataclass(frozen=True)
class LossConfig:
    metric: PointMetric = PointMetric.L1
    band_radius: Optional[int] = None
    w_coord: float = 1.0
    w_sos: float = 1.0
    w_eos: float = 1.0
    sos_pos_weight: Optional[float] = None
    eos_pos_weight: float = 1.0
    alignment: Alignment = Alignment.DTW

    def __post_init__(self):
        object.__setattr__(self, "metric", PointMetric(self.metric))
        object.__setattr__(self, "alignment", Alignment(self.alignment))


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    coord: float
    sos: float
    eos: float
    total: float
    weights: tuple
    path: Optional[np.ndarray] = None


class CompositeGrad(NamedTuple):
    origin: np.ndarray
    deltas: np.ndarray
    sos_logits: np.ndarray
    eos_logits: np.ndarray


def default_sos_pos_weight(labels) -> float:
    n = len(labels)
    s = int(np.count_nonzero(labels))
    if s == 0 or s == n:
        return 1.0
    return (n - s) / s


def composite_loss(pred_rel: RelativeSequence, sos_logits, eos_logits, gt: StrokeSequence,
                   cfg: LossConfig = LossConfig()) -> tuple[LossBreakdown, CompositeGrad]:
    """Coordinate + SOS + EOS loss with gradients, alignment held fixed.

    Absolute predictions are ``origin + cumsum(deltas)``; the gradient of
    ``deltas[k]`` is therefore the sum of absolute-point gradients over
    indices ``> k`` and the origin collects all of them.
    """
    pts = cumulative_points(pred_rel.origin, pred_rel.deltas)
    n = len(pts)
    sos_logits = np.asarray(sos_logits, dtype=np.float64).reshape(-1)
    eos_logits = np.asarray(eos_logits, dtype=np.float64).reshape(-1)
    if len(sos_logits) != n or len(eos_logits) != n:
        raise ValueError(f"{n} predicted points but {len(sos_logits)}/{len(eos_logits)} logits")

    if cfg.alignment is Alignment.DTW:
        coord, path = dtw(pts, gt.points, cfg.metric, cfg.band_radius)
    else:
        path = index_path(n, len(gt))
        coord = float(path_costs(pts, gt.points, path, cfg.metric).sum())
    g_abs = dtw_grad(pts, gt.points, path, cfg.metric)

    sos_lab = sos_labels_from_alignment(path, gt, n)
    eos_lab = eos_labels_from_alignment(path, gt, n)
    sos_w = default_sos_pos_weight(sos_lab) if cfg.sos_pos_weight is None else cfg.sos_pos_weight
    sos = weighted_token_loss(sos_logits, sos_lab, sos_w)
    eos = weighted_token_loss(eos_logits, eos_lab, cfg.eos_pos_weight)
    total = cfg.w_coord * coord + cfg.w_sos * sos + cfg.w_eos * eos

    suffix = np.cumsum(g_abs[::-1], axis=0)[::-1]
    grad = CompositeGrad(
        origin=cfg.w_coord * suffix[0],
        deltas=cfg.w_coord * suffix[1:],
        sos_logits=cfg.w_sos * weighted_token_loss_grad(sos_logits, sos_lab, sos_w),
        eos_logits=cfg.w_eos * weighted_token_loss_grad(eos_logits, eos_lab, cfg.eos_pos_weight),
    )
    weights = (cfg.w_coord, cfg.w_sos, cfg.w_eos)
    return LossBreakdown(float(coord), sos, eos, float(total), weights, path), grad

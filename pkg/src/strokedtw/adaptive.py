"""Adaptive ground truth: repair stroke order and direction during training.

Each call to :func:`adapt_step` picks one GT stroke (sampled by a softmax
over per-stroke alignment loss), tries reversing it and swapping it with
each neighbor, and keeps the best alternative only if it strictly lowers
the DTW loss against the current prediction. Only the GT columns around
the affected strokes are re-solved.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .dtw import PointMetric, cost_matrix, dtw_recompute_window, path_costs
from .strokes import StrokeSequence


class AggregationMode(str, Enum):
    TOTAL = "total"
    AVERAGE = "average"


class TransformKind(str, Enum):
    REVERSE = "reverse"
    SWAP_NEXT = "swap_next"
    SWAP_PREV = "swap_prev"


@dataclass(frozen=True)
class GtTransform:
    kind: TransformKind
    stroke: int

    def __str__(self):
        return f"{self.kind.value}({self.stroke})"

    @classmethod
    def parse(cls, text: str) -> "GtTransform":
        kind, _, rest = text.partition("(")
        return cls(TransformKind(kind), int(rest.rstrip(")")))


@dataclass(frozen=True, eq=False)
class StrokeLossVector:
    values: np.ndarray
    mode: AggregationMode

    def __len__(self):
        return len(self.values)


def per_stroke_loss(path, costs, gt: StrokeSequence, mode=AggregationMode.AVERAGE) -> StrokeLossVector:
    """Attribute every aligned pair's cost to the GT stroke owning its ``j``."""
    mode = AggregationMode(mode)
    path = np.asarray(path)
    owner = gt.stroke_index()[path[:, 1]]
    s = gt.n_strokes
    totals = np.bincount(owner, weights=np.asarray(costs, dtype=np.float64), minlength=s)
    if mode is AggregationMode.TOTAL:
        return StrokeLossVector(totals, mode)
    counts = np.bincount(owner, minlength=s)
    return StrokeLossVector(np.where(counts > 0, totals / np.maximum(counts, 1), 0.0), mode)


def candidate_probabilities(losses, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(getattr(losses, "values", losses), dtype=np.float64) / temperature
    if len(x) == 0:
        raise ValueError("no strokes to sample from")
    e = np.exp(x - x.max())
    return e / e.sum()


def sample_candidate(losses, temperature: float, rng: np.random.Generator) -> int:
    """Draw a stroke index with probability ``softmax(loss / temperature)``."""
    p = candidate_probabilities(losses, temperature)
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


def propose_transforms(gt: StrokeSequence, k: int) -> list[GtTransform]:
    s = gt.n_strokes
    if not 0 <= k < s:
        raise IndexError(f"stroke {k} out of range for {s} strokes")
    out = [GtTransform(TransformKind.REVERSE, k)]
    if k < s - 1:
        out.append(GtTransform(TransformKind.SWAP_NEXT, k))
    if k > 0:
        out.append(GtTransform(TransformKind.SWAP_PREV, k))
    return out


def apply_transform(gt: StrokeSequence, t: GtTransform) -> StrokeSequence:
    """Reverse one stroke or swap it with a neighbor.

    EOS flags are positional and stay where they were in the flattened
    sequence.
    """
    strokes = [s.copy() for s in gt.strokes]
    k = t.stroke
    if t.kind is TransformKind.REVERSE:
        strokes[k] = strokes[k][::-1]
    else:
        other = k + 1 if t.kind is TransformKind.SWAP_NEXT else k - 1
        if not 0 <= other < len(strokes):
            raise IndexError(f"{t} has no neighbor")
        strokes[k], strokes[other] = strokes[other], strokes[k]
    out = StrokeSequence.from_strokes(strokes)
    return StrokeSequence(out.points, out.sos, gt.eos)


def affected_columns(gt: StrokeSequence, t: GtTransform) -> tuple[int, int]:
    """Inclusive GT column range spanning strokes ``k-1 .. k+1`` (clamped)."""
    bounds = gt.stroke_bounds()
    first = max(t.stroke - 1, 0)
    last = min(t.stroke + 1, len(bounds) - 1)
    return bounds[first][0], bounds[last][1] - 1


@dataclass(frozen=True)
class ChangeEvent:
    epoch: int
    instance_id: str
    transform: GtTransform


@dataclass(frozen=True, eq=False)
class AdaptState:
    """Adapted GT of one training instance plus its change history.

    The generator in ``rng`` is advanced in place by :func:`adapt_step`;
    it is seeded from ``seed`` and owned by this instance alone.
    """

    instance_id: str
    gt: StrokeSequence
    original: StrokeSequence
    seed: int = 0
    changes: tuple = ()
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            object.__setattr__(self, "rng", np.random.default_rng(self.seed))

    @classmethod
    def start(cls, instance_id: str, gt: StrokeSequence, seed: int = 0) -> "AdaptState":
        return cls(instance_id, gt, gt, seed)

    def changes_in_epoch(self, epoch: int) -> int:
        return sum(1 for c in self.changes if c.epoch == epoch)


def adapt_step(
    pred: StrokeSequence,
    state: AdaptState,
    metric=PointMetric.L1,
    band_radius: Optional[int] = None,
    temperature: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    mode=AggregationMode.AVERAGE,
    epoch: int = 0,
) -> tuple[AdaptState, bool, float]:
    """Try one alteration of the GT and keep it only on strict improvement.

    Returns ``(new_state, changed, loss)`` where ``loss`` is the DTW loss
    of whichever GT is committed.
    """
    rng = state.rng if rng is None else rng
    P = pred.points
    gt = state.gt
    cm = cost_matrix(P, gt.points, metric, band_radius)
    loss = cm.cost
    path = cm.path()
    losses = per_stroke_loss(path, path_costs(P, gt.points, path, metric), gt, mode)
    k = sample_candidate(losses, temperature, rng)

    best_loss, best_t, best_gt = loss, None, None
    for t in propose_transforms(gt, k):
        cand = apply_transform(gt, t)
        c, _, _ = dtw_recompute_window(cm, P, cand.points, affected_columns(gt, t), metric)
        if c < best_loss:
            best_loss, best_t, best_gt = c, t, cand
    if best_t is None:
        return state, False, loss
    event = ChangeEvent(epoch, state.instance_id, best_t)
    return replace(state, gt=best_gt, changes=state.changes + (event,)), True, best_loss


def brute_force_reachable(gt: StrokeSequence, depth: int) -> list[tuple[StrokeSequence, int]]:
    """Every configuration reachable with at most ``depth`` reverse/adjacent-swap moves.

    Returns ``(sequence, moves)`` pairs with the minimal move count. Meant
    for small stroke counts.
    """
    def key(s):
        return s.points.tobytes() + s.sos.tobytes()

    seen = {key(gt): (gt, 0)}
    frontier = [gt]
    for d in range(1, depth + 1):
        nxt = []
        for seq in frontier:
            for k in range(seq.n_strokes):
                for t in propose_transforms(seq, k):
                    cand = apply_transform(seq, t)
                    kk = key(cand)
                    if kk not in seen:
                        seen[kk] = (cand, d)
                        nxt.append(cand)
        frontier = nxt
    return list(seen.values())

"""Stroke geometry: sequences of pen strokes and the transforms applied to them.

Coordinates follow the image convention: x grows rightward, y grows
downward, origin at the top-left. A :class:`StrokeSequence` stores every
point of every stroke in one flat ``(N, 2)`` array together with per-point
start-of-stroke (``sos``) and end-of-sequence (``eos``) flags; strokes are
recovered by cutting the flat array at the ``sos`` flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class StrokeSequence:
    """Ordered strokes of absolute 2-D points with per-point SOS/EOS flags."""

    points: np.ndarray
    sos: np.ndarray
    eos: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points, np.float64).reshape(-1, 2)
        sos = _frozen(self.sos, bool).reshape(-1)
        eos = _frozen(self.eos, bool).reshape(-1)
        n = len(pts)
        if n == 0:
            raise ValueError("stroke sequence must contain at least one point")
        if len(sos) != n or len(eos) != n:
            raise ValueError(f"flag lengths {len(sos)}/{len(eos)} do not match {n} points")
        if not np.isfinite(pts).all():
            raise ValueError("stroke points must be finite")
        if not sos[0]:
            raise ValueError("first point must start a stroke")
        if eos.any():
            first = int(np.argmax(eos))
            if not eos[first:].all():
                raise ValueError("eos flags must form a suffix of the sequence")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sos", sos)
        object.__setattr__(self, "eos", eos)

    @classmethod
    def from_strokes(cls, strokes: Iterable[Sequence], eos_count: int = 0) -> "StrokeSequence":
        """Build a sequence from a list of ``(k, 2)`` point arrays.

        ``eos_count`` flags that many trailing points as end-of-sequence.
        """
        arrays = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in strokes]
        if not arrays or any(len(a) == 0 for a in arrays):
            raise ValueError("every stroke needs at least one point")
        pts = np.concatenate(arrays)
        sos = np.zeros(len(pts), dtype=bool)
        sos[np.cumsum([0] + [len(a) for a in arrays[:-1]])] = True
        eos = np.zeros(len(pts), dtype=bool)
        if eos_count:
            eos[-eos_count:] = True
        return cls(pts, sos, eos)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StrokeSequence):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.sos, other.sos)
            and np.array_equal(self.eos, other.eos)
        )

    def __repr__(self) -> str:
        return f"StrokeSequence(n_points={len(self)}, n_strokes={self.n_strokes})"

    @property
    def n_strokes(self) -> int:
        return int(self.sos.sum())

    @property
    def starts(self) -> np.ndarray:
        return np.flatnonzero(self.sos)

    def stroke_bounds(self) -> list[tuple[int, int]]:
        """Half-open ``(start, stop)`` index range of each stroke."""
        starts = self.starts.tolist()
        stops = starts[1:] + [len(self)]
        return list(zip(starts, stops))

    @property
    def strokes(self) -> list[np.ndarray]:
        return [self.points[a:b] for a, b in self.stroke_bounds()]

    def stroke_index(self) -> np.ndarray:
        """Owning stroke of every flattened point."""
        return np.cumsum(self.sos) - 1

    def with_points(self, points) -> "StrokeSequence":
        return StrokeSequence(points, self.sos, self.eos)


@dataclass(frozen=True, eq=False)
class RelativeSequence:
    """A stroke sequence stored as an origin plus per-step displacements."""

    origin: np.ndarray
    deltas: np.ndarray
    sos: np.ndarray
    eos: np.ndarray

    def __post_init__(self):
        origin = _frozen(self.origin, np.float64).reshape(2)
        deltas = _frozen(self.deltas, np.float64).reshape(-1, 2)
        sos = _frozen(self.sos, bool).reshape(-1)
        eos = _frozen(self.eos, bool).reshape(-1)
        if len(sos) != len(deltas) + 1 or len(eos) != len(sos):
            raise ValueError("flags must have one entry per absolute point (len(deltas) + 1)")
        if not (np.isfinite(origin).all() and np.isfinite(deltas).all()):
            raise ValueError("relative coordinates must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "sos", sos)
        object.__setattr__(self, "eos", eos)

    def __len__(self) -> int:
        return len(self.sos)


def to_relative(seq: StrokeSequence) -> RelativeSequence:
    """Difference consecutive flattened points; pen-up jumps become ordinary deltas."""
    if len(seq) == 0:
        raise ValueError("empty sequence")
    return RelativeSequence(seq.points[0], np.diff(seq.points, axis=0), seq.sos, seq.eos)


def cumulative_points(origin, deltas) -> np.ndarray:
    """Absolute points ``origin, origin + d0, origin + d0 + d1, ...``."""
    origin = np.asarray(origin, dtype=np.float64).reshape(1, 2)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    return np.concatenate([origin, origin + np.cumsum(deltas, axis=0)])


def to_absolute(rel: RelativeSequence) -> StrokeSequence:
    sos = rel.sos.copy()
    sos[0] = True
    return StrokeSequence(cumulative_points(rel.origin, rel.deltas), sos, rel.eos)


def arc_lengths(stroke: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex of a polyline, starting at 0."""
    seg = np.hypot(*np.diff(stroke, axis=0).T) if len(stroke) > 1 else np.zeros(0)
    return np.concatenate([[0.0], np.cumsum(seg)])


def apportion(weights: Sequence[float], total: int, minimum: int = 2) -> np.ndarray:
    """Split ``total`` items over ``weights`` by largest remainder.

    Every slot first receives ``minimum``; the rest is shared in
    proportion to the weights. Remainder ties go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    k = len(w)
    spare = total - minimum * k
    if spare < 0:
        raise ValueError(f"need at least {minimum * k} points for {k} strokes, got {total}")
    if w.sum() <= 0:
        w = np.ones(k)
    quota = spare * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    left = spare - int(counts.sum())
    if left:
        order = np.lexsort((np.arange(k), -(quota - counts)))
        counts[order[:left]] += 1
    return counts + minimum


def _resample_stroke(stroke: np.ndarray, count: int) -> np.ndarray:
    # drop zero-length segments so the arc-length table is strictly increasing
    keep = np.ones(len(stroke), dtype=bool)
    keep[1:] = np.any(np.diff(stroke, axis=0) != 0, axis=1)
    pts = stroke[keep]
    if len(pts) == 1:
        return np.repeat(pts, count, axis=0)
    cum = arc_lengths(pts)
    targets = np.linspace(0.0, cum[-1], count)
    out = np.column_stack([np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])])
    out[0] = stroke[0]
    out[-1] = stroke[-1]
    return out


def resample_equidistant(seq: StrokeSequence, total_points: int) -> StrokeSequence:
    """Resample every stroke at uniform arc-length spacing.

    Point budgets follow stroke arc length (at least two points per
    stroke, so endpoints survive exactly). If the final input point was
    flagged end-of-sequence, so is the final output point.
    """
    strokes = seq.strokes
    lengths = [arc_lengths(s)[-1] for s in strokes]
    counts = apportion(lengths, int(total_points), minimum=2)
    out = StrokeSequence.from_strokes(
        [_resample_stroke(s, int(c)) for s, c in zip(strokes, counts)],
        eos_count=1 if seq.eos[-1] else 0,
    )
    return out


def points_for_width(width_px: float, density: float = 4.0) -> int:
    """Resampling budget for an image ``width_px`` wide: one point per ``density`` pixels."""
    return max(1, int(np.ceil(width_px / density)))


def normalize_height(seq: StrokeSequence) -> tuple[StrokeSequence, float]:
    """Translate to the origin and scale the vertical extent to 1.

    Returns the normalized sequence and the applied scale factor. A
    sequence with no vertical extent is only translated (scale 1).
    """
    lo = seq.points.min(axis=0)
    height = seq.points[:, 1].max() - lo[1]
    scale = 1.0 / height if height > 0 else 1.0
    return seq.with_points((seq.points - lo) * scale), scale


def affine(seq: StrokeSequence, scale: float, offset) -> StrokeSequence:
    """Uniform scale followed by translation: ``p * scale + offset``."""
    return seq.with_points(seq.points * scale + np.asarray(offset, dtype=np.float64))


def concat(seqs: Sequence[StrokeSequence]) -> StrokeSequence:
    """Join sequences stroke-wise; eos flags are dropped."""
    return StrokeSequence.from_strokes([s for q in seqs for s in q.strokes])

"""Evaluation metrics for recovered trajectories.

Online metrics compare predicted and GT strokes after scaling both by the
GT's unit-height normalization. The offline metric compares predictions
to the ink pixels of an image.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .dtw import PointMetric, _metric_code, dtw
from .render import RasterImage, Transform
from .strokes import StrokeSequence, resample_equidistant

INK_THRESHOLD = 127.5


def normalize_pair(pred: StrokeSequence, gt: StrokeSequence) -> tuple[StrokeSequence, StrokeSequence]:
    """Apply the GT's unit-height normalization to both sequences."""
    lo = gt.points.min(axis=0)
    height = gt.points[:, 1].max() - lo[1]
    scale = 1.0 / height if height > 0 else 1.0
    return pred.with_points((pred.points - lo) * scale), gt.with_points((gt.points - lo) * scale)


def avg_dtw_distance(pred: StrokeSequence, gt: StrokeSequence, metric=PointMetric.L1,
                     band_radius: Optional[int] = None) -> float:
    """Mean per-pair DTW cost after normalization and resampling the prediction to ``len(gt)``.

    ``band_radius=None`` means an unconstrained alignment. A prediction
    that already has ``len(gt)`` points is used as is, so identical
    sequences score exactly 0.
    """
    pred_n, gt_n = normalize_pair(pred, gt)
    if len(pred_n) != len(gt_n):
        pred_n = resample_equidistant(pred_n, len(gt_n))
    r = max(len(pred_n), len(gt_n)) if band_radius is None else band_radius
    cost, path = dtw(pred_n.points, gt_n.points, metric, r)
    return cost / len(path)


class GridIndex:
    """Uniform-grid hash of 2-D points for exact nearest-neighbor queries."""

    def __init__(self, points, cell: Optional[float] = None):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        lo = self.points.min(axis=0)
        span = float(np.max(self.points.max(axis=0) - lo))
        if cell is None:
            cell = span / max(math.sqrt(len(self.points)), 1.0)
        self.cell = cell if cell > 0 else 1.0
        self.origin = lo
        keys = np.floor((self.points - lo) / self.cell).astype(np.int64)
        self.buckets = defaultdict(list)
        for idx, (a, b) in enumerate(keys):
            self.buckets[(int(a), int(b))].append(idx)
        self.buckets = {k: np.array(v) for k, v in self.buckets.items()}
        self.kmin = [int(v) for v in keys.min(axis=0)]
        self.kmax = [int(v) for v in keys.max(axis=0)]

    def _ring_cells(self, ka, kb, ring):
        """Cells at Chebyshev index distance ``ring`` from ``(ka, kb)``, clipped to the occupied box."""
        a_lo, a_hi = max(ka - ring, self.kmin[0]), min(ka + ring, self.kmax[0])
        b_lo, b_hi = max(kb - ring, self.kmin[1]), min(kb + ring, self.kmax[1])
        if a_lo > a_hi or b_lo > b_hi:
            return
        for a in (ka - ring, ka + ring) if ring else (ka,):
            if a_lo <= a <= a_hi:
                for b in range(b_lo, b_hi + 1):
                    yield a, b
        if ring:
            for b in (kb - ring, kb + ring):
                if b_lo <= b <= b_hi:
                    for a in range(max(a_lo, ka - ring + 1), min(a_hi, ka + ring - 1) + 1):
                        yield a, b

    def nearest(self, q, metric=PointMetric.L2) -> float:
        code = _metric_code(metric)
        q = np.asarray(q, dtype=np.float64)
        ka, kb = (int(v) for v in np.floor((q - self.origin) / self.cell))
        best = math.inf
        # no occupied cell is closer (in index distance) than the bounding box of keys
        ring = max(0, self.kmin[0] - ka, ka - self.kmax[0], self.kmin[1] - kb, kb - self.kmax[1])
        max_ring = max(abs(ka - self.kmin[0]), abs(ka - self.kmax[0]), abs(kb - self.kmin[1]), abs(kb - self.kmax[1]))
        while True:
            for key in self._ring_cells(ka, kb, ring):
                idx = self.buckets.get(key)
                if idx is None:
                    continue
                d = self.points[idx] - q
                if code == 1:
                    c = np.abs(d[:, 0]) + np.abs(d[:, 1])
                else:
                    c = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
                best = min(best, float(c.min()))
            # cells beyond ring r lie more than r * cell away along x or y, hence in L1 and L2
            if best <= ring * self.cell or ring >= max_ring:
                return best
            ring += 1


def nn_distance_bruteforce(src, dst, metric=PointMetric.L2) -> float:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("nn_distance needs non-empty point sets")
    code = _metric_code(metric)
    total = 0.0
    for p in src:
        d = dst - p
        if code == 1:
            c = np.abs(d[:, 0]) + np.abs(d[:, 1])
        else:
            c = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
        total += float(c.min())
    return total / len(src)


def nn_distance(src, dst, metric=PointMetric.L2) -> float:
    """Mean over ``src`` of the distance to the nearest point of ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("nn_distance needs non-empty point sets")
    index = GridIndex(dst)
    return sum(index.nearest(p, metric) for p in src) / len(src)


def ink_pixels(img: RasterImage, threshold: float = INK_THRESHOLD) -> np.ndarray:
    """``(x, y)`` centers of pixels darker than ``threshold``."""
    rows, cols = np.nonzero(img.pixels < threshold)
    return np.column_stack([cols, rows]).astype(np.float64)


def ink_nn_distance(pred: StrokeSequence, img: RasterImage, transform: Transform,
                    threshold: float = INK_THRESHOLD) -> float:
    """Mean L2 distance from predictions (in pixels) to the nearest ink pixel.

    Divided by the height of the ink bounding box in pixels.
    """
    ink = ink_pixels(img, threshold)
    if len(ink) == 0:
        raise ValueError("image has no ink pixels")
    box_h = ink[:, 1].max() - ink[:, 1].min() + 1.0
    return nn_distance(transform.apply(pred.points), ink, PointMetric.L2) / box_h


@dataclass(frozen=True)
class EvalReport:
    avg_dtw_l1: float
    avg_dtw_l2: float
    nn_gt_to_pred: float
    nn_pred_to_gt: float
    ink_nn: Optional[float] = None
    n_pred: int = 0
    n_gt: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is not None and v < 0:
                raise ValueError(f"{k} must be >= 0")

    FIELDS = ("avg_dtw_l1", "avg_dtw_l2", "nn_gt_to_pred", "nn_pred_to_gt", "ink_nn", "n_pred", "n_gt")

    def row(self) -> list[str]:
        out = []
        for k in self.FIELDS:
            v = getattr(self, k)
            out.append("" if v is None else (str(v) if isinstance(v, int) else f"{v:.10g}"))
        return out

    def table(self) -> str:
        width = max(len(k) for k in self.FIELDS)
        return "\n".join(f"{k:<{width}}  {v or '-'}" for k, v in zip(self.FIELDS, self.row()))


def reports_to_csv(reports: list[tuple[str, EvalReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("id",) + EvalReport.FIELDS)
    for rid, r in reports:
        w.writerow([rid] + r.row())
    return buf.getvalue()


def evaluate(pred: StrokeSequence, gt: StrokeSequence, img: Optional[RasterImage] = None,
             transform: Optional[Transform] = None) -> EvalReport:
    """All online metrics, plus ink-NN when an image and its transform are given."""
    pred_n, gt_n = normalize_pair(pred, gt)
    ink = ink_nn_distance(pred, img, transform) if img is not None and transform is not None else None
    return EvalReport(
        avg_dtw_l1=avg_dtw_distance(pred, gt, PointMetric.L1),
        avg_dtw_l2=avg_dtw_distance(pred, gt, PointMetric.L2),
        nn_gt_to_pred=nn_distance(gt_n.points, pred_n.points, PointMetric.L2),
        nn_pred_to_gt=nn_distance(pred_n.points, gt_n.points, PointMetric.L2),
        ink_nn=ink,
        n_pred=len(pred),
        n_gt=len(gt),
    )

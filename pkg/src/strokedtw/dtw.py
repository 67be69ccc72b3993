"""Banded dynamic time warping between 2-D point sequences.

The band is a Sakoe-Chiba window around the rescaled diagonal: cell
``(i, j)`` of an ``n x m`` problem is admissible when

    |j * (n - 1) - i * (m - 1)| <= band_radius * min(n - 1, m - 1)

which is exact integer arithmetic, symmetric under swapping the two
sequences, and reduces to a half-width of ``band_radius`` cells along the
longer axis. Steps are ``(1, 0)``, ``(0, 1)`` and ``(1, 1)``.

Paths are recovered by backward induction with a fixed tie order
(diagonal, then the step that decreases ``j``, then the step that
decreases ``i``) so that repeated runs label the same points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numba as nb
import numpy as np

__all__ = [
    "PointMetric",
    "CostMatrix",
    "point_cost",
    "pairwise_costs",
    "path_costs",
    "band_limits",
    "default_band_radius",
    "min_feasible_band",
    "cost_matrix",
    "dtw",
    "dtw_cost",
    "dtw_loss",
    "dtw_grad",
    "dtw_recompute_window",
    "validate_path",
    "NoPathError",
]


class PointMetric(str, Enum):
    L1 = "l1"
    L2 = "l2"


class NoPathError(ValueError):
    """The warping window admits no monotone path between the corners."""


def _metric_code(metric) -> int:
    return 1 if PointMetric(metric) is PointMetric.L1 else 2


def point_cost(p, t, metric=PointMetric.L1) -> float:
    dx = float(p[0]) - float(t[0])
    dy = float(p[1]) - float(t[1])
    if _metric_code(metric) == 1:
        return abs(dx) + abs(dy)
    return math.sqrt(dx * dx + dy * dy)


def pairwise_costs(P, T, metric=PointMetric.L1) -> np.ndarray:
    """Dense ``n x m`` matrix of point costs (small problems and tests only)."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
    T = np.asarray(T, dtype=np.float64).reshape(-1, 2)
    d = P[:, None, :] - T[None, :, :]
    if _metric_code(metric) == 1:
        return np.abs(d[..., 0]) + np.abs(d[..., 1])
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


def path_costs(P, T, path, metric=PointMetric.L1) -> np.ndarray:
    """Point cost of every aligned pair along ``path``."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
    T = np.asarray(T, dtype=np.float64).reshape(-1, 2)
    path = np.asarray(path)
    d = P[path[:, 0]] - T[path[:, 1]]
    if _metric_code(metric) == 1:
        return np.abs(d[:, 0]) + np.abs(d[:, 1])
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])


def default_band_radius(n: int, m: int) -> int:
    return max(abs(n - m), math.ceil(0.1 * max(n, m)))


def band_limits(n: int, m: int, band_radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive column range ``[lo[i], hi[i]]`` of each row inside the band."""
    if band_radius < 0:
        raise ValueError("band_radius must be non-negative")
    a, b = n - 1, m - 1
    i = np.arange(n, dtype=np.int64)
    if a == 0 or b == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, b, dtype=np.int64)
    reach = int(band_radius) * min(a, b)
    reach = min(reach, a * b)  # wider bands change nothing; keeps products in range
    lo = -((reach - i * b) // a)
    hi = (i * b + reach) // a
    return np.clip(lo, 0, b), np.clip(hi, 0, b)


def min_feasible_band(n: int, m: int) -> int:
    """Smallest band radius that still admits a corner-to-corner path."""
    r = 0
    while True:
        lo, hi = band_limits(n, m, r)
        if (lo <= hi).all() and (lo[1:] <= hi[:-1] + 1).all():
            return r
        r += 1


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _cost(px, py, tx, ty, metric):
    dx = px - tx
    dy = py - ty
    if metric == 1:
        return abs(dx) + abs(dy)
    return math.sqrt(dx * dx + dy * dy)


@nb.njit(cache=True, nogil=True)
def _fill_band(P, T, lo, hi, metric, cum, j_start):
    """Fill cumulative costs for every in-band cell with column >= j_start."""
    inf = np.inf
    n = P.shape[0]
    for i in range(n):
        jl = lo[i]
        if j_start > jl:
            jl = j_start
        for j in range(jl, hi[i] + 1):
            c = _cost(P[i, 0], P[i, 1], T[j, 0], T[j, 1], metric)
            if i == 0 and j == 0:
                cum[0, 0] = c
                continue
            best = inf
            if i > 0:
                plo = lo[i - 1]
                phi = hi[i - 1]
                if j > 0 and plo <= j - 1 <= phi:
                    v = cum[i - 1, j - 1 - plo]
                    if v < best:
                        best = v
                if plo <= j <= phi:
                    v = cum[i - 1, j - plo]
                    if v < best:
                        best = v
            if j - 1 >= lo[i]:
                v = cum[i, j - 1 - lo[i]]
                if v < best:
                    best = v
            cum[i, j - lo[i]] = c + best


@nb.njit(cache=True, nogil=True)
def _rolling_cost(P, T, lo, hi, metric, width):
    """Final cumulative cost keeping only two band rows in memory."""
    inf = np.inf
    n = P.shape[0]
    prev = np.full(width, inf)
    cur = np.full(width, inf)
    plo = 0
    phi = -1
    for i in range(n):
        clo = lo[i]
        for j in range(clo, hi[i] + 1):
            c = _cost(P[i, 0], P[i, 1], T[j, 0], T[j, 1], metric)
            if i == 0 and j == 0:
                cur[0] = c
                continue
            best = inf
            if i > 0:
                if j > 0 and plo <= j - 1 <= phi:
                    v = prev[j - 1 - plo]
                    if v < best:
                        best = v
                if plo <= j <= phi:
                    v = prev[j - plo]
                    if v < best:
                        best = v
            if j - 1 >= clo:
                v = cur[j - 1 - clo]
                if v < best:
                    best = v
            cur[j - clo] = c + best
        plo = clo
        phi = hi[i]
        prev, cur = cur, prev
    return prev[hi[n - 1] - lo[n - 1]]


@nb.njit(cache=True, nogil=True)
def _backtrack(cum, lo, hi, m):
    inf = np.inf
    n = cum.shape[0]
    out = np.empty((n + m - 1, 2), dtype=np.int64)
    i = n - 1
    j = m - 1
    k = 0
    out[k, 0] = i
    out[k, 1] = j
    k += 1
    while i > 0 or j > 0:
        diag = inf
        left = inf
        up = inf
        if i > 0 and j > 0 and lo[i - 1] <= j - 1 <= hi[i - 1]:
            diag = cum[i - 1, j - 1 - lo[i - 1]]
        if j > 0 and j - 1 >= lo[i]:
            left = cum[i, j - 1 - lo[i]]
        if i > 0 and lo[i - 1] <= j <= hi[i - 1]:
            up = cum[i - 1, j - lo[i - 1]]
        if diag <= left and diag <= up:
            i -= 1
            j -= 1
        elif left <= up:
            j -= 1
        else:
            i -= 1
        out[k, 0] = i
        out[k, 1] = j
        k += 1
    return out[:k][::-1].copy()


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _points(X, name) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, 2)
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    return X


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Banded cumulative-cost table of one DTW problem.

    ``cumulative[i, j - lo[i]]`` holds the cost of the cheapest admissible
    path from ``(0, 0)`` to ``(i, j)``; out-of-band slots are ``inf``.
    """

    P: np.ndarray
    T: np.ndarray
    metric: PointMetric
    band_radius: int
    lo: np.ndarray
    hi: np.ndarray
    cumulative: np.ndarray

    @property
    def n(self) -> int:
        return len(self.P)

    @property
    def m(self) -> int:
        return len(self.T)

    @property
    def cost(self) -> float:
        return float(self.cumulative[-1, self.hi[-1] - self.lo[-1]])

    def value(self, i: int, j: int) -> float:
        if self.lo[i] <= j <= self.hi[i]:
            return float(self.cumulative[i, j - self.lo[i]])
        return math.inf

    def path(self) -> np.ndarray:
        if not math.isfinite(self.cost):
            raise NoPathError(f"band radius {self.band_radius} admits no path for {self.n}x{self.m}")
        return _backtrack(self.cumulative, self.lo, self.hi, self.m)


def _resolve_band(n, m, band_radius):
    return default_band_radius(n, m) if band_radius is None else int(band_radius)


def cost_matrix(P, T, metric=PointMetric.L1, band_radius=None) -> CostMatrix:
    """Fill and keep the full band, for path recovery or incremental updates."""
    P = _points(P, "P")
    T = _points(T, "T")
    r = _resolve_band(len(P), len(T), band_radius)
    lo, hi = band_limits(len(P), len(T), r)
    width = int((hi - lo).max()) + 1
    cum = np.full((len(P), width), np.inf)
    _fill_band(P, T, lo, hi, _metric_code(metric), cum, 0)
    cm = CostMatrix(P, T, PointMetric(metric), r, lo, hi, cum)
    if not math.isfinite(cm.cost):
        raise NoPathError(f"band radius {r} admits no path for {len(P)}x{len(T)}")
    return cm


def dtw(P, T, metric=PointMetric.L1, band_radius=None) -> tuple[float, np.ndarray]:
    """Minimal alignment cost and the path achieving it.

    ``band_radius=None`` uses ``max(|n - m|, ceil(0.1 * max(n, m)))``.
    The path is an ``(K, 2)`` integer array of ``(i, j)`` pairs.
    """
    cm = cost_matrix(P, T, metric, band_radius)
    return cm.cost, cm.path()


def dtw_cost(P, T, metric=PointMetric.L1, band_radius=None) -> float:
    """Alignment cost only; memory is two band rows, never ``n x m``."""
    P = _points(P, "P")
    T = _points(T, "T")
    r = _resolve_band(len(P), len(T), band_radius)
    lo, hi = band_limits(len(P), len(T), r)
    width = int((hi - lo).max()) + 1
    cost = float(_rolling_cost(P, T, lo, hi, _metric_code(metric), width))
    if not math.isfinite(cost):
        raise NoPathError(f"band radius {r} admits no path for {len(P)}x{len(T)}")
    return cost


def dtw_loss(pred, gt, metric=PointMetric.L1, band_radius=None) -> tuple[float, np.ndarray]:
    """DTW between the flattened points of two stroke sequences."""
    return dtw(pred.points, gt.points, metric, band_radius)


def dtw_grad(P, T, path, metric=PointMetric.L1) -> np.ndarray:
    """Gradient of the summed path cost w.r.t. each prediction point, path held fixed.

    Kinks (L1 with a zero coordinate difference, L2 with coincident
    points) contribute a zero subgradient.
    """
    P = np.asarray(P, dtype=np.float64).reshape(-1, 2)
    T = np.asarray(T, dtype=np.float64).reshape(-1, 2)
    path = np.asarray(path)
    d = P[path[:, 0]] - T[path[:, 1]]
    if _metric_code(metric) == 1:
        g = np.sign(d)
    else:
        norm = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
        safe = np.where(norm > 0, norm, 1.0)
        g = np.where(norm[:, None] > 0, d / safe[:, None], 0.0)
    out = np.zeros_like(P)
    np.add.at(out, path[:, 0], g)
    return out


def dtw_recompute_window(cm: CostMatrix, P, T_new, changed_gt_range, metric=None):
    """Re-solve after the GT changed only inside ``changed_gt_range``.

    Columns left of the range depend only on unchanged GT points and are
    copied; everything from ``j_lo`` rightward is refilled. The result is
    bit-identical to a fresh :func:`cost_matrix` on ``(P, T_new)``.

    Returns ``(cost, path, updated_matrix)``.
    """
    metric = cm.metric if metric is None else PointMetric(metric)
    if metric is not cm.metric:
        raise ValueError("metric differs from the one the matrix was built with")
    P = _points(P, "P")
    T_new = _points(T_new, "T")
    j_lo, j_hi = (int(v) for v in changed_gt_range)
    if not (0 <= j_lo <= j_hi < cm.m):
        raise ValueError(f"changed range ({j_lo}, {j_hi}) outside 0..{cm.m - 1}")
    if P.shape != cm.P.shape or not np.array_equal(P, cm.P):
        raise ValueError("prediction differs from the one the matrix was built with")
    if T_new.shape != cm.T.shape:
        raise ValueError("GT length changed; incremental recompute needs equal lengths")
    outside = np.ones(cm.m, dtype=bool)
    outside[j_lo:j_hi + 1] = False
    if not np.array_equal(T_new[outside], cm.T[outside]):
        raise ValueError(f"GT changed outside the declared range ({j_lo}, {j_hi})")
    cum = cm.cumulative.copy()
    _fill_band(P, T_new, cm.lo, cm.hi, _metric_code(metric), cum, j_lo)
    new = CostMatrix(cm.P, T_new, metric, cm.band_radius, cm.lo, cm.hi, cum)
    return new.cost, new.path(), new


def validate_path(path, n: int, m: int, band_radius: int | None = None) -> None:
    """Raise ``ValueError`` unless ``path`` is a monotone, continuous corner-to-corner path."""
    path = np.asarray(path)
    if path.ndim != 2 or path.shape[1] != 2 or len(path) == 0:
        raise ValueError("path must be a non-empty (K, 2) array")
    if tuple(path[0]) != (0, 0) or tuple(path[-1]) != (n - 1, m - 1):
        raise ValueError("path must run from (0, 0) to (n-1, m-1)")
    steps = np.diff(path, axis=0)
    ok = np.isin(steps[:, 0], (0, 1)) & np.isin(steps[:, 1], (0, 1)) & (steps.sum(axis=1) > 0)
    if not ok.all():
        raise ValueError(f"invalid step at position {int(np.argmin(ok)) + 1}")
    if band_radius is not None:
        lo, hi = band_limits(n, m, band_radius)
        i, j = path[:, 0], path[:, 1]
        if ((j < lo[i]) | (j > hi[i])).any():
            raise ValueError("path leaves the warping band")

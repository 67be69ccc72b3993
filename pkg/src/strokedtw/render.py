"""Rasterize stroke sequences and degrade the result to look like scanned ink.

Images are float64 arrays of intensities in ``[0, 255]`` (0 = ink,
255 = background). Pixel ``(row, col)`` has its center at stroke-space pixel
coordinate ``(x=col, y=row)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .strokes import StrokeSequence

MARGIN = 4
DEFAULT_HEIGHT = 60
DEFAULT_STROKE_WIDTH = 2.0
MAX_WIDTH = 1 << 16


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0 or px.max() > 255:
            raise ValueError("intensities must lie in [0, 255]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Transform:
    """Maps stroke coordinates to pixel coordinates: ``pixel = scale * p + offset``."""

    scale: float
    offset_x: float
    offset_y: float

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts * self.scale + np.array([self.offset_x, self.offset_y])

    def invert(self, pixels) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        return (px - np.array([self.offset_x, self.offset_y])) / self.scale

    def dumps(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in ("scale", "offset_x", "offset_y"))

    @classmethod
    def loads(cls, text: str) -> "Transform":
        kv = _parse_key_values(text)
        try:
            return cls(float(kv["scale"]), float(kv["offset_x"]), float(kv["offset_y"]))
        except KeyError as exc:
            raise ValueError(f"transform sidecar missing key {exc}") from None


def _parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def fit_transform(seq: StrokeSequence, height: int = DEFAULT_HEIGHT) -> tuple[Transform, int]:
    """Uniform scale fitting the y-extent inside the margins, centered vertically.

    A sequence with no vertical extent is scaled so its x-extent fits the
    same span; a single point keeps scale 1. Returns the transform and
    the image width.
    """
    usable = height - 1 - 2 * MARGIN
    if usable <= 0:
        raise ValueError(f"height {height} leaves no room inside a {MARGIN}px margin")
    lo = seq.points.min(axis=0)
    hi = seq.points.max(axis=0)
    ext = hi - lo
    if ext[1] > 0:
        scale = usable / ext[1]
    elif ext[0] > 0:
        scale = usable / ext[0]
    else:
        scale = 1.0
    offset_y = (height - 1) / 2 - scale * (lo[1] + hi[1]) / 2
    offset_x = MARGIN - scale * lo[0]
    span = scale * ext[0]
    if not span < MAX_WIDTH:
        raise ValueError(f"aspect ratio too extreme: image would be about {span:.3g}px wide")
    width = int(math.ceil(span - 1e-9)) + 2 * MARGIN + 1
    return Transform(float(scale), float(offset_x), float(offset_y)), width


def _segment_coverage(canvas, a, b, half_width):
    """Max-composite linear coverage of one thick segment into ``canvas``."""
    h, w = canvas.shape
    reach = half_width + 1.0
    x0 = max(int(math.floor(min(a[0], b[0]) - reach)), 0)
    x1 = min(int(math.ceil(max(a[0], b[0]) + reach)), w - 1)
    y0 = max(int(math.floor(min(a[1], b[1]) - reach)), 0)
    y1 = min(int(math.ceil(max(a[1], b[1]) + reach)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    d = b - a
    dd = float(d @ d)
    if dd > 0:
        t = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / dd, 0.0, 1.0)
    else:
        t = 0.0
    dist = np.hypot(xs - (a[0] + t * d[0]), ys - (a[1] + t * d[1]))
    cov = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    region = canvas[y0:y1 + 1, x0:x1 + 1]
    np.maximum(region, cov, out=region)


def draw_strokes(canvas: np.ndarray, pixel_strokes, stroke_width: float) -> np.ndarray:
    """Accumulate ink coverage (0..1) of pixel-space polylines into ``canvas``."""
    half = stroke_width / 2.0
    for stroke in pixel_strokes:
        stroke = np.asarray(stroke, dtype=np.float64)
        if len(stroke) == 1:
            _segment_coverage(canvas, stroke[0], stroke[0], half)
        for a, b in zip(stroke[:-1], stroke[1:]):
            _segment_coverage(canvas, a, b, half)
    return canvas


def rasterize(
    seq: StrokeSequence,
    height: int = DEFAULT_HEIGHT,
    stroke_width: float = DEFAULT_STROKE_WIDTH,
) -> tuple[RasterImage, Transform]:
    """Draw ``seq`` as anti-aliased polylines on a white canvas ``height`` pixels tall."""
    if stroke_width <= 0:
        raise ValueError("stroke_width must be positive")
    transform, width = fit_transform(seq, height)
    coverage = np.zeros((height, width))
    draw_strokes(coverage, [transform.apply(s) for s in seq.strokes], stroke_width)
    return RasterImage(255.0 * (1.0 - coverage)), transform


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradeConfig:
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    contrast_gamma: float = 1.0
    warp_amplitude: float = 0.0
    warp_cell: int = 8
    stroke_width_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_sigma", "blur_sigma", "warp_amplitude", "stroke_width_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be > 0")
        if self.warp_cell <= 0:
            raise ValueError("warp_cell must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @classmethod
    def from_text(cls, text: str) -> "DegradeConfig":
        """Parse flat ``key=value`` lines; unknown keys are rejected."""
        kv = _parse_key_values(text)
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ValueError(f"unknown degrade keys: {', '.join(sorted(unknown))}")
        args = {}
        for k, v in kv.items():
            try:
                args[k] = int(v) if k in ("warp_cell", "seed") else float(v)
            except ValueError:
                raise ValueError(f"degrade key {k}: not a number: {v!r}") from None
        return cls(**args)


def warp_field(shape, amplitude: float, cell: int, rng) -> np.ndarray:
    """Smooth displacement field ``(2, h, w)`` with every vector's norm <= amplitude.

    Gaussian offsets drawn on a coarse grid are clipped to the amplitude
    and bilinearly interpolated; interpolation is a convex combination so
    the bound carries over to every pixel.
    """
    h, w = shape
    gh = h // cell + 2
    gw = w // cell + 2
    coarse = rng.normal(0.0, amplitude / 2.0, size=(2, gh, gw))
    norm = np.hypot(coarse[0], coarse[1])
    coarse *= np.minimum(1.0, amplitude / np.maximum(norm, 1e-300))
    rows = np.arange(h) / cell
    cols = np.arange(w) / cell
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(c, [rr, cc], order=1, mode="nearest") for c in coarse])


def _jitter_width(px: np.ndarray, amount: float) -> np.ndarray:
    # positive amount thickens ink (grey erosion of the white background), negative thins it
    whole = int(math.floor(abs(amount)))
    frac = abs(amount) - whole
    op = ndimage.grey_erosion if amount > 0 else ndimage.grey_dilation
    out = px
    for _ in range(whole):
        out = op(out, size=(3, 3), mode="nearest")
    if frac > 0:
        out = (1 - frac) * out + frac * op(out, size=(3, 3), mode="nearest")
    return out


def degrade(img: RasterImage, cfg: DegradeConfig) -> RasterImage:
    """Width jitter, smooth warp, Gaussian blur, gamma contrast, then additive noise.

    Each stage is skipped when its parameter is neutral, so the neutral
    config is the identity. Deterministic in ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    px = img.pixels.copy()
    if cfg.stroke_width_jitter > 0:
        px = _jitter_width(px, rng.uniform(-cfg.stroke_width_jitter, cfg.stroke_width_jitter))
    if cfg.warp_amplitude > 0:
        field = warp_field(px.shape, cfg.warp_amplitude, cfg.warp_cell, rng)
        rr, cc = np.meshgrid(np.arange(px.shape[0]), np.arange(px.shape[1]), indexing="ij")
        px = ndimage.map_coordinates(px, [rr + field[1], cc + field[0]], order=1, mode="constant", cval=255.0)
    if cfg.blur_sigma > 0:
        px = ndimage.gaussian_filter(px, cfg.blur_sigma, mode="nearest")
    if cfg.contrast_gamma != 1.0:
        px = 255.0 * np.power(np.clip(px, 0, 255) / 255.0, cfg.contrast_gamma)
    if cfg.noise_sigma > 0:
        px = px + rng.normal(0.0, cfg.noise_sigma, size=px.shape)
    return RasterImage(np.clip(px, 0.0, 255.0))


# ---------------------------------------------------------------------------
# PGM (binary P5) files
# ---------------------------------------------------------------------------

def write_pgm(path, img: RasterImage) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.to_uint8().tobytes())


def read_pgm(path) -> RasterImage:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    body = data[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return RasterImage(np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64))

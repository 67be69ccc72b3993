"""Reading and writing stroke data, plus a seeded synthetic shape generator.

Record files hold one record per line::

    id<TAB>transcript<TAB>x,y[,S][,E];x,y;...|x,y;...

``|`` separates strokes, ``;`` separates points, and the optional ``S``/``E``
markers carry the sos/eos flags. An empty transcript field means "none".
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .strokes import StrokeSequence


class StrokeFormatError(ValueError):
    """Base class for malformed stroke input."""


class MalformedXMLError(StrokeFormatError):
    pass


class EmptyStrokeSetError(StrokeFormatError):
    pass


class NonNumericAttributeError(StrokeFormatError):
    pass


class RecordFormatError(StrokeFormatError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    id: str
    seq: StrokeSequence
    transcript: Optional[str] = None

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return self.id == other.id and self.transcript == other.transcript and self.seq == other.seq


# ---------------------------------------------------------------------------
# IAM-On style XML
# ---------------------------------------------------------------------------

def parse_stroke_xml(data: bytes | str, record_id: str | None = None) -> DatasetRecord:
    """Parse a ``StrokeSet/Stroke/Point`` document.

    Point ``time`` attributes are ignored; only the path geometry is kept.
    The record id comes from ``record_id``, else a root-level ``id`` or
    ``Form@id`` attribute, else ``"xml"``.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXMLError(f"malformed XML: {exc}") from None
    stroke_elems = list(root.iter("Stroke"))
    if not stroke_elems:
        raise EmptyStrokeSetError("empty stroke set")
    strokes = []
    for k, elem in enumerate(stroke_elems):
        pts = []
        for p in elem.iter("Point"):
            try:
                pts.append((float(p.attrib["x"]), float(p.attrib["y"])))
            except KeyError as exc:
                raise NonNumericAttributeError(f"stroke {k}: point missing attribute {exc}") from None
            except ValueError:
                raise NonNumericAttributeError(
                    f"stroke {k}: non-numeric coordinate x={p.attrib.get('x')!r} y={p.attrib.get('y')!r}"
                ) from None
            if not (math.isfinite(pts[-1][0]) and math.isfinite(pts[-1][1])):
                raise NonNumericAttributeError(f"stroke {k}: non-finite coordinate")
        if pts:
            strokes.append(pts)
    if not strokes:
        raise EmptyStrokeSetError("empty stroke set")
    if record_id is None:
        form = root if root.tag == "Form" else root.find(".//Form")
        record_id = root.attrib.get("id") or (form.attrib.get("id") if form is not None else None) or "xml"
    return DatasetRecord(record_id, StrokeSequence.from_strokes(strokes))


# ---------------------------------------------------------------------------
# line-delimited records
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    s = f"{v:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def format_strokes(seq: StrokeSequence) -> str:
    parts = []
    for a, b in seq.stroke_bounds():
        pts = []
        for k in range(a, b):
            tok = f"{_fmt(seq.points[k, 0])},{_fmt(seq.points[k, 1])}"
            if seq.sos[k]:
                tok += ",S"
            if seq.eos[k]:
                tok += ",E"
            pts.append(tok)
        parts.append(";".join(pts))
    return "|".join(parts)


def parse_strokes(text: str) -> StrokeSequence:
    points, sos, eos = [], [], []
    for si, stroke in enumerate(text.split("|")):
        if not stroke:
            raise ValueError(f"stroke {si} is empty")
        for pi, tok in enumerate(stroke.split(";")):
            fields = tok.split(",")
            if len(fields) < 2:
                raise ValueError(f"stroke {si} point {pi}: expected x,y in {tok!r}")
            flags = fields[2:]
            if any(f not in ("S", "E") for f in flags):
                raise ValueError(f"stroke {si} point {pi}: unknown flag in {tok!r}")
            try:
                x, y = float(fields[0]), float(fields[1])
            except ValueError:
                raise ValueError(f"stroke {si} point {pi}: non-numeric coordinate in {tok!r}") from None
            points.append((x, y))
            # stroke heads carry S by construction; an explicit S elsewhere is an error below
            sos.append(pi == 0)
            if ("S" in flags) != (pi == 0):
                raise ValueError(f"stroke {si} point {pi}: S flag must mark exactly the stroke head")
            eos.append("E" in flags)
    return StrokeSequence(np.array(points), np.array(sos), np.array(eos))


def format_record(rec: DatasetRecord) -> str:
    transcript = rec.transcript or ""
    for field, value in (("id", rec.id), ("transcript", transcript)):
        if any(c in value for c in "\t\n\r"):
            raise ValueError(f"record {rec.id!r}: {field} may not contain tabs or newlines")
    if not rec.id:
        raise ValueError("record id must be non-empty")
    return f"{rec.id}\t{transcript}\t{format_strokes(rec.seq)}"


def write_records(path, records: Iterable[DatasetRecord]) -> None:
    lines = []
    seen = set()
    for rec in records:
        if rec.id in seen:
            raise ValueError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
        lines.append(format_record(rec) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_records(path) -> list[DatasetRecord]:
    out = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise RecordFormatError(path, lineno, f"expected 3 tab-separated fields, found {len(cols)}")
            rid, transcript, strokes = cols
            if not rid:
                raise RecordFormatError(path, lineno, "empty record id")
            if rid in seen:
                raise RecordFormatError(path, lineno, f"duplicate record id {rid!r}")
            try:
                seq = parse_strokes(strokes)
            except ValueError as exc:
                raise RecordFormatError(path, lineno, str(exc)) from None
            seen.add(rid)
            out.append(DatasetRecord(rid, seq, transcript or None))
    return out


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

class SynthKind(str, Enum):
    LINE = "line"
    ARC = "arc"
    ZIGZAG = "zigzag"
    LOOP = "loop"
    MULTI_STROKE_CROSS = "multi_stroke_cross"


@dataclass(frozen=True)
class SynthSpec:
    kind: SynthKind
    seed: int = 0
    n_points: int = 32
    jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SynthKind(self.kind))
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def _polyline(vertices, n: int) -> np.ndarray:
    """``n`` points spaced uniformly along the polyline through ``vertices``."""
    v = np.asarray(vertices, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(v, axis=0).T))])
    t = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(t, cum, v[:, 0]), np.interp(t, cum, v[:, 1])])


def synth_generate(spec: SynthSpec) -> StrokeSequence:
    """Deterministic synthetic glyph, roughly unit height, y pointing down.

    Shape parameters (angle, size, phase) are drawn from ``spec.seed``;
    ``jitter`` adds Gaussian noise with that standard deviation.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    kind = spec.kind
    if kind is SynthKind.LINE:
        angle = rng.uniform(-np.pi / 3, np.pi / 3)
        length = rng.uniform(0.6, 1.2)
        d = np.array([np.cos(angle), np.sin(angle)]) * length
        t = np.linspace(0.0, 1.0, n)[:, None]
        strokes = [t * d]
    elif kind is SynthKind.ARC:
        r = rng.uniform(0.4, 0.6)
        phase = rng.uniform(-np.pi / 4, np.pi / 4)
        th = phase + np.linspace(np.pi, 0.0, n)
        strokes = [np.column_stack([r * np.cos(th), -r * np.sin(th)])]
    elif kind is SynthKind.ZIGZAG:
        w = rng.uniform(0.25, 0.5, size=3)
        x = np.concatenate([[0.0], np.cumsum(w)])
        y = np.array([1.0, 0.0, 1.0, 0.0]) * rng.uniform(0.7, 1.0)
        y[1:] += rng.uniform(-0.1, 0.1, size=3)
        strokes = [_polyline(np.column_stack([x, y]), n)]
    elif kind is SynthKind.LOOP:
        # a cursive "l"-style loop: the pen path crosses itself near the baseline
        a = rng.uniform(0.25, 0.4)
        b = rng.uniform(0.4, 0.55)
        th = np.linspace(-0.6 * np.pi, 1.6 * np.pi, n)
        x = a * np.sin(th) + 0.12 * th
        y = b * np.cos(th) * -1.0
        strokes = [np.column_stack([x, y])]
    else:
        n_stem = max(1, n // 2)
        n_bar = max(1, n - n_stem)
        h = rng.uniform(0.9, 1.1)
        bar_y = rng.uniform(0.25, 0.4) * h
        half = rng.uniform(0.25, 0.4)
        stem_x = rng.uniform(-0.05, 0.05)
        stem = np.column_stack([np.full(n_stem, stem_x), np.linspace(0.0, h, n_stem)])
        bar = np.column_stack([np.linspace(-half, half, n_bar), np.full(n_bar, bar_y)])
        strokes = [stem, bar]
    if spec.jitter > 0:
        strokes = [s + rng.normal(0.0, spec.jitter, size=s.shape) for s in strokes]
    return StrokeSequence.from_strokes(strokes)


def synth_line(seed: int, n_glyphs: int = 3, points_per_glyph: int = 24, jitter: float = 0.0,
               kinds: Iterable[SynthKind] | None = None, gap: float = 0.35) -> StrokeSequence:
    """Several synthetic glyphs written left to right, like a short line of text."""
    rng = np.random.default_rng(seed)
    pool = list(kinds) if kinds is not None else list(SynthKind)
    strokes = []
    cursor = 0.0
    for g in range(n_glyphs):
        kind = pool[int(rng.integers(len(pool)))]
        sub = synth_generate(SynthSpec(kind, int(rng.integers(2**63)), points_per_glyph, jitter))
        lo = sub.points.min(axis=0)
        hi = sub.points.max(axis=0)
        shift = np.array([cursor - lo[0], -lo[1]])
        strokes.extend(s + shift for s in sub.strokes)
        cursor += (hi[0] - lo[0]) + gap
    return StrokeSequence.from_strokes(strokes)

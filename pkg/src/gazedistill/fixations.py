"""Fixation CSV ingestion.

Wire format: UTF-8, LF newlines, header exactly
``image_id,x_px,y_px,onset_ms,duration_ms`` with an optional trailing
``reader`` column. One fixation per row; a file groups into one sequence
per (image_id, reader) pair, ordered by first appearance.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ParseError, ValidationError

HEADER = ("image_id", "x_px", "y_px", "onset_ms", "duration_ms")
READER_HEADER = HEADER + ("reader",)


@dataclass(frozen=True)
class FixationPoint:
    x_px: float
    y_px: float
    onset_ms: float
    duration_ms: float


@dataclass(frozen=True)
class GazeSequence:
    """All fixations of one reader on one image, ordered by onset
    (ties keep file order)."""

    image_id: str
    points: tuple[FixationPoint, ...]
    reader: str = ""

    @property
    def total_duration_ms(self) -> float:
        if not self.points:
            return 0.0
        return max(p.onset_ms + p.duration_ms for p in self.points)


@dataclass
class ValidationReport:
    n_points: int = 0
    n_clamped: int = 0
    clamped_lines: list[int] = field(default_factory=list)


def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def parse_fixation_csv(source) -> list[GazeSequence]:
    """Parse a fixation CSV from a path or an open text stream.

    Raises ParseError with a 1-based line number for malformed rows and
    ValidationError for negative durations or onsets.
    """
    stream, owned = _open_text(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty fixation CSV: missing header") from None
        header = tuple(header)
        if header == HEADER:
            has_reader = False
        elif header == READER_HEADER:
            has_reader = True
        else:
            raise ParseError(
                f"bad fixation CSV header {header!r}, expected {','.join(HEADER)}"
                " with an optional trailing reader column"
            )
        expected_len = len(header)
        groups: dict[tuple[str, str], list[tuple[float, int, FixationPoint]]] = {}
        order: list[tuple[str, str]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue  # ignore blank lines
            if len(row) != expected_len:
                raise ParseError(
                    f"line {line_no}: expected {expected_len} fields, got {len(row)}"
                )
            image_id = row[0]
            who = row[5] if has_reader else ""
            try:
                x, y, onset, dur = (float(v) for v in row[1:5])
            except ValueError:
                raise ParseError(f"line {line_no}: non-numeric field in {row!r}") from None
            if dur < 0:
                raise ValidationError(f"line {line_no}: negative duration {dur}")
            if onset < 0:
                raise ValidationError(f"line {line_no}: negative onset {onset}")
            key = (image_id, who)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append((onset, line_no, FixationPoint(x, y, onset, dur)))
        out = []
        for key in order:
            rows = sorted(groups[key], key=lambda t: (t[0], t[1]))
            out.append(
                GazeSequence(image_id=key[0], reader=key[1], points=tuple(p for _, _, p in rows))
            )
        return out
    finally:
        if owned:
            stream.close()


def serialize_fixation_csv(sequences) -> str:
    """Inverse of parse_fixation_csv (modulo float formatting)."""
    with_reader = any(s.reader for s in sequences)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(READER_HEADER if with_reader else HEADER)
    for seq in sequences:
        for p in seq.points:
            row = [seq.image_id, repr(p.x_px), repr(p.y_px), repr(p.onset_ms), repr(p.duration_ms)]
            if with_reader:
                row.append(seq.reader)
            writer.writerow(row)
    return buf.getvalue()


def validate_sequence(seq: GazeSequence, width: int, height: int):
    """Clamp out-of-bounds fixations to the image boundary.

    Returns (clamped sequence, report). Coordinates are valid in
    [0, width-1] x [0, height-1].
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"image dims must be positive, got {width}x{height}")
    report = ValidationReport(n_points=len(seq.points))
    fixed = []
    for i, p in enumerate(seq.points):
        x = min(max(p.x_px, 0.0), float(width - 1))
        y = min(max(p.y_px, 0.0), float(height - 1))
        if x != p.x_px or y != p.y_px:
            report.n_clamped += 1
            report.clamped_lines.append(i)
            p = replace(p, x_px=x, y_px=y)
        fixed.append(p)
    return replace(seq, points=tuple(fixed)), report


def first_sequence_per_image(sequences) -> dict[str, GazeSequence]:
    """Downstream default when multiple readers exist: first one wins."""
    out: dict[str, GazeSequence] = {}
    for seq in sequences:
        out.setdefault(seq.image_id, seq)
    return out

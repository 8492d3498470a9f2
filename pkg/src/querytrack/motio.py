"""MOTChallenge text-format reading and writing.

One record per line, nine comma-separated fields:
frame, id, bb_left, bb_top, bb_width, bb_height, conf, class, visibility

The parser is tolerant about float formatting; the serializer is strict and
canonical (shortest round-trip float repr, no padding, no trailing spaces),
so serialize(parse(f)) is byte-identical for canonically formatted files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class MotParseError(ValueError):
    """Malformed MOT line; message carries line number and offending text."""


@dataclass(frozen=True)
class MotLine:
    frame: int
    track_id: int
    left: float
    top: float
    width: float
    height: float
    conf: float
    cls: int
    visibility: float

    def validate(self, gt: bool = False) -> None:
        if self.frame < 1:
            raise MotParseError(f"frame must be >= 1, got {self.frame}")
        if gt and (self.width <= 0 or self.height <= 0):
            raise MotParseError(
                f"gt box must have positive size, got {self.width}x{self.height}")
        if not (0.0 <= self.visibility <= 1.0):
            raise MotParseError(f"visibility out of [0,1]: {self.visibility}")


@dataclass
class MotFile:
    """Parsed MOT records in input order."""

    lines: list[MotLine]

    def by_frame(self) -> dict[int, list[MotLine]]:
        out: dict[int, list[MotLine]] = {}
        for ln in self.lines:
            out.setdefault(ln.frame, []).append(ln)
        return out

    @property
    def n_frames(self) -> int:
        return max((ln.frame for ln in self.lines), default=0)


def _parse_int(text: str, line_no: int, raw: str, field: str) -> int:
    try:
        return int(float(text)) if "." in text else int(text)
    except ValueError:
        raise MotParseError(
            f"line {line_no}: non-numeric {field} field {text!r} in {raw!r}") from None


def _parse_float(text: str, line_no: int, raw: str, field: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise MotParseError(
            f"line {line_no}: non-numeric {field} field {text!r} in {raw!r}") from None


def parse_mot_text(text: str, gt: bool = False) -> MotFile:
    lines: list[MotLine] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        fields = stripped.split(",")
        if len(fields) != 9:
            raise MotParseError(
                f"line {line_no}: expected 9 fields, got {len(fields)} in {raw!r}")
        ln = MotLine(
            frame=_parse_int(fields[0], line_no, raw, "frame"),
            track_id=_parse_int(fields[1], line_no, raw, "id"),
            left=_parse_float(fields[2], line_no, raw, "bb_left"),
            top=_parse_float(fields[3], line_no, raw, "bb_top"),
            width=_parse_float(fields[4], line_no, raw, "bb_width"),
            height=_parse_float(fields[5], line_no, raw, "bb_height"),
            conf=_parse_float(fields[6], line_no, raw, "conf"),
            cls=_parse_int(fields[7], line_no, raw, "class"),
            visibility=_parse_float(fields[8], line_no, raw, "visibility"),
        )
        try:
            ln.validate(gt=gt)
        except MotParseError as e:
            raise MotParseError(f"line {line_no}: {e}") from None
        lines.append(ln)
    return MotFile(lines=lines)


def parse_mot(path: str | Path, gt: bool = False) -> MotFile:
    return parse_mot_text(Path(path).read_text(), gt=gt)


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest string that round-trips, and
    # always carries a decimal point, satisfying the one-decimal-minimum rule.
    return repr(float(x))


def serialize_mot(mot: MotFile) -> str:
    rows = []
    for ln in mot.lines:
        rows.append(
            f"{ln.frame},{ln.track_id},{_fmt(ln.left)},{_fmt(ln.top)},"
            f"{_fmt(ln.width)},{_fmt(ln.height)},{_fmt(ln.conf)},{ln.cls},"
            f"{_fmt(ln.visibility)}")
    return "\n".join(rows) + ("\n" if rows else "")


def write_mot(mot: MotFile, path: str | Path) -> None:
    Path(path).write_text(serialize_mot(mot))

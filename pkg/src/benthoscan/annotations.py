"""Annotation records for benthic survey video and operations on them.

An annotation CSV holds two kinds of rows: substrate intervals (Begin and End,
no Count) and counted bottom-crossing sightings of a species (Begin and Count,
no End). Species outside the ten of interest parse into an "other" bucket that
is excluded from detection classes and statistics.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError

DEFAULT_FPS = 30.0


class SubstrateClass(enum.Enum):
    BOULDER = "Boulder"
    COBBLE = "Cobble"
    MUD = "Mud"
    ROCK = "Rock"


class SpeciesClass(enum.Enum):
    BS = "BS"  # basket star
    FPU = "FPU"  # fragile pink urchin
    GG = "GG"  # gray gorgonian
    LLS = "LLS"  # long-legged sunflower star
    RSG = "RSG"  # red swiftia gorgonian
    SL = "SL"  # squat lobster
    LS = "LS"  # laced sponge
    WSSC = "WSSC"  # white slipper sea cucumber
    WSPSC = "WSpSC"  # white spine sea cucumber
    YG = "YG"  # yellow gorgonian


SUBSTRATE_ORDER = tuple(SubstrateClass)
SPECIES_ORDER = tuple(SpeciesClass)

_SUBSTRATE_BY_NAME = {s.value: s for s in SubstrateClass}
_SPECIES_BY_NAME = {s.value: s for s in SpeciesClass}


class AnnotationError(DataError):
    """Malformed or inconsistent annotation data."""


def frame_index(t: float, fps: float = DEFAULT_FPS) -> int:
    """Frame index for a timestamp in seconds (half-up rounding)."""
    return int(math.floor(t * fps + 0.5))


_TIMESTAMP_RE = re.compile(r"^(\d+):([0-5]?\d):([0-5]?\d)$")


def parse_timestamp(text: str) -> float:
    """Parse H:MM:SS into seconds."""
    m = _TIMESTAMP_RE.match(text.strip())
    if m is None:
        raise AnnotationError(f"bad timestamp {text!r}, expected H:MM:SS")
    h, mm, ss = (int(g) for g in m.groups())
    return float(h * 3600 + mm * 60 + ss)


def format_timestamp(seconds: float) -> str:
    if seconds < 0 or float(seconds) != int(seconds):
        raise AnnotationError(f"cannot format {seconds!r} as H:MM:SS (whole seconds only)")
    s = int(seconds)
    return f"{s // 3600}:{s // 60 % 60:02d}:{s % 60:02d}"


@dataclass(frozen=True)
class SubstrateInterval:
    """A span of video time during which one substrate is visible (endpoints inclusive)."""

    substrate: SubstrateClass
    begin: float  # seconds
    end: float  # seconds

    def __post_init__(self) -> None:
        if not 0 <= self.begin <= self.end:
            raise AnnotationError(
                f"interval for {self.substrate.value} needs 0 <= begin <= end, "
                f"got [{self.begin}, {self.end}]"
            )


@dataclass(frozen=True)
class CabofLabel:
    """Count of individuals of one species crossing the bottom frame edge at time `at`."""

    species: SpeciesClass | None  # None = species outside the interest set
    at: float  # seconds
    count: int = 1
    other_name: str | None = None  # original name for out-of-interest species

    def __post_init__(self) -> None:
        if self.at < 0:
            raise AnnotationError(f"negative timestamp {self.at}")
        if self.count < 1:
            raise AnnotationError(f"count must be >= 1, got {self.count}")
        if (self.species is None) == (self.other_name is None):
            raise AnnotationError("exactly one of species and other_name must be set")


@dataclass(frozen=True)
class KeyframeBox:
    """A hand-drawn box for one target individual on one frame."""

    video: str
    frame: int
    target: int
    species: SpeciesClass
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.frame < 0:
            raise AnnotationError(f"negative frame {self.frame}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise AnnotationError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        if self.x1 < 0 or self.y1 < 0:
            raise AnnotationError("box extends past the frame origin")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class GtBox:
    species: SpeciesClass
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise AnnotationError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class FrameGroundTruth:
    """Every annotated box on one frame.

    `fully_annotated_bottom_half` marks frames where every individual in the
    bottom half of the frame carries a box; only such frames are eligible for
    detection evaluation.
    """

    video: str
    frame: int
    boxes: tuple[GtBox, ...]
    fully_annotated_bottom_half: bool


# --- CSV parsing -------------------------------------------------------------

_HEADER = ("annotation", "begin", "end", "count")


def _rows_from(source: str | Path | IO[str]) -> list[list[str]]:
    import csv

    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return list(csv.reader(fh))
    return list(csv.reader(source))


def parse_annotation_csv(
    source: str | Path | IO[str],
) -> tuple[list[SubstrateInterval], list[CabofLabel]]:
    """Parse an annotation CSV into (substrate intervals, CABOF labels).

    Expected header: Annotation, Begin, End, Count (case-insensitive). Substrate
    rows carry Begin+End; species rows carry Begin+Count. Malformed rows raise
    AnnotationError with their row number. Same-substrate intervals within the
    file must not overlap (endpoints inclusive).
    """
    rows = _rows_from(source)
    if not rows or all(not any(c.strip() for c in r) for r in rows):
        return [], []

    header = tuple(c.strip().lower() for c in rows[0])
    if header[: len(_HEADER)] != _HEADER:
        raise AnnotationError(f"row 1: expected header {','.join(_HEADER)}")

    intervals: list[SubstrateInterval] = []
    interval_rows: dict[int, int] = {}  # index into intervals -> csv row number
    cabofs: list[CabofLabel] = []
    for n, raw in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in raw):
            continue
        cells = [c.strip() for c in raw] + [""] * (4 - len(raw))
        name, begin_s, end_s, count_s = cells[:4]
        if not name:
            raise AnnotationError(f"row {n}: missing annotation name")
        if not begin_s:
            raise AnnotationError(f"row {n}: missing Begin")
        try:
            begin = parse_timestamp(begin_s)
            if end_s and count_s:
                raise AnnotationError("row carries both End and Count")
            substrate = _SUBSTRATE_BY_NAME.get(name)
            if end_s:
                if substrate is None:
                    raise AnnotationError(f"unknown annotation name {name!r}")
                end = parse_timestamp(end_s)
                if end < begin:
                    raise AnnotationError(f"End {end_s} precedes Begin {begin_s}")
                interval_rows[len(intervals)] = n
                intervals.append(SubstrateInterval(substrate, begin, end))
            elif count_s:
                if substrate is not None:
                    raise AnnotationError(f"substrate {name!r} cannot carry a Count")
                try:
                    count = int(count_s)
                except ValueError:
                    raise AnnotationError(f"bad Count {count_s!r}") from None
                species = _SPECIES_BY_NAME.get(name)
                other = None if species is not None else name
                cabofs.append(CabofLabel(species, begin, count, other_name=other))
            else:
                raise AnnotationError(
                    f"row for {name!r} needs End (substrate) or Count (species)"
                )
        except AnnotationError as err:
            msg = str(err)
            if not re.match(r"row \d+:", msg):
                msg = f"row {n}: {msg}"
            raise AnnotationError(msg) from None

    by_substrate: dict[SubstrateClass, list[int]] = {}
    for i, iv in enumerate(intervals):
        by_substrate.setdefault(iv.substrate, []).append(i)
    for sub, idxs in by_substrate.items():
        idxs.sort(key=lambda i: intervals[i].begin)
        for a, b in zip(idxs, idxs[1:]):
            if intervals[b].begin <= intervals[a].end:
                raise AnnotationError(
                    f"row {interval_rows[b]}: {sub.value} interval overlaps the one "
                    f"from row {interval_rows[a]}"
                )
    return intervals, cabofs


def serialize_annotation_csv(
    intervals: Sequence[SubstrateInterval], cabofs: Sequence[CabofLabel]
) -> str:
    """Inverse of parse_annotation_csv; timestamps must be whole seconds."""
    lines = ["Annotation,Begin,End,Count"]
    for iv in intervals:
        lines.append(
            f"{iv.substrate.value},{format_timestamp(iv.begin)},{format_timestamp(iv.end)},"
        )
    for c in cabofs:
        name = c.species.value if c.species is not None else c.other_name
        lines.append(f"{name},{format_timestamp(c.at)},,{c.count}")
    return "\n".join(lines) + "\n"


# --- timeline queries --------------------------------------------------------


def frame_substrate_labels(
    intervals: Iterable[SubstrateInterval], t: float
) -> frozenset[SubstrateClass]:
    """Substrates visible at time t (interval endpoints inclusive)."""
    return frozenset(iv.substrate for iv in intervals if iv.begin <= t <= iv.end)


def substrate_multihot(labels: Iterable[SubstrateClass]) -> np.ndarray:
    """Multi-hot vector over substrates in stable enum order."""
    present = set(labels)
    return np.array([1.0 if s in present else 0.0 for s in SUBSTRATE_ORDER], dtype=np.float32)


def interpolate_keyframes(a: KeyframeBox, b: KeyframeBox, frame: int) -> KeyframeBox:
    """Linearly interpolated box between two keyframes of the same target."""
    if (a.video, a.target) != (b.video, b.target) or a.species is not b.species:
        raise AnnotationError("keyframes belong to different targets")
    if a.frame > b.frame:
        a, b = b, a
    if not a.frame <= frame <= b.frame:
        raise AnnotationError(f"frame {frame} outside [{a.frame}, {b.frame}]")
    if a.frame == b.frame:
        return a
    f = (frame - a.frame) / (b.frame - a.frame)
    lerp = lambda p, q: p + f * (q - p)
    return KeyframeBox(
        a.video,
        frame,
        a.target,
        a.species,
        lerp(a.x1, b.x1),
        lerp(a.y1, b.y1),
        lerp(a.x2, b.x2),
        lerp(a.y2, b.y2),
    )


def boxes_at_frame(keyframes: Iterable[KeyframeBox], video: str, frame: int) -> list[KeyframeBox]:
    """Materialize every target's box on one frame by keyframe interpolation."""
    by_target: dict[int, list[KeyframeBox]] = {}
    for kf in keyframes:
        if kf.video == video:
            by_target.setdefault(kf.target, []).append(kf)
    out = []
    for kfs in by_target.values():
        kfs.sort(key=lambda k: k.frame)
        if not kfs[0].frame <= frame <= kfs[-1].frame:
            continue
        for a, b in zip(kfs, kfs[1:]):
            if a.frame <= frame <= b.frame:
                out.append(interpolate_keyframes(a, b, frame))
                break
        else:
            out.append(kfs[0])
    out.sort(key=lambda k: k.target)
    return out


# --- corpus statistics -------------------------------------------------------


def cooccurrence_counts(
    scopes: Iterable[tuple[Sequence[SubstrateInterval], Sequence[CabofLabel]]],
) -> tuple[dict[SubstrateClass, dict[SpeciesClass, int]], dict[SpeciesClass, int]]:
    """Individual-weighted tallies of (substrate visible at CABOF time, species).

    Each scope pairs one video's intervals with its CABOF labels. Returns
    (numerators[substrate][species], denominators[species]).
    """
    num = {s: {sp: 0 for sp in SpeciesClass} for s in SubstrateClass}
    den = {sp: 0 for sp in SpeciesClass}
    for intervals, cabofs in scopes:
        for label in cabofs:
            if label.species is None:
                continue
            den[label.species] += label.count
            for sub in frame_substrate_labels(intervals, label.at):
                num[sub][label.species] += label.count
    return num, den


def cooccurrence_table(
    intervals: Sequence[SubstrateInterval],
    cabofs: Sequence[CabofLabel],
    *,
    extra_scopes: Iterable[tuple[Sequence[SubstrateInterval], Sequence[CabofLabel]]] = (),
) -> dict[SubstrateClass, dict[SpeciesClass, float]]:
    """Fraction of each species' individuals recorded while each substrate was visible.

    Species with no recorded individuals are omitted. Exact rational arithmetic
    internally; entries are returned as floats.
    """
    num, den = cooccurrence_counts([(intervals, cabofs), *extra_scopes])
    table: dict[SubstrateClass, dict[SpeciesClass, float]] = {}
    for sub in SubstrateClass:
        table[sub] = {
            sp: float(Fraction(num[sub][sp], den[sp])) for sp in SpeciesClass if den[sp] > 0
        }
    return table


def cabof_totals(cabofs: Iterable[CabofLabel]) -> dict[SpeciesClass, int]:
    """Total individuals per interest species."""
    totals = {sp: 0 for sp in SpeciesClass}
    for c in cabofs:
        if c.species is not None:
            totals[c.species] += c.count
    return totals


# --- JSON-lines formats ------------------------------------------------------


def write_keyframes(path: str | Path, keyframes: Iterable[KeyframeBox]) -> None:
    with open(path, "w") as fh:
        for kf in keyframes:
            fh.write(
                json.dumps(
                    {
                        "video": kf.video,
                        "frame": kf.frame,
                        "target": kf.target,
                        "species": kf.species.value,
                        "x1": kf.x1,
                        "y1": kf.y1,
                        "x2": kf.x2,
                        "y2": kf.y2,
                    }
                )
                + "\n"
            )


def read_keyframes(path: str | Path) -> list[KeyframeBox]:
    out = []
    for n, line in enumerate(_lines(path), start=1):
        try:
            d = json.loads(line)
            out.append(
                KeyframeBox(
                    d["video"],
                    d["frame"],
                    d["target"],
                    SpeciesClass(d["species"]),
                    d["x1"],
                    d["y1"],
                    d["x2"],
                    d["y2"],
                )
            )
        except (KeyError, ValueError) as err:
            raise AnnotationError(f"{path} line {n}: {err}") from None
    return out


def write_frame_ground_truth(path: str | Path, records: Iterable[FrameGroundTruth]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "video": r.video,
                        "frame": r.frame,
                        "boxes": [
                            {"species": b.species.value, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
                            for b in r.boxes
                        ],
                        "fully_annotated_bottom_half": r.fully_annotated_bottom_half,
                    }
                )
                + "\n"
            )


def read_frame_ground_truth(path: str | Path) -> list[FrameGroundTruth]:
    out = []
    for n, line in enumerate(_lines(path), start=1):
        try:
            d = json.loads(line)
            boxes = tuple(
                GtBox(SpeciesClass(b["species"]), b["x1"], b["y1"], b["x2"], b["y2"])
                for b in d["boxes"]
            )
            out.append(
                FrameGroundTruth(d["video"], d["frame"], boxes, d["fully_annotated_bottom_half"])
            )
        except (KeyError, ValueError) as err:
            raise AnnotationError(f"{path} line {n}: {err}") from None
    return out


def _lines(path: str | Path) -> Iterator[str]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield line

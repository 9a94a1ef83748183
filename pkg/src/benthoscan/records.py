"""Detection records shared by the detector, tracker, and evaluator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .annotations import AnnotationError, SpeciesClass


@dataclass(frozen=True)
class Detection:
    video: str
    frame: int
    species: SpeciesClass
    x1: float
    y1: float
    x2: float
    y2: float
    score: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(
                json.dumps(
                    {
                        "video": d.video,
                        "frame": d.frame,
                        "species": d.species.value,
                        "x1": d.x1,
                        "y1": d.y1,
                        "x2": d.x2,
                        "y2": d.y2,
                        "score": d.score,
                    }
                )
                + "\n"
            )


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(
                    Detection(
                        d["video"],
                        d["frame"],
                        SpeciesClass(d["species"]),
                        d["x1"],
                        d["y1"],
                        d["x2"],
                        d["y2"],
                        d["score"],
                    )
                )
            except (KeyError, ValueError) as err:
                raise AnnotationError(f"{path} line {n}: {err}") from None
    return out

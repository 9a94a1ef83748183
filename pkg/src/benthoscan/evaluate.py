"""Detection, substrate, and counting metrics.

Average precision uses all-points interpolation (area under the precision
envelope over recall); the same ranked-list routine scores both box detections
and frame-level substrate classification. Detection mAP is computed on frames
whose bottom half is fully annotated, after discarding boxes that lie entirely
above the horizontal midline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotations import FrameGroundTruth, SpeciesClass, SubstrateClass
from .records import Detection

INTERPOLATION = "all-points"


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    for b in (box_a, box_b):
        if b[2] <= b[0] or b[3] <= b[1]:
            raise ValueError(f"degenerate box {tuple(b)}")
    ix = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    iy = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


def ap_from_ranked(tp: Sequence[bool], n_positive: int) -> float | None:
    """AP of a ranked list of true/false-positive flags, all-points interpolation."""
    if n_positive == 0:
        return None
    flags = np.asarray(tp, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recall = tp_cum / n_positive
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision achievable at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def average_precision(
    detections: Sequence[Detection],
    gts: Sequence[tuple[str, int, tuple[float, float, float, float]]],
    iou_thresh: float = 0.5,
) -> float | None:
    """AP for one class. `gts` holds (video, frame, box) triples; None if empty.

    Detections are ranked by score (ties keep input order) and matched greedily
    to the highest-IoU unmatched ground truth of the same frame at or above
    `iou_thresh`.
    """
    if not gts:
        return None
    by_frame: dict[tuple[str, int], list[tuple[float, ...]]] = {}
    for video, frame, box in gts:
        by_frame.setdefault((video, frame), []).append(tuple(box))
    matched: dict[tuple[str, int], list[bool]] = {
        k: [False] * len(v) for k, v in by_frame.items()
    }

    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    flags = []
    for i in order:
        det = detections[i]
        key = (det.video, det.frame)
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(by_frame.get(key, ())):
            if matched[key][j]:
                continue
            v = iou(det.box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[key][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return ap_from_ranked(flags, sum(len(v) for v in by_frame.values()))


def classification_average_precision(
    scores: Sequence[float], labels: Sequence[bool]
) -> float | None:
    """AP of frame-level scores against binary labels (same ranked-list routine)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    flags = [bool(labels[i]) for i in order]
    n_pos = sum(bool(l) for l in labels)
    return ap_from_ranked(flags, n_pos)


@dataclass
class CountingErrors:
    """Signed per-species relative counting errors against ground-truth totals."""

    per_species: dict[SpeciesClass, float]
    excluded: tuple[SpeciesClass, ...]  # species with zero ground-truth individuals
    mean_abs: float | None


def relative_errors(
    pred_counts: Mapping[SpeciesClass, int], gt_counts: Mapping[SpeciesClass, int]
) -> CountingErrors:
    """(predicted - truth) / truth per species; species with zero truth are excluded."""
    per: dict[SpeciesClass, float] = {}
    excluded = []
    for sp in SpeciesClass:
        gt = gt_counts.get(sp, 0)
        if gt == 0:
            if sp in gt_counts or sp in pred_counts:
                excluded.append(sp)
            continue
        per[sp] = (pred_counts.get(sp, 0) - gt) / gt
    mean_abs = sum(abs(v) for v in per.values()) / len(per) if per else None
    return CountingErrors(per, tuple(excluded), mean_abs)


@dataclass(frozen=True)
class PairAccuracy:
    """Species accuracy restricted to one look-alike pair.

    accuracy is None when no pair instance was localized; n_total counts all
    ground-truth pair boxes on the given frames.
    """

    accuracy: float | None
    n_localized: int
    n_total: int


def pair_accuracy(
    detections: Sequence[Detection],
    frames: Sequence[FrameGroundTruth],
    pair: tuple[SpeciesClass, SpeciesClass],
    iou_thresh: float = 0.5,
) -> PairAccuracy:
    """How often localized members of a look-alike pair get the right species.

    For every ground-truth box of either pair species, the best-IoU detection
    of either pair species on the same frame is its candidate; boxes whose
    candidate reaches iou_thresh count as localized, and such a box is correct
    when the candidate's species matches. Detections of other species are
    ignored, and unlocalized boxes are excluded from the accuracy denominator.
    """
    if pair[0] is pair[1]:
        raise ValueError("pair must name two distinct species")
    by_frame: dict[tuple[str, int], list[Detection]] = {}
    for d in detections:
        if d.species in pair:
            by_frame.setdefault((d.video, d.frame), []).append(d)
    n_localized = n_correct = n_total = 0
    for fr in frames:
        for b in fr.boxes:
            if b.species not in pair:
                continue
            n_total += 1
            best, best_iou = None, 0.0
            for d in by_frame.get((fr.video, fr.frame), ()):
                v = iou(d.box, b.box)
                if v > best_iou:
                    best, best_iou = d, v
            if best is not None and best_iou >= iou_thresh:
                n_localized += 1
                n_correct += int(best.species is b.species)
    return PairAccuracy(
        accuracy=(n_correct / n_localized) if n_localized else None,
        n_localized=n_localized,
        n_total=n_total,
    )


def improvement_report(
    baseline_map: float, variant_maps: Mapping[str, float]
) -> dict[str, float]:
    """Percentage mAP improvement of each variant over the baseline."""
    if baseline_map <= 0:
        raise ValueError("baseline mAP must be positive")
    return {
        name: (value - baseline_map) / baseline_map * 100.0
        for name, value in variant_maps.items()
    }


@dataclass
class EvalReport:
    """Metrics for one evaluation run; unused sections stay None."""

    map50: float | None = None
    per_class_ap: dict[SpeciesClass, float | None] = field(default_factory=dict)
    n_eval_frames: int = 0
    straddling_detections: int = 0  # boxes crossing the midline, kept whole
    substrate_ap: dict[SubstrateClass, float | None] | None = None
    substrate_map: float | None = None
    counting: CountingErrors | None = None
    interpolation: str = INTERPOLATION
    config_hash: str | None = None

    def to_json(self) -> str:
        d = {
            "interpolation": self.interpolation,
            "config_hash": self.config_hash,
            "map50": self.map50,
            "per_class_ap": {sp.value: ap for sp, ap in self.per_class_ap.items()},
            "n_eval_frames": self.n_eval_frames,
            "straddling_detections": self.straddling_detections,
        }
        if self.substrate_ap is not None:
            d["substrate_ap"] = {s.value: ap for s, ap in self.substrate_ap.items()}
            d["substrate_map"] = self.substrate_map
        if self.counting is not None:
            d["counting"] = {
                "per_species": {sp.value: e for sp, e in self.counting.per_species.items()},
                "excluded": [sp.value for sp in self.counting.excluded],
                "mean_abs": self.counting.mean_abs,
            }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        report = cls(
            map50=d.get("map50"),
            per_class_ap={SpeciesClass(k): v for k, v in d.get("per_class_ap", {}).items()},
            n_eval_frames=d.get("n_eval_frames", 0),
            straddling_detections=d.get("straddling_detections", 0),
            interpolation=d.get("interpolation", INTERPOLATION),
            config_hash=d.get("config_hash"),
        )
        if "substrate_ap" in d:
            report.substrate_ap = {SubstrateClass(k): v for k, v in d["substrate_ap"].items()}
            report.substrate_map = d.get("substrate_map")
        if "counting" in d:
            c = d["counting"]
            report.counting = CountingErrors(
                {SpeciesClass(k): v for k, v in c["per_species"].items()},
                tuple(SpeciesClass(k) for k in c["excluded"]),
                c["mean_abs"],
            )
        return report


def save_report(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(report.to_json() + "\n")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text())


def map_bottom_half(
    detections: Sequence[Detection],
    frames: Sequence[FrameGroundTruth],
    frame_height: float,
    iou_thresh: float = 0.5,
) -> EvalReport:
    """mAP@iou_thresh on fully annotated bottom-half frames.

    Boxes lying entirely above the midline are discarded on both sides before
    matching; boxes straddling the midline are kept whole and tallied in the
    report. Classes absent from the ground truth are excluded from the mean.
    """
    for fr in frames:
        if not fr.fully_annotated_bottom_half:
            raise ValueError(
                f"frame {fr.video}:{fr.frame} is not fully annotated in the bottom half"
            )
    midline = frame_height / 2.0
    eligible = {(fr.video, fr.frame) for fr in frames}

    kept: list[Detection] = []
    straddling = 0
    for det in detections:
        if (det.video, det.frame) not in eligible:
            continue
        if det.y2 < midline:
            continue
        if det.y1 < midline:
            straddling += 1
        kept.append(det)

    gts_by_species: dict[SpeciesClass, list] = {sp: [] for sp in SpeciesClass}
    for fr in frames:
        for b in fr.boxes:
            if b.y2 < midline:
                continue
            gts_by_species[b.species].append((fr.video, fr.frame, b.box))

    per_class: dict[SpeciesClass, float | None] = {}
    for sp in SpeciesClass:
        dets = [d for d in kept if d.species is sp]
        per_class[sp] = average_precision(dets, gts_by_species[sp], iou_thresh)

    present = [ap for ap in per_class.values() if ap is not None]
    return EvalReport(
        map50=float(np.mean(present)) if present else None,
        per_class_ap=per_class,
        n_eval_frames=len(frames),
        straddling_detections=straddling,
    )

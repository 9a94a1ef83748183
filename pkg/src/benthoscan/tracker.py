"""Per-species multi-object tracking and track-based counting.

Association runs in two stages per frame: high-confidence detections are
matched to the Kalman-predicted track boxes first, the remainder get a second
chance against the low-confidence detections. Matching maximizes total IoU
over a full assignment (scipy's Hungarian solver), then pairs under the gate
are dropped; ties resolve to the lowest (track slot, detection slot) in
canonical order, so the result is invariant to input permutation.

A track is counted when any of its observed boxes reaches the bottom frame
edge (y2 >= frame_height - 1), once per track.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import count
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotations import SpeciesClass
from .errors import DataError, NumericError
from .evaluate import iou
from .records import Detection

Box = tuple[float, float, float, float]


@dataclass
class PipelineParams:
    """Knobs for the detection-to-count pipeline."""

    tau: float = 0.5  # confidence floor applied before tracking
    gamma: int = 20  # minimum detections for a track to survive
    high_thresh: float = 0.6  # score split between first and second association
    match_iou_first: float = 0.2
    match_iou_second: float = 0.5
    max_lost: int = 30  # frames a track may go unmatched before removal
    # Kalman noise scales, relative to box height.
    std_weight_position: float = 1.0 / 20
    std_weight_velocity: float = 1.0 / 160

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise DataError(f"tau {self.tau} outside [0, 1]")
        if self.gamma < 0:
            raise DataError(f"gamma must be >= 0, got {self.gamma}")
        if self.max_lost < 0:
            raise DataError(f"max_lost must be >= 0, got {self.max_lost}")


# --- Kalman filter -----------------------------------------------------------
#
# State: (cx, cy, a, h, vcx, vcy, va, vh) with a = width/height.


@dataclass
class KalmanState:
    mean: np.ndarray  # (8,)
    cov: np.ndarray  # (8, 8)


_F = np.eye(8)
_F[:4, 4:] = np.eye(4)  # dt = 1 frame
_H = np.eye(4, 8)


def xyxy_to_xyah(box: Sequence[float]) -> np.ndarray:
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    return np.array([x1 + w / 2.0, y1 + h / 2.0, w / h, h])


def xyah_to_xyxy(m: Sequence[float]) -> Box:
    cx, cy, a, h = m[:4]
    w = a * h
    return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def _process_noise(h: float, p: PipelineParams) -> np.ndarray:
    std = [
        p.std_weight_position * h,
        p.std_weight_position * h,
        1e-2,
        p.std_weight_position * h,
        p.std_weight_velocity * h,
        p.std_weight_velocity * h,
        1e-5,
        p.std_weight_velocity * h,
    ]
    return np.diag(np.square(std))


def _measurement_noise(h: float, p: PipelineParams) -> np.ndarray:
    std = [
        p.std_weight_position * h,
        p.std_weight_position * h,
        1e-1,
        p.std_weight_position * h,
    ]
    return np.diag(np.square(std))


def kalman_init(box: Sequence[float], params: PipelineParams) -> KalmanState:
    """State from a first observation; velocities start at zero."""
    m = xyxy_to_xyah(box)
    mean = np.concatenate([m, np.zeros(4)])
    h = m[3]
    std = [
        2 * params.std_weight_position * h,
        2 * params.std_weight_position * h,
        1e-2,
        2 * params.std_weight_position * h,
        10 * params.std_weight_velocity * h,
        10 * params.std_weight_velocity * h,
        1e-5,
        10 * params.std_weight_velocity * h,
    ]
    return KalmanState(mean, np.diag(np.square(std)))


def kalman_predict(state: KalmanState, params: PipelineParams) -> KalmanState:
    mean = _F @ state.mean
    cov = _F @ state.cov @ _F.T + _process_noise(state.mean[3], params)
    return KalmanState(mean, (cov + cov.T) / 2.0)


def kalman_update(
    state: KalmanState, measurement: Sequence[float], params: PipelineParams
) -> KalmanState:
    """Measurement is an observed box in (cx, cy, a, h)."""
    z = np.asarray(measurement, dtype=float)
    s = _H @ state.cov @ _H.T + _measurement_noise(state.mean[3], params)
    try:
        gain = np.linalg.solve(s, _H @ state.cov.T).T
    except np.linalg.LinAlgError:
        raise NumericError("singular innovation covariance") from None
    if not np.all(np.isfinite(gain)):
        raise NumericError("singular innovation covariance")
    mean = state.mean + gain @ (z - _H @ state.mean)
    cov = (np.eye(8) - gain @ _H) @ state.cov
    return KalmanState(mean, (cov + cov.T) / 2.0)


# --- assignment --------------------------------------------------------------


def match_by_iou(
    iou_matrix: np.ndarray, gate: float
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Assignment maximizing total IoU over a full matching, then gated.

    Among equal-total matchings, returns the lexicographically smallest set of
    (row, column) pairs. Returns (pairs, unmatched_rows, unmatched_cols).
    """
    mat = np.asarray(iou_matrix, dtype=float)
    n, m = mat.shape
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    size = max(n, m)
    padded = np.zeros((size, size))
    padded[:n, :m] = mat

    def best_total(forced: dict[int, int]) -> float:
        free_rows = [i for i in range(size) if i not in forced]
        free_cols = [j for j in range(size) if j not in forced.values()]
        total = sum(padded[i, j] for i, j in forced.items())
        if free_rows:
            sub = padded[np.ix_(free_rows, free_cols)]
            ri, ci = linear_sum_assignment(-sub)
            total += sub[ri, ci].sum()
        return total

    target = best_total({})
    forced: dict[int, int] = {}
    for i in range(n):
        # Real columns in ascending order, then any one padding column.
        candidates = [j for j in range(m) if j not in forced.values()]
        candidates += [j for j in range(m, size) if j not in forced.values()][:1]
        for j in candidates:
            forced[i] = j
            if best_total(forced) >= target - 1e-9:
                break
            del forced[i]

    pairs = [(i, j) for i, j in forced.items() if j < m and mat[i, j] >= gate]
    matched_rows = {i for i, _ in pairs}
    matched_cols = {j for _, j in pairs}
    return (
        pairs,
        [i for i in range(n) if i not in matched_rows],
        [j for j in range(m) if j not in matched_cols],
    )


# --- tracks ------------------------------------------------------------------

TENTATIVE = "tentative"
ACTIVE = "active"
LOST = "lost"
REMOVED = "removed"


@dataclass
class Track:
    video: str
    species: SpeciesClass
    track_id: int
    state: KalmanState
    frames: list[int] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)  # observed boxes, not smoothed
    scores: list[float] = field(default_factory=list)
    status: str = TENTATIVE
    lost_for: int = 0
    counted: bool = False

    def observe(self, frame: int, det: Detection, params: PipelineParams) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise DataError(
                f"track {self.track_id}: frame {frame} not after {self.frames[-1]}"
            )
        self.state = kalman_update(self.state, xyxy_to_xyah(det.box), params)
        self.frames.append(frame)
        self.boxes.append(det.box)
        self.scores.append(det.score)
        self.status = ACTIVE if self.frames[1:] else TENTATIVE
        self.lost_for = 0

    @property
    def predicted_box(self) -> Box:
        return xyah_to_xyxy(self.state.mean)


def _new_track(
    video: str, species: SpeciesClass, track_id: int, frame: int, det: Detection,
    params: PipelineParams,
) -> Track:
    t = Track(video, species, track_id, kalman_init(det.box, params))
    t.frames.append(frame)
    t.boxes.append(det.box)
    t.scores.append(det.score)
    return t


def byte_step(
    tracks: list[Track],
    detections: Sequence[Detection],
    params: PipelineParams,
    frame: int,
    id_counter: count,
) -> list[Track]:
    """Advance one species' tracks by one frame. Returns the updated track list."""
    species = {t.species for t in tracks} | {d.species for d in detections}
    if len(species) > 1:
        raise DataError(f"mixed species in one tracking step: {sorted(s.value for s in species)}")

    live = [t for t in tracks if t.status != REMOVED]
    for t in live:
        t.state = kalman_predict(t.state, params)

    # Canonical detection order makes tie-breaking input-order independent.
    dets = sorted(detections, key=lambda d: (-d.score, d.x1, d.y1, d.x2, d.y2))
    high = [d for d in dets if d.score >= params.high_thresh]
    low = [d for d in dets if d.score < params.high_thresh]

    def run_stage(pool: list[Track], cands: list[Detection], gate: float):
        if not pool or not cands:
            return [], pool, cands
        mat = np.zeros((len(pool), len(cands)))
        for i, t in enumerate(pool):
            for j, d in enumerate(cands):
                try:
                    mat[i, j] = iou(t.predicted_box, d.box)
                except ValueError:
                    mat[i, j] = 0.0  # degenerate prediction cannot match
        pairs, ut, ud = match_by_iou(mat, gate)
        for i, j in pairs:
            pool[i].observe(frame, cands[j], params)
        return pairs, [pool[i] for i in ut], [cands[j] for j in ud]

    pool1 = sorted(live, key=lambda t: t.track_id)
    _, unmatched, leftover_high = run_stage(pool1, high, params.match_iou_first)

    # Lost tracks do not take part in the low-confidence rescue stage.
    pool2 = [t for t in unmatched if t.status in (ACTIVE, TENTATIVE)]
    _, missed2, _ = run_stage(pool2, low, params.match_iou_second)

    for t in missed2 + [t for t in unmatched if t.status == LOST]:
        if t.status == TENTATIVE:
            t.status = REMOVED
            continue
        t.status = LOST
        t.lost_for += 1
        if t.lost_for > params.max_lost:
            t.status = REMOVED

    new = [
        _new_track(d.video, d.species, next(id_counter), frame, d, params)
        for d in leftover_high
    ]
    return tracks + new


def run_pipeline(
    detections: Sequence[Detection], params: PipelineParams
) -> list[Track]:
    """Confidence filter, per-species tracking, then the track-length filter.

    The stream must be sorted by frame within each video. Returns every
    surviving track (including finished ones) across videos and species.
    """
    last_frame: dict[str, int] = {}
    for d in detections:
        if d.frame < last_frame.get(d.video, d.frame):
            raise DataError(
                f"detection stream for {d.video} not sorted by frame at frame {d.frame}"
            )
        last_frame[d.video] = d.frame

    kept = [d for d in detections if d.score >= params.tau]

    by_video: dict[str, list[Detection]] = {}
    for d in kept:
        by_video.setdefault(d.video, []).append(d)

    all_tracks: list[Track] = []
    for video in sorted(by_video):
        vdets = by_video[video]
        lo = min(d.frame for d in vdets)
        hi = max(d.frame for d in vdets)
        by_species: dict[SpeciesClass, dict[int, list[Detection]]] = {}
        for d in vdets:
            by_species.setdefault(d.species, {}).setdefault(d.frame, []).append(d)
        for species in sorted(by_species, key=lambda s: s.value):
            frames = by_species[species]
            tracks: list[Track] = []
            ids = count(1)
            for f in range(lo, hi + 1):
                tracks = byte_step(tracks, frames.get(f, ()), params, f, ids)
            all_tracks.extend(tracks)

    return [t for t in all_tracks if len(t.frames) >= params.gamma]


def count_cabof(tracks: Iterable[Track], frame_height: float) -> dict[SpeciesClass, int]:
    """Count each track whose observed boxes ever reach the bottom frame edge."""
    counts: dict[SpeciesClass, int] = {sp: 0 for sp in SpeciesClass}
    for t in tracks:
        touched = any(y2 >= frame_height - 1 for (_, _, _, y2) in t.boxes)
        t.counted = touched
        if touched:
            counts[t.species] += 1
    return counts


def pipeline_counts(
    detections: Sequence[Detection], params: PipelineParams, frame_height: float
) -> tuple[dict[SpeciesClass, int], list[Track]]:
    tracks = run_pipeline(detections, params)
    return count_cabof(tracks, frame_height), tracks


# --- track dumps -------------------------------------------------------------


def write_tracks(path, tracks: Iterable[Track]) -> None:
    import json

    with open(path, "w") as fh:
        for t in tracks:
            fh.write(
                json.dumps(
                    {
                        "video": t.video,
                        "species": t.species.value,
                        "track_id": t.track_id,
                        "frames": t.frames,
                        "boxes": [list(b) for b in t.boxes],
                        "counted": t.counted,
                    }
                )
                + "\n"
            )

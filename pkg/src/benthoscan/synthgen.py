"""Seeded synthetic benthic survey video.

World model: the camera platform moves forward at a constant rate, so the
seafloor texture and everything sitting on it translate straight down the
frame at `object_speed` pixels per frame. The substrate changes in segments
along the transect, occasionally with two substrates side by side. Each object
is a procedural sprite of one species resting on the seafloor; it enters at
the top, crosses the frame, and leaves at the bottom. The generator ledgers
the exact frame at which each object's box first reaches
y2 >= frame_height - 1, which is the ground truth the counting pipeline is
scored against.

Every object is drawn on a neutral sediment disc (`clearing_radius`) that
hides the substrate texture near the box, so species that only differ by
where they live cannot be told apart from local pixels; the substrate stays
visible everywhere else in the frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotations import (
    CabofLabel,
    FrameGroundTruth,
    GtBox,
    KeyframeBox,
    SpeciesClass,
    SubstrateClass,
    SubstrateInterval,
    frame_substrate_labels,
)
from .errors import DataError

SP = SpeciesClass
SUB = SubstrateClass


@dataclass(frozen=True)
class SpeciesAppearance:
    shape: str  # disc | ring | ellipse | cross | blob | star
    color: tuple[float, float, float]  # base RGB in [0, 1]
    size: tuple[float, float]  # min/max box height, px
    lobes: int = 5  # arm count for star/blob shapes


DEFAULT_APPEARANCE: dict[SpeciesClass, SpeciesAppearance] = {
    SP.BS: SpeciesAppearance("star", (0.85, 0.62, 0.60), (18, 30), lobes=6),
    SP.FPU: SpeciesAppearance("disc", (0.90, 0.45, 0.55), (12, 20)),
    SP.GG: SpeciesAppearance("cross", (0.76, 0.76, 0.78), (20, 34)),
    SP.LLS: SpeciesAppearance("star", (0.90, 0.55, 0.25), (22, 34), lobes=9),
    SP.RSG: SpeciesAppearance("cross", (0.85, 0.22, 0.20), (16, 28)),
    SP.SL: SpeciesAppearance("ellipse", (0.80, 0.36, 0.15), (10, 16)),
    SP.LS: SpeciesAppearance("blob", (0.90, 0.86, 0.70), (16, 26)),
    SP.WSSC: SpeciesAppearance("ellipse", (0.93, 0.93, 0.88), (14, 22)),
    SP.WSPSC: SpeciesAppearance("ellipse", (0.93, 0.93, 0.88), (14, 22)),
    SP.YG: SpeciesAppearance("cross", (0.92, 0.80, 0.20), (16, 28)),
}

# Placement intensity of each species on each substrate, [substrate][species]
# in stable enum order. Rough field tendencies; any 4x10 non-negative matrix works.
DEFAULT_PRIOR: tuple[tuple[float, ...], ...] = (
    (0.302, 0.059, 0.362, 0.206, 0.198, 0.219, 0.168, 0.224, 0.176, 0.340),
    (0.773, 0.370, 0.797, 0.575, 0.712, 0.581, 0.454, 0.754, 0.601, 0.887),
    (0.288, 0.813, 0.185, 0.951, 0.471, 0.689, 0.372, 0.467, 0.896, 0.127),
    (0.670, 0.424, 0.464, 0.297, 0.716, 0.745, 0.998, 0.585, 0.324, 0.380),
)


@dataclass(frozen=True)
class SceneConfig:
    frame_width: int = 256
    frame_height: int = 256
    fps: float = 30.0
    duration: float = 120.0  # seconds; the sequence has duration*fps + 1 frames
    object_speed: float = 3.0  # pixels per frame, downward
    spawn_rate: float = 0.5  # expected objects per second of transect
    substrate_segment_length: float = 30.0  # mean segment length, seconds
    substrate_overlap_prob: float = 0.25
    species_substrate_prior: tuple[tuple[float, ...], ...] = DEFAULT_PRIOR
    appearance: Mapping[SpeciesClass, SpeciesAppearance] = field(
        default_factory=lambda: dict(DEFAULT_APPEARANCE)
    )
    ambiguity_pairs: tuple[tuple[SpeciesClass, SpeciesClass], ...] = ((SP.WSSC, SP.WSPSC),)
    clearing_radius: float = 40.0
    non_overlapping: bool = True
    keyframe_cadence: int = 10  # frames between keyframes of one target
    noise_level: float = 0.02

    def __post_init__(self) -> None:
        if self.duration <= 0 or self.fps <= 0:
            raise DataError("duration and fps must be positive")
        if self.object_speed <= 0:
            raise DataError("object_speed must be positive (the platform moves forward)")
        if len(self.species_substrate_prior) != len(SUB) or any(
            len(row) != len(SP) for row in self.species_substrate_prior
        ):
            raise DataError("species_substrate_prior must be 4 substrates x 10 species")
        if any(v < 0 for row in self.species_substrate_prior for v in row):
            raise DataError("species_substrate_prior entries must be non-negative")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps)) + 1


@dataclass(frozen=True)
class SyntheticObject:
    object_id: int
    species: SpeciesClass
    x1: float
    width: float
    height: float
    bottom_frame: int  # first frame with y2 >= frame_height - 1 (may lie past the end)
    brightness: float
    shape_seed: int

    def raw_y2(self, frame: int, cfg: SceneConfig) -> float:
        return (cfg.frame_height - 1) + (frame - self.bottom_frame) * cfg.object_speed

    def box_at(self, frame: int, cfg: SceneConfig) -> tuple[float, float, float, float] | None:
        """Clipped box on `frame`, or None when off screen."""
        y2 = self.raw_y2(frame, cfg)
        y1 = y2 - self.height
        y1c, y2c = max(y1, 0.0), min(y2, float(cfg.frame_height))
        if y1c >= y2c:
            return None
        return (self.x1, y1c, self.x1 + self.width, y2c)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _segment_timeline(
    cfg: SceneConfig, rng: np.random.Generator
) -> list[SubstrateInterval]:
    """Integer-second substrate segments covering [0, duration]."""
    subs = list(SUB)
    raw: list[SubstrateInterval] = []
    t = 0
    prev: SubstrateClass | None = None
    end = int(round(cfg.duration))
    while t < end:
        length = max(1, int(round(rng.uniform(0.75, 1.25) * cfg.substrate_segment_length)))
        seg_end = min(t + length, end)
        choices = [s for s in subs if s is not prev]
        primary = choices[rng.integers(len(choices))]
        raw.append(SubstrateInterval(primary, float(t), float(seg_end)))
        if rng.random() < cfg.substrate_overlap_prob:
            partner = [s for s in subs if s is not primary][rng.integers(len(subs) - 1)]
            raw.append(SubstrateInterval(partner, float(t), float(seg_end)))
        prev = primary
        t = seg_end

    # Same-substrate intervals that touch (endpoints inclusive) merge into one record.
    merged: list[SubstrateInterval] = []
    for sub in subs:
        spans = sorted((iv for iv in raw if iv.substrate is sub), key=lambda iv: iv.begin)
        for iv in spans:
            if merged and merged[-1].substrate is sub and iv.begin <= merged[-1].end:
                merged[-1] = SubstrateInterval(sub, merged[-1].begin, max(merged[-1].end, iv.end))
            else:
                merged.append(iv)
    merged.sort(key=lambda iv: (iv.begin, list(SUB).index(iv.substrate)))
    return merged


def _resolved_appearance(cfg: SceneConfig) -> dict[SpeciesClass, SpeciesAppearance]:
    """Appearance table with each ambiguity pair forced identical."""
    table = dict(DEFAULT_APPEARANCE)
    table.update(cfg.appearance)
    for a, b in cfg.ambiguity_pairs:
        table[b] = table[a]
    return table


@dataclass
class SyntheticSequence:
    config: SceneConfig
    seed: int
    video: str
    intervals: list[SubstrateInterval]
    objects: list[SyntheticObject]
    cabof_ledger: list[tuple[int, CabofLabel]]  # (object_id, label with exact frame time)
    boundary_phase: float

    @property
    def n_frames(self) -> int:
        return self.config.n_frames

    def cabofs(self) -> list[CabofLabel]:
        return [label for _, label in self.cabof_ledger]

    def frame_labels(self, frame: int) -> frozenset[SubstrateClass]:
        return frame_substrate_labels(self.intervals, frame / self.config.fps)

    def gt_boxes(self, frame: int) -> list[tuple[SyntheticObject, tuple[float, float, float, float]]]:
        out = []
        for obj in self.objects:
            box = obj.box_at(frame, self.config)
            if box is not None:
                out.append((obj, box))
        return out

    def full_frames(self, stride: int | None = None) -> list[FrameGroundTruth]:
        """Evaluation records: every box not entirely above the midline, one
        record per sampled frame, bottom half complete by construction."""
        stride = stride or max(1, int(round(self.config.fps)))
        midline = self.config.frame_height / 2.0
        records = []
        for f in range(0, self.n_frames, stride):
            boxes = tuple(
                GtBox(obj.species, *box)
                for obj, box in self.gt_boxes(f)
                if box[3] >= midline
            )
            records.append(FrameGroundTruth(self.video, f, boxes, True))
        return records

    def keyframes(self, withheld: frozenset[int] = frozenset()) -> list[KeyframeBox]:
        out = []
        cadence = max(1, self.config.keyframe_cadence)
        for obj in self.objects:
            if obj.object_id in withheld:
                continue
            vis = [
                f
                for f in range(self.n_frames)
                if obj.box_at(f, self.config) is not None
            ]
            if not vis:
                continue
            marks = list(range(vis[0], vis[-1] + 1, cadence))
            if marks[-1] != vis[-1]:
                marks.append(vis[-1])
            for f in marks:
                box = obj.box_at(f, self.config)
                out.append(KeyframeBox(self.video, f, obj.object_id, obj.species, *box))
        out.sort(key=lambda k: (k.frame, k.target))
        return out

    # Rendering ----------------------------------------------------------------

    def render_frame(self, frame: int) -> np.ndarray:
        if not 0 <= frame < self.n_frames:
            raise DataError(f"frame {frame} outside 0..{self.n_frames - 1}")
        cfg = self.config
        H, W = cfg.frame_height, cfg.frame_width
        scroll = frame * cfg.object_speed
        ys = np.arange(H, dtype=np.float64) + scroll
        xs = np.arange(W, dtype=np.float64)

        active = sorted(self.frame_labels(frame), key=list(SUB).index)
        if not active:
            canvas = _SEDIMENT.render(self.seed, ys, xs)
        elif len(active) == 1:
            canvas = _TEXTURES[active[0]].render(self.seed, ys, xs)
        else:
            canvas = _split_render(active, self.seed, ys, xs, self.boundary_phase)

        sediment = _SEDIMENT.render(self.seed, ys, xs)
        appearance = _resolved_appearance(cfg)
        yy = np.arange(H, dtype=np.float64)[:, None]
        xx = np.arange(W, dtype=np.float64)[None, :]
        for obj in self.objects:
            y2 = obj.raw_y2(frame, cfg)
            cy = y2 - obj.height / 2.0
            cx = obj.x1 + obj.width / 2.0
            r = cfg.clearing_radius
            if r > 0 and -r <= cy <= H + r:
                d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
                alpha = np.clip((r - d) / 3.0, 0.0, 1.0)[:, :, None]
                canvas = canvas * (1 - alpha) + sediment * alpha
        for obj in self.objects:
            box = obj.box_at(frame, cfg)
            if box is not None:
                _draw_sprite(canvas, obj, frame, cfg, appearance[obj.species])

        noise = _rng(self.seed, 3_000_000 + frame).normal(0.0, cfg.noise_level, canvas.shape)
        canvas = np.clip(canvas + noise, 0.0, 1.0)
        return (canvas * 255.0 + 0.5).astype(np.uint8)


def generate_sequence(config: SceneConfig, seed: int, video: str | None = None) -> SyntheticSequence:
    """Deterministic scene for (config, seed): same inputs, same everything."""
    cfg = config
    video = video or f"synth-{seed}"
    layout = _rng(seed, 0)
    intervals = _segment_timeline(cfg, layout)

    appearance = _resolved_appearance(cfg)
    prior = np.asarray(cfg.species_substrate_prior, dtype=float)
    species_list = list(SP)

    max_h = max(a.size[1] for a in appearance.values())
    overhang = int(math.ceil((cfg.frame_height + max_h) / cfg.object_speed))
    fb_max = cfg.n_frames - 1 + overhang
    n_objects = int(round(cfg.spawn_rate / cfg.fps * (fb_max + 1)))

    objects: list[SyntheticObject] = []
    bottom_frames = np.sort(layout.integers(0, fb_max + 1, size=n_objects))
    sub_index = {s: i for i, s in enumerate(SUB)}
    for fb in bottom_frames:
        fb = int(fb)
        t_ref = min(fb, cfg.n_frames - 1) / cfg.fps
        active = frame_substrate_labels(intervals, t_ref)
        weights = np.zeros(len(species_list))
        for s in active:
            weights += prior[sub_index[s]]
        if weights.sum() <= 0:
            continue
        sp = species_list[layout.choice(len(species_list), p=weights / weights.sum())]
        app = appearance[sp]
        h = layout.uniform(app.size[0], app.size[1])
        w = h * layout.uniform(0.85, 1.25)
        w = min(w, cfg.frame_width - 6.0)

        placed = False
        for _ in range(60):
            x1 = layout.uniform(2.0, cfg.frame_width - w - 2.0)
            if not cfg.non_overlapping:
                placed = True
                break
            ok = True
            for other in objects:
                # d = other.y2 - this.y2 is constant: both move at the same speed.
                dy = cfg.object_speed * (fb - other.bottom_frame)
                if not (-h - 3 <= dy <= other.height + 3):
                    continue  # never vertically adjacent
                if x1 < other.x1 + other.width + 3 and other.x1 < x1 + w + 3:
                    ok = False
                    break
            if ok:
                placed = True
                break
        if not placed:
            continue
        objects.append(
            SyntheticObject(
                object_id=len(objects) + 1,
                species=sp,
                x1=float(x1),
                width=float(w),
                height=float(h),
                bottom_frame=fb,
                brightness=float(layout.uniform(0.9, 1.1)),
                shape_seed=int(layout.integers(0, 2**31 - 1)),
            )
        )

    ledger = [
        (obj.object_id, CabofLabel(obj.species, obj.bottom_frame / cfg.fps, 1))
        for obj in objects
        if obj.bottom_frame <= cfg.n_frames - 1
    ]
    return SyntheticSequence(
        config=cfg,
        seed=seed,
        video=video,
        intervals=intervals,
        objects=objects,
        cabof_ledger=ledger,
        boundary_phase=float(layout.uniform(0.0, 1.0)),
    )


def emit_partial_training_set(
    seq: SyntheticSequence, withhold_fraction: float
) -> tuple[list[KeyframeBox], frozenset[int]]:
    """Keyframes with exactly floor(fraction * n_objects) objects left unannotated.

    Returns (keyframes, withheld object ids). Evaluation records are not
    affected; take them from `seq.full_frames()`.
    """
    if not 0.0 <= withhold_fraction < 1.0:
        raise DataError(f"withhold_fraction {withhold_fraction} outside [0, 1)")
    ids = [obj.object_id for obj in seq.objects]
    n_drop = int(math.floor(withhold_fraction * len(ids)))
    rng = _rng(seq.seed, 4)
    withheld = frozenset(
        int(ids[i]) for i in rng.choice(len(ids), size=n_drop, replace=False)
    ) if n_drop else frozenset()
    return seq.keyframes(withheld), withheld


def reconstruct_intervals(seq: SyntheticSequence) -> list[SubstrateInterval]:
    """Rebuild the interval records from per-frame labels (integer fps only)."""
    fps = seq.config.fps
    out = []
    for sub in SUB:
        run_start: int | None = None
        prev_on = False
        for f in range(seq.n_frames + 1):
            on = f < seq.n_frames and sub in seq.frame_labels(f)
            if on and not prev_on:
                run_start = f
            elif prev_on and not on:
                out.append(SubstrateInterval(sub, run_start / fps, (f - 1) / fps))
            prev_on = on
    out.sort(key=lambda iv: (iv.begin, list(SUB).index(iv.substrate)))
    return out


def expected_cooccurrence(cfg: SceneConfig) -> dict[SubstrateClass, dict[SpeciesClass, float]]:
    """Analytic expectation of cooccurrence_table under this config's process."""
    q = cfg.substrate_overlap_prob
    prior = [[Fraction(v).limit_denominator(10**9) for v in row] for row in cfg.species_substrate_prior]
    subs = list(SUB)
    states: list[tuple[frozenset[SubstrateClass], Fraction]] = []
    for i, a in enumerate(subs):
        states.append((frozenset([a]), (1 - Fraction(q).limit_denominator(10**9)) / 4))
    qf = Fraction(q).limit_denominator(10**9)
    for i, a in enumerate(subs):
        for b in subs[i + 1 :]:
            states.append((frozenset([a, b]), qf / 6))

    sub_index = {s: i for i, s in enumerate(subs)}
    table: dict[SubstrateClass, dict[SpeciesClass, float]] = {s: {} for s in subs}
    for k, sp in enumerate(SP):
        num = {s: Fraction(0) for s in subs}
        den = Fraction(0)
        for state, p_state in states:
            w = [sum(prior[sub_index[s]][j] for s in state) for j in range(len(SP))]
            total = sum(w)
            if total == 0:
                continue
            p_sp = p_state * w[k] / total
            den += p_sp
            for s in state:
                num[s] += p_sp
        if den > 0:
            for s in subs:
                table[s][sp] = float(num[s] / den)
    return table


# --- textures and sprites ----------------------------------------------------

_GRID = 64  # value-noise lattice size (tileable)


@dataclass(frozen=True)
class _Texture:
    key: int  # rng stream discriminator
    cell: float  # noise cell size, px
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    style: str  # smooth | speckle | patches | ridge

    def field(self, seed: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        grid = _rng(seed, 1000 + self.key).random((_GRID, _GRID))
        gy = np.asarray(ys, dtype=np.float64) / self.cell
        gx = np.asarray(xs, dtype=np.float64) / self.cell
        y0 = np.floor(gy).astype(int)
        x0 = np.floor(gx).astype(int)
        ty = (gy - y0)[:, None]
        tx = (gx - x0)[None, :]
        ty = ty * ty * (3 - 2 * ty)
        tx = tx * tx * (3 - 2 * tx)
        y0 %= _GRID
        x0 %= _GRID
        y1 = (y0 + 1) % _GRID
        x1 = (x0 + 1) % _GRID
        n = (
            grid[np.ix_(y0, x0)] * (1 - ty) * (1 - tx)
            + grid[np.ix_(y0, x1)] * (1 - ty) * tx
            + grid[np.ix_(y1, x0)] * ty * (1 - tx)
            + grid[np.ix_(y1, x1)] * ty * tx
        )
        if self.style == "ridge":
            n = 1.0 - np.abs(2.0 * n - 1.0)
        elif self.style == "patches":
            n = np.clip((n - 0.52) / 0.1, 0.0, 1.0)
        return n

    def render(self, seed: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        n = self.field(seed, ys, xs)[:, :, None]
        lo = np.array(self.lo)[None, None, :]
        hi = np.array(self.hi)[None, None, :]
        return lo + (hi - lo) * n


_TEXTURES: dict[SubstrateClass, _Texture] = {
    SUB.BOULDER: _Texture(0, 24.0, (0.16, 0.19, 0.22), (0.58, 0.57, 0.53), "patches"),
    SUB.COBBLE: _Texture(1, 8.0, (0.24, 0.19, 0.14), (0.52, 0.43, 0.30), "speckle"),
    SUB.MUD: _Texture(2, 48.0, (0.21, 0.25, 0.20), (0.30, 0.33, 0.26), "smooth"),
    SUB.ROCK: _Texture(3, 5.0, (0.10, 0.12, 0.16), (0.42, 0.47, 0.52), "ridge"),
}
_SEDIMENT = _Texture(9, 12.0, (0.31, 0.285, 0.245), (0.385, 0.355, 0.315), "speckle")


def _split_render(
    active: Sequence[SubstrateClass],
    seed: int,
    ys: np.ndarray,
    xs: np.ndarray,
    phase: float,
) -> np.ndarray:
    """Side-by-side bands with a wavy scrolling boundary, one per substrate."""
    H, W = len(ys), len(xs)
    canvas = np.zeros((H, W, 3))
    k = len(active)
    wiggle = 0.12 * W * np.sin(2 * np.pi * (ys / 170.0 + phase))
    xx = np.arange(W, dtype=np.float64)[None, :]
    for i, sub in enumerate(active):
        left = W * i / k + (wiggle if i > 0 else -np.ones(H) * W)[:, None]
        right = W * (i + 1) / k + (wiggle if i + 1 < k else np.ones(H) * 2 * W)[:, None]
        mask = ((xx >= left) & (xx < right)).astype(np.float64)[:, :, None]
        canvas += _TEXTURES[sub].render(seed, ys, xs) * mask
    return canvas


def _draw_sprite(
    canvas: np.ndarray,
    obj: SyntheticObject,
    frame: int,
    cfg: SceneConfig,
    app: SpeciesAppearance,
) -> None:
    box = obj.box_at(frame, cfg)
    y2 = obj.raw_y2(frame, cfg)
    cy = y2 - obj.height / 2.0
    cx = obj.x1 + obj.width / 2.0
    ry0 = int(math.floor(box[1]))
    ry1 = int(math.ceil(box[3]))
    rx0 = int(math.floor(box[0]))
    rx1 = int(math.ceil(box[2]))
    yy = (np.arange(ry0, ry1, dtype=np.float64) + 0.5)[:, None]
    xx = (np.arange(rx0, rx1, dtype=np.float64) + 0.5)[None, :]
    u = (xx - cx) / (obj.width / 2.0)
    v = (yy - cy) / (obj.height / 2.0)
    r = np.sqrt(u * u + v * v)
    edge = min(obj.width, obj.height) / 2.0 / 1.5  # ~1.5 px soft edge

    if app.shape in ("disc", "ellipse"):
        alpha = np.clip((1.0 - r) * edge, 0.0, 1.0)
    elif app.shape == "ring":
        outer = np.clip((1.0 - r) * edge, 0.0, 1.0)
        inner = np.clip((0.55 - r) * edge, 0.0, 1.0)
        alpha = outer - inner
    elif app.shape == "cross":
        band = 0.30
        bar = np.maximum(
            np.clip((band - np.abs(u)) * edge, 0.0, 1.0),
            np.clip((band - np.abs(v)) * edge, 0.0, 1.0),
        )
        alpha = bar * np.clip((1.0 - r) * edge, 0.0, 1.0) * 1.6
        alpha = np.clip(alpha, 0.0, 1.0)
    elif app.shape in ("star", "blob"):
        theta = np.arctan2(v, u)
        if app.shape == "star":
            srng = _rng(obj.shape_seed, 1)
            phi = srng.uniform(0, 2 * math.pi)
            rt = 0.60 + 0.36 * np.cos(app.lobes * theta + phi)
        else:
            srng = _rng(obj.shape_seed, 2)
            knots = srng.uniform(-1.0, 1.0, 8)
            pos = (theta + math.pi) / (2 * math.pi) * 8
            k0 = np.floor(pos).astype(int) % 8
            k1 = (k0 + 1) % 8
            t = pos - np.floor(pos)
            rt = 0.74 + 0.22 * (knots[k0] * (1 - t) + knots[k1] * t)
        alpha = np.clip((rt - r) * edge, 0.0, 1.0)
    else:
        raise DataError(f"unknown sprite shape {app.shape!r}")

    shading = 1.0 - 0.25 * np.clip(r, 0.0, 1.0) ** 2
    color = np.array(app.color) * obj.brightness
    tile = canvas[ry0:ry1, rx0:rx1]
    a = alpha[:, :, None]
    tile[:] = tile * (1 - a) + (color[None, None, :] * shading[:, :, None]) * a

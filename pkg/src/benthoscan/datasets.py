"""Dataset assembly: synthetic scenes to training examples, and the on-disk
dataset layout used by the CLI.

Disk layout (one dataset directory):

    manifest.json                   generation parameters, hash, video table
    keyframes.jsonl                 sparse box marks for the train split
    eval_frames.jsonl               fully annotated bottom-half frame records
    videos/<name>/frames/%06d.png   rendered frames
    videos/<name>/annotations.csv   substrate intervals and bottom-crossing counts

CSV timestamps are whole seconds (the production format), so bottom-crossing
times are rounded to the nearest second on write; per-species totals are
unaffected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from PIL import Image

from .annotations import (
    SPECIES_ORDER,
    CabofLabel,
    FrameGroundTruth,
    KeyframeBox,
    SpeciesClass,
    SubstrateClass,
    boxes_at_frame,
    cabof_totals,
    frame_substrate_labels,
    parse_annotation_csv,
    read_frame_ground_truth,
    read_keyframes,
    serialize_annotation_csv,
    substrate_multihot,
    write_frame_ground_truth,
    write_keyframes,
)
from .config import config_hash
from .detector.train import EvalSet, FrameExample
from .errors import DataError
from .synthgen import (
    SceneConfig,
    SpeciesAppearance,
    SyntheticSequence,
    emit_partial_training_set,
    generate_sequence,
)

SPECIES_INDEX = {sp: i for i, sp in enumerate(SPECIES_ORDER)}

DEFAULT_SPLITS: dict[str, int] = {"train": 3, "val": 1, "test": 1}


# --- in-memory builders ---------------------------------------------------------


def examples_from_sequence(
    seq: SyntheticSequence, keyframes: list[KeyframeBox] | None = None
) -> list[FrameExample]:
    """Training examples: one per frame carrying at least one keyframe mark.

    Boxes for a frame are the interpolated boxes of every annotated target
    whose mark span covers it, so partially annotated scenes simply have
    fewer boxes (not fewer frames).
    """
    kfs = seq.keyframes() if keyframes is None else keyframes
    out = []
    for f in sorted({k.frame for k in kfs}):
        boxes = boxes_at_frame(kfs, seq.video, f)
        arr = np.array([b.box for b in boxes], dtype=np.float32).reshape(-1, 4)
        labels = np.array([SPECIES_INDEX[b.species] for b in boxes], dtype=np.int64)
        subs = substrate_multihot(seq.frame_labels(f))
        out.append(FrameExample(seq.video, f, seq.render_frame(f), arr, labels, subs))
    return out


def eval_set_from_sequences(
    seqs: list[SyntheticSequence], stride: int | None = None
) -> EvalSet:
    """Rendered evaluation frames for one or more sequences."""
    if not seqs:
        raise DataError("no sequences given")
    frames: list[FrameGroundTruth] = []
    images: dict[tuple[str, int], np.ndarray] = {}
    for seq in seqs:
        for fr in seq.full_frames(stride):
            frames.append(fr)
            images[(fr.video, fr.frame)] = seq.render_frame(fr.frame)
    return EvalSet(frames, images, seqs[0].config.frame_height)


# --- scene config serialization ---------------------------------------------------


def scene_to_dict(cfg: SceneConfig) -> dict:
    d = {
        f.name: getattr(cfg, f.name)
        for f in dataclasses.fields(cfg)
        if f.name not in ("appearance", "ambiguity_pairs", "species_substrate_prior")
    }
    d["species_substrate_prior"] = [list(row) for row in cfg.species_substrate_prior]
    d["ambiguity_pairs"] = [[a.value, b.value] for a, b in cfg.ambiguity_pairs]
    d["appearance"] = {
        sp.value: {
            "shape": ap.shape,
            "color": list(ap.color),
            "size": list(ap.size),
            "lobes": ap.lobes,
        }
        for sp, ap in cfg.appearance.items()
    }
    return d


def scene_from_dict(d: Mapping) -> SceneConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise DataError(f"unknown scene fields: {', '.join(sorted(unknown))}")
    if "species_substrate_prior" in d:
        d["species_substrate_prior"] = tuple(
            tuple(float(v) for v in row) for row in d["species_substrate_prior"]
        )
    if "ambiguity_pairs" in d:
        d["ambiguity_pairs"] = tuple(
            (SpeciesClass(a), SpeciesClass(b)) for a, b in d["ambiguity_pairs"]
        )
    if "appearance" in d:
        d["appearance"] = {
            SpeciesClass(k): SpeciesAppearance(
                shape=v["shape"],
                color=tuple(v["color"]),
                size=tuple(v["size"]),
                lobes=v.get("lobes", 5),
            )
            for k, v in d["appearance"].items()
        }
    return SceneConfig(**d)


# --- disk layout -------------------------------------------------------------------


@dataclass(frozen=True)
class GenSpec:
    """What to generate: the scene, how many videos per split, withholding."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    splits: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_SPLITS))
    withhold_fraction: float = 0.0
    eval_stride: int | None = None

    def __post_init__(self) -> None:
        if not self.splits or any(n < 0 for n in self.splits.values()):
            raise DataError("splits must map names to non-negative counts")
        if not 0.0 <= self.withhold_fraction < 1.0:
            raise DataError("withhold_fraction must lie in [0, 1)")


def gen_spec_to_dict(spec: GenSpec) -> dict:
    return {
        "scene": scene_to_dict(spec.scene),
        "splits": dict(spec.splits),
        "withhold_fraction": spec.withhold_fraction,
        "eval_stride": spec.eval_stride,
    }


def gen_spec_from_dict(d: Mapping) -> GenSpec:
    d = dict(d)
    scene = scene_from_dict(d.pop("scene", {}))
    return GenSpec(scene=scene, **d)


def _video_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([max(0, seed), 7, index]).generate_state(1)[0])


def dataset_sequences(spec: GenSpec, seed: int) -> dict[str, list[SyntheticSequence]]:
    """The sequences a (spec, seed) pair generates, keyed by split. Purely a
    function of its arguments, so disk and in-memory paths agree exactly."""
    out: dict[str, list[SyntheticSequence]] = {}
    index = 0
    for split in sorted(spec.splits):
        seqs = []
        for i in range(spec.splits[split]):
            name = f"{split}{i:02d}"
            seqs.append(generate_sequence(spec.scene, _video_seed(seed, index), name))
            index += 1
        out[split] = seqs
    return out


def generate_dataset(root: str | Path, spec: GenSpec, seed: int) -> dict:
    """Render a dataset directory; returns the manifest dict.

    Fully deterministic: the same (spec, seed) writes byte-identical frames
    and annotation files.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = config_hash({"gen": gen_spec_to_dict(spec), "seed": seed})

    by_split = dataset_sequences(spec, seed)
    videos: dict[str, dict] = {}
    keyframes: list[KeyframeBox] = []
    eval_frames: list[FrameGroundTruth] = []

    for split in sorted(by_split):
        for seq in by_split[split]:
            vdir = root / "videos" / seq.video
            (vdir / "frames").mkdir(parents=True, exist_ok=True)
            for f in range(seq.n_frames):
                img = Image.fromarray(seq.render_frame(f))
                img.save(vdir / "frames" / f"{f:06d}.png")
            rounded = [
                CabofLabel(c.species, float(round(c.at)), c.count, c.other_name)
                for c in seq.cabofs()
            ]
            (vdir / "annotations.csv").write_text(
                serialize_annotation_csv(seq.intervals, rounded)
            )
            withheld: list[int] = []
            if split == "train":
                kfs, held = emit_partial_training_set(seq, spec.withhold_fraction)
                keyframes.extend(kfs)
                withheld = sorted(held)
            eval_frames.extend(seq.full_frames(spec.eval_stride))
            videos[seq.video] = {
                "split": split,
                "seed": seq.seed,
                "n_frames": seq.n_frames,
                "fps": seq.config.fps,
                "width": seq.config.frame_width,
                "height": seq.config.frame_height,
                "withheld": withheld,
            }

    keyframes.sort(key=lambda k: (k.video, k.frame, k.target))
    eval_frames.sort(key=lambda fr: (fr.video, fr.frame))
    write_keyframes(root / "keyframes.jsonl", keyframes)
    write_frame_ground_truth(root / "eval_frames.jsonl", eval_frames)

    manifest = {
        "config_hash": stamp,
        "seed": seed,
        "gen": gen_spec_to_dict(spec),
        "videos": videos,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root: str | Path) -> dict:
    p = Path(root) / "manifest.json"
    if not p.exists():
        raise DataError(f"not a dataset directory (no manifest.json): {root}")
    return json.loads(p.read_text())


def split_videos(manifest: dict, split: str) -> list[str]:
    names = sorted(
        v for v, info in manifest["videos"].items() if info["split"] == split
    )
    if not names:
        raise DataError(f"dataset has no '{split}' videos")
    return names


def read_frame_image(root: str | Path, video: str, frame: int) -> np.ndarray:
    p = Path(root) / "videos" / video / "frames" / f"{frame:06d}.png"
    if not p.exists():
        raise DataError(f"missing frame image {p}")
    return np.array(Image.open(p))


def iter_video_frames(
    root: str | Path, manifest: dict, video: str
) -> Iterator[tuple[str, int, np.ndarray]]:
    """Every frame of a video at full rate, for pipeline inference."""
    info = manifest["videos"].get(video)
    if info is None:
        raise DataError(f"unknown video {video!r}")
    for f in range(info["n_frames"]):
        yield (video, f, read_frame_image(root, video, f))


def load_examples(root: str | Path, manifest: dict, split: str = "train") -> list[FrameExample]:
    """Training examples for a split from the written dataset."""
    root = Path(root)
    names = split_videos(manifest, split)
    kfs = [k for k in read_keyframes(root / "keyframes.jsonl") if k.video in names]
    if not kfs:
        raise DataError(f"no keyframes on disk for split '{split}'")
    out: list[FrameExample] = []
    for video in names:
        info = manifest["videos"][video]
        intervals, _ = parse_annotation_csv(root / "videos" / video / "annotations.csv")
        vkfs = [k for k in kfs if k.video == video]
        for f in sorted({k.frame for k in vkfs}):
            boxes = boxes_at_frame(vkfs, video, f)
            arr = np.array([b.box for b in boxes], dtype=np.float32).reshape(-1, 4)
            labels = np.array(
                [SPECIES_INDEX[b.species] for b in boxes], dtype=np.int64
            )
            subs = substrate_multihot(
                frame_substrate_labels(intervals, f / info["fps"])
            )
            out.append(
                FrameExample(video, f, read_frame_image(root, video, f), arr, labels, subs)
            )
    return out


def load_eval_set(root: str | Path, manifest: dict, split: str) -> EvalSet:
    root = Path(root)
    names = set(split_videos(manifest, split))
    frames = [
        fr
        for fr in read_frame_ground_truth(root / "eval_frames.jsonl")
        if fr.video in names
    ]
    if not frames:
        raise DataError(f"no evaluation frames for split '{split}'")
    images = {
        (fr.video, fr.frame): read_frame_image(root, fr.video, fr.frame)
        for fr in frames
    }
    heights = {manifest["videos"][v]["height"] for v in names}
    if len(heights) != 1:
        raise DataError("split mixes frame heights")
    return EvalSet(frames, images, heights.pop())


def load_gt_counts(
    root: str | Path, manifest: dict, split: str
) -> dict[SpeciesClass, int]:
    """Ground-truth bottom-crossing totals of a split, from its CSVs."""
    totals: dict[SpeciesClass, int] = {sp: 0 for sp in SpeciesClass}
    for video in split_videos(manifest, split):
        _, cabofs = parse_annotation_csv(
            Path(root) / "videos" / video / "annotations.csv"
        )
        for sp, n in cabof_totals(cabofs).items():
            totals[sp] += n
    return totals


def load_intervals(root: str | Path, manifest: dict, split: str):
    """(intervals, cabofs) per video of a split, for co-occurrence tables."""
    out = []
    for video in split_videos(manifest, split):
        out.append(
            parse_annotation_csv(Path(root) / "videos" / video / "annotations.csv")
        )
    return out


def file_digest(path: str | Path) -> str:
    """12-hex content digest, used to key detection caches to checkpoints."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]


def dataset_digest(root: str | Path) -> str:
    """Digest over every file in a dataset directory (order-independent)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:12]

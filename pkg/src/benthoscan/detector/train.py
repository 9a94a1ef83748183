"""Detector training loop, checkpointing, and batched inference.

Training is deterministic for a fixed config: all randomness flows from the
config seed through explicit generators, batches are built in-process (no
worker processes), and CPU kernels are deterministic. Model selection is by
validation mAP on fully annotated bottom-half frames; ties keep the earlier
epoch. A non-finite loss aborts the run immediately with the epoch index.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from ..annotations import SPECIES_ORDER, FrameGroundTruth
from ..config import DetectorConfig, config_hash, dataclass_from_dict, to_plain_dict
from ..errors import DataError, NumericError
from ..evaluate import EvalReport, map_bottom_half
from ..records import Detection
from .model import (
    CDDetector,
    TrainBatch,
    compute_loss,
    decode_boxes,
    fuse_global,
    roi_align,
)
from torchvision.ops import nms

__all__ = [
    "FrameExample",
    "EvalSet",
    "TrainResult",
    "TrainingDiverged",
    "train_detector",
    "infer",
    "save_checkpoint",
    "load_checkpoint",
    "evaluate_detector",
]


@dataclass
class FrameExample:
    """One training frame: image, annotated boxes, and substrate labels."""

    video: str
    frame: int
    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (N, 4) float32 xyxy
    labels: np.ndarray  # (N,) int64 species indices, 0..9
    substrates: np.ndarray  # (4,) float32 multi-hot


@dataclass
class EvalSet:
    """Validation or test frames with their rendered images."""

    frames: list[FrameGroundTruth]
    images: Mapping[tuple[str, int], np.ndarray]
    frame_height: int


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(
            f"training diverged at epoch {epoch} step {step}: loss {value}"
        )
        self.epoch = epoch
        self.step = step


@dataclass
class TrainResult:
    model: CDDetector
    best_epoch: int
    best_map: float
    val_map_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)


def _make_batch(examples: Sequence[FrameExample]) -> TrainBatch:
    images = torch.stack([_image_tensor(e.image) for e in examples])
    boxes = [torch.from_numpy(e.boxes.astype(np.float32)) for e in examples]
    labels = [torch.from_numpy(e.labels.astype(np.int64)) for e in examples]
    subs = torch.stack(
        [torch.from_numpy(e.substrates.astype(np.float32)) for e in examples]
    )
    return TrainBatch(images=images, boxes=boxes, labels=labels, substrates=subs)


def train_detector(
    train: Sequence[FrameExample],
    val: EvalSet,
    config: DetectorConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train up to config.max_epochs and return the best-validation model."""
    if not train:
        raise DataError("empty training set")
    if not val.frames:
        raise DataError("empty validation set")
    for e in train:
        h, w = e.image.shape[:2]
        if h != config.image_size or w != config.image_size:
            raise DataError(
                f"frame {e.video}:{e.frame} is {w}x{h}, expected square "
                f"{config.image_size}"
            )

    torch.manual_seed(config.seed)
    model = CDDetector(config)
    sub_counts = np.stack([e.substrates for e in train]).sum(axis=0)
    model.set_context_pos_weight(sub_counts, len(train) - sub_counts)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sample_rng = np.random.default_rng(
        np.random.SeedSequence([max(0, config.seed), 101])
    )
    order_rng = np.random.default_rng(
        np.random.SeedSequence([max(0, config.seed), 202])
    )

    best_state = copy.deepcopy(model.state_dict())
    best_map = -1.0
    best_epoch = -1
    val_trace: list[float] = []
    loss_trace: list[float] = []

    for epoch in range(config.max_epochs):
        model.train()
        order = order_rng.permutation(len(train))
        epoch_loss = 0.0
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train[i] for i in order[start : start + config.batch_size]]
            batch = _make_batch(chunk)
            breakdown = compute_loss(model, batch, rng=sample_rng)
            value = float(breakdown.total.detach())
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, n_steps, value)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            epoch_loss += value
            n_steps += 1
        loss_trace.append(epoch_loss / max(1, n_steps))

        report = evaluate_detector(model, val)
        val_map = report.map50 if report.map50 is not None else 0.0
        val_trace.append(val_map)
        if log:
            log(
                f"epoch {epoch}: loss {loss_trace[-1]:.4f} val mAP {val_map:.4f}"
            )
        if val_map > best_map:
            best_map = val_map
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        best_epoch=best_epoch,
        best_map=best_map,
        val_map_trace=val_trace,
        loss_trace=loss_trace,
    )


@torch.no_grad()
def infer(
    model: CDDetector,
    frames: Sequence[tuple[str, int, np.ndarray]],
    score_floor: float = 0.05,
    batch_size: int = 8,
) -> list[Detection]:
    """Detections for (video, frame, image) triples.

    Keeps everything scoring at or above score_floor, applies per-class NMS,
    and returns the list ordered by video, then frame, then descending score.
    """
    from .model import _generate_proposals  # shared proposal routine

    config = model.config
    model.eval()
    out: list[Detection] = []
    for start in range(0, len(frames), batch_size):
        chunk = frames[start : start + batch_size]
        images = torch.stack([_image_tensor(img) for _, _, img in chunk])
        feats = model.backbone(images)
        obj, deltas = model.rpn(feats)
        anchors = model.anchors(dtype=images.dtype)
        proposals = [
            _generate_proposals(anchors, obj[i], deltas[i], config)
            for i in range(len(chunk))
        ]
        pooled = roi_align(
            feats,
            proposals,
            output_size=(config.roi_size, config.roi_size),
            spatial_scale=1.0 / model.backbone.stride,
            sampling_ratio=2,
            aligned=True,
        )
        box_feats = model.box_head.features(pooled)
        if config.beta > 0:
            g = model.context.global_vector(feats)
            parts = []
            offset = 0
            for i, props in enumerate(proposals):
                r = props.shape[0]
                parts.append(
                    fuse_global(box_feats[offset : offset + r], g[i], config.beta)
                )
                offset += r
            box_feats = torch.cat(parts, dim=0)
        cls_logits, regs = model.box_head.predict(box_feats)
        probs = cls_logits.softmax(dim=1)

        offset = 0
        for i, (video, frame, _) in enumerate(chunk):
            props = proposals[i]
            r = props.shape[0]
            p = probs[offset : offset + r]
            rg = regs[offset : offset + r]
            offset += r
            frame_dets: list[Detection] = []
            for c in range(1, p.shape[1]):
                scores_c = p[:, c]
                keep = scores_c >= score_floor
                if not bool(keep.any()):
                    continue
                boxes_c = decode_boxes(
                    rg[keep, c, :], props[keep], clip_size=config.image_size
                )
                scores_k = scores_c[keep]
                valid = (boxes_c[:, 2] - boxes_c[:, 0] > 0) & (
                    boxes_c[:, 3] - boxes_c[:, 1] > 0
                )
                boxes_c, scores_k = boxes_c[valid], scores_k[valid]
                if boxes_c.numel() == 0:
                    continue
                kept = nms(boxes_c, scores_k, config.detection_nms_iou)
                for j in kept.tolist():
                    frame_dets.append(
                        Detection(
                            video=video,
                            frame=frame,
                            species=SPECIES_ORDER[c - 1],
                            x1=float(boxes_c[j, 0]),
                            y1=float(boxes_c[j, 1]),
                            x2=float(boxes_c[j, 2]),
                            y2=float(boxes_c[j, 3]),
                            score=float(scores_k[j]),
                        )
                    )
            frame_dets.sort(key=lambda d: -d.score)
            out.extend(frame_dets[: config.max_detections])
    out.sort(key=lambda d: (d.video, d.frame, -d.score))
    return out


def evaluate_detector(
    model: CDDetector, eval_set: EvalSet, score_floor: float = 0.05
) -> EvalReport:
    """Inference over an EvalSet followed by bottom-half mAP@0.5."""
    frames = [
        (fr.video, fr.frame, eval_set.images[(fr.video, fr.frame)])
        for fr in eval_set.frames
    ]
    dets = infer(model, frames, score_floor=score_floor)
    report = map_bottom_half(dets, eval_set.frames, eval_set.frame_height)
    report.config_hash = config_hash(model.config)
    return report


def save_checkpoint(path: str | Path, model: CDDetector) -> None:
    """Single-file checkpoint: weights, the config, and its hash."""
    torch.save(
        {
            "state_dict": model.state_dict(),
            "config": to_plain_dict(model.config),
            "config_hash": config_hash(model.config),
        },
        str(path),
    )


def load_checkpoint(path: str | Path) -> CDDetector:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    blob = torch.load(str(p), map_location="cpu", weights_only=False)
    for key in ("state_dict", "config", "config_hash"):
        if key not in blob:
            raise DataError(f"checkpoint {p} is missing '{key}'")
    config = dataclass_from_dict(DetectorConfig, blob["config"])
    if config_hash(config) != blob["config_hash"]:
        raise DataError(
            f"checkpoint {p} config hash mismatch: stored "
            f"{blob['config_hash']}, recomputed {config_hash(config)}"
        )
    model = CDDetector(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model

"""Frame-level substrate classification in two regimes.

A single multi-label network scores all four substrates at once; the combined
regime trains one binary network per substrate and stacks the four sigmoid
outputs into the same score vector. Both regimes consume the same frame
records and are scored with the same threshold-free average-precision
routine, so they stay directly comparable. Temporal evaluation samples test
videos at one frame per second (`sample_test_wv`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .annotations import (
    SUBSTRATE_ORDER,
    SubstrateClass,
    SubstrateInterval,
    frame_substrate_labels,
    substrate_multihot,
)
from .config import SubstrateHyper, config_hash, to_plain_dict
from .errors import DataError, NumericError
from .evaluate import classification_average_precision

N_SUBSTRATES = len(SUBSTRATE_ORDER)


@dataclass(frozen=True)
class SubstratePrediction:
    """Sigmoid confidence per substrate for one frame, in B, C, M, R order."""

    video: str
    frame: int
    scores: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if len(self.scores) != N_SUBSTRATES:
            raise DataError(f"expected {N_SUBSTRATES} scores, got {len(self.scores)}")
        if not all(0.0 <= s <= 1.0 for s in self.scores):
            raise DataError(f"scores must lie in [0, 1], got {self.scores}")


def write_substrate_predictions(
    path: str | Path, predictions: Iterable[SubstratePrediction]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(
                json.dumps(
                    {"video": p.video, "frame": p.frame, "scores": list(p.scores)}
                )
                + "\n"
            )


def read_substrate_predictions(path: str | Path) -> list[SubstratePrediction]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                SubstratePrediction(rec["video"], rec["frame"], tuple(rec["scores"]))
            )
    return out


# --- models ----------------------------------------------------------------------


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class SubstrateNet(nn.Module):
    """Small conv classifier: strided stages, global average pool, linear head."""

    def __init__(self, channels: Sequence[int], n_out: int):
        super().__init__()
        if n_out < 1:
            raise DataError("n_out must be positive")
        layers: list[nn.Module] = []
        c_in = 3
        for c in channels:
            layers += [
                nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                _group_norm(c),
                nn.ReLU(inplace=True),
            ]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_in, n_out)
        self.n_out = n_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x - 0.5)
        return self.head(self.pool(f).flatten(1))


class CombinedSubstrateModel(nn.Module):
    """Four independent binary classifiers stacked in substrate order."""

    def __init__(self, models: Sequence[SubstrateNet]):
        super().__init__()
        if len(models) != N_SUBSTRATES:
            raise DataError(f"expected {N_SUBSTRATES} binary models, got {len(models)}")
        if any(m.n_out != 1 for m in models):
            raise DataError("combined regime requires single-logit models")
        self.models = nn.ModuleList(models)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([m(x) for m in self.models], dim=1)


# --- training --------------------------------------------------------------------


@dataclass(frozen=True)
class SubstrateTrainResult:
    model: nn.Module
    best_epoch: int
    best_map: float
    val_map_trace: list[float]


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1) / 255.0


def _stack_images(frames: Sequence) -> torch.Tensor:
    return torch.stack([_image_tensor(f.image) for f in frames])


def _labels_matrix(frames: Sequence) -> np.ndarray:
    out = np.stack([np.asarray(f.substrates, dtype=np.float32) for f in frames])
    if out.shape[1] != N_SUBSTRATES:
        raise DataError(f"substrate labels must have {N_SUBSTRATES} columns")
    return out


@torch.no_grad()
def predict_scores(
    model: nn.Module, images: Sequence[np.ndarray], batch_size: int = 32
) -> np.ndarray:
    """Sigmoid score matrix (N, K) for raw uint8 HWC frames."""
    model.eval()
    width = getattr(model, "n_out", N_SUBSTRATES)
    chunks = []
    for i in range(0, len(images), batch_size):
        x = torch.stack([_image_tensor(im) for im in images[i : i + batch_size]])
        chunks.append(torch.sigmoid(model(x)).numpy())
    if not chunks:
        return np.zeros((0, width), dtype=np.float32)
    return np.concatenate(chunks).astype(np.float32)


def substrate_map(
    scores: np.ndarray, labels: np.ndarray
) -> tuple[float | None, list[float | None]]:
    """Mean AP over the label columns that have at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DataError("scores and labels must be matching 2-D matrices")
    per_class = [
        classification_average_precision(scores[:, j], labels[:, j] > 0.5)
        for j in range(scores.shape[1])
    ]
    defined = [ap for ap in per_class if ap is not None]
    return (float(np.mean(defined)) if defined else None), per_class


def _run_training(
    net: nn.Module,
    train_images: torch.Tensor,
    train_targets: torch.Tensor,
    val_images: Sequence[np.ndarray],
    val_labels: np.ndarray,
    hyper: SubstrateHyper,
) -> SubstrateTrainResult:
    """Shared epoch loop; model selection by val mAP over the scored columns."""
    if not np.any(val_labels > 0.5):
        raise DataError("validation split has no positive labels to rank")
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([max(0, hyper.seed), 31]))
    n = train_images.shape[0]
    best_map, best_epoch, best_state = -1.0, -1, None
    trace: list[float] = []
    for epoch in range(hyper.max_epochs):
        net.train()
        perm = order_rng.permutation(n)
        for lo in range(0, n, hyper.batch_size):
            idx = perm[lo : lo + hyper.batch_size]
            logits = net(train_images[idx])
            loss = nn.functional.binary_cross_entropy_with_logits(
                logits, train_targets[idx]
            )
            if not torch.isfinite(loss):
                raise NumericError(
                    f"substrate training loss became non-finite at epoch {epoch}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        scores = predict_scores(net, val_images, hyper.batch_size)
        val_map, _ = substrate_map(scores, val_labels)
        assert val_map is not None
        trace.append(val_map)
        if val_map > best_map:
            best_map, best_epoch = val_map, epoch
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
    assert best_state is not None
    net.load_state_dict(best_state)
    net.eval()
    return SubstrateTrainResult(net, best_epoch, best_map, trace)


def train_single(
    train_frames: Sequence, val_frames: Sequence, hyper: SubstrateHyper
) -> SubstrateTrainResult:
    """One multi-label network scoring all four substrates at once."""
    if not train_frames:
        raise DataError("substrate training set is empty")
    if not val_frames:
        raise DataError("substrate validation set is empty")
    train_images = _stack_images(train_frames)
    train_labels = torch.from_numpy(_labels_matrix(train_frames))
    val_labels = _labels_matrix(val_frames)
    val_images = [f.image for f in val_frames]
    torch.manual_seed(hyper.seed)
    net = SubstrateNet(hyper.channels, N_SUBSTRATES)
    return _run_training(net, train_images, train_labels, val_images, val_labels, hyper)


@dataclass(frozen=True)
class CombinedTrainResult:
    model: CombinedSubstrateModel
    per_substrate: tuple[SubstrateTrainResult, ...]


def _train_binary(
    train_images: torch.Tensor,
    targets_one: torch.Tensor,
    val_images: Sequence[np.ndarray],
    val_labels_one: np.ndarray,
    hyper: SubstrateHyper,
    index: int,
) -> SubstrateTrainResult:
    """One binary model; receives only its own substrate's label column."""
    seed = int(
        np.random.SeedSequence([max(0, hyper.seed), 53, index]).generate_state(1)[0]
    )
    torch.manual_seed(seed)
    net = SubstrateNet(hyper.channels, 1)
    return _run_training(
        net,
        train_images,
        targets_one.reshape(-1, 1),
        val_images,
        val_labels_one.reshape(-1, 1),
        hyper,
    )


def train_combined(
    train_frames: Sequence, val_frames: Sequence, hyper: SubstrateHyper
) -> CombinedTrainResult:
    """Four per-substrate binary networks whose sigmoids stack in B,C,M,R order.

    Each binary model is handed exactly one label column, so no model can see
    the other substrates' annotations.
    """
    if not train_frames:
        raise DataError("substrate training set is empty")
    if not val_frames:
        raise DataError("substrate validation set is empty")
    train_images = _stack_images(train_frames)
    train_labels = _labels_matrix(train_frames)
    val_labels = _labels_matrix(val_frames)
    missing = [
        SUBSTRATE_ORDER[j].value
        for j in range(N_SUBSTRATES)
        if not np.any(val_labels[:, j] > 0.5)
    ]
    if missing:
        raise DataError(
            "combined training needs every substrate present in validation; "
            f"missing: {', '.join(missing)}"
        )
    val_images = [f.image for f in val_frames]
    results = []
    for j in range(N_SUBSTRATES):
        results.append(
            _train_binary(
                train_images,
                torch.from_numpy(train_labels[:, j].copy()),
                val_images,
                val_labels[:, j].copy(),
                hyper,
                j,
            )
        )
    model = CombinedSubstrateModel([r.model for r in results])
    return CombinedTrainResult(model, tuple(results))


# --- checkpoints -----------------------------------------------------------------


def save_substrate_checkpoint(
    path: str | Path, model: SubstrateNet, hyper: SubstrateHyper
) -> None:
    blob = {
        "state_dict": model.state_dict(),
        "hyper": to_plain_dict(hyper),
        "n_out": model.n_out,
    }
    blob["hyper_hash"] = config_hash(blob["hyper"])
    torch.save(blob, path)


def load_substrate_checkpoint(path: str | Path) -> tuple[SubstrateNet, SubstrateHyper]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"substrate checkpoint {path} does not exist")
    blob = torch.load(path, weights_only=False)
    for key in ("state_dict", "hyper", "n_out", "hyper_hash"):
        if key not in blob:
            raise DataError(f"substrate checkpoint {path} is missing '{key}'")
    if config_hash(blob["hyper"]) != blob["hyper_hash"]:
        raise DataError(f"substrate checkpoint {path} fails its config-hash check")
    from .config import dataclass_from_dict

    hyper = dataclass_from_dict(SubstrateHyper, blob["hyper"])
    net = SubstrateNet(hyper.channels, blob["n_out"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net, hyper


# --- test_wv sampling ------------------------------------------------------------


@dataclass(frozen=True)
class TestWvFrame:
    video: str
    frame: int
    labels: tuple[float, float, float, float]  # multi-hot in B, C, M, R order


def test_wv_indices(n_frames: int, fps: float) -> list[int]:
    """Frame indices sampled at one frame per second: round(k*fps), k = 0, 1, ...

    A video shorter than one second yields no samples.
    """
    if fps <= 0:
        raise DataError(f"fps must be positive, got {fps}")
    if n_frames <= 0:
        return []
    count = int(math.floor(n_frames / fps))
    out: list[int] = []
    for k in range(count):
        i = int(round(k * fps))
        if i < n_frames and (not out or i != out[-1]):
            out.append(i)
    return out


def sample_test_wv(
    videos: Iterable[tuple[str, int, float, Sequence[SubstrateInterval]]],
) -> list[TestWvFrame]:
    """One labeled frame per second from each (name, n_frames, fps, intervals)."""
    out: list[TestWvFrame] = []
    for name, n_frames, fps, intervals in videos:
        for i in test_wv_indices(n_frames, fps):
            labels = substrate_multihot(frame_substrate_labels(intervals, i / fps))
            out.append(TestWvFrame(name, i, tuple(float(v) for v in labels)))
    return out

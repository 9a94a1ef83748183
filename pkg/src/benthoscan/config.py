"""Run configuration dataclasses, YAML round-tripping, and config hashing.

Every artifact the pipeline writes (datasets, checkpoints, detection dumps,
sweep rows) is stamped with the 12-hex digest of the configuration that
produced it, and consumers refuse to mix artifacts whose stamps disagree.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import DataError

__all__ = [
    "DetectorConfig",
    "SubstrateHyper",
    "ExperimentSpec",
    "config_hash",
    "to_plain_dict",
    "dataclass_from_dict",
    "load_yaml_config",
    "save_yaml_config",
]


@dataclass(frozen=True)
class DetectorConfig:
    """Hyperparameters for the two-stage detector.

    ``alpha`` scales the substrate-classification loss, ``beta`` scales the
    global context vector before fusion (0 disables fusion entirely), and
    ``rho`` is the fraction of sampled negative anchors dropped from the
    objectness loss.
    """

    alpha: float = 0.0
    beta: float = 0.0
    rho: float = 0.0
    lr: float = 1e-3
    batch_size: int = 2
    max_epochs: int = 15
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_sample_size: int = 256
    rpn_positive_fraction: float = 0.5
    box_feature_dim: int = 1024
    # None means "same as box_feature_dim".
    global_feature_dim: int | None = None
    seed: int = 0
    # Input frames are square with this side length; must be divisible by the
    # backbone stride (16 with the default four stages).
    image_size: int = 256
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    roi_size: int = 7
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    proposal_nms_iou: float = 0.7
    pre_nms_top_n: int = 600
    post_nms_top_n: int = 128
    roi_sample_size: int = 64
    roi_positive_fraction: float = 0.25
    roi_positive_iou: float = 0.5
    detection_nms_iou: float = 0.5
    max_detections: int = 100

    _TUPLE_FIELDS = ("anchor_scales", "anchor_ratios", "backbone_channels")

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise DataError(f"rho must lie in [0, 1], got {self.rho}")
        if self.alpha < 0 or self.beta < 0:
            raise DataError("alpha and beta must be non-negative")
        if self.lr <= 0:
            raise DataError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise DataError("batch_size and max_epochs must be at least 1")
        if not self.anchor_scales or not self.anchor_ratios:
            raise DataError("need at least one anchor scale and ratio")
        if self.rpn_sample_size < 1:
            raise DataError("rpn_sample_size must be at least 1")
        if not 0.0 < self.rpn_positive_fraction < 1.0:
            raise DataError("rpn_positive_fraction must lie in (0, 1)")
        if self.box_feature_dim < 1:
            raise DataError("box_feature_dim must be positive")
        if self.global_feature_dim is not None and self.global_feature_dim < 1:
            raise DataError("global_feature_dim must be positive")
        stride = 2 ** len(self.backbone_channels)
        if self.image_size % stride != 0:
            raise DataError(
                f"image_size {self.image_size} is not divisible by the "
                f"backbone stride {stride}"
            )

    @property
    def resolved_global_dim(self) -> int:
        return (
            self.box_feature_dim
            if self.global_feature_dim is None
            else self.global_feature_dim
        )

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)


@dataclass(frozen=True)
class SubstrateHyper:
    """Hyperparameters for the frame-level substrate classifiers."""

    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 10
    channels: tuple[int, ...] = (8, 16, 32)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise DataError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise DataError("batch_size and max_epochs must be at least 1")
        if not self.channels:
            raise DataError("need at least one channel width")


@dataclass(frozen=True)
class ExperimentSpec:
    """A named experiment: where the data lives, how to train, where to write.

    ``dataset`` is either a path to a generated dataset directory or, when
    ``generator`` is set, the scene configuration to synthesize one from.
    """

    name: str
    dataset: str = ""
    generator: dict[str, Any] | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    tau: float = 0.5
    gamma: int = 20
    out_dir: str = "runs"
    repeat: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.name:
            raise DataError("experiment name must be non-empty")
        if not self.dataset and self.generator is None:
            raise DataError("experiment needs a dataset path or a generator config")
        if self.repeat < 1:
            raise DataError("repeat must be at least 1")
        if not 0.0 <= self.tau <= 1.0:
            raise DataError("tau must lie in [0, 1]")
        if self.gamma < 1:
            raise DataError("gamma must be at least 1")


def to_plain_dict(obj: Any) -> Any:
    """Recursively convert dataclasses/tuples to JSON-friendly builtins."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: to_plain_dict(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    if isinstance(obj, (list, tuple)):
        return [to_plain_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_plain_dict(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(config: Any) -> str:
    """12-hex digest of a configuration (dataclass or plain dict).

    The digest is computed over canonical JSON (sorted keys, no whitespace
    variation), so logically equal configs always hash alike.
    """
    plain = to_plain_dict(config)
    blob = json.dumps(plain, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def dataclass_from_dict(cls: type, data: dict[str, Any]) -> Any:
    """Build a dataclass from a plain dict, coercing lists to tuples where
    the field annotation is a tuple type. Unknown keys are an error."""
    if not isinstance(data, dict):
        raise DataError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise DataError(
            f"unknown {cls.__name__} fields: {', '.join(sorted(unknown))}"
        )
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        f = names[key]
        if isinstance(value, list) and "tuple" in str(f.type):
            value = tuple(value)
        elif isinstance(value, dict) and f.type in ("DetectorConfig",):
            value = dataclass_from_dict(DetectorConfig, value)
        kwargs[key] = value
    return cls(**kwargs)


def load_yaml_config(path: str | Path, cls: type) -> Any:
    """Load a dataclass config from a YAML file."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"malformed YAML in {p}: {exc}") from exc
    if raw is None:
        raw = {}
    return dataclass_from_dict(cls, raw)


def save_yaml_config(path: str | Path, config: Any) -> None:
    Path(path).write_text(yaml.safe_dump(to_plain_dict(config), sort_keys=False))

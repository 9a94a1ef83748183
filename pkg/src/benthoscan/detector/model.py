"""Two-stage detector with negative dropping and frame-context conditioning.

The architecture is a compact Faster-R-CNN-style pipeline: a small GroupNorm
convolutional backbone (stride 16 with the default four stages), a region
proposal head, RoIAlign pooling, and a two-layer FC box head with per-class
regression. Three knobs extend the plain detector:

- ``rho``   drops a uniform fraction of the sampled negative anchors from the
            objectness loss (useful when annotation is incomplete and
            "background" regions may contain unlabeled individuals);
- ``alpha`` adds a frame-level substrate classification loss on the flattened
            backbone features;
- ``beta``  concatenates a scaled global context vector (a 1D strided
            convolution over the flattened backbone features) onto every RoI
            feature before the classification and regression layers.

With alpha = beta = rho = 0 the model is exactly the plain detector: the
context branch is not instantiated at all, so parameter counts match
``VanillaDetector`` and per-batch losses agree to float precision.

Loss evaluation is split into two phases. ``make_plan`` performs everything
non-differentiable (anchor assignment, balanced sampling, negative dropping,
proposal generation, RoI sampling and target assignment) under ``no_grad``
and freezes the choices into a ``BatchPlan``. ``compute_loss`` evaluates the
differentiable losses for a plan; re-evaluating the same plan after a
parameter perturbation is therefore a smooth function of the parameters,
which is what the finite-difference gradient check needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms, roi_align

from ..annotations import SPECIES_ORDER
from ..config import DetectorConfig
from ..errors import DataError

N_SPECIES = len(SPECIES_ORDER)
N_CLASSES = N_SPECIES + 1  # index 0 is background
N_SUBSTRATES = 4


# --- geometry ------------------------------------------------------------------


def make_anchors(
    feat_h: int,
    feat_w: int,
    stride: int,
    scales: tuple[float, ...],
    ratios: tuple[float, ...],
    device: torch.device | str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Anchor boxes (xyxy) for every cell, cell-major then anchor-major.

    A scale s and aspect ratio r produce a box of area s*s with height/width
    ratio r, centered on the cell center.
    """
    base = []
    for s in scales:
        for r in ratios:
            w = math.sqrt(s * s / r)
            h = w * r
            base.append((-w / 2.0, -h / 2.0, w / 2.0, h / 2.0))
    base_t = torch.tensor(base, device=device, dtype=dtype)  # (A, 4)
    ys = (torch.arange(feat_h, device=device, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(feat_w, device=device, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base_t.unsqueeze(0)).reshape(-1, 4)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of two (N, 4) / (M, 4) xyxy box sets."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def encode_boxes(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Regression targets (tx, ty, tw, th) of boxes relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return torch.stack(
        [
            (bcx - acx) / aw,
            (bcy - acy) / ah,
            torch.log(bw / aw),
            torch.log(bh / ah),
        ],
        dim=1,
    )


_MAX_LOG_SCALE = 4.0


def decode_boxes(
    deltas: torch.Tensor, anchors: torch.Tensor, clip_size: int | None = None
) -> torch.Tensor:
    """Inverse of encode_boxes, with the log-scale terms clamped for safety."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = torch.exp(deltas[:, 2].clamp(max=_MAX_LOG_SCALE)) * aw
    h = torch.exp(deltas[:, 3].clamp(max=_MAX_LOG_SCALE)) * ah
    boxes = torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1
    )
    if clip_size is not None:
        boxes = boxes.clamp(min=0.0, max=float(clip_size))
    return boxes


# --- modules -------------------------------------------------------------------


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups != 0:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class Backbone(nn.Module):
    """From-scratch conv trunk; each stage halves resolution."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for ch in channels:
            layers += [
                nn.Conv2d(in_ch, ch, 3, stride=2, padding=1),
                _group_norm(ch),
                nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, 3, padding=1),
                _group_norm(ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = ch
        self.body = nn.Sequential(*layers)
        self.out_channels = channels[-1]
        self.stride = 2 ** len(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x - 0.5)


class RPNHead(nn.Module):
    def __init__(self, in_channels: int, n_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.objectness = nn.Conv2d(in_channels, n_anchors, 1)
        self.deltas = nn.Conv2d(in_channels, n_anchors * 4, 1)
        self.n_anchors = n_anchors

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (obj (B, N), deltas (B, N, 4)) in anchor order: cell-major
        (row, column) then anchor index, matching make_anchors."""
        t = F.relu(self.conv(feat))
        b, _, h, w = t.shape
        obj = self.objectness(t).permute(0, 2, 3, 1).reshape(b, -1)
        dl = (
            self.deltas(t)
            .view(b, self.n_anchors, 4, h, w)
            .permute(0, 3, 4, 1, 2)
            .reshape(b, -1, 4)
        )
        return obj, dl


class ContextBranch(nn.Module):
    """Frame-level substrate logits and the global context vector.

    Both read the flattened backbone feature map (length L = C*H*W). The
    logits come from a single linear layer; the global vector comes from a
    bias-free strided 1D convolution whose stride s = floor(L / D) and kernel
    k = L - s*(D - 1) are chosen so the output length is exactly D. The
    kernel starts at the windowed mean (1/k) plus small noise.
    """

    def __init__(self, flat_len: int, global_dim: int):
        super().__init__()
        if global_dim > flat_len:
            raise DataError(
                f"global feature dim {global_dim} exceeds the flattened "
                f"feature length {flat_len}"
            )
        self.flat_len = flat_len
        self.global_dim = global_dim
        self.classifier = nn.Linear(flat_len, N_SUBSTRATES)
        stride = flat_len // global_dim
        kernel = flat_len - stride * (global_dim - 1)
        self.reduce = nn.Conv1d(1, 1, kernel_size=kernel, stride=stride, bias=False)
        with torch.no_grad():
            self.reduce.weight.fill_(1.0 / kernel)
            self.reduce.weight.add_(torch.randn_like(self.reduce.weight) * (0.01 / kernel))

    def _flat(self, feat: torch.Tensor) -> torch.Tensor:
        flat = feat.reshape(feat.shape[0], -1)
        if flat.shape[1] != self.flat_len:
            raise DataError(
                f"feature length {flat.shape[1]} does not match the context "
                f"branch built for length {self.flat_len}"
            )
        return flat

    def context_logits(self, feat: torch.Tensor) -> torch.Tensor:
        """(B, 4) substrate logits from a (B, C, H, W) feature map."""
        return self.classifier(self._flat(feat))

    def global_vector(self, feat: torch.Tensor) -> torch.Tensor:
        """(B, D) reduction of the flattened features."""
        flat = self._flat(feat)
        return self.reduce(flat.unsqueeze(1)).squeeze(1)


class BoxHead(nn.Module):
    """Two FC layers on pooled RoI features, then class and box predictions.

    ``fused_dim`` is the input width of the prediction layers: equal to
    ``feature_dim`` for the plain detector and feature_dim + global_dim when
    global fusion is enabled.
    """

    def __init__(self, in_channels: int, roi_size: int, feature_dim: int, fused_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_channels * roi_size * roi_size, feature_dim)
        self.fc2 = nn.Linear(feature_dim, feature_dim)
        self.cls = nn.Linear(fused_dim, N_CLASSES)
        self.reg = nn.Linear(fused_dim, N_CLASSES * 4)

    def features(self, pooled: torch.Tensor) -> torch.Tensor:
        x = pooled.flatten(start_dim=1)
        x = F.relu(self.fc1(x))
        return F.relu(self.fc2(x))

    def predict(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.cls(fused), self.reg(fused).view(-1, N_CLASSES, 4)


# --- negative dropping and fusion ------------------------------------------------


def nrd_filter(negatives, rho: float, rng: np.random.Generator):
    """Uniformly keep floor((1 - rho) * N) of the negatives, without replacement.

    rho = 0 returns the input unchanged and rho = 1 returns an empty list;
    neither endpoint consumes randomness. The kept subset preserves the input
    order.
    """
    if not 0.0 <= rho <= 1.0:
        raise DataError(f"rho must lie in [0, 1], got {rho}")
    items = list(negatives)
    if rho == 0.0:
        return items
    if rho == 1.0:
        return []
    n_keep = int(math.floor((1.0 - rho) * len(items)))
    if n_keep == len(items):
        return items
    idx = rng.choice(len(items), size=n_keep, replace=False)
    return [items[i] for i in sorted(int(i) for i in idx)]


def fuse_global(box_features: torch.Tensor, g: torch.Tensor, beta: float) -> torch.Tensor:
    """Concatenate beta * g onto every row of box_features; beta = 0 is a no-op.

    box_features is (R, D_box) and g is a (D_global,) vector for the frame the
    boxes came from. With beta > 0 the result is (R, D_box + D_global).
    """
    if beta < 0:
        raise DataError(f"beta must be non-negative, got {beta}")
    if beta == 0.0:
        return box_features
    rep = g.unsqueeze(0).expand(box_features.shape[0], -1)
    return torch.cat([box_features, beta * rep], dim=1)


# --- detectors -------------------------------------------------------------------


class CDDetector(nn.Module):
    """The full detector; context modules exist only when alpha or beta is on."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone_channels)
        if config.image_size % self.backbone.stride != 0:
            raise DataError(
                f"image_size {config.image_size} is not divisible by the "
                f"backbone stride {self.backbone.stride}"
            )
        self.feat_size = config.image_size // self.backbone.stride
        self.rpn = RPNHead(self.backbone.out_channels, config.n_anchors)
        self.has_context = config.alpha > 0 or config.beta > 0
        fused_dim = config.box_feature_dim + (
            config.resolved_global_dim if config.beta > 0 else 0
        )
        self.box_head = BoxHead(
            self.backbone.out_channels, config.roi_size, config.box_feature_dim, fused_dim
        )
        if self.has_context:
            flat_len = self.backbone.out_channels * self.feat_size * self.feat_size
            self.context = ContextBranch(flat_len, config.resolved_global_dim)
            self.register_buffer("context_pos_weight", torch.ones(N_SUBSTRATES))

    def set_context_pos_weight(self, n_pos: np.ndarray, n_neg: np.ndarray) -> None:
        """Per-substrate positive weights (n_neg + 1) / (n_pos + 1) from frame
        counts of the training split (add-one smoothed)."""
        if not self.has_context:
            return
        w = (np.asarray(n_neg, dtype=np.float64) + 1.0) / (
            np.asarray(n_pos, dtype=np.float64) + 1.0
        )
        self.context_pos_weight.copy_(torch.from_numpy(w).to(self.context_pos_weight))

    def anchors(self, device=None, dtype=torch.float32) -> torch.Tensor:
        return make_anchors(
            self.feat_size,
            self.feat_size,
            self.backbone.stride,
            self.config.anchor_scales,
            self.config.anchor_ratios,
            device or next(self.parameters()).device,
            dtype,
        )


class VanillaDetector(nn.Module):
    """Plain two-stage reference: no negative dropping, no context branch.

    Shares the submodule classes (so state dicts line up with a CDDetector
    built from the same dimensions) but its loss path, `vanilla_loss`, never
    touches the dropping or context code.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        if config.alpha != 0 or config.beta != 0 or config.rho != 0:
            raise DataError("VanillaDetector requires alpha = beta = rho = 0")
        self.config = config
        self.backbone = Backbone(config.backbone_channels)
        self.feat_size = config.image_size // self.backbone.stride
        self.rpn = RPNHead(self.backbone.out_channels, config.n_anchors)
        self.box_head = BoxHead(
            self.backbone.out_channels,
            config.roi_size,
            config.box_feature_dim,
            config.box_feature_dim,
        )
        self.has_context = False

    def anchors(self, device=None, dtype=torch.float32) -> torch.Tensor:
        return make_anchors(
            self.feat_size,
            self.feat_size,
            self.backbone.stride,
            self.config.anchor_scales,
            self.config.anchor_ratios,
            device or next(self.parameters()).device,
            dtype,
        )


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- batches, plans, losses -------------------------------------------------------


@dataclass
class TrainBatch:
    """One step of training data.

    images: (B, 3, S, S) float tensor in [0, 1];
    boxes: per image (Ni, 4) xyxy float tensors (may be empty);
    labels: per image (Ni,) long tensors of species indices (0..9);
    substrates: optional (B, 4) multi-hot float tensor.
    """

    images: torch.Tensor
    boxes: list[torch.Tensor]
    labels: list[torch.Tensor]
    substrates: torch.Tensor | None = None

    def __post_init__(self) -> None:
        b = self.images.shape[0]
        if len(self.boxes) != b or len(self.labels) != b:
            raise DataError("boxes and labels must have one entry per image")
        if self.substrates is not None and self.substrates.shape[0] != b:
            raise DataError("substrates must have one row per image")


@dataclass
class ImagePlan:
    rpn_pos: torch.Tensor  # (P,) long anchor indices
    rpn_neg: torch.Tensor  # (K,) long anchor indices kept after dropping
    rpn_reg_targets: torch.Tensor  # (P, 4)
    n_neg_sampled: int  # negatives sampled before dropping
    proposals: torch.Tensor  # (R, 4) sampled RoIs, treated as constants
    roi_labels: torch.Tensor  # (R,) long, 0 = background
    roi_reg_targets: torch.Tensor  # (F, 4) for the foreground RoIs
    roi_fg: torch.Tensor  # (F,) long indices into proposals


@dataclass
class BatchPlan:
    images: list[ImagePlan] = field(default_factory=list)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss tensors; total = l_d + l_p + alpha * l_c by construction.

    l_d is the second-stage (classification + regression) loss, l_p the
    proposal-stage loss, l_c the substrate context loss. Counter fields sum
    over the batch.
    """

    l_d: torch.Tensor
    l_p: torch.Tensor
    l_c: torch.Tensor
    total: torch.Tensor
    n_rpn_pos: int
    n_rpn_neg_sampled: int
    n_rpn_neg_kept: int


def _sample_balanced(
    rng: np.random.Generator,
    pos: np.ndarray,
    neg: np.ndarray,
    size: int,
    positive_fraction: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard balanced sampling: up to size*fraction positives, negatives
    fill the remainder. Subsampling draws without replacement and the result
    stays index-sorted. The rng is consumed only when a side is subsampled."""
    n_pos_target = int(round(size * positive_fraction))
    if len(pos) > n_pos_target:
        pos = np.sort(rng.choice(pos, size=n_pos_target, replace=False))
    n_neg_target = size - len(pos)
    if len(neg) > n_neg_target:
        neg = np.sort(rng.choice(neg, size=n_neg_target, replace=False))
    return pos, neg


def _assign_rpn(
    anchors: torch.Tensor,
    gt: torch.Tensor,
    pos_iou: float,
    neg_iou: float,
) -> tuple[np.ndarray, np.ndarray, torch.Tensor]:
    """Anchor assignment: (positive indices, negative indices, matched gt boxes
    for the positives). Positives are anchors with IoU >= pos_iou plus, for
    every gt box, the anchors tying its best IoU (so no gt goes unclaimed);
    negatives fall below neg_iou; the rest are ignored."""
    n = anchors.shape[0]
    if gt.numel() == 0:
        return np.empty(0, dtype=np.int64), np.arange(n), torch.empty((0, 4))
    m = box_iou_matrix(anchors, gt)
    max_iou, argmax = m.max(dim=1)
    gt_best = m.max(dim=0).values
    forced = ((m == gt_best.unsqueeze(0)) & (gt_best.unsqueeze(0) > 0)).any(dim=1)
    pos_mask = (max_iou >= pos_iou) | forced
    neg_mask = (max_iou < neg_iou) & ~pos_mask
    pos = pos_mask.nonzero(as_tuple=True)[0]
    matched = gt[argmax[pos]]
    return (
        pos.numpy(),
        neg_mask.nonzero(as_tuple=True)[0].numpy(),
        matched,
    )


def _generate_proposals(
    anchors: torch.Tensor,
    obj: torch.Tensor,
    deltas: torch.Tensor,
    config: DetectorConfig,
) -> torch.Tensor:
    """Decode, clip, drop slivers, NMS, and keep the top boxes (one image)."""
    scores = obj.sigmoid()
    k = min(config.pre_nms_top_n, scores.numel())
    top = torch.topk(scores, k).indices
    boxes = decode_boxes(deltas[top], anchors[top], clip_size=config.image_size)
    wide = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
    boxes, kept_scores = boxes[wide], scores[top][wide]
    if boxes.numel() == 0:
        return boxes
    keep = nms(boxes, kept_scores, config.proposal_nms_iou)
    return boxes[keep[: config.post_nms_top_n]]


def _plan_rois(
    proposals: torch.Tensor,
    gt: torch.Tensor,
    gt_labels: torch.Tensor,
    config: DetectorConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Sample second-stage RoIs and their targets. Ground-truth boxes are
    appended to the proposal pool so positives always exist."""
    if gt.numel():
        pool = torch.cat([proposals, gt], dim=0)
        m = box_iou_matrix(pool, gt)
        max_iou, argmax = m.max(dim=1)
        fg_mask = max_iou >= config.roi_positive_iou
        labels = torch.where(
            fg_mask, gt_labels[argmax] + 1, torch.zeros_like(argmax)
        )
        pos = fg_mask.nonzero(as_tuple=True)[0].numpy()
        neg = (~fg_mask).nonzero(as_tuple=True)[0].numpy()
    else:
        pool = proposals
        labels = torch.zeros(pool.shape[0], dtype=torch.long)
        argmax = torch.zeros(pool.shape[0], dtype=torch.long)
        pos = np.empty(0, dtype=np.int64)
        neg = np.arange(pool.shape[0])
    pos_sel, neg_sel = _sample_balanced(
        rng, pos, neg, config.roi_sample_size, config.roi_positive_fraction
    )
    sel = np.concatenate([pos_sel, neg_sel])
    sel_t = torch.from_numpy(sel).long()
    rois = pool[sel_t]
    roi_labels = labels[sel_t]
    fg_local = (roi_labels > 0).nonzero(as_tuple=True)[0]
    if fg_local.numel():
        matched_gt = gt[argmax[sel_t][fg_local]]
        reg_targets = encode_boxes(matched_gt, rois[fg_local])
    else:
        reg_targets = torch.empty((0, 4))
    return rois, roi_labels, reg_targets, fg_local


def make_plan(
    model: CDDetector | VanillaDetector,
    batch: TrainBatch,
    rng: np.random.Generator | None = None,
    *,
    apply_nrd: bool | None = None,
) -> BatchPlan:
    """Freeze every sampling decision for one batch.

    apply_nrd defaults to True for CDDetector and is forced off for the
    vanilla path. The rng default is seeded from the model config so repeated
    calls with the same weights and batch are identical.
    """
    config = model.config
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if apply_nrd is None:
        apply_nrd = isinstance(model, CDDetector)
    plan = BatchPlan()
    with torch.no_grad():
        feats = model.backbone(batch.images)
        obj, deltas = model.rpn(feats)
        anchors = model.anchors(dtype=batch.images.dtype)
        for i in range(batch.images.shape[0]):
            gt = batch.boxes[i].to(anchors.dtype)
            pos, neg, matched = _assign_rpn(
                anchors, gt, config.rpn_positive_iou, config.rpn_negative_iou
            )
            pos_sel, neg_sel = _sample_balanced(
                rng, pos, neg, config.rpn_sample_size, config.rpn_positive_fraction
            )
            n_neg_sampled = len(neg_sel)
            if apply_nrd:
                neg_kept = np.asarray(
                    nrd_filter(neg_sel, config.rho, rng), dtype=np.int64
                )
            else:
                neg_kept = neg_sel
            pos_order = {int(a): j for j, a in enumerate(pos)}
            if len(pos_sel):
                matched_sel = matched[[pos_order[int(a)] for a in pos_sel]]
                reg_targets = encode_boxes(matched_sel, anchors[pos_sel])
            else:
                reg_targets = torch.empty((0, 4), dtype=anchors.dtype)
            proposals = _generate_proposals(anchors, obj[i], deltas[i], config)
            rois, roi_labels, roi_reg, roi_fg = _plan_rois(
                proposals, gt, batch.labels[i], config, rng
            )
            plan.images.append(
                ImagePlan(
                    rpn_pos=torch.from_numpy(np.asarray(pos_sel, dtype=np.int64)),
                    rpn_neg=torch.from_numpy(np.asarray(neg_kept, dtype=np.int64)),
                    rpn_reg_targets=reg_targets,
                    n_neg_sampled=n_neg_sampled,
                    proposals=rois,
                    roi_labels=roi_labels,
                    roi_reg_targets=roi_reg,
                    roi_fg=roi_fg,
                )
            )
    return plan


def _rpn_losses(
    obj_i: torch.Tensor, deltas_i: torch.Tensor, ip: ImagePlan
) -> torch.Tensor:
    """Proposal-stage loss for one image: objectness BCE over the sampled
    positives and kept negatives, plus smooth-L1 regression on positives."""
    idx = torch.cat([ip.rpn_pos, ip.rpn_neg])
    zero = obj_i.sum() * 0.0
    if idx.numel():
        targets = torch.cat(
            [
                torch.ones(ip.rpn_pos.numel(), dtype=obj_i.dtype),
                torch.zeros(ip.rpn_neg.numel(), dtype=obj_i.dtype),
            ]
        )
        obj_loss = F.binary_cross_entropy_with_logits(obj_i[idx], targets)
    else:
        obj_loss = zero
    if ip.rpn_pos.numel():
        reg_loss = F.smooth_l1_loss(
            deltas_i[ip.rpn_pos], ip.rpn_reg_targets, reduction="sum"
        ) / max(1, idx.numel())
    else:
        reg_loss = zero
    return obj_loss + reg_loss


def _box_losses(
    cls_logits: torch.Tensor, regs: torch.Tensor, ip: ImagePlan
) -> torch.Tensor:
    """Second-stage loss for one image: cross entropy over all sampled RoIs
    plus smooth-L1 on the foreground RoIs' own-class regressions."""
    zero = cls_logits.sum() * 0.0
    if ip.roi_labels.numel() == 0:
        return zero
    cls_loss = F.cross_entropy(cls_logits, ip.roi_labels)
    if ip.roi_fg.numel():
        fg_regs = regs[ip.roi_fg, ip.roi_labels[ip.roi_fg], :]
        reg_loss = F.smooth_l1_loss(
            fg_regs, ip.roi_reg_targets, reduction="sum"
        ) / max(1, ip.roi_labels.numel())
    else:
        reg_loss = zero
    return cls_loss + reg_loss


def _pool_rois(
    model, feats: torch.Tensor, plan: BatchPlan, dtype: torch.dtype
) -> torch.Tensor:
    boxes = [ip.proposals.to(dtype) for ip in plan.images]
    return roi_align(
        feats,
        boxes,
        output_size=(model.config.roi_size, model.config.roi_size),
        spatial_scale=1.0 / model.backbone.stride,
        sampling_ratio=2,
        aligned=True,
    )


def compute_loss(
    model: CDDetector,
    batch: TrainBatch,
    rng: np.random.Generator | None = None,
    plan: BatchPlan | None = None,
) -> LossBreakdown:
    """Per-batch training loss of the full detector.

    Sampling decisions come from `plan` when given (see make_plan), otherwise
    a plan is drawn internally with `rng`. Requires substrate labels in the
    batch when alpha > 0.
    """
    config = model.config
    if config.alpha > 0 and batch.substrates is None:
        raise DataError("alpha > 0 requires substrate labels in the batch")
    if plan is None:
        plan = make_plan(model, batch, rng)
    b = batch.images.shape[0]
    dtype = batch.images.dtype

    feats = model.backbone(batch.images)
    obj, deltas = model.rpn(feats)
    pooled = _pool_rois(model, feats, plan, dtype)
    box_feats = model.box_head.features(pooled)

    if config.beta > 0:
        g = model.context.global_vector(feats)
        fused_parts = []
        offset = 0
        for i, ip in enumerate(plan.images):
            r = ip.proposals.shape[0]
            fused_parts.append(
                fuse_global(box_feats[offset : offset + r], g[i], config.beta)
            )
            offset += r
        fused = torch.cat(fused_parts, dim=0)
    else:
        fused = box_feats
    cls_logits, regs = model.box_head.predict(fused)

    l_p = batch.images.sum() * 0.0
    l_d = batch.images.sum() * 0.0
    offset = 0
    n_pos = n_neg_sampled = n_neg_kept = 0
    for i, ip in enumerate(plan.images):
        l_p = l_p + _rpn_losses(obj[i], deltas[i], ip)
        r = ip.proposals.shape[0]
        l_d = l_d + _box_losses(
            cls_logits[offset : offset + r], regs[offset : offset + r], ip
        )
        offset += r
        n_pos += ip.rpn_pos.numel()
        n_neg_sampled += ip.n_neg_sampled
        n_neg_kept += ip.rpn_neg.numel()
    l_p = l_p / b
    l_d = l_d / b

    if config.alpha > 0:
        logits = model.context.context_logits(feats)
        l_c = F.binary_cross_entropy_with_logits(
            logits,
            batch.substrates.to(logits.dtype),
            pos_weight=model.context_pos_weight.to(logits.dtype),
        )
    else:
        l_c = batch.images.sum() * 0.0

    total = l_d + l_p + config.alpha * l_c
    return LossBreakdown(
        l_d=l_d,
        l_p=l_p,
        l_c=l_c,
        total=total,
        n_rpn_pos=n_pos,
        n_rpn_neg_sampled=n_neg_sampled,
        n_rpn_neg_kept=n_neg_kept,
    )


def vanilla_loss(
    model: VanillaDetector,
    batch: TrainBatch,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Training loss of the plain two-stage detector.

    Written without any reference to negative dropping, context logits, or
    global fusion; serves as the reduction reference for the full model at
    alpha = beta = rho = 0.
    """
    plan = make_plan(model, batch, rng, apply_nrd=False)
    b = batch.images.shape[0]
    feats = model.backbone(batch.images)
    obj, deltas = model.rpn(feats)
    pooled = _pool_rois(model, feats, plan, batch.images.dtype)
    box_feats = model.box_head.features(pooled)
    cls_logits, regs = model.box_head.predict(box_feats)

    l_p = batch.images.sum() * 0.0
    l_d = batch.images.sum() * 0.0
    offset = 0
    n_pos = n_neg = 0
    for i, ip in enumerate(plan.images):
        l_p = l_p + _rpn_losses(obj[i], deltas[i], ip)
        r = ip.proposals.shape[0]
        l_d = l_d + _box_losses(
            cls_logits[offset : offset + r], regs[offset : offset + r], ip
        )
        offset += r
        n_pos += ip.rpn_pos.numel()
        n_neg += ip.rpn_neg.numel()
    l_p = l_p / b
    l_d = l_d / b
    zero = batch.images.sum() * 0.0
    return LossBreakdown(
        l_d=l_d,
        l_p=l_p,
        l_c=zero,
        total=l_d + l_p,
        n_rpn_pos=n_pos,
        n_rpn_neg_sampled=n_neg,
        n_rpn_neg_kept=n_neg,
    )

"""Box geometry: IoU, anchors, RPN target assignment, NMS, and ROI align.

Boxes are ``[x1, y1, x2, y2]`` in pixel coordinates with ``x1 < x2`` and
``y1 < y2``. A single box is a length-4 array, a set of boxes an ``(N, 4)``
array. All plain box arithmetic is numpy; ``roi_align`` is torch so that
gradients flow from pooled features back into the feature map (never into
the box coordinates, which are treated as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Log-scale box deltas are clamped to this magnitude before exponentiation
# so an untrained RPN cannot produce overflowing or degenerate boxes.
MAX_LOG_SIZE_DELTA = 4.0


def as_boxes(boxes) -> np.ndarray:
    """Coerce input to an (N, 4) float64 array without validating contents."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected boxes with shape (N, 4), got {arr.shape}")
    return arr


def validate_boxes(boxes) -> np.ndarray:
    """Return boxes as (N, 4), raising if any box is non-finite or inverted."""
    arr = as_boxes(boxes)
    if not np.all(np.isfinite(arr)):
        raise ValueError("boxes contain non-finite coordinates")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise ValueError("boxes must satisfy x1 < x2 and y1 < y2")
    return arr


def box_areas(boxes) -> np.ndarray:
    arr = as_boxes(boxes)
    return (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    a = np.asarray(a, dtype=np.float64).reshape(4)
    b = np.asarray(b, dtype=np.float64).reshape(4)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = as_boxes(a)
    b = as_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clip_boxes(boxes, height, width) -> np.ndarray:
    """Clamp box coordinates into the [0, width] x [0, height] domain."""
    arr = as_boxes(boxes).copy()
    arr[:, 0::2] = np.clip(arr[:, 0::2], 0.0, float(width))
    arr[:, 1::2] = np.clip(arr[:, 1::2], 0.0, float(height))
    return arr


@dataclass(frozen=True)
class AnchorGrid:
    """Square anchors tiled over a feature map.

    Anchor ``(i * feature_w + j) * len(sizes) + k`` is the size-``k`` anchor
    centered at ``((j + 0.5) * stride, (i + 0.5) * stride)`` in image pixels.
    This ordering matches the layout of the RPN head outputs.
    """

    anchors: np.ndarray
    stride: int
    sizes: tuple[int, ...]
    feature_h: int
    feature_w: int

    def __len__(self) -> int:
        return self.anchors.shape[0]


def generate_anchors(feature_h: int, feature_w: int, stride: int, sizes) -> AnchorGrid:
    """Tile one square anchor per size over every feature-map cell."""
    sizes = tuple(int(s) for s in sizes)
    if stride <= 0:
        raise ValueError("stride must be positive")
    if not sizes:
        raise ValueError("at least one anchor size is required")
    cy = (np.arange(feature_h, dtype=np.float64) + 0.5) * stride
    cx = (np.arange(feature_w, dtype=np.float64) + 0.5) * stride
    half = np.asarray(sizes, dtype=np.float64) / 2.0
    cyg, cxg, hg = np.meshgrid(cy, cx, half, indexing="ij")
    anchors = np.stack([cxg - hg, cyg - hg, cxg + hg, cyg + hg], axis=-1).reshape(-1, 4)
    return AnchorGrid(anchors, int(stride), sizes, int(feature_h), int(feature_w))


LABEL_POSITIVE = 1
LABEL_NEGATIVE = 0
LABEL_IGNORE = -1


@dataclass
class RpnTargets:
    """Per-anchor training targets.

    ``labels``: 1 positive, 0 negative, -1 ignore. ``deltas`` holds the
    regression targets toward each anchor's best-overlapping ground-truth box
    and is only meaningful where ``labels == 1`` (zeroed elsewhere).
    """

    labels: np.ndarray
    deltas: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.labels == LABEL_POSITIVE))

    @property
    def num_negative(self) -> int:
        return int(np.sum(self.labels == LABEL_NEGATIVE))


def encode_deltas(anchors, gt_boxes) -> np.ndarray:
    """Encode gt boxes relative to anchors as (tx, ty, tw, th)."""
    a = as_boxes(anchors)
    g = as_boxes(gt_boxes)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = (a[:, 0] + a[:, 2]) / 2.0
    acy = (a[:, 1] + a[:, 3]) / 2.0
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    gcx = (g[:, 0] + g[:, 2]) / 2.0
    gcy = (g[:, 1] + g[:, 3]) / 2.0
    tx = (gcx - acx) / aw
    ty = (gcy - acy) / ah
    tw = np.log(gw / aw)
    th = np.log(gh / ah)
    return np.stack([tx, ty, tw, th], axis=1)


def decode_deltas(anchors, deltas, max_log_size: float = MAX_LOG_SIZE_DELTA) -> np.ndarray:
    """Invert :func:`encode_deltas`; log-size deltas are clamped to +-max_log_size."""
    a = as_boxes(anchors)
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]
    if d.shape != a.shape:
        raise ValueError(f"deltas shape {d.shape} does not match anchors {a.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("deltas contain non-finite values")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = (a[:, 0] + a[:, 2]) / 2.0
    acy = (a[:, 1] + a[:, 3]) / 2.0
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(np.clip(d[:, 2], -max_log_size, max_log_size))
    h = ah * np.exp(np.clip(d[:, 3], -max_log_size, max_log_size))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def assign_rpn_targets(anchors, gt_boxes, pos_iou: float = 0.7, neg_iou: float = 0.3) -> RpnTargets:
    """Label every anchor positive / negative / ignore against gt boxes.

    An anchor is positive when its best IoU reaches ``pos_iou`` or when it is
    a highest-IoU anchor for some gt box (so every gt with any overlap claims
    at least one anchor). Anchors below ``neg_iou`` are negative, the rest are
    ignored. Regression deltas point at each anchor's best-overlapping gt.
    """
    a = validate_boxes(anchors)
    g = validate_boxes(gt_boxes)
    if g.shape[0] == 0:
        raise ValueError("at least one ground-truth box is required")
    ious = iou_matrix(a, g)
    anchor_max = ious.max(axis=1)
    anchor_argmax = ious.argmax(axis=1)

    labels = np.full(a.shape[0], LABEL_IGNORE, dtype=np.int8)
    labels[anchor_max < neg_iou] = LABEL_NEGATIVE
    labels[anchor_max >= pos_iou] = LABEL_POSITIVE
    gt_best = ious.max(axis=0)
    for gt_idx in range(g.shape[0]):
        if gt_best[gt_idx] <= 0.0:
            continue  # gt overlaps nothing; claiming zero-IoU anchors would be noise
        labels[ious[:, gt_idx] == gt_best[gt_idx]] = LABEL_POSITIVE

    deltas = encode_deltas(a, g[anchor_argmax])
    deltas[labels != LABEL_POSITIVE] = 0.0
    return RpnTargets(labels=labels, deltas=deltas)


def sample_rpn_targets(
    targets: RpnTargets,
    rng: np.random.Generator,
    num_samples: int = 256,
    pos_fraction: float = 0.5,
) -> RpnTargets:
    """Randomly cap positives/negatives; anchors beyond the caps become ignore."""
    labels = targets.labels.copy()
    pos_idx = np.flatnonzero(labels == LABEL_POSITIVE)
    max_pos = int(num_samples * pos_fraction)
    if pos_idx.size > max_pos:
        drop = rng.choice(pos_idx, size=pos_idx.size - max_pos, replace=False)
        labels[drop] = LABEL_IGNORE
    num_pos = int(np.sum(labels == LABEL_POSITIVE))
    neg_idx = np.flatnonzero(labels == LABEL_NEGATIVE)
    max_neg = num_samples - num_pos
    if neg_idx.size > max_neg:
        drop = rng.choice(neg_idx, size=neg_idx.size - max_neg, replace=False)
        labels[drop] = LABEL_IGNORE
    return RpnTargets(labels=labels, deltas=targets.deltas)


def nms(boxes, scores, iou_thresh: float = 0.7) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes in descending score order. Boxes with IoU
    strictly above ``iou_thresh`` to an already-kept box are removed. Ties in
    score break toward the lower original index.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if b.shape[0] != s.shape[0]:
        raise ValueError("boxes and scores must have matching lengths")
    order = np.argsort(-s, kind="stable")
    suppressed = np.zeros(b.shape[0], dtype=bool)
    keep = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        ious = iou_matrix(b[idx], b)[0]
        suppressed |= ious > iou_thresh
        suppressed[idx] = True  # kept, but never revisited
    return np.asarray(keep, dtype=np.int64)


def roi_align(
    feature: torch.Tensor,
    boxes,
    output_size: tuple[int, int] = (7, 7),
    spatial_scale: float = 1.0,
    samples_per_bin: int = 2,
) -> torch.Tensor:
    """Pool each box into a fixed grid by averaged bilinear samples.

    The box is mapped to feature coordinates with ``spatial_scale`` (no
    rounding) and split into ``output_size`` bins; each bin averages
    ``samples_per_bin ** 2`` bilinear samples taken at regularly spaced
    interior points. Feature values live on the integer lattice and reads
    outside it contribute zero.

    Args:
        feature: (C, H, W) tensor.
        boxes: one box (4,) or a stack (N, 4) in image coordinates. Treated
            as constants; no gradient flows into the coordinates.

    Returns:
        (C, oh, ow) for a single box, (N, C, oh, ow) for a stack.
    """
    if feature.dim() != 3:
        raise ValueError(f"expected feature of shape (C, H, W), got {tuple(feature.shape)}")
    box_arr = np.asarray(
        boxes.detach().cpu().numpy() if isinstance(boxes, torch.Tensor) else boxes,
        dtype=np.float64,
    )
    single = box_arr.ndim == 1
    box_arr = as_boxes(box_arr) * float(spatial_scale)

    c, h, w = feature.shape
    oh, ow = int(output_size[0]), int(output_size[1])
    s = int(samples_per_bin)
    if oh <= 0 or ow <= 0 or s <= 0:
        raise ValueError("output_size and samples_per_bin must be positive")

    dtype = feature.dtype if feature.is_floating_point() else torch.float32
    b = torch.as_tensor(box_arr, dtype=dtype, device=feature.device)
    n = b.shape[0]
    bin_w = (b[:, 2] - b[:, 0]) / ow
    bin_h = (b[:, 3] - b[:, 1]) / oh
    # Fractional offsets of the s samples inside each of the oh/ow bins.
    off_y = (torch.arange(oh * s, dtype=dtype, device=feature.device) + 0.5) / s
    off_x = (torch.arange(ow * s, dtype=dtype, device=feature.device) + 0.5) / s
    ys = b[:, 1, None] + off_y[None, :] * bin_h[:, None]  # (N, oh*s)
    xs = b[:, 0, None] + off_x[None, :] * bin_w[:, None]  # (N, ow*s)
    ys = ys[:, :, None].expand(n, oh * s, ow * s)
    xs = xs[:, None, :].expand(n, oh * s, ow * s)

    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    dy = ys - y0
    dx = xs - x0
    y0 = y0.long()
    x0 = x0.long()

    flat = feature.reshape(c, h * w).to(dtype)
    acc = torch.zeros((c, n, oh * s, ow * s), dtype=dtype, device=feature.device)
    for iy, wy in ((y0, 1.0 - dy), (y0 + 1, dy)):
        for ix, wx in ((x0, 1.0 - dx), (x0 + 1, dx)):
            valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
            idx = (iy.clamp(0, h - 1) * w + ix.clamp(0, w - 1)).reshape(-1)
            vals = flat[:, idx].reshape(c, n, oh * s, ow * s)
            acc = acc + vals * (wy * wx * valid.to(dtype))[None]

    out = acc.reshape(c, n, oh, s, ow, s).mean(dim=(3, 5))  # (C, N, oh, ow)
    out = out.permute(1, 0, 2, 3).contiguous()
    return out[0] if single else out

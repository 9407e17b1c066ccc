"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately naive (plain Python loops, no shared code
with the package) so that agreement with the library is a real check, not a
tautology.
"""

import math

import numpy as np


def oracle_iou(a, b) -> float:
    """IoU via direct interval-overlap area computation."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def oracle_nms(boxes, scores, iou_thresh):
    """O(n^2) greedy suppression: keep best, drop overlaps, repeat."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    removed = set()
    kept = []
    for i in order:
        if i in removed:
            continue
        kept.append(i)
        for j in order:
            if j != i and j not in removed and oracle_iou(boxes[i], boxes[j]) > iou_thresh:
                removed.add(j)
    return kept


def oracle_select_top_rois(scores, boxes, count, iou_thresh):
    """Full sort + greedy suppression + backfill with suppressed boxes."""
    kept = oracle_nms(boxes, scores, iou_thresh)
    if len(kept) >= count:
        return kept[:count]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    backfill = [i for i in order if i not in kept]
    return kept + backfill[: count - len(kept)]


def _bilinear(plane, y, x):
    h, w = plane.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    dy = y - y0
    dx = x - x0
    total = 0.0
    for iy, wy in ((y0, 1.0 - dy), (y0 + 1, dy)):
        for ix, wx in ((x0, 1.0 - dx), (x0 + 1, dx)):
            if 0 <= iy < h and 0 <= ix < w:
                total += float(plane[iy, ix]) * wy * wx
    return total


def oracle_roi_align(feature, box, output_size, spatial_scale, samples_per_bin):
    """Pointwise evaluation of the bilinear sampling formula."""
    feature = np.asarray(feature, dtype=np.float64)
    c, _, _ = feature.shape
    oh, ow = output_size
    s = samples_per_bin
    x1, y1, x2, y2 = (float(v) * spatial_scale for v in box)
    bin_w = (x2 - x1) / ow
    bin_h = (y2 - y1) / oh
    out = np.zeros((c, oh, ow))
    for ci in range(c):
        for by in range(oh):
            for bx in range(ow):
                acc = 0.0
                for sy in range(s):
                    for sx in range(s):
                        y = y1 + (by + (sy + 0.5) / s) * bin_h
                        x = x1 + (bx + (sx + 0.5) / s) * bin_w
                        acc += _bilinear(feature[ci], y, x)
                out[ci, by, bx] = acc / (s * s)
    return out


def oracle_average_precision(detections, gts, iou_thresh):
    """Exhaustive greedy matching plus stepwise envelope integration."""
    items = []
    for img_idx, (boxes, scores) in enumerate(detections):
        for det_idx, score in enumerate(scores):
            items.append((float(score), img_idx, det_idx, list(boxes[det_idx])))
    items.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched = [set() for _ in gts]
    total_gt = sum(len(g) for g in gts)
    tp = fp = 0
    points = []
    for _, img_idx, _, box in items:
        best_iou = 0.0
        best_gt = None
        for gt_idx, gt in enumerate(gts[img_idx]):
            if gt_idx in matched[img_idx]:
                continue
            value = oracle_iou(box, gt)
            if value > best_iou:
                best_iou = value
                best_gt = gt_idx
        if best_gt is not None and best_iou >= iou_thresh:
            matched[img_idx].add(best_gt)
            tp += 1
        else:
            fp += 1
        points.append((tp / total_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        envelope = max(p for _, p in points[i:])
        ap += (recall - prev_recall) * envelope
        prev_recall = recall
    return ap


def finite_diff_grad(fn, x, eps=1e-4):
    """Central finite differences of a scalar torch function w.r.t. tensor x."""
    import torch

    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        f_plus = float(fn())
        flat[i] = orig - eps
        f_minus = float(fn())
        flat[i] = orig
        grad_flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic, reference) -> float:
    """Max abs difference scaled by the largest reference magnitude."""
    import torch

    diff = (analytic - reference).abs().max()
    scale = torch.clamp(reference.abs().max(), min=1e-8)
    return float(diff / scale)

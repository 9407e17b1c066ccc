"""Loss composition, schedule, and the training loop.

The total objective is the unweighted sum of the image-level ordinal loss,
the per-ROI patch ordinal loss, and the RPN loss; ablation toggles drop terms
(and the corresponding modules) entirely. Weights are exposed for
experimentation but default to 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .data import (
    DatasetManifest,
    augment,
    encode_gender,
    keypoints_to_boxes,
    load_records,
    pad_or_crop,
)
from .network import ALANet, ALANetConfig, NetworkOutputs, save_checkpoint
from .ordinal import ordinal_loss

_TUPLE_FIELDS = ("lr_decay_steps", "adam_betas", "scale_jitter")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50000
    batch_size: int = 32
    lr: float = 0.001
    lr_decay_steps: tuple[int, ...] = (30000, 40000)
    lr_decay_factor: float = 0.1
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    loss_weight_ord: float = 1.0
    loss_weight_patch: float = 1.0
    loss_weight_rpn: float = 1.0
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_sample_count: int = 256
    rpn_pos_fraction: float = 0.5
    augment: bool = True
    hflip_prob: float = 0.5
    scale_jitter: tuple[float, float] = (0.8, 1.2)
    checkpoint_interval: int = 1000

    def validate(self) -> "TrainConfig":
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ValueError("iterations and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        steps = self.lr_decay_steps
        if any(s2 <= s1 for s1, s2 in zip(steps, steps[1:])) or any(
            not 0 < s < self.iterations for s in steps
        ):
            raise ValueError("lr_decay_steps must be strictly increasing and inside (0, iterations)")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be in [0, 1]")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ValueError("scale_jitter must satisfy 0 < lo <= hi")
        if not 0 <= self.rpn_neg_iou <= self.rpn_pos_iou <= 1:
            raise ValueError("need 0 <= rpn_neg_iou <= rpn_pos_iou <= 1")
        if self.rpn_sample_count <= 0 or not 0 < self.rpn_pos_fraction <= 1:
            raise ValueError("invalid RPN sampling parameters")
        if self.checkpoint_interval <= 0:
            raise ValueError("checkpoint_interval must be positive")
        return self


@dataclass
class LossBreakdown:
    """Per-iteration loss terms; disabled terms are reported as 0.0 and
    l_total is their exact float sum."""

    l_ord: float
    l_ord_patch: float
    l_rpn: float
    l_total: float

    def as_dict(self) -> dict:
        return {
            "l_ord": self.l_ord,
            "l_ord_patch": self.l_ord_patch,
            "l_rpn": self.l_rpn,
            "l_total": self.l_total,
        }


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Piecewise-constant step schedule; decays multiply in at each step."""
    if not 0 <= iteration < config.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.iterations})")
    decays = sum(1 for s in config.lr_decay_steps if iteration >= s)
    return config.lr * config.lr_decay_factor**decays


def rpn_loss(rpn_scores: torch.Tensor, rpn_deltas: torch.Tensor, targets: geometry.RpnTargets) -> torch.Tensor:
    """Objectness BCE over sampled anchors plus smooth-L1 over positives.

    Each term is normalized by its own sample count and they are summed 1:1.
    With no positive anchors the regression term contributes zero.
    """
    if rpn_scores.dim() != 1 or rpn_deltas.shape != (rpn_scores.shape[0], 4):
        raise ValueError("expected per-image scores (A,) and deltas (A, 4)")
    labels = torch.as_tensor(targets.labels, device=rpn_scores.device)
    sampled = labels != geometry.LABEL_IGNORE
    cls = F.binary_cross_entropy_with_logits(
        rpn_scores[sampled], labels[sampled].to(rpn_scores.dtype)
    )
    pos = labels == geometry.LABEL_POSITIVE
    num_pos = int(pos.sum())
    if num_pos == 0:
        return cls
    target_deltas = torch.as_tensor(targets.deltas, dtype=rpn_deltas.dtype, device=rpn_deltas.device)
    reg = F.smooth_l1_loss(rpn_deltas[pos], target_deltas[pos], reduction="sum") / num_pos
    return cls + reg


def patch_loss(patch_logits: torch.Tensor, age) -> torch.Tensor:
    """Mean over ROIs of the ordinal loss against the image-level age.

    Accepts (R, num_ranks - 1) with a scalar age or (B, R, num_ranks - 1)
    with ages of shape (B,).
    """
    logits = patch_logits
    if logits.dim() == 2:
        logits = logits[None]
    if logits.dim() != 3:
        raise ValueError(f"expected patch logits of rank 2 or 3, got {tuple(patch_logits.shape)}")
    b, r, km1 = logits.shape
    ages = torch.as_tensor(age, dtype=torch.long, device=logits.device).reshape(-1)
    if ages.shape[0] != b:
        raise ValueError(f"got {ages.shape[0]} ages for a batch of {b}")
    return ordinal_loss(logits.reshape(b * r, km1), ages.repeat_interleave(r))


def total_loss(
    outputs: NetworkOutputs,
    ages,
    gt_boxes,
    net_cfg: ALANetConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Compose the enabled loss terms for one batch.

    ``gt_boxes`` is (B, R, 4) keypoint-derived boxes; it drives RPN target
    assignment (with the configured sampling caps) and is unused when the
    model has no RPN. Returns the differentiable total plus a float
    breakdown whose l_total is the exact sum of the reported terms.
    """
    ages_t = torch.as_tensor(ages, dtype=torch.long)
    loss = ordinal_loss(outputs.age_logits, ages_t) * train_cfg.loss_weight_ord
    l_ord = float(loss.detach())

    l_patch = 0.0
    if net_cfg.use_patch_training and outputs.patch_logits is not None:
        term = patch_loss(outputs.patch_logits, ages_t) * train_cfg.loss_weight_patch
        l_patch = float(term.detach())
        loss = loss + term

    l_rpn = 0.0
    if net_cfg.use_local_extraction and outputs.rpn_scores is not None:
        boxes = np.asarray(gt_boxes, dtype=np.float64)
        per_image = []
        for i in range(outputs.rpn_scores.shape[0]):
            targets = geometry.assign_rpn_targets(
                outputs.anchors.anchors, boxes[i], train_cfg.rpn_pos_iou, train_cfg.rpn_neg_iou
            )
            targets = geometry.sample_rpn_targets(
                targets, rng, train_cfg.rpn_sample_count, train_cfg.rpn_pos_fraction
            )
            per_image.append(rpn_loss(outputs.rpn_scores[i], outputs.rpn_deltas[i], targets))
        term = torch.stack(per_image).mean() * train_cfg.loss_weight_rpn
        l_rpn = float(term.detach())
        loss = loss + term

    breakdown = LossBreakdown(l_ord, l_patch, l_rpn, l_ord + l_patch + l_rpn)
    return loss, breakdown


def build_batch(records, indices, net_cfg: ALANetConfig, train_cfg: TrainConfig, rng: np.random.Generator):
    """Assemble (images, ages, genders, gt_boxes) tensors for the given records.

    Augmentation (when enabled) flips and rescales each sample, then fits it
    back onto the original canvas so batches stack; boxes are clamped to the
    canvas and must stay non-degenerate.
    """
    images, ages, genders, all_boxes = [], [], [], []
    for i in indices:
        rec = records[i]
        img = rec.image
        boxes = keypoints_to_boxes(rec.keypoints, net_cfg.roi_box_size, image_size=img.shape)
        if train_cfg.augment:
            hflip = bool(rng.random() < train_cfg.hflip_prob)
            sf = float(rng.uniform(train_cfg.scale_jitter[0], train_cfg.scale_jitter[1]))
            h0, w0 = img.shape
            img, boxes = augment(img, boxes, hflip, sf)
            img = pad_or_crop(img, h0, w0)
            boxes = geometry.clip_boxes(boxes, h0, w0)
            if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
                raise ValueError(
                    "augmentation pushed an ROI fully off-canvas; keypoints sit too "
                    "close to the border for the configured scale_jitter"
                )
        images.append(img)
        ages.append(rec.age_months)
        genders.append(encode_gender(rec.gender))
        all_boxes.append(boxes)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"batch images must share one shape, got {sorted(shapes)}")
    images_t = torch.from_numpy(np.stack(images).astype(np.float32)).unsqueeze(1)
    return (
        images_t,
        torch.as_tensor(ages, dtype=torch.long),
        torch.as_tensor(genders, dtype=torch.long),
        np.stack(all_boxes),
    )


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    metrics: list[dict]
    checkpoints: list[Path]


def run_training(
    train_cfg: TrainConfig,
    net_cfg: ALANetConfig,
    manifest: DatasetManifest,
    out_dir,
    progress=None,
) -> TrainResult:
    """Train a model on a manifest; deterministic given the seed.

    Writes one JSON line of loss breakdown per iteration to
    ``out_dir/metrics.jsonl``, checkpoints every ``checkpoint_interval``
    iterations, and always a final ``ckpt_final.pt``. ``progress`` (optional)
    is called as ``progress(iteration, lr, breakdown)``.
    """
    train_cfg.validate()
    net_cfg.validate()
    manifest.validate(num_ranks=net_cfg.num_ranks)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)

    records = load_records(manifest, long_side=net_cfg.input_long_side)
    for rec in records:
        rec.validate(num_ranks=net_cfg.num_ranks)

    model = ALANet(net_cfg)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.lr,
        betas=train_cfg.adam_betas,
        eps=train_cfg.adam_eps,
        weight_decay=train_cfg.weight_decay,
    )

    metrics_path = out_dir / "metrics.jsonl"
    metrics: list[dict] = []
    checkpoints: list[Path] = []
    with metrics_path.open("w") as log:
        for it in range(train_cfg.iterations):
            lr = lr_at(it, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            indices = rng.choice(
                len(records), size=train_cfg.batch_size, replace=len(records) < train_cfg.batch_size
            )
            images, ages, genders, gt_boxes = build_batch(records, indices, net_cfg, train_cfg, rng)
            outputs = model(images, genders, gt_boxes=gt_boxes)
            loss, breakdown = total_loss(outputs, ages, gt_boxes, net_cfg, train_cfg, rng)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            entry = {"iteration": it, "lr": lr, **breakdown.as_dict()}
            log.write(json.dumps(entry) + "\n")
            metrics.append(entry)
            if progress is not None:
                progress(it, lr, breakdown)
            if (it + 1) % train_cfg.checkpoint_interval == 0:
                ckpt = out_dir / f"ckpt_{it + 1:06d}.pt"
                save_checkpoint(model, ckpt, extra={"iteration": it + 1})
                checkpoints.append(ckpt)

    final = out_dir / "ckpt_final.pt"
    save_checkpoint(model, final, extra={"iteration": train_cfg.iterations})
    checkpoints.append(final)
    return TrainResult(final, metrics_path, metrics, checkpoints)

"""Model assembly: backbone, RPN, anatomical local extraction, gender
embedding, fusion MLP for ordinal age logits, and the per-ROI patch head.

The stride-16 backbone feature map feeds the RPN; the top-scoring proposals
(a fixed count, matching the number of hand keypoints) are pooled with ROI
align, transformed by a shared ROI head, and aggregated by elementwise max
into one local feature. Proposal coordinates are non-differentiable: the RPN
learns only from its own loss, never from the age loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import geometry
from .data import NUM_KEYPOINTS

_TUPLE_FIELDS = ("anchor_sizes", "roi_align_size")


@dataclass(frozen=True)
class ALANetConfig:
    """Architecture hyperparameters, including the ablation toggles.

    The four ablation rows are spanned by ``use_local_extraction`` and
    ``use_patch_training``; with both off the model reduces to the plain
    backbone plus gender fusion.
    """

    backbone: str = "resnet50"  # "resnet50" or "tiny"
    backbone_channels: int = 1024  # stride-16 feature channels
    num_ranks: int = 240  # ages are integers in [0, num_ranks)
    num_rois: int = NUM_KEYPOINTS
    roi_box_size: int = 64
    anchor_sizes: tuple[int, ...] = (32, 64, 128)
    anchor_stride: int = 16
    roi_align_size: tuple[int, int] = (7, 7)
    roi_samples_per_bin: int = 2
    roi_head_channels: int = 256
    local_dim: int = 512
    gender_dim: int = 32
    mlp_hidden: int = 512
    nms_iou_thresh: float = 0.7
    input_long_side: int = 512
    use_local_extraction: bool = True
    use_patch_training: bool = True

    def validate(self) -> "ALANetConfig":
        if self.backbone not in ("resnet50", "tiny"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "tiny" and (self.backbone_channels < 8 or self.backbone_channels % 8):
            raise ValueError("tiny backbone_channels must be a positive multiple of 8")
        if self.backbone == "resnet50" and self.backbone_channels != ResNet50Backbone.FEATURE_CHANNELS:
            raise ValueError(
                f"resnet50 exposes {ResNet50Backbone.FEATURE_CHANNELS} stride-16 channels, "
                f"got backbone_channels={self.backbone_channels}"
            )
        if self.num_ranks < 2:
            raise ValueError("num_ranks must be at least 2")
        if self.num_rois < 1:
            raise ValueError("num_rois must be positive")
        if not self.anchor_sizes:
            raise ValueError("anchor_sizes must be nonempty")
        if self.anchor_stride <= 0:
            raise ValueError("anchor_stride must be positive")
        for name in ("roi_box_size", "roi_head_channels", "local_dim", "gender_dim",
                     "mlp_hidden", "roi_samples_per_bin", "input_long_side"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.roi_align_size) != 2 or min(self.roi_align_size) <= 0:
            raise ValueError("roi_align_size must be two positive integers")
        return self

    @property
    def global_dim(self) -> int:
        return ResNet50Backbone.GLOBAL_CHANNELS if self.backbone == "resnet50" else self.backbone_channels


def config_to_dict(cfg: ALANetConfig) -> dict:
    out = asdict(cfg)
    for key in _TUPLE_FIELDS:
        out[key] = list(out[key])
    return out


def config_from_dict(raw: dict) -> ALANetConfig:
    known = {f.name for f in ALANetConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    for key in _TUPLE_FIELDS:
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ALANetConfig(**kwargs).validate()


class TinyBackbone(nn.Module):
    """Four stride-2 conv stages to a stride-16 map; CPU-friendly stand-in
    that preserves the interface of the full backbone."""

    def __init__(self, out_channels: int):
        super().__init__()
        widths = [out_channels // 8, out_channels // 4, out_channels // 2, out_channels]
        layers = []
        prev = 1
        for w in widths:
            layers += [nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = w
        self.stages = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor):
        fmap = self.stages(images)
        return fmap, fmap.mean(dim=(2, 3))


class ResNet50Backbone(nn.Module):
    """ResNet-50 trunk adapted to 1-channel input.

    The stride-16 map (4th block) feeds the detection branch; the global
    feature is the spatially averaged final block output.
    """

    FEATURE_CHANNELS = 1024
    GLOBAL_CHANNELS = 2048

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, images: torch.Tensor):
        x = self.maxpool(self.relu(self.bn1(self.conv1(images))))
        x = self.layer1(x)
        x = self.layer2(x)
        c4 = self.layer3(x)  # stride 16
        c5 = self.layer4(c4)
        return c4, c5.mean(dim=(2, 3))


class RpnHead(nn.Module):
    """3x3 conv trunk with 1x1 objectness and box-delta heads."""

    def __init__(self, in_channels: int, anchors_per_cell: int):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.conv = nn.Conv2d(in_channels, in_channels, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(in_channels, anchors_per_cell, kernel_size=1)
        self.deltas = nn.Conv2d(in_channels, 4 * anchors_per_cell, kernel_size=1)
        for m in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, fmap: torch.Tensor):
        b, _, h, w = fmap.shape
        x = torch.relu(self.conv(fmap))
        scores = self.objectness(x).permute(0, 2, 3, 1).reshape(b, h * w * self.anchors_per_cell)
        deltas = (
            self.deltas(x)
            .reshape(b, self.anchors_per_cell, 4, h, w)
            .permute(0, 3, 4, 1, 2)
            .reshape(b, h * w * self.anchors_per_cell, 4)
        )
        return scores, deltas


class RoiFeatureHead(nn.Module):
    """Shared per-ROI transform: four 3x3 convs then one FC to local_dim."""

    def __init__(self, in_channels: int, channels: int, roi_size: tuple[int, int], out_dim: int):
        super().__init__()
        convs = []
        prev = in_channels
        for _ in range(4):
            convs += [nn.Conv2d(prev, channels, kernel_size=3, padding=1), nn.ReLU(inplace=True)]
            prev = channels
        self.convs = nn.Sequential(*convs)
        self.fc = nn.Linear(channels * roi_size[0] * roi_size[1], out_dim)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        x = self.convs(rois)
        return self.fc(x.flatten(start_dim=1))


class PatchAgeHead(nn.Module):
    """One shared MLP predicting age logits from a single ROI feature."""

    def __init__(self, in_dim: int, hidden: int, num_ranks: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, num_ranks - 1)
        )

    def forward(self, roi_features: torch.Tensor) -> torch.Tensor:
        return self.net(roi_features)


class AgeFusionMlp(nn.Module):
    """Two hidden layers over the concatenated global/local/gender features."""

    def __init__(self, in_dim: int, hidden: int, num_ranks: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, num_ranks - 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


def select_top_rois(scores, boxes, count: int = NUM_KEYPOINTS, iou_thresh: float = 0.7) -> np.ndarray:
    """Indices of the ``count`` proposals kept after NMS, backfilled if needed.

    NMS survivors are taken in descending score order; when suppression
    leaves fewer than ``count`` boxes, the highest-scoring suppressed boxes
    are appended so the result always has exactly ``count`` entries.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    boxes = geometry.as_boxes(boxes)
    if scores.shape[0] < count:
        raise ValueError(f"need at least {count} candidate boxes, got {scores.shape[0]}")
    keep = geometry.nms(boxes, scores, iou_thresh)
    if keep.size >= count:
        return keep[:count]
    kept = np.zeros(scores.shape[0], dtype=bool)
    kept[keep] = True
    order = np.argsort(-scores, kind="stable")
    backfill = order[~kept[order]][: count - keep.size]
    return np.concatenate([keep, backfill])


@dataclass
class NetworkOutputs:
    """One forward pass. Detection fields are None when the config has no
    RPN; patch_logits is None when patch training is off or no ROI source
    was available (e.g. inference without annotations)."""

    age_logits: torch.Tensor
    rpn_scores: torch.Tensor | None = None
    rpn_deltas: torch.Tensor | None = None
    anchors: geometry.AnchorGrid | None = None
    proposals: np.ndarray | None = None
    proposal_scores: np.ndarray | None = None
    roi_boxes: np.ndarray | None = None
    roi_features: torch.Tensor | None = None
    local_feature: torch.Tensor | None = None
    patch_logits: torch.Tensor | None = None


class ALANet(nn.Module):
    """End-to-end age estimator with joint anatomical ROI detection."""

    def __init__(self, config: ALANetConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.backbone == "tiny":
            self.backbone = TinyBackbone(config.backbone_channels)
        else:
            self.backbone = ResNet50Backbone()
        if config.use_local_extraction:
            self.rpn = RpnHead(config.backbone_channels, len(config.anchor_sizes))
        if config.use_local_extraction or config.use_patch_training:
            self.roi_head = RoiFeatureHead(
                config.backbone_channels,
                config.roi_head_channels,
                config.roi_align_size,
                config.local_dim,
            )
        if config.use_patch_training:
            self.patch_head = PatchAgeHead(config.local_dim, config.mlp_hidden, config.num_ranks)
        self.gender_embedding = nn.Embedding(2, config.gender_dim)
        fusion_in = config.global_dim + config.gender_dim
        if config.use_local_extraction:
            fusion_in += config.local_dim
        self.age_mlp = AgeFusionMlp(fusion_in, config.mlp_hidden, config.num_ranks)
        self._anchor_cache: dict[tuple[int, int], geometry.AnchorGrid] = {}

    # --- individual stages -------------------------------------------------

    def backbone_forward(self, images: torch.Tensor):
        """(B, 1, H, W) images -> stride-16 feature map and pooled global feature."""
        if images.dim() != 4 or images.shape[1] != 1:
            raise ValueError(f"expected images of shape (B, 1, H, W), got {tuple(images.shape)}")
        return self.backbone(images)

    def rpn_forward(self, fmap: torch.Tensor):
        """Feature map -> per-anchor objectness logits (B, A) and deltas (B, A, 4)."""
        if not self.config.use_local_extraction:
            raise ValueError("model was built without an RPN (use_local_extraction=False)")
        return self.rpn(fmap)

    def anchor_grid(self, feature_h: int, feature_w: int) -> geometry.AnchorGrid:
        key = (feature_h, feature_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = geometry.generate_anchors(
                feature_h, feature_w, self.config.anchor_stride, self.config.anchor_sizes
            )
        return self._anchor_cache[key]

    def gender_embed(self, genders) -> torch.Tensor:
        """(B,) gender indices in {0, 1} -> (B, gender_dim) learned embeddings."""
        idx = torch.as_tensor(genders, dtype=torch.long)
        if torch.any((idx < 0) | (idx > 1)):
            raise ValueError("gender indices must be 0 or 1")
        return self.gender_embedding(idx)

    def local_extract(self, fmaps: torch.Tensor, rois) -> tuple[torch.Tensor, torch.Tensor]:
        """ROI-align + shared head per ROI, then elementwise max across ROIs.

        Args:
            fmaps: (B, C, H, W) stride-16 feature maps.
            rois: (B, R, 4) boxes in image coordinates.

        Returns:
            (local_feature (B, local_dim), roi_features (B, R, local_dim)).
        """
        cfg = self.config
        rois = np.asarray(rois, dtype=np.float64)
        if rois.ndim != 3 or rois.shape[0] != fmaps.shape[0] or rois.shape[2] != 4:
            raise ValueError(f"expected rois of shape (B, R, 4), got {rois.shape}")
        pooled = [
            geometry.roi_align(
                fmaps[i],
                rois[i],
                output_size=cfg.roi_align_size,
                spatial_scale=1.0 / cfg.anchor_stride,
                samples_per_bin=cfg.roi_samples_per_bin,
            )
            for i in range(fmaps.shape[0])
        ]
        flat = torch.cat(pooled, dim=0)  # (B*R, C, oh, ow)
        feats = self.roi_head(flat).reshape(fmaps.shape[0], rois.shape[1], cfg.local_dim)
        return feats.max(dim=1).values, feats

    def predict_age_logits(
        self,
        global_feature: torch.Tensor,
        local_feature: torch.Tensor | None,
        gender_feature: torch.Tensor,
    ) -> torch.Tensor:
        """Fuse available features into ordinal age logits (B, num_ranks - 1)."""
        parts = [global_feature]
        if self.config.use_local_extraction:
            if local_feature is None:
                raise ValueError("config enables local extraction but no local feature was given")
            parts.append(local_feature)
        elif local_feature is not None:
            raise ValueError("config disables local extraction; unexpected local feature")
        parts.append(gender_feature)
        features = torch.cat(parts, dim=1)
        expected = self.age_mlp.net[0].in_features
        if features.shape[1] != expected:
            raise ValueError(f"fusion input has {features.shape[1]} dims, expected {expected}")
        return self.age_mlp(features)

    # --- full pass ----------------------------------------------------------

    def forward(self, images: torch.Tensor, genders, gt_boxes=None) -> NetworkOutputs:
        """Run the configured pipeline on a batch.

        ``gt_boxes`` ((B, R, 4), optional) supplies annotated ROIs; they are
        used as the ROI source when the model has no RPN, which is how patch
        training runs without local extraction.
        """
        cfg = self.config
        fmap, global_feature = self.backbone_forward(images)
        out = NetworkOutputs(age_logits=None)

        roi_source = None
        if cfg.use_local_extraction:
            scores, deltas = self.rpn_forward(fmap)
            grid = self.anchor_grid(fmap.shape[2], fmap.shape[3])
            scores_np = scores.detach().cpu().numpy()
            deltas_np = deltas.detach().cpu().numpy()
            proposals = np.empty((images.shape[0], cfg.num_rois, 4))
            prop_scores = np.empty((images.shape[0], cfg.num_rois))
            for i in range(images.shape[0]):
                boxes = geometry.decode_deltas(grid.anchors, deltas_np[i])
                keep = select_top_rois(scores_np[i], boxes, cfg.num_rois, cfg.nms_iou_thresh)
                proposals[i] = boxes[keep]
                prop_scores[i] = scores_np[i][keep]
            out.rpn_scores = scores
            out.rpn_deltas = deltas
            out.anchors = grid
            out.proposals = proposals
            out.proposal_scores = prop_scores
            roi_source = proposals
        elif gt_boxes is not None:
            roi_source = np.asarray(gt_boxes, dtype=np.float64)

        local_feature = None
        if roi_source is not None and hasattr(self, "roi_head"):
            local, roi_features = self.local_extract(fmap, roi_source)
            out.roi_boxes = np.asarray(roi_source, dtype=np.float64)
            out.roi_features = roi_features
            if cfg.use_local_extraction:
                local_feature = local
                out.local_feature = local
            if cfg.use_patch_training:
                out.patch_logits = self.patch_head(roi_features)

        gender_feature = self.gender_embed(genders)
        out.age_logits = self.predict_age_logits(global_feature, local_feature, gender_feature)
        return out


def save_checkpoint(model: ALANet, path, extra: dict | None = None) -> None:
    """Serialize parameters plus the full config; ``extra`` must be JSON-safe."""
    payload = {
        "config": config_to_dict(model.config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: ALANetConfig | None = None) -> tuple[ALANet, dict]:
    """Rebuild a model from a checkpoint.

    When ``expected_config`` is given it must equal the stored config exactly;
    a mismatch raises with the offending keys rather than silently adapting.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    stored = config_from_dict(payload["config"])
    if expected_config is not None and stored != expected_config:
        diffs = [
            f"{f}: checkpoint={getattr(stored, f)!r} expected={getattr(expected_config, f)!r}"
            for f in ALANetConfig.__dataclass_fields__
            if getattr(stored, f) != getattr(expected_config, f)
        ]
        raise ValueError("checkpoint config mismatch: " + "; ".join(diffs))
    model = ALANet(stored)
    model.load_state_dict(payload["state_dict"], strict=True)
    return model, payload.get("extra", {})

"""Dataset handling: loading, preprocessing, augmentation, keypoint-to-box
conversion, and a deterministic synthetic-radiograph generator.

Images are 2-D float32 arrays in [0, 1] (grayscale, stored on disk as 8-bit
PNG). Every sample carries an age in months, a gender, and 17 anatomical
keypoints given on the original image; keypoints are rescaled alongside the
image, never redefined.

Manifest file format, one sample per line, tab-separated::

    path<TAB>age_months<TAB>gender<TAB>x1,y1;x2,y2;...;x17,y17
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

NUM_KEYPOINTS = 17
GENDERS = ("female", "male")
SPLITS = ("train", "val", "test")


def encode_gender(gender: str) -> int:
    """female -> 0, male -> 1."""
    try:
        return GENDERS.index(gender)
    except ValueError:
        raise ValueError(f"unknown gender {gender!r}, expected one of {GENDERS}") from None


def decode_gender(index: int) -> str:
    if index not in (0, 1):
        raise ValueError(f"gender index must be 0 or 1, got {index}")
    return GENDERS[index]


@dataclass
class ImageRecord:
    """One sample: image, age in months, gender, and 17 keypoints."""

    image: np.ndarray
    age_months: int
    gender: str
    keypoints: np.ndarray

    def validate(self, num_ranks: int | None = None) -> "ImageRecord":
        if self.image.ndim != 2 or self.image.size == 0:
            raise ValueError("image must be a nonempty 2-D array")
        if self.age_months < 0:
            raise ValueError("age_months must be nonnegative")
        if num_ranks is not None and self.age_months >= num_ranks:
            raise ValueError(f"age {self.age_months} outside [0, {num_ranks})")
        if self.gender not in GENDERS:
            raise ValueError(f"unknown gender {self.gender!r}")
        kps = np.asarray(self.keypoints, dtype=np.float64)
        if kps.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got shape {kps.shape}")
        h, w = self.image.shape
        if np.any(kps < 0) or np.any(kps[:, 0] >= w) or np.any(kps[:, 1] >= h):
            raise ValueError("keypoints must lie inside the image bounds")
        return self


@dataclass
class ManifestEntry:
    image_path: str
    age_months: int
    gender: str
    keypoints: np.ndarray


@dataclass
class DatasetManifest:
    """Line-delimited dataset index; image paths are relative to ``root``."""

    entries: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, num_ranks: int | None = None) -> "DatasetManifest":
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        paths = [e.image_path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest image paths must be unique")
        for e in self.entries:
            if e.age_months < 0 or (num_ranks is not None and e.age_months >= num_ranks):
                raise ValueError(f"age {e.age_months} out of range in {e.image_path}")
            if e.gender not in GENDERS:
                raise ValueError(f"unknown gender {e.gender!r} in {e.image_path}")
            kps = np.asarray(e.keypoints)
            if kps.shape != (NUM_KEYPOINTS, 2):
                raise ValueError(f"expected {NUM_KEYPOINTS} keypoints in {e.image_path}")
        return self

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for e in self.entries:
            kps = ";".join(
                f"{float(x)!r},{float(y)!r}" for x, y in np.asarray(e.keypoints, dtype=np.float64)
            )
            lines.append(f"{e.image_path}\t{e.age_months}\t{e.gender}\t{kps}")
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path, split: str = "train") -> "DatasetManifest":
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            img, age, gender, kp_field = parts
            kps = np.asarray(
                [[float(v) for v in pt.split(",")] for pt in kp_field.split(";")],
                dtype=np.float64,
            )
            entries.append(ManifestEntry(img, int(age), gender, kps))
        return cls(entries=entries, split=split, root=path.parent).validate()


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image file as float32 in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise ValueError(f"could not read image {path}")
    return img.astype(np.float32) / 255.0


def save_image(image: np.ndarray, path) -> None:
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise ValueError(f"could not write image {path}")


def resize_keep_aspect(image: np.ndarray, keypoints: np.ndarray, long_side: int = 512):
    """Resize so the long image side equals ``long_side``, scaling keypoints too.

    Returns (image, keypoints, scale). The aspect ratio is preserved up to
    rounding of the short side to whole pixels.
    """
    if image.ndim != 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("image must be a nonempty 2-D array")
    if long_side <= 0:
        raise ValueError("long_side must be positive")
    h, w = image.shape
    scale = float(long_side) / float(max(h, w))
    kps = np.asarray(keypoints, dtype=np.float64)
    if scale == 1.0:
        return image.copy(), kps.copy(), 1.0
    new_h = int(round(h * scale))
    new_w = int(round(w * scale))
    resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return resized, kps * scale, scale


def keypoints_to_boxes(keypoints, box_size: int = 64, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Square boxes of side ``box_size`` centered on each keypoint.

    ``image_size`` is (height, width); when given, boxes are clamped into
    [0, width] x [0, height] so the ROI count stays fixed for keypoints near
    the border.
    """
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim != 2 or kps.shape[1] != 2:
        raise ValueError(f"expected keypoints of shape (N, 2), got {kps.shape}")
    half = box_size / 2.0
    boxes = np.concatenate([kps - half, kps + half], axis=1)
    if image_size is not None:
        h, w = image_size
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(w))
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(h))
    return boxes


def augment(image: np.ndarray, boxes: np.ndarray, hflip: bool, scale_factor: float):
    """Horizontal flip and/or isotropic rescale of an image with its boxes.

    Flipping maps x to W - x (x1/x2 swap to keep ordering); scaling multiplies
    every coordinate by ``scale_factor`` and resamples the image accordingly.
    Returns (image, boxes).
    """
    if scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    out_img = image
    out_boxes = np.asarray(boxes, dtype=np.float64).copy()
    if hflip:
        w = image.shape[1]
        out_img = np.ascontiguousarray(out_img[:, ::-1])
        x1 = w - out_boxes[:, 2].copy()
        x2 = w - out_boxes[:, 0].copy()
        out_boxes[:, 0] = x1
        out_boxes[:, 2] = x2
    if scale_factor != 1.0:
        h, w = out_img.shape
        new_h = max(1, int(round(h * scale_factor)))
        new_w = max(1, int(round(w * scale_factor)))
        out_img = cv2.resize(out_img, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        out_boxes *= scale_factor
    return out_img, out_boxes


def pad_or_crop(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Fit an image to (height, width): crop bottom/right, zero-pad bottom/right."""
    out = image[:height, :width]
    pad_h = height - out.shape[0]
    pad_w = width - out.shape[1]
    if pad_h > 0 or pad_w > 0:
        out = np.pad(out, ((0, pad_h), (0, pad_w)))
    return out


def _place_keypoints(rng: np.random.Generator, image_size: int) -> np.ndarray:
    """17 jittered points on a 5x4 grid inside the augmentation-safe region.

    The safe region keeps every point inside the canvas under the training
    scale jitter (up to 1.2x, anchored at the origin) and leaves room for the
    blob extent at the borders.
    """
    lo = 0.08 * image_size
    hi = 0.80 * image_size
    cols, rows = 5, 4
    cell_w = (hi - lo) / cols
    cell_h = (hi - lo) / rows
    cells = rng.choice(cols * rows, size=NUM_KEYPOINTS, replace=False)
    jitter = rng.uniform(-0.3, 0.3, size=(NUM_KEYPOINTS, 2))
    pts = np.empty((NUM_KEYPOINTS, 2), dtype=np.float64)
    for i, cell in enumerate(cells):
        r, c = divmod(int(cell), cols)
        pts[i, 0] = lo + (c + 0.5 + jitter[i, 0]) * cell_w
        pts[i, 1] = lo + (r + 0.5 + jitter[i, 1]) * cell_h
    return pts


def synth_generate(
    n: int,
    seed: int,
    out_dir,
    image_size: int = 128,
    age_range: tuple[int, int] = (0, 228),
    blob_radius: tuple[float, float] = (3.0, 8.0),
    blob_peak: tuple[float, float] = (0.55, 0.95),
    noise_level: float = 0.05,
    split: str = "train",
) -> DatasetManifest:
    """Write ``n`` synthetic samples plus a manifest under ``out_dir``.

    Each image is a dark background with 17 bright Gaussian blobs at known
    keypoint locations. Blob radius and peak intensity grow linearly with the
    sampled age, so age is recoverable from global appearance and from any
    single blob. Ages and genders are drawn uniformly. The output is a pure
    function of the arguments: the same seed reproduces identical bytes.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    lo_age, hi_age = int(age_range[0]), int(age_range[1])
    if lo_age < 0 or hi_age < lo_age:
        raise ValueError(f"invalid age_range {age_range}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    entries = []
    for i in range(n):
        age = int(rng.integers(lo_age, hi_age + 1))
        gender = GENDERS[int(rng.integers(0, 2))]
        frac = (age - lo_age) / max(1, hi_age - lo_age)
        radius = blob_radius[0] + (blob_radius[1] - blob_radius[0]) * frac
        peak = blob_peak[0] + (blob_peak[1] - blob_peak[0]) * frac
        keypoints = _place_keypoints(rng, image_size)

        image = rng.uniform(0.0, noise_level, size=(image_size, image_size))
        sigma = radius / 2.0
        for cx, cy in keypoints:
            blob = peak * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
            image = np.maximum(image, blob)
        rel_path = f"images/img_{i:05d}.png"
        save_image(np.clip(image, 0.0, 1.0), out_dir / rel_path)
        entries.append(ManifestEntry(rel_path, age, gender, keypoints))

    manifest = DatasetManifest(entries=entries, split=split, root=out_dir)
    manifest.validate()
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def load_records(manifest: DatasetManifest, long_side: int | None = None) -> list[ImageRecord]:
    """Materialize manifest entries as validated, optionally resized records."""
    records = []
    for e in manifest.entries:
        image = load_image(manifest.root / e.image_path)
        kps = np.asarray(e.keypoints, dtype=np.float64)
        if long_side is not None:
            image, kps, _ = resize_keep_aspect(image, kps, long_side)
        records.append(ImageRecord(image, e.age_months, e.gender, kps).validate())
    return records

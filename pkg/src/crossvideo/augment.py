"""Spatio-temporal augmentations for paired videos.

Point videos get a rigid-plus-scale transform and temporal down-sampling;
image videos get a shared crop and colour jitter.  Every sampled transform is
kept in an :class:`AugmentationRecord` so frames of two views can be matched
back to their source frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import ImageVideo, PointCloudVideo
from .errors import ValidationError

VIEW_TAGS = ("t1", "t2")


@dataclass
class AugmentConfig:
    yaw_range: tuple = (0.0, 2 * math.pi)  # about the gravity (z) axis
    tilt_range: tuple = (-math.pi / 12, math.pi / 12)
    scale_range: tuple = (0.8, 1.25)
    translation_range: tuple = (-0.1, 0.1)
    keep_rate: float = 0.5
    augment_t1: bool = False
    crop_scale_range: tuple = (0.6, 1.0)  # fraction of each image side kept
    jitter_range: tuple = (0.7, 1.3)

    def validate(self):
        for name in ("yaw_range", "tilt_range", "scale_range", "translation_range", "crop_scale_range", "jitter_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ValidationError(f"{name} must be a finite (low, high) pair with low <= high", name)
        if self.scale_range[0] <= 0:
            raise ValidationError("scale_range must be positive", "scale_range")
        if not 0 < self.keep_rate <= 1:
            raise ValidationError("keep_rate must be in (0, 1]", "keep_rate")
        if not 0 < self.crop_scale_range[0] <= self.crop_scale_range[1] <= 1:
            raise ValidationError("crop_scale_range must lie in (0, 1]", "crop_scale_range")
        if self.jitter_range[0] < 0:
            raise ValidationError("jitter_range must be non-negative", "jitter_range")


@dataclass
class GeometricParams:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # Euler x, y, z (radians)
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not self.scale > 0:
            raise ValidationError("scale must be > 0", "scale")
        if not np.all(np.isfinite(self.rotation)):
            raise ValidationError("rotation angles must be finite", "rotation")

    def is_identity(self):
        return self.scale == 1.0 and not self.rotation.any() and not self.translation.any()


@dataclass
class TemporalParams:
    kept_indices: list

    def __post_init__(self):
        self.kept_indices = [int(i) for i in self.kept_indices]
        if not self.kept_indices:
            raise ValidationError("kept_indices must be nonempty", "kept_indices")
        if any(b <= a for a, b in zip(self.kept_indices, self.kept_indices[1:])):
            raise ValidationError("kept_indices must be strictly increasing", "kept_indices")
        if self.kept_indices[0] < 0:
            raise ValidationError("kept_indices must be >= 0", "kept_indices")


@dataclass
class AugmentationRecord:
    geometric: GeometricParams
    temporal: TemporalParams
    view_tag: str = "t1"


@dataclass
class ImageAugParams:
    crop: tuple  # (top, left, height, width) pixels
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


def euler_to_matrix(angles):
    """Rotation ``Rz @ Ry @ Rx`` for Euler angles (x, y, z)."""
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def temporal_keep_pattern(L, keep_rate, rng):
    """Uniform stride with a random phase; always ``max(1, round(rate * L))`` frames."""
    count = max(1, min(L, int(round(keep_rate * L))))
    stride = L / count
    phase = rng.uniform(0.0, stride)
    kept = np.floor(phase + stride * np.arange(count)).astype(int)
    return np.minimum(kept, L - 1).tolist()


def sample_augmentation(rng, L, view_tag, config=None) -> AugmentationRecord:
    """Draw an augmentation record for one view.

    ``t1`` is the raw view unless ``config.augment_t1`` is set.  ``rng`` is a
    ``numpy.random.Generator`` or an int seed.
    """
    config = config or AugmentConfig()
    config.validate()
    if view_tag not in VIEW_TAGS:
        raise ValidationError(f"view_tag must be one of {VIEW_TAGS}", "view_tag")
    if L < 1:
        raise ValidationError("L must be >= 1", "L")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if view_tag == "t1" and not config.augment_t1:
        return AugmentationRecord(GeometricParams(), TemporalParams(list(range(L))), view_tag)
    tilt = rng.uniform(*config.tilt_range, size=2)
    yaw = rng.uniform(*config.yaw_range)
    geo = GeometricParams(
        rotation=np.array([tilt[0], tilt[1], yaw]),
        scale=float(rng.uniform(*config.scale_range)),
        translation=rng.uniform(*config.translation_range, size=3),
    )
    kept = temporal_keep_pattern(L, config.keep_rate, rng)
    return AugmentationRecord(geo, TemporalParams(kept), view_tag)


def apply_point_augmentation(video: PointCloudVideo, rec: AugmentationRecord) -> PointCloudVideo:
    kept = rec.temporal.kept_indices
    if kept[-1] >= len(video):
        raise ValidationError(f"kept index {kept[-1]} out of range for {len(video)} frames", "kept_indices")
    frames = video.frames[kept]
    geo = rec.geometric
    if not geo.is_identity():
        transform = geo.scale * euler_to_matrix(geo.rotation)
        frames = (frames.astype(np.float64) @ transform.T + geo.translation).astype(np.float32)
    return PointCloudVideo(frames, video.sequence_id)


def frame_correspondence(rec1: AugmentationRecord, rec2: AugmentationRecord) -> list:
    """Index pairs (in view 1, in view 2) that come from the same source frame."""
    pos2 = {src: j for j, src in enumerate(rec2.temporal.kept_indices)}
    return [(i, pos2[src]) for i, src in enumerate(rec1.temporal.kept_indices) if src in pos2]


def sample_image_augmentation(rng, image_size, config=None) -> ImageAugParams:
    config = config or AugmentConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    H, W = image_size
    h = max(1, int(round(H * rng.uniform(*config.crop_scale_range))))
    w = max(1, int(round(W * rng.uniform(*config.crop_scale_range))))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    b, c, s = rng.uniform(*config.jitter_range, size=3)
    return ImageAugParams((top, left, h, w), float(b), float(c), float(s))


def _resize_bilinear(frames, out_h, out_w):
    """Align-corners bilinear resize of (L, h, w, C) frames."""
    L, h, w, C = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None, None]
    wx = (xs - x0)[None, None, :, None]
    top = frames[:, y0][:, :, x0] * (1 - wx) + frames[:, y0][:, :, x1] * wx
    bottom = frames[:, y1][:, :, x0] * (1 - wx) + frames[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def apply_image_augmentation(video: ImageVideo, params: ImageAugParams) -> ImageVideo:
    H, W = video.image_size
    top, left, h, w = params.crop
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValidationError(f"crop {params.crop} outside image of size {(H, W)}", "crop")
    if min(params.brightness, params.contrast, params.saturation) < 0:
        raise ValidationError("jitter multipliers must be non-negative", "jitter")
    frames = video.frames[:, top : top + h, left : left + w].astype(np.float64)
    frames = _resize_bilinear(frames, H, W)
    frames = frames * params.brightness
    if params.contrast != 1.0:
        mean = frames.mean(axis=(1, 2, 3), keepdims=True)
        frames = (frames - mean) * params.contrast + mean
    if params.saturation != 1.0:
        gray = frames.mean(axis=3, keepdims=True)
        frames = (frames - gray) * params.saturation + gray
    return ImageVideo(np.clip(frames, 0.0, 1.0).astype(np.float32), video.sequence_id)

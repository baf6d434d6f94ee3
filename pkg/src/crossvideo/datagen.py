"""Synthetic paired point-cloud / image videos and their on-disk format.

A scene holds a few rigid primitives. The first object (the "actor") follows a
trajectory picked by ``motion_class`` while the others stay put; frames are
labelled by trajectory phase (``pause`` or the active motion).  Every image
frame is an orthographic render of the same points, so both modalities carry
the same content.

Dataset layout::

    <root>/manifest.json
    <root>/<seq>/points.bin   float32 LE [L][N][3]
    <root>/<seq>/images.bin   float32 LE [L][H][W][3]
    <root>/<seq>/labels.bin   int32 LE [L]   (-1 = unlabelled)
    <root>/<seq>/meta.json
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError, ValidationError

FORMAT_VERSION = 1
MOTION_NAMES = ("translate", "rotate", "oscillate")
ACTION_NAMES = ("pause",) + MOTION_NAMES
SHAPE_NAMES = ("box", "sphere", "cylinder")
SPLITS = ("pretrain", "train", "test")

# train/test ratio of the reference benchmark (2971 / 892 scenes)
TRAIN_RATIO = 2971 / (2971 + 892)

# orthographic camera looks along -y; x maps to columns, z to rows
VIEW_HALF_EXTENT = 1.5


@dataclass
class PointCloudVideo:
    frames: np.ndarray  # (L, N, 3) float32, meters
    sequence_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3:
            raise ValidationError(f"point frames must be (L, N, 3), got {self.frames.shape}", "frames")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValidationError("point video needs L >= 1 and N >= 1", "frames")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("point coordinates must be finite", "frames")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def num_points(self):
        return self.frames.shape[1]


@dataclass
class ImageVideo:
    frames: np.ndarray  # (L, H, W, 3) float32 in [0, 1]
    sequence_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValidationError(f"image frames must be (L, H, W, 3), got {self.frames.shape}", "frames")
        if self.frames.shape[0] < 1:
            raise ValidationError("image video needs L >= 1", "frames")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]", "frames")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def image_size(self):
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class PairedSample:
    points: PointCloudVideo
    images: ImageVideo
    labels: Optional[np.ndarray] = None  # (L,) int32, per-frame action ids
    point_labels: Optional[np.ndarray] = None  # (L, N) int32, per-point part ids
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.points.sequence_id != self.images.sequence_id:
            raise ValidationError(
                f"sequence ids differ: {self.points.sequence_id!r} vs {self.images.sequence_id!r}",
                "sequence_id",
            )
        if len(self.points) != len(self.images):
            raise ValidationError(
                f"frame counts differ: {len(self.points)} points vs {len(self.images)} images",
                "frame_count",
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (len(self.points),):
                raise ValidationError("labels must have one entry per frame", "labels")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int32)
            if self.point_labels.shape != self.points.frames.shape[:2]:
                raise ValidationError("point_labels must be (L, N)", "point_labels")

    @property
    def sequence_id(self):
        return self.points.sequence_id


@dataclass
class SceneSpec:
    motion_class: int = 0
    num_objects: int = 2
    frame_count: int = 8
    points_per_frame: int = 128
    image_size: tuple = (32, 32)
    rng_seed: int = 0
    layout_seed: Optional[int] = None  # when set, object shapes/sizes/colours come from this seed

    def validate(self):
        if not isinstance(self.motion_class, (int, np.integer)) or not 0 <= self.motion_class < len(MOTION_NAMES):
            raise ValidationError(f"motion_class must be in [0, {len(MOTION_NAMES)})", "motion_class")
        if self.num_objects < 1:
            raise ValidationError("num_objects must be >= 1", "num_objects")
        if self.frame_count < 2:
            raise ValidationError("frame_count must be >= 2", "frame_count")
        if self.points_per_frame < 8:
            raise ValidationError("points_per_frame must be >= 8", "points_per_frame")
        if self.points_per_frame < self.num_objects:
            raise ValidationError("need at least one point per object", "points_per_frame")
        if len(self.image_size) != 2 or min(self.image_size) < 4:
            raise ValidationError("image_size must be (H, W) with both >= 4", "image_size")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValidationError("rng_seed must be an unsigned 64-bit integer", "rng_seed")
        if self.layout_seed is not None and not 0 <= int(self.layout_seed) < 2**64:
            raise ValidationError("layout_seed must be an unsigned 64-bit integer", "layout_seed")


# ---------------------------------------------------------------------------
# geometry helpers


def rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_surface(kind, dims, n, rng):
    if kind == 0:  # box with half extents dims
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        uv[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
        return uv * dims
    if kind == 1:  # ellipsoid
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * dims
    # cylinder around z: side wall plus caps
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    r = np.ones(n)
    cap = rng.uniform(size=n) < 0.25
    z[cap] = np.where(rng.uniform(size=cap.sum()) < 0.5, -1.0, 1.0)
    r[cap] = np.sqrt(rng.uniform(size=cap.sum()))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts * np.array([dims[0], dims[0], dims[2]])


def _phase_bounds(L, rng):
    """Start/end (exclusive) of the active phase; at least one active frame.

    Sequences longer than two frames open with a pause so that the first
    active frame is visibly displaced from its predecessor.
    """
    lo = 1 if L > 2 else 0
    start = int(rng.integers(lo, max(lo, L // 2) + 1))
    min_len = max(1, (L + 1) // 3)
    end = int(rng.integers(min(L, start + min_len), L + 1))
    return min(start, L - 1), max(end, min(start, L - 1) + 1)


PIVOT_OFFSET = 0.3  # distance of the swing pivot from the actor's rest centre


def _actor_poses(motion_class, L, start, end, rng):
    """Per-frame (yaw, offset) of the actor relative to its rest pose.

    ``rotate`` swings the actor about a vertical axis through a pivot beside
    it, so the motion is visible whatever the primitive's symmetry.
    """
    yaw = np.zeros(L)
    offset = np.zeros((L, 3))
    steps = np.clip(np.arange(L) - start + 1, 0, end - start)  # active steps so far
    heading = rng.uniform(0.0, 2 * np.pi)
    direction = np.array([math.cos(heading), math.sin(heading), 0.0])
    if motion_class == 0:
        speed = rng.uniform(0.15, 0.25)
        offset = (steps - (end - start) / 2.0)[:, None] * speed * direction
    elif motion_class == 1:
        omega = rng.uniform(0.5, 0.8) * rng.choice([-1.0, 1.0])
        yaw = steps * omega
        arm = -PIVOT_OFFSET * direction  # rest centre relative to the pivot
        for t in range(L):
            offset[t] = rotation_z(yaw[t]) @ arm - arm
    else:
        # bob between +amp and -amp, then hold the last height
        amp = rng.uniform(0.15, 0.25)
        offset[:, 2] = np.where(steps > 0, amp * np.where(steps % 2 == 1, 1.0, -1.0), 0.0)
    return yaw, offset


def render_frame(points, colors, image_size, splat_radius=0):
    """Orthographic splat of one frame.

    Points are drawn far-to-near so nearer points win; shading brightens
    points closer to the camera.
    """
    H, W = image_size
    img = np.zeros((H, W, 3), dtype=np.float32)
    cols, rows = project_to_pixels(points, image_size)
    depth = points[:, 1]
    shade = np.clip(0.5 + 0.5 * (depth + VIEW_HALF_EXTENT) / (2 * VIEW_HALF_EXTENT), 0.3, 1.0)
    rgb = (colors * shade[:, None]).astype(np.float32)
    order = np.argsort(-depth, kind="stable")
    for i in order:
        r0, c0 = rows[i], cols[i]
        r_lo, r_hi = max(r0 - splat_radius, 0), min(r0 + splat_radius + 1, H)
        c_lo, c_hi = max(c0 - splat_radius, 0), min(c0 + splat_radius + 1, W)
        if r_lo < r_hi and c_lo < c_hi:
            img[r_lo:r_hi, c_lo:c_hi] = rgb[i]
    return img


def project_to_pixels(points, image_size):
    """Integer (col, row) pixel of each point under the fixed orthographic camera."""
    H, W = image_size
    scale_c = W / (2 * VIEW_HALF_EXTENT)
    scale_r = H / (2 * VIEW_HALF_EXTENT)
    cols = np.floor((points[:, 0] + VIEW_HALF_EXTENT) * scale_c).astype(np.int64)
    rows = np.floor((VIEW_HALF_EXTENT - points[:, 2]) * scale_r).astype(np.int64)
    return cols, rows


def synth_scene(spec: SceneSpec, sequence_id: Optional[str] = None) -> PairedSample:
    """Generate one labelled paired sample; deterministic in ``spec.rng_seed``."""
    spec.validate()
    rng = np.random.default_rng(int(spec.rng_seed))
    L, N, K = spec.frame_count, spec.points_per_frame, spec.num_objects

    counts = np.full(K, N // K)
    counts[: N % K] += 1
    shape_rng = rng if spec.layout_seed is None else np.random.default_rng(int(spec.layout_seed))
    kinds = shape_rng.integers(0, len(SHAPE_NAMES), size=K)
    dims = shape_rng.uniform(0.12, 0.28, size=(K, 3))
    colors = shape_rng.uniform(0.3, 1.0, size=(K, 3))
    centers = np.zeros((K, 3))
    ring = rng.uniform(0.0, 2 * np.pi)
    for o in range(1, K):
        angle = ring + 2 * np.pi * (o - 1) / max(K - 1, 1)
        centers[o] = [0.7 * math.cos(angle), 0.7 * math.sin(angle), 0.0]
    local = [_sample_surface(kinds[o], dims[o], counts[o], rng) for o in range(K)]

    start, end = _phase_bounds(L, rng)
    yaw, offset = _actor_poses(spec.motion_class, L, start, end, rng)
    scene_rot = rotation_z(rng.uniform(0.0, 2 * np.pi))

    frames = np.empty((L, N, 3))
    for t in range(L):
        parts = [local[0] @ rotation_z(yaw[t]).T + centers[0] + offset[t]]
        parts += [local[o] + centers[o] for o in range(1, K)]
        frames[t] = np.concatenate(parts) @ scene_rot.T
    frames = frames.astype(np.float32)

    point_colors = np.repeat(colors, counts, axis=0)
    images = np.stack([render_frame(frames[t], point_colors, spec.image_size) for t in range(L)])

    labels = np.zeros(L, dtype=np.int32)
    labels[start:end] = 1 + spec.motion_class
    point_labels = np.broadcast_to(np.repeat(kinds, counts).astype(np.int32), (L, N)).copy()

    sid = sequence_id if sequence_id is not None else f"seq_{int(spec.rng_seed):020d}"
    meta = {"spec": _spec_echo(spec), "colors": colors.tolist()}
    return PairedSample(
        PointCloudVideo(frames, sid), ImageVideo(images, sid), labels, point_labels, meta
    )


def _spec_echo(spec):
    d = asdict(spec)
    d["image_size"] = list(spec.image_size)
    d["rng_seed"] = int(spec.rng_seed)
    d["motion_class"] = int(spec.motion_class)
    return d


# ---------------------------------------------------------------------------
# file format


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_or_raise(path: Path, data: bytes):
    try:
        _atomic_write(path, data)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}", path) from exc


def write_sequence(sample: PairedSample, directory) -> None:
    """Write ``sample`` into ``directory`` (created if missing), one atomic file at a time."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {directory}: {exc}", directory) from exc
    L = len(sample.points)
    labels = sample.labels if sample.labels is not None else np.full(L, -1, dtype=np.int32)
    _write_or_raise(directory / "points.bin", sample.points.frames.astype("<f4").tobytes())
    _write_or_raise(directory / "images.bin", sample.images.frames.astype("<f4").tobytes())
    _write_or_raise(directory / "labels.bin", np.asarray(labels).astype("<i4").tobytes())
    if sample.point_labels is not None:
        _write_or_raise(directory / "point_labels.bin", sample.point_labels.astype("<i4").tobytes())
    meta = {
        "sequence_id": sample.sequence_id,
        "frame_count": L,
        "point_count": sample.points.num_points,
        "image_size": list(sample.images.image_size),
        **sample.meta,
    }
    _write_or_raise(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())


def _read_array(path: Path, dtype, shape):
    if not path.exists():
        raise DatasetError(f"missing file {path}", path)
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DatasetError(f"corrupt frame data in {path}: {len(raw)} bytes, expected {expected}", path)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def read_sequence(directory, require_labels=False) -> PairedSample:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"missing file {meta_path}", meta_path)
    try:
        meta = json.loads(meta_path.read_text())
        L, N = int(meta["frame_count"]), int(meta["point_count"])
        H, W = (int(v) for v in meta["image_size"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt metadata {meta_path}: {exc}", meta_path) from exc
    points = _read_array(directory / "points.bin", "<f4", (L, N, 3))
    try:
        images = _read_array(directory / "images.bin", "<f4", (L, H, W, 3))
    except DatasetError as exc:
        if (directory / "images.bin").exists():
            size = (directory / "images.bin").stat().st_size
            if size % (H * W * 3 * 4) == 0 and size // (H * W * 3 * 4) != L:
                raise DatasetError(
                    f"frame-count mismatch in {directory}: {L} point frames vs "
                    f"{size // (H * W * 3 * 4)} image frames",
                    directory,
                ) from exc
        raise
    labels_path = directory / "labels.bin"
    labels = None
    if labels_path.exists():
        labels = _read_array(labels_path, "<i4", (L,))
        if np.all(labels < 0):
            labels = None
    if require_labels and labels is None:
        raise DatasetError(f"labels required but missing in {directory}", labels_path)
    point_labels = None
    if (directory / "point_labels.bin").exists():
        point_labels = _read_array(directory / "point_labels.bin", "<i4", (L, N))
    sid = meta.get("sequence_id", directory.name)
    extra = {k: v for k, v in meta.items() if k not in ("sequence_id", "frame_count", "point_count", "image_size")}
    try:
        return PairedSample(PointCloudVideo(points, sid), ImageVideo(images, sid), labels, point_labels, extra)
    except ValidationError as exc:
        raise DatasetError(f"invalid sequence in {directory}: {exc}", directory) from exc


def write_manifest(root, splits: dict, samples: dict, class_names=ACTION_NAMES):
    root = Path(root)
    manifest = {
        "version": FORMAT_VERSION,
        "class_names": list(class_names),
        "splits": {name: list(splits.get(name, [])) for name in SPLITS},
        "sequences": {
            name: {
                "frame_count": len(s.points),
                "point_count": s.points.num_points,
                "image_size": list(s.images.image_size),
                "class_names": list(class_names),
            }
            for name, s in samples.items()
        },
    }
    _write_or_raise(root / "manifest.json", json.dumps(manifest, indent=2).encode())
    return manifest


def read_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing manifest {path}", path)
    try:
        manifest = json.loads(path.read_text())
    except ValueError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}", path) from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}", path)
    return manifest


def load_dataset(root, split: str) -> list:
    """Samples listed under ``split`` in the manifest, in manifest order."""
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}", "split")
    manifest = read_manifest(root)
    names = manifest.get("splits", {}).get(split, [])
    require = split != "pretrain"
    return [read_sequence(Path(root) / name, require_labels=require) for name in names]


def class_names(root) -> list:
    return list(read_manifest(root).get("class_names", ACTION_NAMES))


def sequence_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def generate_dataset(
    root,
    counts: dict,
    frames: int = 8,
    points: int = 128,
    image_size: Sequence[int] = (32, 32),
    seed: int = 0,
    num_objects: int = 2,
    shared_splits: Optional[dict] = None,
    layout_seed: Optional[int] = None,
) -> dict:
    """Write a synthetic dataset; ``counts`` maps split -> number of new sequences.

    ``shared_splits`` maps a split to a list of other splits whose sequences it
    reuses, e.g. ``{"pretrain": ["train"]}``.  Motion classes cycle so every
    split is class balanced.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits, samples = {}, {}
    index = 0
    for split in SPLITS:
        names = []
        for _ in range(int(counts.get(split, 0))):
            name = f"seq_{index:05d}"
            spec = SceneSpec(
                motion_class=index % len(MOTION_NAMES),
                num_objects=num_objects,
                frame_count=frames,
                points_per_frame=points,
                image_size=tuple(image_size),
                rng_seed=sequence_seed(seed, index),
                layout_seed=layout_seed,
            )
            sample = synth_scene(spec, sequence_id=name)
            write_sequence(sample, root / name)
            samples[name] = sample
            names.append(name)
            index += 1
        splits[split] = names
    for split, sources in (shared_splits or {}).items():
        for src in sources:
            splits[split] = splits.get(split, []) + splits.get(src, [])
    return write_manifest(root, splits, samples)


def split_counts(total: int) -> dict:
    """Train/test sizes at the reference benchmark ratio."""
    train = min(total, math.ceil(total * TRAIN_RATIO))
    return {"train": train, "test": total - train}

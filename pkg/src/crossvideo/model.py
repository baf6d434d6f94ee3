"""Three-tower backbone: point video encoder, image video encoder, projection heads.

The point encoder is a small analogue of a point-4D-convolution + transformer
stack.  Per frame it picks anchors by farthest point sampling, gathers the
nearest neighbours of each anchor inside a ball in every frame of a temporal
window (a "point tube"), encodes the (dx, dy, dz, dt) offsets with a shared
MLP and max-pools them.  Frame features are the max over anchors, then a
transformer with windowed attention mixes them across time.  Both augmented
point views go through the same module, so the two towers share weights by
construction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class EncoderConfig:
    feature_dim: int = 64
    spatial_stride: int = 4
    ball_radius: float = 0.5
    neighbor_samples: int = 8
    time_window: int = 3
    transformer_depth: int = 2
    transformer_heads: int = 4
    projection_hidden: int = 128
    projection_dim: int = 256
    projection_batchnorm: bool = True
    image_size: tuple = (32, 32)
    image_channels: tuple = (16, 32)

    def validate(self):
        if self.feature_dim < 8:
            raise ValidationError("feature_dim must be >= 8", "feature_dim")
        if self.spatial_stride < 1:
            raise ValidationError("spatial_stride must be >= 1", "spatial_stride")
        if not self.ball_radius > 0:
            raise ValidationError("ball_radius must be > 0", "ball_radius")
        if self.neighbor_samples < 1:
            raise ValidationError("neighbor_samples must be >= 1", "neighbor_samples")
        if self.time_window < 1 or self.time_window % 2 == 0:
            raise ValidationError("time_window must be odd and >= 1", "time_window")
        if self.transformer_depth < 0:
            raise ValidationError("transformer_depth must be >= 0", "transformer_depth")
        if self.transformer_heads < 1 or self.feature_dim % self.transformer_heads:
            raise ValidationError("transformer_heads must divide feature_dim", "transformer_heads")
        if self.projection_hidden < 1 or self.projection_dim < 1:
            raise ValidationError("projection sizes must be >= 1", "projection_dim")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown encoder config keys {sorted(unknown)}", sorted(unknown)[0])
        d = dict(d)
        for key in ("image_size", "image_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EmbeddingSet:
    """Per-frame embeddings and their max-pooled video embedding.

    ``frame_embeddings`` is ``(..., L, d)``; ``video_embedding`` is ``(..., d)``
    and always equals the max over the frame axis.
    """

    frame_embeddings: torch.Tensor
    video_embedding: torch.Tensor
    frame_source_indices: Optional[torch.Tensor] = None

    @classmethod
    def from_frames(cls, frames, source_indices=None):
        return cls(frames, frames.max(dim=-2).values, source_indices)


# ---------------------------------------------------------------------------
# point grouping


def duplicate_mask(xyz):
    """True for points that exactly repeat an earlier point of the same frame."""
    flat = xyz.detach().reshape(-1, *xyz.shape[-2:])
    same = (torch.cdist(flat, flat, compute_mode="donot_use_mm_for_euclid_dist") == 0).reshape(
        *xyz.shape[:-1], xyz.shape[-2]
    )
    n = xyz.shape[-2]
    earlier = torch.ones(n, n, dtype=torch.bool, device=xyz.device).tril(-1)
    return (same & earlier).any(-1)


def farthest_point_sample(xyz, num_anchors, valid=None, anchor_counts=None):
    """Farthest point sampling over (..., N, 3) clouds.

    Starts from the valid point farthest from the centroid (lowest index on
    ties) so the choice does not depend on point order.  Slots past a cloud's
    own anchor count (``anchor_counts``, default: its number of valid points)
    repeat the first anchor.  Returns (..., num_anchors) indices.
    """
    batch_shape = xyz.shape[:-2]
    n = xyz.shape[-2]
    pts = xyz.detach().reshape(-1, n, 3)
    b = pts.shape[0]
    if valid is None:
        valid = torch.ones(b, n, dtype=torch.bool)
    valid = valid.reshape(b, n)
    counts = valid.sum(-1)
    centroid = (pts * valid[..., None]).sum(1) / counts[:, None]
    from_center = ((pts - centroid[:, None]) ** 2).sum(-1).masked_fill(~valid, -1.0)
    current = from_center.argmax(-1)
    rows = torch.arange(b)
    idx = torch.empty(b, num_anchors, dtype=torch.long)
    dist = torch.full((b, n), float("inf")).masked_fill(~valid, -1.0)
    for s in range(num_anchors):
        idx[:, s] = current
        d = ((pts - pts[rows, current][:, None]) ** 2).sum(-1)
        dist = torch.minimum(dist, d.masked_fill(~valid, -1.0))
        current = dist.argmax(-1)
    # frames with few valid points: repeat the first anchor
    limit = counts if anchor_counts is None else anchor_counts.reshape(b)
    surplus = torch.arange(num_anchors)[None] >= limit[:, None]
    idx = torch.where(surplus, idx[:, :1].expand_as(idx), idx)
    return idx.reshape(*batch_shape, num_anchors)


def _gather(points, idx):
    """points (B, N, C), idx (B, ...) -> (B, ..., C)."""
    b = points.shape[0]
    flat = idx.reshape(b, -1)
    out = torch.gather(points, 1, flat[..., None].expand(-1, -1, points.shape[-1]))
    return out.reshape(*idx.shape, points.shape[-1])


def ball_query(anchors, points, radius, k, valid=None):
    """k nearest valid points to each anchor, restricted to ``radius``.

    anchors (B, M, 3), points (B, N, 3).  Returns neighbour indices (B, M, k)
    and a mask of slots that hold a point inside the ball.  Slots beyond the
    available in-ball points repeat the nearest one.
    """
    d2 = ((anchors[:, :, None] - points[:, None]) ** 2).sum(-1).detach()
    if valid is not None:
        d2 = d2.masked_fill(~valid[:, None], float("inf"))
    k_eff = min(k, points.shape[1])
    dist, idx = torch.topk(d2, k_eff, dim=-1, largest=False, sorted=True)
    inside = dist <= radius**2
    idx = torch.where(inside, idx, idx[..., :1].expand_as(idx))
    inside = inside | inside[..., :1]
    if k_eff < k:
        pad = k - k_eff
        idx = torch.cat([idx, idx[..., :1].expand(*idx.shape[:-1], pad)], -1)
        inside = torch.cat([inside, inside[..., :1].expand(*inside.shape[:-1], pad)], -1)
    return idx, inside


class PointTubeEmbedding(nn.Module):
    """Per-frame anchor features from spatio-temporal neighbourhoods."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.feature_dim
        self.config = config
        self.offset_mlp = nn.Sequential(
            nn.Linear(4, d // 2), nn.ReLU(), nn.Linear(d // 2, d), nn.ReLU(), nn.Linear(d, d)
        )
        self.anchor_pos = nn.Linear(3, d)
        self.anchor_mlp = nn.Sequential(nn.ReLU(), nn.Linear(d, d))

    def forward(self, xyz):
        """xyz (B, L, N, 3) -> anchor features (B, L, M, d) and anchor positions (B, L, M, 3)."""
        cfg = self.config
        B, L, N, _ = xyz.shape
        valid = ~duplicate_mask(xyz)
        num_valid = valid.sum(-1)
        per_frame = torch.div(num_valid + cfg.spatial_stride - 1, cfg.spatial_stride, rounding_mode="floor")
        M = int(per_frame.max())
        anchors_idx = farthest_point_sample(xyz, M, valid, per_frame)  # (B, L, M)
        pts = xyz.reshape(B * L, N, 3)
        anchors = _gather(pts, anchors_idx.reshape(B * L, M)).reshape(B, L, M, 3)

        half = cfg.time_window // 2
        tube = []
        for dt in range(-half, half + 1):
            src = torch.arange(L).add(dt).clamp(0, L - 1)  # replicate padding at the ends
            nb_pts = xyz[:, src].reshape(B * L, N, 3)
            nb_valid = valid[:, src].reshape(B * L, N)
            flat_anchors = anchors.reshape(B * L, M, 3)
            idx, inside = ball_query(flat_anchors, nb_pts, cfg.ball_radius, cfg.neighbor_samples, nb_valid)
            offsets = (_gather(nb_pts, idx) - flat_anchors[:, :, None]) / cfg.ball_radius
            dt_col = torch.full_like(offsets[..., :1], float(dt))
            feats = self.offset_mlp(torch.cat([offsets, dt_col], -1))
            tube.append(feats.masked_fill(~inside[..., None], float("-inf")))
        anchor_feats = torch.cat(tube, dim=2).max(dim=2).values  # (B*L, M, d)
        anchor_feats = self.anchor_mlp(anchor_feats + self.anchor_pos(anchors.reshape(B * L, M, 3)))
        return anchor_feats.reshape(B, L, M, -1), anchors


# ---------------------------------------------------------------------------
# temporal transformer


class LocalAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads = heads
        self.half = window // 2
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * self.half + 1))

    def forward(self, x):
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        offset = torch.arange(L)[None, :] - torch.arange(L)[:, None]
        allowed = offset.abs() <= self.half
        bias = self.rel_bias[:, offset.clamp(-self.half, self.half) + self.half]
        scores = (scores + bias).masked_fill(~allowed, float("-inf"))
        attn = scores.softmax(-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, L, D))


class TemporalBlock(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = LocalAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TemporalTransformer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TemporalBlock(config.feature_dim, config.transformer_heads, config.time_window)
            for _ in range(config.transformer_depth)
        )
        self.norm = nn.LayerNorm(config.feature_dim)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


# ---------------------------------------------------------------------------
# encoders and heads


class PointVideoEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embed = PointTubeEmbedding(config)
        self.temporal = TemporalTransformer(config)

    def forward(self, xyz):
        """(B, L, N, 3) -> per-frame features (B, L, d)."""
        return self.forward_anchors(xyz)[0]

    def forward_anchors(self, xyz):
        """Frame features plus the per-anchor features and positions they pool."""
        if xyz.ndim != 4 or xyz.shape[-1] != 3:
            raise ValidationError(f"point video must be (B, L, N, 3), got {tuple(xyz.shape)}", "points")
        if xyz.shape[1] < 1 or xyz.shape[2] < 1:
            raise ValidationError("point video has an empty frame", "points")
        anchor_feats, anchors = self.embed(xyz)
        frames = self.temporal(anchor_feats.max(dim=2).values)
        return frames, anchor_feats, anchors


class ImageVideoEncoder(nn.Module):
    """3D convolutions down to a pooled vector per frame, then the temporal transformer."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        kt = min(3, config.time_window)
        widths = (3,) + tuple(config.image_channels) + (config.feature_dim,)
        layers = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Conv3d(cin, cout, (kt, 3, 3), stride=(1, 2, 2), padding=(kt // 2, 1, 1)))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        self.conv = nn.Sequential(*layers)
        self.temporal = TemporalTransformer(config)

    def forward(self, frames):
        """(B, L, H, W, 3) -> per-frame features (B, L, d)."""
        if frames.ndim != 5 or tuple(frames.shape[2:4]) != tuple(self.config.image_size):
            raise ValidationError(
                f"image video must be (B, L, {self.config.image_size[0]}, {self.config.image_size[1]}, 3), "
                f"got {tuple(frames.shape)}",
                "image_size",
            )
        x = self.conv(frames.permute(0, 4, 1, 2, 3))  # (B, d, L, h, w)
        x = x.amax(dim=(-1, -2)).transpose(1, 2)
        return self.temporal(x)


class ProjectionHead(nn.Module):
    """Two-layer perceptron applied to every frame embedding.

    With ``batchnorm`` the hidden layer is normalised over all frames in the
    batch, which keeps the embeddings from collapsing onto a shared direction.
    """

    def __init__(self, in_dim, hidden, out_dim, batchnorm=True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.norm = nn.BatchNorm1d(hidden) if batchnorm else None
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        h = self.fc1(x)
        if self.norm is not None:
            h = self.norm(h.reshape(-1, h.shape[-1])).reshape(h.shape)
        return self.fc2(F.relu(h))


class CrossVideoModel(nn.Module):
    def __init__(self, config: Optional[EncoderConfig] = None, with_image_branch=True):
        super().__init__()
        config = config or EncoderConfig()
        config.validate()
        self.config = config
        d = config.feature_dim
        self.point_encoder = PointVideoEncoder(config)
        self.point_head = ProjectionHead(d, config.projection_hidden, config.projection_dim, config.projection_batchnorm)
        if with_image_branch:
            self.image_encoder = ImageVideoEncoder(config)
            self.image_head = ProjectionHead(d, config.projection_hidden, config.projection_dim, config.projection_batchnorm)
        else:
            self.image_encoder = None
            self.image_head = None

    def encode_points(self, xyz, source_indices=None) -> EmbeddingSet:
        return EmbeddingSet.from_frames(self.point_encoder(xyz), source_indices)

    def encode_images(self, frames) -> EmbeddingSet:
        if self.image_encoder is None:
            raise ValidationError("model was loaded without its image branch", "image_encoder")
        return EmbeddingSet.from_frames(self.image_encoder(frames))

    def project_points(self, emb: EmbeddingSet) -> EmbeddingSet:
        return project(emb, self.point_head)

    def project_images(self, emb: EmbeddingSet) -> EmbeddingSet:
        return project(emb, self.image_head)


def project(features: EmbeddingSet, head: ProjectionHead) -> EmbeddingSet:
    if features.frame_embeddings.shape[-1] != head.fc1.in_features:
        raise ValidationError(
            f"feature dim {features.frame_embeddings.shape[-1]} does not match head input {head.fc1.in_features}",
            "feature_dim",
        )
    return EmbeddingSet.from_frames(head(features.frame_embeddings), features.frame_source_indices)


# single-video conveniences -------------------------------------------------


def encode_points(video, model: CrossVideoModel) -> EmbeddingSet:
    """Pre-projection features of one :class:`PointCloudVideo` (L x d)."""
    xyz = torch.as_tensor(np.asarray(video.frames), dtype=torch.float32)[None]
    emb = model.encode_points(xyz)
    return EmbeddingSet(emb.frame_embeddings[0], emb.video_embedding[0], torch.arange(xyz.shape[1]))


def encode_images(video, model: CrossVideoModel) -> EmbeddingSet:
    frames = torch.as_tensor(np.asarray(video.frames), dtype=torch.float32)[None]
    emb = model.encode_images(frames)
    return EmbeddingSet(emb.frame_embeddings[0], emb.video_embedding[0], torch.arange(frames.shape[1]))


def build_model(config: Optional[EncoderConfig] = None, seed: int = 0, with_image_branch=True) -> CrossVideoModel:
    """Model with weights drawn from a private generator seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return CrossVideoModel(config, with_image_branch)


# ---------------------------------------------------------------------------
# parameters and checkpoints

BRANCHES = ("point_encoder", "point_head", "image_encoder", "image_head")
MODEL_KIND = "crossvideo.model"


@dataclass
class ModelParams:
    """Named weights of the four towers; image entries are ``None`` after discard."""

    config: EncoderConfig
    point_encoder: dict
    point_head: dict
    image_encoder: Optional[dict] = None
    image_head: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: CrossVideoModel, meta=None):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        parts = {b: {k[len(b) + 1 :]: v for k, v in state.items() if k.startswith(b + ".")} for b in BRANCHES}
        if model.image_encoder is None:
            parts["image_encoder"] = parts["image_head"] = None
        return cls(model.config, **parts, meta=dict(meta or {}))

    @property
    def has_image_branch(self):
        return self.image_encoder is not None

    def tensors(self):
        out = {}
        for branch in BRANCHES:
            for name, value in (getattr(self, branch) or {}).items():
                out[f"{branch}.{name}"] = value
        return out

    def to_model(self) -> CrossVideoModel:
        model = CrossVideoModel(EncoderConfig.from_dict(self.config.to_dict()), self.has_image_branch)
        state = {k: v.detach().clone() if torch.is_tensor(v) else torch.as_tensor(np.array(v)) for k, v in self.tensors().items()}
        model.load_state_dict(state)
        return model


def save_checkpoint(params, path, extra_meta=None):
    """Write a :class:`ModelParams` (or a model) as a versioned checkpoint."""
    from . import checkpoint

    if isinstance(params, CrossVideoModel):
        params = ModelParams.from_model(params)
    meta = {"kind": MODEL_KIND, "config": params.config.to_dict(), **params.meta, **(extra_meta or {})}
    checkpoint.write(path, params.tensors(), meta)


def load_checkpoint(path, discard_image=False) -> ModelParams:
    """Read a model checkpoint; ``discard_image`` keeps only the point branch."""
    from . import checkpoint
    from .errors import CheckpointError

    tensors, meta = checkpoint.read(path)
    if meta.get("kind") not in (MODEL_KIND, "crossvideo.train_state"):
        raise CheckpointError(f"{path} is not a model checkpoint")
    prefix = "model." if meta.get("kind") == "crossvideo.train_state" else ""
    parts = {}
    for branch in BRANCHES:
        head = f"{prefix}{branch}."
        parts[branch] = {k[len(head) :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(head)}
    if not parts["point_encoder"]:
        raise CheckpointError(f"{path} has no point-branch weights")
    if discard_image or not parts["image_encoder"]:
        parts["image_encoder"] = parts["image_head"] = None
    config = EncoderConfig.from_dict(meta["config"])
    extra = {k: v for k, v in meta.items() if k not in ("kind", "config")}
    return ModelParams(config, **parts, meta=extra if prefix == "" else {})

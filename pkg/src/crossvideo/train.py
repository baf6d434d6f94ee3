"""Contrastive pretraining and per-frame segmentation fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .augment import (
    apply_image_augmentation,
    apply_point_augmentation,
    frame_correspondence,
    sample_augmentation,
    sample_image_augmentation,
)
from .config import TrainConfig
from .errors import CheckpointError, NumericalError, ValidationError
from .model import CrossVideoModel, ModelParams, PointVideoEncoder, build_model, load_checkpoint, save_checkpoint
from .objective import ContrastiveBatch, LossResult, total_loss

log = logging.getLogger(__name__)

STATE_KIND = "crossvideo.train_state"
FINETUNE_MODES = ("full", "linear_probe", "scratch")
FINETUNE_OPTIMIZERS = ("sgd", "adam")
TASKS = ("action", "semantic")


def lr_schedule(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_epochs`` epochs, then constant."""
    if step < 0:
        raise ValidationError("step must be >= 0", "step")
    warmup = config.warmup_epochs * steps_per_epoch
    if step >= warmup:
        return config.learning_rate
    return config.learning_rate * (step / warmup)


# ---------------------------------------------------------------------------
# objective bridge


class _PrecomputedLoss(torch.autograd.Function):
    """Scalar whose gradients w.r.t. ``inputs`` were computed analytically elsewhere."""

    @staticmethod
    def forward(ctx, value, grads, *inputs):
        ctx.grads = grads
        return value.clone()

    @staticmethod
    def backward(ctx, grad_out):
        return (None, None, *(grad_out * g for g in ctx.grads))


def contrastive_loss(z_v_t1, z_v_t2, z_f_t1, z_f_t2, h_v, h_f, frame_mask, temperature, toggles=None, symmetrize=False):
    """Differentiable total objective over torch embeddings.

    Returns the loss tensor and the full :class:`LossResult`.
    """
    inputs = (z_v_t1, z_v_t2, z_f_t1, z_f_t2, h_v, h_f)
    arrays = [t.detach().cpu().double().numpy() for t in inputs]
    mask = frame_mask.cpu().numpy() if isinstance(frame_mask, torch.Tensor) else frame_mask
    batch = ContrastiveBatch(*arrays, temperature=temperature, frame_mask=mask)
    result = total_loss(batch, toggles=toggles, symmetrize=symmetrize)
    names = ("z_v_t1", "z_v_t2", "z_f_t1", "z_f_t2", "h_v", "h_f")
    grads = tuple(torch.as_tensor(result.grads[n], dtype=t.dtype) for n, t in zip(names, inputs))
    value = torch.tensor(result.total, dtype=z_v_t1.dtype)
    return _PrecomputedLoss.apply(value, grads, *inputs), result


# ---------------------------------------------------------------------------
# train state


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0  # optimizer steps taken
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    epoch_terms: list = field(default_factory=list)  # per-epoch mean of each loss term
    rng_state: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # model state_dict
    momentum: dict = field(default_factory=dict)  # param name -> momentum buffer
    config: dict = field(default_factory=dict)


def save_train_state(state: TrainState, path):
    tensors = {f"model.{k}": v for k, v in state.params.items()}
    tensors.update({f"momentum.{k}": v for k, v in state.momentum.items()})
    meta = {
        "kind": STATE_KIND,
        "epoch": state.epoch,
        "step": state.step,
        "epoch_losses": state.epoch_losses,
        "step_losses": state.step_losses,
        "epoch_terms": state.epoch_terms,
        "rng_state": state.rng_state,
        "config": state.config.get("model", {}),
        "train_config": state.config,
    }
    checkpoint.write(path, tensors, meta)


def load_train_state(path) -> TrainState:
    tensors, meta = checkpoint.read(path)
    if meta.get("kind") != STATE_KIND:
        raise CheckpointError(f"{path} is not a training-state checkpoint")
    return TrainState(
        epoch=meta["epoch"],
        step=meta["step"],
        epoch_losses=list(meta["epoch_losses"]),
        step_losses=list(meta["step_losses"]),
        epoch_terms=list(meta.get("epoch_terms", [])),
        rng_state=meta["rng_state"],
        params={k[6:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")},
        momentum={k[9:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("momentum.")},
        config=meta["train_config"],
    )


def _capture(state, model, optimizer):
    state.params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    state.momentum = {
        names[id(p)]: s["momentum_buffer"].detach().clone()
        for p, s in optimizer.state.items()
        if s.get("momentum_buffer") is not None
    }


def _restore(state, model, optimizer):
    model.load_state_dict(state.params)
    params = dict(model.named_parameters())
    for name, buf in state.momentum.items():
        optimizer.state[params[name]]["momentum_buffer"] = buf.clone()


def epoch_rng(seed, epoch, stream=0):
    return np.random.default_rng([int(seed), int(stream), int(epoch)])


# ---------------------------------------------------------------------------
# pretraining


def _clip_start(L, length, rng):
    if length is None or length >= L:
        return 0
    return int(rng.integers(0, L - length + 1))


def _crop_clip(sample, length, rng):
    start = _clip_start(len(sample.points), length, rng)
    stop = start + (length or len(sample.points))
    return sample.points.frames[start:stop], sample.images.frames[start:stop]


def make_views(samples, rng, config: TrainConfig):
    """Augment a batch and align frames across the two point views and the images."""
    from .datagen import ImageVideo, PointCloudVideo

    pts1, pts2, imgs, pairs = [], [], [], []
    for s in samples:
        frames, images = _crop_clip(s, config.pretrain_sequence_length, rng)
        video = PointCloudVideo(frames, s.sequence_id)
        L = len(video)
        rec1 = sample_augmentation(rng, L, "t1", config.augment)
        rec2 = sample_augmentation(rng, L, "t2", config.augment)
        pts1.append(apply_point_augmentation(video, rec1).frames)
        pts2.append(apply_point_augmentation(video, rec2).frames)
        img = ImageVideo(images, s.sequence_id)
        params = sample_image_augmentation(rng, img.image_size, config.augment)
        imgs.append(apply_image_augmentation(img, params).frames)
        pairs.append([(i, j, rec1.temporal.kept_indices[i]) for i, j in frame_correspondence(rec1, rec2)])
    for name, group in (("view t1", pts1), ("view t2", pts2), ("images", imgs)):
        if len({g.shape for g in group}) != 1:
            raise ValidationError(f"{name} clips in a batch must share one shape", "frame_count")
    F_max = max(len(p) for p in pairs)
    B = len(samples)
    idx = np.zeros((3, B, F_max), dtype=np.int64)
    mask = np.zeros((B, F_max), dtype=bool)
    for b, p in enumerate(pairs):
        for f, triple in enumerate(p):
            idx[:, b, f] = triple
            mask[b, f] = True
    return {
        "points_t1": torch.from_numpy(np.stack(pts1)),
        "points_t2": torch.from_numpy(np.stack(pts2)),
        "images": torch.from_numpy(np.stack(imgs)),
        "align": torch.from_numpy(idx),
        "mask": torch.from_numpy(mask),
    }


def forward_views(model: CrossVideoModel, views, observer=None):
    """Project all three towers and gather the aligned frame embeddings."""
    e1 = model.encode_points(views["points_t1"])
    e2 = model.encode_points(views["points_t2"])
    eh = model.encode_images(views["images"])
    p1, p2, ph = model.project_points(e1), model.project_points(e2), model.project_images(eh)
    if observer is not None:
        for name, emb in (("point_t1", e1), ("point_t2", e2), ("image", eh), ("proj_t1", p1), ("proj_t2", p2), ("proj_image", ph)):
            observer(name, emb)
    i1, i2, src = views["align"]
    rows = torch.arange(i1.shape[0])[:, None]
    return (
        p1.video_embedding,
        p2.video_embedding,
        p1.frame_embeddings[rows, i1],
        p2.frame_embeddings[rows, i2],
        ph.video_embedding,
        ph.frame_embeddings[rows, src],
    )


@dataclass
class PretrainResult:
    model: CrossVideoModel
    state: TrainState
    checkpoint: Optional[Path] = None

    @property
    def loss_curve(self):
        return self.state.epoch_losses


def pretrain(
    dataset,
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    stop_after_epoch: Optional[int] = None,
    observer: Optional[Callable] = None,
) -> PretrainResult:
    """Self-supervised pretraining of all three towers.

    Writes ``state.ckpt`` (resumable) and ``model.ckpt`` into ``out_dir``
    after every epoch.  ``stop_after_epoch`` ends the run early as if
    interrupted; ``observer(name, EmbeddingSet)`` sees every embedding set.
    """
    config.validate()
    toggles = config.toggles()
    if not any(toggles.values()):
        raise ValidationError("all loss terms are disabled; nothing to optimize", "loss_toggles")
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("pretraining dataset is empty", "dataset")
    steps_per_epoch = len(dataset) // config.batch_size
    if steps_per_epoch == 0:
        raise ValidationError(
            f"dataset of {len(dataset)} sequences is smaller than batch_size {config.batch_size}", "batch_size"
        )

    model = build_model(config.encoder_config(), seed=config.seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=0.0, momentum=config.momentum, weight_decay=config.weight_decay
    )
    state = TrainState(config=config.to_dict())
    if resume_from is not None:
        state = load_train_state(resume_from)
        _restore(state, model, optimizer)
    out_dir = Path(out_dir) if out_dir is not None else None
    last = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)

    model.train()
    for epoch in range(state.epoch, last):
        rng = epoch_rng(config.seed, epoch)
        order = rng.permutation(len(dataset))
        losses, terms = [], {}
        for b in range(steps_per_epoch):
            batch_id = f"epoch {epoch} batch {b}"
            samples = [dataset[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            views = make_views(samples, rng, config)
            outputs = forward_views(model, views, observer)
            try:
                loss, result = contrastive_loss(
                    *outputs, views["mask"], config.temperature, toggles, config.symmetrize
                )
            except NumericalError as exc:
                raise NumericalError(f"{exc} at {batch_id}", term=exc.term, batch_id=batch_id) from exc
            except ValidationError as exc:
                raise NumericalError(f"degenerate embeddings at {batch_id}: {exc}", term=exc.field, batch_id=batch_id) from exc
            optimizer.zero_grad()
            loss.backward()
            for group in optimizer.param_groups:
                group["lr"] = lr_schedule(state.step + 1, steps_per_epoch, config)
            optimizer.step()
            state.step += 1
            losses.append(result.total)
            state.step_losses.append(result.total)
            for name, values in result.terms.items():
                terms.setdefault(name, []).append(float(np.mean(values)))
        state.epoch = epoch + 1
        state.epoch_losses.append(float(np.mean(losses)))
        state.epoch_terms.append({k: float(np.mean(v)) for k, v in terms.items()})
        state.rng_state = rng.bit_generator.state
        state.rng_state["state"] = {k: str(v) for k, v in state.rng_state["state"].items()}
        log.info("epoch %d loss %.5f", state.epoch, state.epoch_losses[-1])
        _capture(state, model, optimizer)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_train_state(state, out_dir / "state.ckpt")
            save_checkpoint(model, out_dir / "model.ckpt", {"epoch": state.epoch})
    if not state.params:
        _capture(state, model, optimizer)
    ckpt = out_dir / "model.ckpt" if out_dir is not None else None
    return PretrainResult(model, state, ckpt)


# ---------------------------------------------------------------------------
# fine-tuning


class SegmentationModel(nn.Module):
    """Point encoder plus a linear classifier on standardised features.

    ``action``: one prediction per frame from the frame features.
    ``semantic``: one prediction per anchor (anchor feature + its frame
    feature), propagated to every point from its nearest anchor.
    """

    def __init__(self, encoder: PointVideoEncoder, num_classes: int, task: str = "action"):
        super().__init__()
        if task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}", "task")
        d = encoder.config.feature_dim
        self.task = task
        self.num_classes = num_classes
        self.encoder = encoder
        self.register_buffer("feat_mean", torch.zeros(d))
        self.register_buffer("feat_std", torch.ones(d))
        self.classifier = nn.Linear(d, num_classes)

    def features(self, xyz):
        if self.task == "action":
            return self.encoder(xyz), None
        frames, anchor_feats, anchors = self.encoder.forward_anchors(xyz)
        return anchor_feats + frames[:, :, None], anchors

    def logits(self, xyz):
        """Per-frame (B, L, C) or per-point (B, L, N, C) logits."""
        feats, anchors = self.features(xyz)
        out = self.classifier((feats - self.feat_mean) / self.feat_std)
        if self.task == "action":
            return out
        nearest = ((xyz[:, :, :, None] - anchors[:, :, None]) ** 2).sum(-1).argmin(-1)  # (B, L, N)
        return torch.gather(out, 2, nearest[..., None].expand(-1, -1, -1, out.shape[-1]))

    @torch.no_grad()
    def predict(self, sample) -> np.ndarray:
        was_training = self.training
        self.eval()
        xyz = torch.as_tensor(sample.points.frames, dtype=torch.float32)[None]
        pred = self.logits(xyz).argmax(-1)[0].numpy().astype(np.int32)
        self.train(was_training)
        return pred


def _targets(sample, task):
    labels = sample.labels if task == "action" else sample.point_labels
    if labels is None:
        raise ValidationError(f"sequence {sample.sequence_id} has no {task} labels", "labels")
    return np.asarray(labels, dtype=np.int64)


def _num_classes(dataset, task, config):
    if config.finetune.num_classes is not None:
        return int(config.finetune.num_classes)
    return int(max(_targets(s, task).max() for s in dataset)) + 1


@torch.no_grad()
def _feature_table(model: SegmentationModel, dataset, task):
    feats, targets = [], []
    for s in dataset:
        xyz = torch.as_tensor(s.points.frames, dtype=torch.float32)[None]
        f, anchors = model.features(xyz)
        y = _targets(s, task)
        if task == "action":
            feats.append(f[0].numpy())
            targets.append(y)
        else:
            nearest = ((xyz[0, :, :, None] - anchors[0, :, None]) ** 2).sum(-1).argmin(-1).numpy()
            # per-anchor target: majority label of the points it owns
            for t in range(f.shape[1]):
                for m in range(f.shape[2]):
                    owned = y[t][nearest[t] == m]
                    if owned.size:
                        feats.append(f[0, t, m].numpy()[None])
                        targets.append(np.bincount(owned).argmax()[None])
    return np.concatenate(feats), np.concatenate(targets)


def _fit_linear_probe(model: SegmentationModel, feats, targets, l2):
    from sklearn.linear_model import LogisticRegression

    x = (feats - model.feat_mean.numpy()) / model.feat_std.numpy()
    classes = np.unique(targets)
    weight = np.zeros((model.num_classes, x.shape[1]))
    bias = np.full(model.num_classes, -1e4)
    if classes.size == 1:
        bias[classes[0]] = 0.0
    else:
        clf = LogisticRegression(C=l2, max_iter=2000)
        clf.fit(x, targets)
        coef, intercept = clf.coef_, clf.intercept_
        if classes.size == 2:  # binary problems come back as one row
            coef = np.vstack([-coef[0] / 2, coef[0] / 2])
            intercept = np.array([-intercept[0] / 2, intercept[0] / 2])
        weight[classes] = coef
        bias[classes] = intercept
    with torch.no_grad():
        model.classifier.weight.copy_(torch.as_tensor(weight, dtype=torch.float32))
        model.classifier.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))


def finetune_segmentation(dataset, checkpoint_or_params, config: TrainConfig, mode: str = "full", task: str = "action"):
    """Train a per-frame (or per-point) segmentation model on labelled data.

    ``checkpoint_or_params`` is a checkpoint path, :class:`ModelParams`, a
    :class:`CrossVideoModel` or ``None``; it is ignored in ``scratch`` mode.
    ``linear_probe`` freezes the encoder and fits only the classifier.
    With ``finetune.probe_init`` the other modes start SGD from that fitted
    classifier instead of a random one.
    """
    if mode == "linear":
        mode = "linear_probe"
    if mode not in FINETUNE_MODES:
        raise ValidationError(f"mode must be one of {FINETUNE_MODES}", "mode")
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("fine-tuning dataset is empty", "dataset")
    ft = config.finetune
    if ft.optimizer not in FINETUNE_OPTIMIZERS:
        raise ValidationError(f"finetune.optimizer must be one of {FINETUNE_OPTIMIZERS}", "finetune.optimizer")
    num_classes = _num_classes(dataset, task, config)
    for s in dataset:
        y = _targets(s, task)
        if y.min() < 0 or y.max() >= num_classes:
            raise ValidationError(
                f"label ids in {s.sequence_id} must lie in [0, {num_classes})", "labels"
            )

    if mode == "scratch" or checkpoint_or_params is None:
        if mode != "scratch":
            raise ValidationError(f"mode {mode!r} needs a checkpoint", "checkpoint")
        encoder = build_model(config.encoder_config(), seed=config.seed, with_image_branch=False).point_encoder
    else:
        params = checkpoint_or_params
        if isinstance(params, (str, Path)):
            params = load_checkpoint(params, discard_image=True)
        if isinstance(params, ModelParams):
            params = params.to_model()
        encoder = params.point_encoder
    model = SegmentationModel(copy.deepcopy(encoder), num_classes, task)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed + 1)
        model.classifier.reset_parameters()

    feats, targets = _feature_table(model, dataset, task)
    model.feat_mean.copy_(torch.as_tensor(feats.mean(0), dtype=torch.float32))
    model.feat_std.copy_(torch.as_tensor(feats.std(0) + 1e-6, dtype=torch.float32))

    if mode == "linear_probe":
        for p in model.encoder.parameters():
            p.requires_grad_(False)
        _fit_linear_probe(model, feats, targets, ft.probe_l2)
        return model

    if ft.probe_init:
        _fit_linear_probe(model, feats, targets, ft.probe_l2)
    groups = [
        {"params": list(model.encoder.parameters()), "lr": ft.learning_rate * ft.encoder_lr_scale},
        {"params": list(model.classifier.parameters()), "lr": ft.learning_rate},
    ]
    if ft.optimizer == "adam":
        optimizer = torch.optim.Adam(groups, lr=ft.learning_rate, weight_decay=ft.weight_decay)
    else:
        optimizer = torch.optim.SGD(groups, lr=ft.learning_rate, momentum=ft.momentum, weight_decay=ft.weight_decay)
    batch_size = min(ft.batch_size, len(dataset))
    model.train()
    for epoch in range(ft.epochs):
        rng = epoch_rng(config.seed, epoch, stream=1)
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            chunk = [dataset[i] for i in order[start : start + batch_size]]
            starts = [_clip_start(len(s.points), ft.sequence_length, rng) for s in chunk]
            stop = [o + (ft.sequence_length or len(s.points)) for s, o in zip(chunk, starts)]
            xyz = torch.as_tensor(
                np.stack([s.points.frames[a:b] for s, a, b in zip(chunk, starts, stop)]), dtype=torch.float32
            )
            y = torch.as_tensor(np.stack([_targets(s, task)[a:b] for s, a, b in zip(chunk, starts, stop)]))
            logits = model.logits(xyz)
            loss = F.cross_entropy(logits.reshape(-1, num_classes), y.reshape(-1))
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite fine-tune loss at epoch {epoch}", term="cross_entropy")
            optimizer.zero_grad()
            loss.backward()
            if ft.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), ft.grad_clip)
            optimizer.step()
    return model


def subsample_split(dataset, fraction: float, seed: int):
    """``ceil(fraction * len)`` sequences drawn without replacement, kept in dataset order.

    The draw is a prefix of one seeded permutation, so smaller fractions are
    subsets of larger ones for the same seed.
    """
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must be in (0, 1]", "fraction")
    dataset = list(dataset)
    n = math.ceil(fraction * len(dataset) - 1e-9)
    if fraction == 1.0:
        return dataset
    chosen = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:n])
    return [dataset[i] for i in chosen]


# ---------------------------------------------------------------------------
# segmentation checkpoints

SEGMENTATION_KIND = "crossvideo.segmentation"


def save_segmentation_model(model: SegmentationModel, path, extra_meta=None):
    meta = {
        "kind": SEGMENTATION_KIND,
        "task": model.task,
        "num_classes": model.num_classes,
        "config": model.encoder.config.to_dict(),
        **(extra_meta or {}),
    }
    checkpoint.write(path, {k: v for k, v in model.state_dict().items()}, meta)


def load_segmentation_model(path) -> SegmentationModel:
    from .model import EncoderConfig

    tensors, meta = checkpoint.read(path)
    if meta.get("kind") != SEGMENTATION_KIND:
        raise CheckpointError(f"{path} is not a segmentation checkpoint")
    encoder = PointVideoEncoder(EncoderConfig.from_dict(meta["config"]))
    model = SegmentationModel(encoder, meta["num_classes"], meta["task"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model

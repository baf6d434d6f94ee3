"""Temporal segmentation metrics, model evaluation and the sweep harness.

Metric conventions follow the usual action-segmentation evaluation code:
segmental edit score is the normalised Levenshtein distance between
segment-label sequences, and segmental F1@k counts one-to-one matches between
predicted and ground-truth segments of the same class with IoU >= k.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ValidationError

F1_THRESHOLDS = (0.10, 0.25, 0.50)


class Segment(NamedTuple):
    label: int
    start: int  # inclusive
    end: int  # exclusive


def to_segments(labels) -> list:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValidationError("labelling must be a nonempty 1-D sequence", "labels")
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [labels.size]])
    return [Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth {gt.shape}", "pred")
    if pred.size == 0:
        raise ValidationError("empty labelling", "pred")
    return pred, gt


def framewise_accuracy(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return 100.0 * float(np.mean(pred == gt))


def levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    p = [s.label for s in to_segments(pred)]
    g = [s.label for s in to_segments(gt)]
    return 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g)))


def _candidates(p_segs, g_segs, threshold):
    """IoU of every same-class (pred, gt) pair, zero across classes."""
    g_start = np.array([s.start for s in g_segs])
    g_end = np.array([s.end for s in g_segs])
    g_label = np.array([s.label for s in g_segs])
    rows = []
    for seg in p_segs:
        inter = np.minimum(seg.end, g_end) - np.maximum(seg.start, g_start)
        union = np.maximum(seg.end, g_end) - np.minimum(seg.start, g_start)
        rows.append(np.where(g_label == seg.label, np.clip(inter, 0, None) / union, 0.0))
    return np.array(rows)


def _greedy_hits(iou, threshold):
    hit = np.full(iou.shape[1], -1)
    for i, row in enumerate(iou):
        best = int(row.argmax())
        if row[best] >= threshold and hit[best] < 0:
            hit[best] = i
    return hit


def _optimal_hits(iou, threshold):
    # augmenting paths over the pred/gt graph of pairs with IoU >= threshold;
    # each pred tries its gt candidates best-IoU first
    hit = np.full(iou.shape[1], -1)

    def augment(i, seen):
        for j in np.argsort(-iou[i], kind="stable"):
            if iou[i, j] < threshold or iou[i, j] == 0:
                break
            if seen[j]:
                continue
            seen[j] = True
            if hit[j] < 0 or augment(hit[j], seen):
                hit[j] = i
                return True
        return False

    for i in range(iou.shape[0]):
        augment(i, np.zeros(iou.shape[1], dtype=bool))
    return hit


MATCHINGS = ("optimal", "greedy")


def segment_counts(pred, gt, threshold, matching="optimal"):
    """(tp, fp, fn) of one-to-one IoU matching between segments of equal class.

    ``optimal`` maximises the number of matched pairs; ``greedy`` is the common
    action-segmentation rule (each prediction in order takes its best-IoU
    ground-truth segment, or counts as a false positive if that one is taken).
    The two agree except when a blocked prediction had a second candidate.
    """
    if matching not in MATCHINGS:
        raise ValidationError(f"matching must be one of {MATCHINGS}", "matching")
    p_segs, g_segs = to_segments(pred), to_segments(gt)
    iou = _candidates(p_segs, g_segs, threshold)
    hit = (_optimal_hits if matching == "optimal" else _greedy_hits)(iou, threshold)
    tp = int((hit >= 0).sum())
    return tp, len(p_segs) - tp, len(g_segs) - tp


def f1_from_counts(tp, fp, fn) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def segmental_f1(pred, gt, threshold, matching="optimal") -> float:
    _check_pair(pred, gt)
    return f1_from_counts(*segment_counts(pred, gt, threshold, matching))


def mean_iou(pred, gt, class_count=None, skip_empty=True) -> float:
    """Mean IoU in percent.

    Classes absent from both labelings are left out of the mean, or scored 0
    with ``skip_empty=False``.
    """
    pred, gt = _check_pair(pred, gt)
    pred, gt = pred.ravel(), gt.ravel()
    if class_count is None:
        class_count = int(max(pred.max(), gt.max())) + 1
    ious = []
    for c in range(class_count):
        p, g = pred == c, gt == c
        union = np.sum(p | g)
        if union:
            ious.append(np.sum(p & g) / union)
        elif not skip_empty:
            ious.append(0.0)
    return 100.0 * float(np.mean(ious)) if ious else 0.0


@dataclass
class MetricsReport:
    task: str
    accuracy: float
    edit: Optional[float] = None
    f1: dict = field(default_factory=dict)  # "10"/"25"/"50" -> score
    miou: Optional[float] = None
    config_echo: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())


def _threshold_key(t):
    return str(int(round(t * 100)))


def evaluate(model, dataset, task="action", class_count=None, config_echo=None, seed=None) -> MetricsReport:
    """Run ``model.predict`` on every sequence and score the predictions.

    Accuracy is pooled over all frames (or points); the edit score is the mean
    over sequences; F1 pools true/false positive counts over sequences.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("evaluation dataset is empty", "dataset")
    preds, gts = [], []
    for sample in dataset:
        gt = sample.labels if task == "action" else sample.point_labels
        if gt is None:
            raise ValidationError(f"sequence {sample.sequence_id} has no {task} labels", "labels")
        preds.append(np.asarray(model.predict(sample)))
        gts.append(np.asarray(gt))
    flat_p = np.concatenate([p.ravel() for p in preds])
    flat_g = np.concatenate([g.ravel() for g in gts])
    report = MetricsReport(task, framewise_accuracy(flat_p, flat_g), config_echo=dict(config_echo or {}), seed=seed)
    if task == "action":
        report.edit = float(np.mean([edit_score(p, g) for p, g in zip(preds, gts)]))
        for t in F1_THRESHOLDS:
            counts = np.sum([segment_counts(p, g, t) for p, g in zip(preds, gts)], axis=0)
            report.f1[_threshold_key(t)] = f1_from_counts(*counts)
    else:
        report.miou = mean_iou(flat_p, flat_g, class_count)
    return report


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    """One (pretrain?, fine-tune, evaluate) run.

    ``init`` is ``"pretrained"`` or ``"scratch"``; ``toggles`` lists loss
    terms for pretraining (unnamed terms stay on).
    """

    id: str
    fraction: float = 1.0
    init: str = "pretrained"
    mode: str = "full"
    seed: int = 0
    toggles: dict = field(default_factory=dict)
    task: str = "action"


def data_efficiency_rows(fractions=(0.1, 0.2, 0.4, 0.8), seeds=(0,), mode="full"):
    rows = []
    for seed in seeds:
        for frac in fractions:
            for init in ("scratch", "pretrained"):
                rows.append(SweepRow(f"{init}-f{frac:g}-s{seed}", frac, init, mode, seed))
    return rows


def ablation_rows(disabled=(("cross_video", "cross_frame"),), seeds=(0,), mode="linear_probe", fraction=1.0):
    """Full objective, each ablation in ``disabled`` and a random-init baseline, per seed."""
    rows = []
    for seed in seeds:
        rows.append(SweepRow(f"full-s{seed}", fraction, "pretrained", mode, seed))
        for terms in disabled:
            terms = (terms,) if isinstance(terms, str) else tuple(terms)
            name = "no-" + "+".join(terms)
            rows.append(SweepRow(f"{name}-s{seed}", fraction, "pretrained", mode, seed, {t: False for t in terms}))
        rows.append(SweepRow(f"scratch-s{seed}", fraction, "scratch", mode, seed))
    return rows


def sweep(rows, pretrain_set, train_set, test_set, base_config, out_csv=None, pretrain_cache=None) -> list:
    """Run every row and return one result dict per row (optionally written to CSV).

    Pretrained encoders are shared between rows with the same (seed, toggles)
    through ``pretrain_cache`` (a dict, created if omitted).
    """
    from .config import TrainConfig
    from .objective import TERMS
    from .train import finetune_segmentation, pretrain, subsample_split

    pretrain_cache = {} if pretrain_cache is None else pretrain_cache
    results = []
    for row in rows:
        cfg = TrainConfig.from_dict(base_config.to_dict())
        cfg.seed = row.seed
        cfg.loss_toggles = {t: bool(row.toggles.get(t, True)) for t in TERMS}
        params = None
        if row.init == "pretrained":
            key = (row.seed, tuple(sorted(cfg.loss_toggles.items())))
            if key not in pretrain_cache:
                pretrain_cache[key] = pretrain(pretrain_set, cfg).model
            params = pretrain_cache[key]
            mode = row.mode
        else:
            mode = "scratch" if row.mode == "full" else row.mode
            if mode != "scratch":
                params = _random_init(cfg)
        subset = subsample_split(train_set, row.fraction, row.seed)
        model = finetune_segmentation(subset, params, cfg, mode=mode, task=row.task)
        report = evaluate(model, test_set, row.task, seed=row.seed)
        results.append(
            {
                "id": row.id,
                "fraction": row.fraction,
                "init": row.init,
                "mode": row.mode,
                "seed": row.seed,
                "disabled": "+".join(t for t in TERMS if not cfg.loss_toggles[t]),
                "train_sequences": len(subset),
                "accuracy": report.accuracy,
                "edit": report.edit,
                "f1_10": report.f1.get("10"),
                "f1_25": report.f1.get("25"),
                "f1_50": report.f1.get("50"),
                "miou": report.miou,
            }
        )
    if out_csv is not None:
        write_csv(results, out_csv)
    return results


def _random_init(cfg):
    from .model import build_model

    return build_model(cfg.encoder_config(), seed=cfg.seed, with_image_branch=False)


def write_csv(results, path):
    if not results:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(results[0]))
        writer.writeheader()
        writer.writerows(results)


def mean_by(results, key, value="accuracy"):
    groups = {}
    for r in results:
        groups.setdefault(r[key] if not callable(key) else key(r), []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}

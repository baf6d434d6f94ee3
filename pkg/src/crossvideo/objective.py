"""Multi-level intra- and cross-modal NT-Xent objectives with analytic gradients.

All functions operate on float64 numpy arrays.  For anchor ``a_i``, positive
``b_i`` and temperature ``tau`` each per-sample term is::

    -log( exp(s(a_i, b_i)/tau) /
          (sum_{k != i} exp(s(a_i, a_k)/tau) + sum_k exp(s(a_i, b_k)/tau)) )

with ``s`` the cosine similarity.  The intra-modal terms use ``a = z^{t1}``,
``b = z^{t2}``; the cross-modal terms use the point prototype
``a = (z^{t1} + z^{t2}) / 2`` and the image embedding ``b = h``.  Frame-level
terms apply the same formula independently at each aligned frame index, with
negatives taken across the batch at that index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError, ValidationError

NORM_EPS = 1e-8
TERMS = ("intra_video", "intra_frame", "cross_video", "cross_frame")


class EmptyFramesWarning(UserWarning):
    """Raised as a warning when a batch has no aligned frames."""


@dataclass
class ContrastiveBatch:
    z_v_t1: np.ndarray  # (N, d)
    z_v_t2: np.ndarray  # (N, d)
    z_f_t1: np.ndarray  # (N, F, d)
    z_f_t2: np.ndarray  # (N, F, d)
    h_v: np.ndarray  # (N, d)
    h_f: np.ndarray  # (N, F, d)
    temperature: float = 0.07
    frame_mask: Optional[np.ndarray] = None  # (N, F) bool; None = all valid

    def __post_init__(self):
        for name in ("z_v_t1", "z_v_t2", "z_f_t1", "z_f_t2", "h_v", "h_f"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n, d = self.z_v_t1.shape
        if n < 1:
            raise ValidationError("batch needs at least one sample", "z_v_t1")
        for name in ("z_v_t2", "h_v"):
            if getattr(self, name).shape != (n, d):
                raise ValidationError(f"{name} must be {(n, d)}", name)
        F = self.z_f_t1.shape[1] if self.z_f_t1.ndim == 3 else -1
        for name in ("z_f_t1", "z_f_t2", "h_f"):
            if getattr(self, name).shape != (n, F, d):
                raise ValidationError(f"{name} must be (N, F, d) = {(n, F, d)}", name)
        if self.frame_mask is None:
            self.frame_mask = np.ones((n, F), dtype=bool)
        self.frame_mask = np.asarray(self.frame_mask, dtype=bool)
        if self.frame_mask.shape != (n, F):
            raise ValidationError("frame_mask must be (N, F)", "frame_mask")
        if not self.temperature > 0:
            raise ValidationError("temperature must be > 0", "temperature")

    @property
    def size(self):
        return self.z_v_t1.shape[0]

    @property
    def num_frames(self):
        return self.z_f_t1.shape[1]

    def check(self):
        """Finite values and nonzero norms on every used vector."""
        for name in ("z_v_t1", "z_v_t2", "z_f_t1", "z_f_t2", "h_v", "h_f"):
            arr = getattr(self, name)
            used = arr[self.frame_mask] if arr.ndim == 3 else arr
            if not np.all(np.isfinite(used)):
                raise ValidationError(f"{name} has non-finite entries", name)
            if used.size and np.linalg.norm(used, axis=-1).min() < NORM_EPS:
                raise ValidationError(f"{name} has a vector with norm < {NORM_EPS}", name)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        raise ValidationError("cosine similarity of a zero-norm vector is undefined", "norm")
    return float(a @ b / (na * nb))


def _normalize(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if norm.size and norm.min() < NORM_EPS:
        raise ValidationError(f"vector with norm < {NORM_EPS}", "norm")
    return x / norm, norm


def _normalize_backward(g_hat, x_hat, norm):
    return (g_hat - x_hat * np.sum(g_hat * x_hat, axis=-1, keepdims=True)) / norm


class _NTXent:
    """Per-anchor NT-Xent terms for anchors ``a`` and positives ``b`` (both (n, d))."""

    def __init__(self, a, b, tau):
        self.tau = tau
        self.a_hat, self.a_norm = _normalize(a)
        self.b_hat, self.b_norm = _normalize(b)
        n = a.shape[0]
        s_aa = self.a_hat @ self.a_hat.T
        s_ab = self.a_hat @ self.b_hat.T
        np.fill_diagonal(s_aa, -np.inf)
        logits = np.concatenate([s_aa, s_ab], axis=1) / tau
        top = logits.max(axis=1, keepdims=True)
        expd = np.exp(logits - top)
        total = expd.sum(axis=1, keepdims=True)
        self.prob = expd / total
        lse = top[:, 0] + np.log(total[:, 0])
        self.losses = lse - np.diag(s_ab) / tau
        self.n = n

    def backward(self, weights):
        """Gradients of ``sum_i weights[i] * loss_i`` w.r.t. ``a`` and ``b``."""
        n, tau = self.n, self.tau
        w = np.asarray(weights, dtype=np.float64)[:, None]
        g_aa = w * self.prob[:, :n] / tau
        g_ab = w * (self.prob[:, n:] - np.eye(n)) / tau
        g_a_hat = g_aa @ self.a_hat + g_aa.T @ self.a_hat + g_ab @ self.b_hat
        g_b_hat = g_ab.T @ self.a_hat
        return (
            _normalize_backward(g_a_hat, self.a_hat, self.a_norm),
            _normalize_backward(g_b_hat, self.b_hat, self.b_norm),
        )


def nt_xent(a, b, tau):
    """Per-anchor losses for anchors ``a`` against positives ``b``."""
    if not tau > 0:
        raise ValidationError("temperature must be > 0", "temperature")
    return _NTXent(np.asarray(a, np.float64), np.asarray(b, np.float64), tau).losses


def _frame_terms(a, b, mask, tau):
    """Apply the NT-Xent formula at every aligned frame index.

    Returns the (N, F) loss grid (zero where masked) and the per-frame solver
    objects for the backward pass.
    """
    n, F, _ = a.shape
    losses = np.zeros((n, F))
    solvers = []
    for j in range(F):
        idx = np.flatnonzero(mask[:, j])
        if idx.size == 0:
            solvers.append((idx, None))
            continue
        solver = _NTXent(a[idx, j], b[idx, j], tau)
        losses[idx, j] = solver.losses
        solvers.append((idx, solver))
    return losses, solvers


def _frame_backward(solvers, frame_weights, shape):
    g_a = np.zeros(shape)
    g_b = np.zeros(shape)
    for j, (idx, solver) in enumerate(solvers):
        if solver is None:
            continue
        ga, gb = solver.backward(frame_weights[idx, j])
        g_a[idx, j] = ga
        g_b[idx, j] = gb
    return g_a, g_b


def _frame_average(losses, mask):
    counts = mask.sum(axis=1)
    sums = np.where(mask, losses, 0.0).sum(axis=1)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def _warn_if_frameless(batch):
    if batch.num_frames == 0 or not batch.frame_mask.any():
        warnings.warn("batch has no aligned frames; frame-level terms contribute zero", EmptyFramesWarning)
        return True
    return False


def intra_video_loss(batch: ContrastiveBatch) -> np.ndarray:
    return nt_xent(batch.z_v_t1, batch.z_v_t2, batch.temperature)


def intra_frame_loss(batch: ContrastiveBatch) -> np.ndarray:
    """(N, F) per-frame losses; masked entries are zero."""
    if _warn_if_frameless(batch):
        return np.zeros((batch.size, batch.num_frames))
    return _frame_terms(batch.z_f_t1, batch.z_f_t2, batch.frame_mask, batch.temperature)[0]


def prototype(batch: ContrastiveBatch):
    return (batch.z_v_t1 + batch.z_v_t2) / 2.0, (batch.z_f_t1 + batch.z_f_t2) / 2.0


def cross_video_loss(batch: ContrastiveBatch) -> np.ndarray:
    z_v, _ = prototype(batch)
    return nt_xent(z_v, batch.h_v, batch.temperature)


def cross_frame_loss(batch: ContrastiveBatch) -> np.ndarray:
    if _warn_if_frameless(batch):
        return np.zeros((batch.size, batch.num_frames))
    _, z_f = prototype(batch)
    return _frame_terms(z_f, batch.h_f, batch.frame_mask, batch.temperature)[0]


def intra_loss(batch: ContrastiveBatch) -> float:
    lv = intra_video_loss(batch)
    lf = _frame_average(intra_frame_loss(batch), batch.frame_mask)
    return float(np.sum(lv + lf) / (2 * batch.size))


def cross_loss(batch: ContrastiveBatch) -> float:
    cv = cross_video_loss(batch)
    cf = _frame_average(cross_frame_loss(batch), batch.frame_mask)
    return float(np.sum(cv + cf) / (2 * batch.size))


@dataclass
class LossResult:
    total: float
    intra: float
    cross: float
    terms: dict  # term name -> per-sample losses (frame terms already frame-averaged)
    grads: dict = field(default_factory=dict)  # batch field name -> gradient array


def total_loss(batch: ContrastiveBatch, toggles=None, symmetrize=False, with_grad=True) -> LossResult:
    """Intra + cross objective and its gradient w.r.t. every embedding in ``batch``.

    ``toggles`` maps term names in :data:`TERMS` to booleans; disabled terms
    are dropped from both the value and the gradient.  With ``symmetrize`` the
    intra-modal terms average the t1- and t2-anchored losses.
    """
    toggles = {t: True for t in TERMS} | dict(toggles or {})
    unknown = set(toggles) - set(TERMS)
    if unknown:
        raise ValidationError(f"unknown loss terms {sorted(unknown)}", "toggles")
    batch.check()
    n, tau, mask = batch.size, batch.temperature, batch.frame_mask
    scale = 1.0 / (2 * n)
    counts = mask.sum(axis=1)
    frame_w = np.where(mask, 1.0 / np.maximum(counts, 1)[:, None], 0.0) * scale
    if batch.num_frames == 0 or not mask.any():
        warnings.warn("batch has no aligned frames; frame-level terms contribute zero", EmptyFramesWarning)

    grads = {name: np.zeros_like(getattr(batch, name)) for name in ("z_v_t1", "z_v_t2", "z_f_t1", "z_f_t2", "h_v", "h_f")}
    terms = {}
    video_w = np.full(n, scale)

    # (anchor, positive) field pairs for the intra terms
    views = [("z_v_t1", "z_v_t2", "z_f_t1", "z_f_t2")]
    if symmetrize:
        views.append(("z_v_t2", "z_v_t1", "z_f_t2", "z_f_t1"))
    share = 1.0 / len(views)

    if toggles["intra_video"]:
        acc = np.zeros(n)
        for va, vb, _, _ in views:
            solver = _NTXent(getattr(batch, va), getattr(batch, vb), tau)
            acc += share * solver.losses
            if with_grad:
                ga, gb = solver.backward(video_w * share)
                grads[va] += ga
                grads[vb] += gb
        terms["intra_video"] = acc
    if toggles["intra_frame"]:
        acc = np.zeros(n)
        for _, _, fa, fb in views:
            losses, solvers = _frame_terms(getattr(batch, fa), getattr(batch, fb), mask, tau)
            acc += share * _frame_average(losses, mask)
            if with_grad:
                ga, gb = _frame_backward(solvers, frame_w * share, grads[fa].shape)
                grads[fa] += ga
                grads[fb] += gb
        terms["intra_frame"] = acc

    z_v, z_f = prototype(batch)
    if toggles["cross_video"]:
        solver = _NTXent(z_v, batch.h_v, tau)
        terms["cross_video"] = solver.losses
        if with_grad:
            ga, gb = solver.backward(video_w)
            grads["z_v_t1"] += ga / 2
            grads["z_v_t2"] += ga / 2
            grads["h_v"] += gb
    if toggles["cross_frame"]:
        losses, solvers = _frame_terms(z_f, batch.h_f, mask, tau)
        terms["cross_frame"] = _frame_average(losses, mask)
        if with_grad:
            ga, gb = _frame_backward(solvers, frame_w, grads["z_f_t1"].shape)
            grads["z_f_t1"] += ga / 2
            grads["z_f_t2"] += ga / 2
            grads["h_f"] += gb

    for name, values in terms.items():
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"non-finite {name} loss", term=name)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}", term=name)

    intra = scale * sum(np.sum(terms[t]) for t in ("intra_video", "intra_frame") if t in terms)
    cross = scale * sum(np.sum(terms[t]) for t in ("cross_video", "cross_frame") if t in terms)
    return LossResult(float(intra + cross), float(intra), float(cross), terms, grads if with_grad else {})

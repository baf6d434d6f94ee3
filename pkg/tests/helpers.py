import numpy as np

from crossvideo.config import TrainConfig
from crossvideo.objective import ContrastiveBatch, total_loss


def small_config(**top):
    """Tiny model and short schedule for fast tests on the 16x16 fixture data."""
    cfg = TrainConfig.from_dict(
        {
            "total_epochs": 2,
            "warmup_epochs": 1,
            "batch_size": 4,
            "d_proj": 8,
            "model": {
                "feature_dim": 16,
                "transformer_heads": 2,
                "transformer_depth": 1,
                "projection_hidden": 16,
                "image_size": [16, 16],
                "image_channels": [4, 8],
            },
            "finetune": {"epochs": 2, "batch_size": 4},
        }
    )
    for key, value in top.items():
        setattr(cfg, key, value)
    return cfg.validate()


def random_batch(rng, n=None, F=None, d=None, tau=None, masked=False):
    n = n or int(rng.integers(1, 9))
    F = F if F is not None else int(rng.integers(1, 5))
    d = d or int(rng.integers(2, 17))
    mask = rng.uniform(size=(n, F)) < 0.7 if masked else None
    g = lambda *s: rng.normal(size=s)
    return ContrastiveBatch(g(n, d), g(n, d), g(n, F, d), g(n, F, d), g(n, d), g(n, F, d),
                            tau or float(rng.uniform(0.05, 1.0)), mask)


def symmetric_batch(tau=1.0):
    eye = np.eye(3)
    v = eye[:2]
    f = v[:, None, :]
    return ContrastiveBatch(v, v, f, f, v, f, tau)


def fd_relative_error(b, toggles=None, symmetrize=False, h=1e-4):
    """Worst relative gap between analytic and central-difference gradients."""
    r = total_loss(b, toggles, symmetrize)
    worst = 0.0
    for name, grad in r.grads.items():
        arr = getattr(b, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = total_loss(b, toggles, symmetrize, with_grad=False).total
            arr[idx] = old - h
            down = total_loss(b, toggles, symmetrize, with_grad=False).total
            arr[idx] = old
            fd = (up - down) / (2 * h)
            if max(abs(fd), abs(grad[idx])) > 1e-6:
                worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx])))
    return worst

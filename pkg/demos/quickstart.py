"""Generate a small synthetic set, pretrain, then compare linear probes.

    python demos/quickstart.py [workdir]

Uses the default 30-epoch schedule and takes a few minutes on one core.
Single-seed numbers on 16 test sequences are noisy.
"""

import sys
import tempfile
from pathlib import Path

import torch

from crossvideo import TrainConfig, build_model, evaluate, finetune_segmentation, generate_dataset, load_dataset, pretrain


def main(workdir):
    torch.set_num_threads(1)
    root = Path(workdir) / "data"
    generate_dataset(root, {"pretrain": 64, "train": 32, "test": 16}, frames=8, points=128, seed=0, layout_seed=0)
    pre, train, test = (load_dataset(root, s) for s in ("pretrain", "train", "test"))

    cfg = TrainConfig(symmetrize=True)
    result = pretrain(pre, cfg, out_dir=Path(workdir) / "pretrain")
    print("loss per epoch:", " ".join(f"{v:.3f}" for v in result.loss_curve))

    probe = finetune_segmentation(train, result.checkpoint, cfg, mode="linear_probe")
    random_init = build_model(cfg.encoder_config(), seed=cfg.seed, with_image_branch=False)
    baseline = finetune_segmentation(train, random_init, cfg, mode="linear_probe")
    for name, model in (("pretrained", probe), ("random init", baseline)):
        r = evaluate(model, test)
        print(f"{name:>12}: acc {r.accuracy:5.1f}  edit {r.edit:5.1f}  F1@50 {r.f1['50']:5.1f}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(tmp)

import numpy as np
import pytest
import torch

from crossvideo.datagen import generate_dataset, load_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """16 pretrain / 8 train / 4 test sequences of 6 frames x 32 points."""
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, {"pretrain": 16, "train": 8, "test": 4}, frames=6, points=32, image_size=(16, 16), seed=5)
    return root


@pytest.fixture(scope="session")
def tiny(tiny_root):
    return {s: load_dataset(tiny_root, s) for s in ("pretrain", "train", "test")}


def rng(seed=0):
    return np.random.default_rng(seed)

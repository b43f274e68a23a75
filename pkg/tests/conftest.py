import gzip
from pathlib import Path

import numpy as np
import pytest
import torch

from semcommlib.ColoredMnist import IdxCodec, RawImageSet, LabeledDataset


def make_raw_images(n:int, seed:int=0, size:int=28) -> RawImageSet:
    """ Random digit labels; the image is a bright block whose position encodes the class (digit >= 5) """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = rng.integers(0, 30, (n, size, size)).astype(np.uint8)
    half = size // 2
    for i, digit in enumerate(labels):
        if digit >= 5:
            images[i, :half, :half] = 255
        else:
            images[i, half:, half:] = 255
    return RawImageSet(images=images, labels=labels)


def write_idx(path:Path, array:np.ndarray, compress:bool=False) -> Path:
    data = IdxCodec.serialize(array)
    path.write_bytes(gzip.compress(data) if compress else data)
    return path


def gaussian_blobs(n_per_class:int, dim:int=4, separation:float=4.0, seed:int=0, dtype=torch.float64) -> LabeledDataset:
    """ Two linearly separable Gaussian classes as vector features """
    generator = torch.Generator().manual_seed(seed)
    centers = torch.zeros(2, dim, dtype=dtype)
    centers[0, 0], centers[1, 0] = -separation / 2, separation / 2
    features = torch.cat([centers[c] + torch.randn(n_per_class, dim, generator=generator, dtype=dtype) for c in (0, 1)])
    labels = torch.cat([torch.full((n_per_class,), c, dtype=torch.long) for c in (0, 1)])
    return LabeledDataset(features, labels)


@pytest.fixture
def raw_images() -> RawImageSet:
    return make_raw_images(400, seed=1, size=8)


@pytest.fixture
def idx_dir(tmp_path) -> Path:
    """ Data root with an in-distribution and a semantic-shift IDX set of 8x8 images """
    raw = make_raw_images(600, seed=2, size=8)
    write_idx(tmp_path / 'train-images-idx3-ubyte.gz', raw.images, compress=True)
    write_idx(tmp_path / 'train-labels-idx1-ubyte.gz', raw.labels, compress=True)
    ood = np.random.default_rng(3).integers(0, 255, (100, 8, 8)).astype(np.uint8)
    write_idx(tmp_path / 'ood-images-idx3-ubyte', ood)
    return tmp_path


@pytest.fixture
def blobs() -> LabeledDataset:
    return gaussian_blobs(64)

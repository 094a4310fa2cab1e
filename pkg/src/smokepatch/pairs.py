"""Labeled coarse/fine block pairs: file format, negatives, splits.

The dataset file (magic ``SPDAT``) holds fixed-size records: patch id,
frame, label, then the coarse and fine blocks as f32, each with a density
channel plus vorticity channels at the network input resolution.
"""

import struct

import numpy as np

from .errors import FormatError
from .net import TrainingSet

DATA_MAGIC = b"SPDAT"
DATA_VERSION = 1


class PairDataset:
    """Block pairs plus provenance; labels are +1 / -1."""

    def __init__(self, ndim, channels, res):
        self.ndim = int(ndim)
        self.channels = int(channels)
        self.res = int(res)
        self.patch_ids = []
        self.frames = []
        self.labels = []
        self.coarse = []
        self.fine = []

    def __len__(self):
        return len(self.labels)

    @property
    def block_shape(self):
        return (self.channels,) + (self.res,) * self.ndim

    def add(self, patch_id, frame, label, coarse_block, fine_block):
        if coarse_block.shape != self.block_shape:
            raise FormatError(f"coarse block shape {coarse_block.shape} != "
                              f"{self.block_shape}")
        self.patch_ids.append(int(patch_id))
        self.frames.append(int(frame))
        self.labels.append(int(label))
        self.coarse.append(np.asarray(coarse_block, dtype=np.float32))
        self.fine.append(np.asarray(fine_block, dtype=np.float32))

    def positive_indices(self):
        return [i for i, l in enumerate(self.labels) if l > 0]

    def arrays(self, indices=None):
        idx = range(len(self)) if indices is None else indices
        ids = np.asarray([self.patch_ids[i] for i in idx], dtype=np.int64)
        frames = np.asarray([self.frames[i] for i in idx], dtype=np.int64)
        labels = np.asarray([self.labels[i] for i in idx], dtype=np.int64)
        coarse = np.stack([self.coarse[i] for i in idx]).astype(np.float64)
        fine = np.stack([self.fine[i] for i in idx]).astype(np.float64)
        return ids, frames, labels, coarse, fine

    def training_set(self, indices=None):
        """Positive pairs as network training arrays."""
        if indices is None:
            indices = self.positive_indices()
        ids, frames, labels, coarse, fine = self.arrays(indices)
        if np.any(labels <= 0):
            raise ValueError("training sets are built from positive pairs")
        return TrainingSet(coarse=coarse, fine=fine, patch_ids=ids,
                           frames=frames)


def make_negatives(dataset, ratio, seed, min_frame_gap=0):
    """Append ratio negatives per positive: coarse inputs paired with a
    random non-matching fine block (same patch allowed only with a frame
    offset of at least ``min_frame_gap``)."""
    pos = dataset.positive_indices()
    if len(pos) < 2:
        raise ValueError("need at least two positives to build negatives")
    rng = np.random.default_rng(seed)
    out = PairDataset(dataset.ndim, dataset.channels, dataset.res)
    for i in pos:
        out.add(dataset.patch_ids[i], dataset.frames[i], 1,
                dataset.coarse[i], dataset.fine[i])
    for i in pos:
        for _ in range(ratio):
            while True:
                j = pos[int(rng.integers(len(pos)))]
                if j == i:
                    continue
                same = dataset.patch_ids[j] == dataset.patch_ids[i]
                gap = abs(dataset.frames[j] - dataset.frames[i])
                if same and gap < max(min_frame_gap, 1):
                    continue
                break
            out.add(dataset.patch_ids[i], dataset.frames[i], -1,
                    dataset.coarse[i], dataset.fine[j])
    return out


def split_by_patch(dataset, modulo=5, eval_residue=4):
    """Deterministic train/eval split on patch id (roughly 80/20)."""
    train_idx = [i for i in dataset.positive_indices()
                 if dataset.patch_ids[i] % modulo != eval_residue]
    eval_idx = [i for i in dataset.positive_indices()
                if dataset.patch_ids[i] % modulo == eval_residue]
    return train_idx, eval_idx


def save_dataset(dataset, path):
    block = int(np.prod(dataset.block_shape))
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<IIIIQ", DATA_VERSION, dataset.ndim,
                            dataset.channels, dataset.res, len(dataset)))
        for i in range(len(dataset)):
            f.write(struct.pack("<IIb", dataset.patch_ids[i],
                                dataset.frames[i], dataset.labels[i]))
            f.write(np.ascontiguousarray(dataset.coarse[i],
                                         dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(dataset.fine[i],
                                         dtype="<f4").tobytes())
        assert f.tell() == 29 + len(dataset) * (9 + 8 * block)


def load_dataset(path):
    with open(path, "rb") as f:
        if f.read(5) != DATA_MAGIC:
            raise FormatError("bad dataset magic")
        version, ndim, channels, res, count = struct.unpack("<IIIIQ",
                                                            f.read(24))
        if version != DATA_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        ds = PairDataset(ndim, channels, res)
        shape = ds.block_shape
        block_bytes = 4 * int(np.prod(shape))
        for _ in range(count):
            pid, frame, label = struct.unpack("<IIb", f.read(9))
            coarse = np.frombuffer(f.read(block_bytes),
                                   dtype="<f4").reshape(shape)
            fine = np.frombuffer(f.read(block_bytes),
                                 dtype="<f4").reshape(shape)
            ds.add(pid, frame, label, coarse.copy(), fine.copy())
    return ds

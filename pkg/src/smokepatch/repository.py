"""Persisted space-time patch repositories and descriptor lookups.

A repository entry is one tracked patch: a per-frame descriptor sequence
plus per-frame high-resolution density blocks normalized to [0, 1] with
the source min/max kept as metadata. Descriptors and densities live in
separate file segments behind an offset table, so simulation-time loads
can skip the density payload entirely.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, FormatError
from .kdtree import KDTree

REPO_MAGIC = b"SPREP"
REPO_VERSION = 1


@dataclass
class RepositoryEntry:
    entry_id: int
    descriptors: np.ndarray        # (frames, dim) float32
    densities: np.ndarray | None   # (frames, block_res**ndim) float32 in [0,1]
    min_value: float
    max_value: float

    @property
    def frame_count(self):
        return len(self.descriptors)

    def density_block(self, frame, block_shape):
        if self.densities is None:
            raise FormatError("repository was loaded without densities")
        return self.densities[frame].reshape(block_shape).astype(np.float64)

    def raw_range(self):
        return self.min_value, self.max_value


def make_entry(entry_id, descriptors, raw_densities):
    """Normalize raw density blocks to [0,1] and keep the source range."""
    desc = np.ascontiguousarray(descriptors, dtype=np.float32)
    raw = np.asarray(raw_densities, dtype=np.float64)
    raw = raw.reshape(len(desc), -1)
    lo = float(raw.min())
    hi = float(raw.max())
    if hi > lo:
        norm = (raw - lo) / (hi - lo)
    else:
        norm = np.zeros_like(raw)
    return RepositoryEntry(int(entry_id), desc,
                           norm.astype(np.float32), lo, hi)


class Repository:
    def __init__(self, ndim, block_res, descriptor_dim):
        self.ndim = int(ndim)
        self.block_res = int(block_res)
        self.descriptor_dim = int(descriptor_dim)
        self.entries = []

    @property
    def block_shape(self):
        return (self.block_res,) * self.ndim

    def add(self, entry):
        if entry.descriptors.shape[1] != self.descriptor_dim:
            raise DimensionMismatchError(
                f"descriptor dim {entry.descriptors.shape[1]} != "
                f"{self.descriptor_dim}")
        if entry.densities is not None:
            want = self.block_res ** self.ndim
            if entry.densities.shape[1] != want:
                raise DimensionMismatchError(
                    f"density block size {entry.densities.shape[1]} != {want}")
        self.entries.append(entry)
        return entry

    def get(self, entry_id):
        for e in self.entries:
            if e.entry_id == entry_id:
                return e
        raise KeyError(f"no repository entry {entry_id}")

    def total_frames(self):
        return sum(e.frame_count for e in self.entries)


class DescriptorIndex:
    """Exact-NN index over every per-frame descriptor of a repository."""

    def __init__(self, tree, entry_ids, frames):
        self.tree = tree
        self.entry_ids = entry_ids
        self.frames = frames

    def query(self, descriptor, k=1):
        """k nearest (entry_id, frame, distance), ascending distance."""
        idx, dist = self.tree.query(np.asarray(descriptor, dtype=np.float64),
                                    k)
        return [(int(self.entry_ids[i]), int(self.frames[i]), float(d))
                for i, d in zip(idx, dist)]


def build_index(repo_or_entries):
    entries = (repo_or_entries.entries if isinstance(repo_or_entries,
                                                     Repository)
               else list(repo_or_entries))
    if not entries:
        raise ValueError("cannot index an empty repository")
    dims = {e.descriptors.shape[1] for e in entries}
    if len(dims) != 1:
        raise DimensionMismatchError(
            f"inconsistent descriptor dims in repository: {sorted(dims)}")
    vecs = np.concatenate([e.descriptors.astype(np.float64)
                           for e in entries])
    entry_ids = np.concatenate([np.full(e.frame_count, e.entry_id)
                                for e in entries])
    frames = np.concatenate([np.arange(e.frame_count) for e in entries])
    return DescriptorIndex(KDTree(vecs), entry_ids, frames)


# ---------------------------------------------------------------------------
# file format

_ENTRY_STRUCT = struct.Struct("<IIQQff")


def save_repository(repo, path):
    header = struct.pack("<IIIII", REPO_VERSION, repo.ndim, repo.block_res,
                         repo.descriptor_dim, len(repo.entries))
    table_pos = len(REPO_MAGIC) + len(header)
    table_size = _ENTRY_STRUCT.size * len(repo.entries)
    desc_offset = table_pos + table_size
    offs = []
    pos = desc_offset
    for e in repo.entries:
        offs.append([pos])
        pos += e.descriptors.nbytes
    for e, rec in zip(repo.entries, offs):
        rec.append(pos)
        if e.densities is None:
            raise FormatError("cannot save a repository without densities")
        pos += e.densities.nbytes
    with open(path, "wb") as f:
        f.write(REPO_MAGIC)
        f.write(header)
        for e, (doff, voff) in zip(repo.entries, offs):
            f.write(_ENTRY_STRUCT.pack(e.entry_id, e.frame_count, doff, voff,
                                       e.min_value, e.max_value))
        for e in repo.entries:
            f.write(np.ascontiguousarray(e.descriptors,
                                         dtype="<f4").tobytes())
        for e in repo.entries:
            f.write(np.ascontiguousarray(e.densities, dtype="<f4").tobytes())


def load_repository(path, with_densities=True):
    with open(path, "rb") as f:
        if f.read(5) != REPO_MAGIC:
            raise FormatError("bad repository magic")
        version, ndim, block_res, desc_dim, count = struct.unpack(
            "<IIIII", f.read(20))
        if version != REPO_VERSION:
            raise FormatError(f"unsupported repository version {version}")
        table = [_ENTRY_STRUCT.unpack(f.read(_ENTRY_STRUCT.size))
                 for _ in range(count)]
        repo = Repository(ndim, block_res, desc_dim)
        block = block_res ** ndim
        for entry_id, frames, doff, voff, lo, hi in table:
            f.seek(doff)
            desc = np.frombuffer(f.read(4 * frames * desc_dim),
                                 dtype="<f4").reshape(frames, desc_dim)
            dens = None
            if with_densities:
                f.seek(voff)
                dens = np.frombuffer(f.read(4 * frames * block),
                                     dtype="<f4").reshape(frames, block)
            repo.add(RepositoryEntry(entry_id, desc.copy(),
                                     None if dens is None else dens.copy(),
                                     lo, hi))
    return repo


def density_segment_start(path):
    """File offset where the density payload begins (for layout checks)."""
    with open(path, "rb") as f:
        f.read(5)
        _, _, _, _, count = struct.unpack("<IIIII", f.read(20))
        offsets = []
        for _ in range(count):
            rec = _ENTRY_STRUCT.unpack(f.read(_ENTRY_STRUCT.size))
            offsets.append(rec[3])
    return min(offsets) if offsets else None

"""Flat binary volume export/import and PGM mid-slice snapshots.

Volume layout: magic ``SPVOL``, version u32, dims as 3 x u32, dx f32,
then f32 cell values in x-fastest order. 2D grids are written with a
z extent of 1. All integers little-endian.
"""

import struct

import numpy as np

from .errors import FormatError
from .grids import ScalarGrid

VOL_MAGIC = b"SPVOL"
VOL_VERSION = 1


def write_volume(path, grid):
    dims3 = tuple(grid.dims) + (1,) * (3 - grid.ndim)
    vals = grid.values.reshape(dims3)
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<I", VOL_VERSION))
        f.write(struct.pack("<3I", *dims3))
        f.write(struct.pack("<f", grid.dx))
        f.write(np.ascontiguousarray(vals, dtype="<f4").ravel(order="F").tobytes())


def read_volume(path):
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != VOL_MAGIC:
            raise FormatError(f"bad volume magic {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != VOL_VERSION:
            raise FormatError(f"unsupported volume version {version}")
        dims3 = struct.unpack("<3I", f.read(12))
        dx, = struct.unpack("<f", f.read(4))
        n = dims3[0] * dims3[1] * dims3[2]
        raw = f.read(4 * n)
        if len(raw) != 4 * n:
            raise FormatError("truncated volume payload")
    vals = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    vals = vals.reshape(dims3, order="F")
    if dims3[2] == 1:
        vals = vals[:, :, 0]
        dims = dims3[:2]
    else:
        dims = dims3
    return ScalarGrid(dims, dx, vals)


def write_pgm_slice(path, grid, vmax=None):
    """8-bit PGM of the mid z-slice (the full field for a 2D grid)."""
    if grid.ndim == 3:
        plane = grid.values[:, :, grid.dims[2] // 2]
    else:
        plane = grid.values
    if vmax is None:
        vmax = float(plane.max())
    if vmax <= 0.0:
        vmax = 1.0
    img = np.clip(plane / vmax * 255.0, 0.0, 255.0).astype(np.uint8)
    # image rows scan y from top; transpose so x runs along a row
    img = img.T[::-1]
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())

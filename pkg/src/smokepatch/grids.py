"""Uniform Cartesian fields: cell-centered scalars and staggered (MAC) vectors.

Positions are world coordinates. A cell ``(i, j, k)`` is centered at
``(i + 0.5) * dx`` per axis; the staggered component ``a`` of a velocity grid
lives on the faces normal to axis ``a``, i.e. at integer multiples of ``dx``
along ``a`` and cell centers along the other axes. Grids are 2D or 3D.
"""

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DimensionMismatchError


def snap_coords(coords):
    """Snap nearly-integral index coordinates so on-grid lookups are exact."""
    rounded = np.rint(coords)
    return np.where(np.abs(coords - rounded) < 1e-9, rounded, coords)


def _as_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise DimensionMismatchError(f"grids must be 2D or 3D, got dims={dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    return dims


class ScalarGrid:
    """Cell-centered scalar field on a uniform grid."""

    def __init__(self, dims, dx, values=None):
        self.dims = _as_dims(dims)
        self.dx = float(dx)
        if self.dx <= 0.0:
            raise ValueError("dx must be positive")
        if values is None:
            self.values = np.zeros(self.dims, dtype=np.float64)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != self.dims:
                raise DimensionMismatchError(
                    f"values shape {values.shape} != dims {self.dims}")
            self.values = values

    @property
    def ndim(self):
        return len(self.dims)

    def copy(self):
        return ScalarGrid(self.dims, self.dx, self.values.copy())

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar grid contains non-finite values")
        return self

    def cell_centers(self):
        """World positions of all cell centers, shape dims + (ndim,)."""
        axes = [(np.arange(d) + 0.5) * self.dx for d in self.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def sample(self, points):
        """Linear interpolation at world points (P, ndim); clamped at walls."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        coords = snap_coords((points / self.dx - 0.5).T)
        return map_coordinates(self.values, coords, order=1, mode="nearest")

    def total(self):
        return float(self.values.sum())


def staggered_shape(dims, axis):
    shape = list(dims)
    shape[axis] += 1
    return tuple(shape)


class VectorGrid:
    """Vector field on a uniform grid.

    ``staggered=True`` stores MAC face-centered velocity components;
    ``staggered=False`` stores cell-centered components (e.g. vorticity).
    """

    def __init__(self, dims, dx, components=None, staggered=True):
        self.dims = _as_dims(dims)
        self.dx = float(dx)
        if self.dx <= 0.0:
            raise ValueError("dx must be positive")
        self.staggered = bool(staggered)
        n = len(self.dims)
        if components is None:
            if self.staggered:
                self.components = [
                    np.zeros(staggered_shape(self.dims, a), dtype=np.float64)
                    for a in range(n)
                ]
            else:
                self.components = [np.zeros(self.dims, dtype=np.float64)
                                   for _ in range(n)]
        else:
            if len(components) != n:
                raise DimensionMismatchError(
                    f"expected {n} components, got {len(components)}")
            self.components = []
            for a, comp in enumerate(components):
                comp = np.asarray(comp, dtype=np.float64)
                want = staggered_shape(self.dims, a) if self.staggered else self.dims
                if comp.shape != want:
                    raise DimensionMismatchError(
                        f"component {a} shape {comp.shape} != expected {want}")
                self.components.append(comp)

    @property
    def ndim(self):
        return len(self.dims)

    def copy(self):
        return VectorGrid(self.dims, self.dx,
                          [c.copy() for c in self.components],
                          staggered=self.staggered)

    def validate(self):
        for comp in self.components:
            if not np.all(np.isfinite(comp)):
                raise ValueError("vector grid contains non-finite values")
        return self

    def component_positions(self, axis):
        """World positions of the samples of one component."""
        shape = (staggered_shape(self.dims, axis) if self.staggered
                 else self.dims)
        axes = []
        for a, d in enumerate(shape):
            if self.staggered and a == axis:
                axes.append(np.arange(d) * self.dx)
            else:
                axes.append((np.arange(d) + 0.5) * self.dx)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def _component_coords(self, points, axis):
        coords = points / self.dx - 0.5
        if self.staggered:
            coords = coords.copy()
            coords[:, axis] = points[:, axis] / self.dx
        return snap_coords(coords.T)

    def sample(self, points):
        """Linearly interpolated vectors at world points (P, ndim)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((points.shape[0], self.ndim), dtype=np.float64)
        for a, comp in enumerate(self.components):
            out[:, a] = map_coordinates(comp, self._component_coords(points, a),
                                        order=1, mode="nearest")
        return out

    def to_cell_centered(self):
        """Average staggered faces to cell centers; identity if already centered."""
        if not self.staggered:
            return self.copy()
        comps = []
        for a, comp in enumerate(self.components):
            lo = [slice(None)] * self.ndim
            hi = [slice(None)] * self.ndim
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            comps.append(0.5 * (comp[tuple(lo)] + comp[tuple(hi)]))
        return VectorGrid(self.dims, self.dx, comps, staggered=False)


def check_same_layout(a, b):
    if a.dims != b.dims or not np.isclose(a.dx, b.dx):
        raise DimensionMismatchError(
            f"grid layouts differ: dims {a.dims} vs {b.dims}, dx {a.dx} vs {b.dx}")

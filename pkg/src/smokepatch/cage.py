"""Deformation-limited Lagrangian patch cages.

A cage is an ``n``-cell-per-axis lattice of vertices carried through the
flow. Per cell corner we measure how far the corner sits from the position
predicted by 90-degree rotations of the edges to its three in-cell
neighbors; accumulating those squared errors over all cells gives a sparse
quadratic form ``G``. Advected vertex positions are pulled toward a
low-deformation configuration by solving ``(lambda G' + I) v = v'``.

The 2D cage uses the analogous in-plane construction with two neighbors
per corner and fixed +-90-degree rotations (a documented extension; the
quadratic form is then independent of the linearization positions).
"""

import logging

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import DegenerateCellError, DimensionMismatchError

log = logging.getLogger("smokepatch")

SQRT2 = np.sqrt(2.0)
J_2D = np.array([[0.0, -1.0], [1.0, 0.0]])


def rotation_90_about(axes):
    """Batch of 3x3 matrices rotating 90 degrees about each axis row."""
    axes = np.atleast_2d(np.asarray(axes, dtype=np.float64))
    norms = np.linalg.norm(axes, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateCellError("zero-length cage edge")
    a = axes / norms[:, None]
    rot = np.einsum("ei,ej->eij", a, a)
    rot[:, 0, 1] -= a[:, 2]
    rot[:, 0, 2] += a[:, 1]
    rot[:, 1, 0] += a[:, 2]
    rot[:, 1, 2] -= a[:, 0]
    rot[:, 2, 0] -= a[:, 1]
    rot[:, 2, 1] += a[:, 0]
    return rot


def target_vertex_position(v0, v1, v2):
    """Rest-consistent position of a corner from its three neighbors.

    Evaluates the rotation form directly: the prediction is the neighbor
    centroid plus 90-degree rotations (about the triangle edges) of the
    centroid-to-neighbor edges, scaled by 1 / (3 sqrt(2)).
    """
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    if np.linalg.norm(np.cross(v1 - v0, v2 - v0)) < 1e-12:
        raise DegenerateCellError("collinear corner neighbors")
    vc = (v0 + v1 + v2) / 3.0
    rots = rotation_90_about(np.stack([v1 - v0, v2 - v1, v0 - v2]))
    edges = np.stack([vc - v2, vc - v0, vc - v1])
    return vc + np.einsum("eij,ej->i", rots, edges) / (3.0 * SQRT2)


def corner_matrices_3d(v0, v1, v2):
    """Per-corner linear maps so the prediction is A v0 + B v1 + C v2.

    Rows of v0/v1/v2 are linearization positions for a batch of corners.
    """
    r10 = rotation_90_about(v1 - v0)
    r21 = rotation_90_about(v2 - v1)
    r02 = rotation_90_about(v0 - v2)
    eye = np.broadcast_to(np.eye(3), r10.shape)
    s = 1.0 / (9.0 * SQRT2)
    a = eye / 3.0 + s * (r02 + r10 - 2.0 * r21)
    b = eye / 3.0 + s * (r10 + r21 - 2.0 * r02)
    c = eye / 3.0 + s * (r21 + r02 - 2.0 * r10)
    return a, b, c


class CageTopology:
    """Shared connectivity of an n-subdivision hexahedral (or quad) cage."""

    def __init__(self, n, ndim=3):
        if n < 1:
            raise ValueError("cage subdivisions must be >= 1")
        if ndim not in (2, 3):
            raise DimensionMismatchError("cages are 2D or 3D")
        self.n = int(n)
        self.ndim = int(ndim)
        self.shape = (self.n + 1,) * self.ndim
        self.m = int(np.prod(self.shape))
        self._build_corners()
        self._build_adjacency()

    def _build_corners(self):
        idx = np.arange(self.m).reshape(self.shape)
        corners = []   # per corner term: (v3, v0, v1, v2) or (v2, v0, v1, parity)
        rng = range(self.n)
        if self.ndim == 3:
            for i in rng:
                for j in rng:
                    for k in rng:
                        for a in (0, 1):
                            for b in (0, 1):
                                for c in (0, 1):
                                    da = 1 - 2 * a
                                    db = 1 - 2 * b
                                    dc = 1 - 2 * c
                                    v3 = idx[i + a, j + b, k + c]
                                    nx = idx[i + a + da, j + b, k + c]
                                    ny = idx[i + a, j + b + db, k + c]
                                    nz = idx[i + a, j + b, k + c + dc]
                                    if da * db * dc > 0:
                                        corners.append((v3, nx, ny, nz))
                                    else:
                                        corners.append((v3, ny, nx, nz))
            self.corners = np.asarray(corners, dtype=np.int64)
        else:
            for i in rng:
                for j in rng:
                    for a in (0, 1):
                        for b in (0, 1):
                            da = 1 - 2 * a
                            db = 1 - 2 * b
                            v2 = idx[i + a, j + b]
                            nx = idx[i + a + da, j + b]
                            ny = idx[i + a, j + b + db]
                            corners.append((v2, nx, ny, da * db))
            self.corners = np.asarray(corners, dtype=np.int64)

    def _build_adjacency(self):
        neighbors = [set() for _ in range(self.m)]
        idx = np.arange(self.m).reshape(self.shape)
        it = np.ndindex(*self.shape)
        for pos in it:
            v = idx[pos]
            for axis in range(self.ndim):
                for d in (-1, 1):
                    q = list(pos)
                    q[axis] += d
                    if 0 <= q[axis] <= self.n:
                        neighbors[v].add(int(idx[tuple(q)]))
        self.neighbors = [sorted(s) for s in neighbors]

    def rest_lattice(self):
        """Vertex coordinates of the unit cage, in [-0.5, 0.5]^ndim."""
        axes = [np.arange(self.n + 1) / self.n - 0.5] * self.ndim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(self.m, self.ndim)


class DeformationSystem:
    """Sparse quadratic form of the cage deformation error."""

    def __init__(self, matrix, n, ndim):
        self.matrix = matrix
        self.n = n
        self.ndim = ndim

    def energy(self, positions):
        v = np.asarray(positions, dtype=np.float64).ravel()
        return float(v @ (self.matrix @ v)) / self.n


def _corner_block_rows(topo, maps):
    """COO entries of sum over corners of (stacked maps)^T (stacked maps)."""
    ncorner, nvert, d, _ = maps.shape
    blocks = np.einsum("epab,eqac->epqbc", maps, maps)
    verts = np.concatenate([topo.corners[:, 1:1 + nvert - 1],
                            topo.corners[:, :1]], axis=1)
    rows = (verts[:, :, None, None, None] * d +
            np.arange(d)[None, None, None, :, None])
    cols = (verts[:, None, :, None, None] * d +
            np.arange(d)[None, None, None, None, :])
    rows = np.broadcast_to(rows, blocks.shape).ravel()
    cols = np.broadcast_to(cols, blocks.shape).ravel()
    return blocks.ravel(), rows, cols


def assemble_system(topo, positions):
    """Build the deformation quadratic form linearized at ``positions``."""
    v = np.asarray(positions, dtype=np.float64)
    if v.shape != (topo.m, topo.ndim):
        raise DimensionMismatchError(
            f"positions shape {v.shape} != ({topo.m}, {topo.ndim})")
    if not np.all(np.isfinite(v)):
        raise ValueError("cage positions must be finite")
    size = topo.m * topo.ndim
    corner_pos = v[topo.corners[:, 0]]
    for col in range(1, topo.ndim + 1):
        edge = v[topo.corners[:, col]] - corner_pos
        if np.any(np.linalg.norm(edge, axis=1) < 1e-12):
            raise DegenerateCellError("zero-length cage edge")
    if topo.ndim == 3:
        v0 = v[topo.corners[:, 1]]
        v1 = v[topo.corners[:, 2]]
        v2 = v[topo.corners[:, 3]]
        a, b, c = corner_matrices_3d(v0, v1, v2)
        eye = np.broadcast_to(np.eye(3), a.shape)
        maps = np.stack([a, b, c, -eye], axis=1)
    else:
        sign = topo.corners[:, 3].astype(np.float64)
        eye = np.broadcast_to(np.eye(2), (len(sign), 2, 2))
        jj = sign[:, None, None] * J_2D
        a = 0.5 * (eye - jj)
        b = 0.5 * (eye + jj)
        maps = np.stack([a, b, -eye], axis=1)
    data, rows, cols = _corner_block_rows(topo, maps)
    mat = scipy.sparse.coo_matrix((data, (rows, cols)),
                                  shape=(size, size)).tocsr()
    return DeformationSystem(mat, topo.n, topo.ndim)


def deformation_energy(topo, positions, linearization=None):
    """Cage deformation error of ``positions`` (Eq. form: v^T G v / n)."""
    system = assemble_system(
        topo, positions if linearization is None else linearization)
    return system.energy(positions)


def limiter_lambda(topo, lambda0):
    """Cage-resolution-independent weight of the deformation term."""
    return topo.m / topo.n * lambda0


def limit_deformation(topo, advected, lambda0, system=None):
    """Pull advected vertex positions toward a low-deformation shape.

    Solves (lambda G' + I) v = v' by conjugate gradient, G' linearized at
    the advected positions. lambda0 = 0 returns the advected positions
    unchanged. Non-convergence is logged and v' returned as a fallback.
    """
    if lambda0 < 0.0:
        raise ValueError("lambda0 must be >= 0")
    vp = np.asarray(advected, dtype=np.float64)
    if lambda0 == 0.0:
        return vp.copy()
    if system is None:
        system = assemble_system(topo, vp)
    lam = limiter_lambda(topo, lambda0)
    size = topo.m * topo.ndim
    op = lam * system.matrix + scipy.sparse.identity(size, format="csr")
    b = vp.ravel()
    atol = 1e-8 * float(np.linalg.norm(b))
    sol, info = _cg(op, b, x0=b.copy(), atol=atol, maxiter=10 * size)
    if info != 0:
        log.warning("deformation limiter CG did not converge (info=%d); "
                    "keeping advected positions", info)
        return vp.copy()
    return sol.reshape(vp.shape)


def _cg(op, b, x0, atol, maxiter):
    try:
        return scipy.sparse.linalg.cg(op, b, x0=x0, rtol=0.0, atol=atol,
                                      maxiter=maxiter)
    except TypeError:  # older scipy spells rtol as tol
        return scipy.sparse.linalg.cg(op, b, x0=x0, tol=0.0, atol=atol,
                                      maxiter=maxiter)


def advect_vertices(positions, vel, dt, backward=False):
    """One explicit step of the vertices through the (filtered) velocity."""
    pts = np.asarray(positions, dtype=np.float64)
    u = vel.sample(pts)
    moved = pts - dt * u if backward else pts + dt * u
    hi = np.asarray(vel.dims) * vel.dx
    return np.clip(moved, 0.0, hi)


class PatchCage:
    """A tracked patch: cage vertices plus bookkeeping for synthesis."""

    def __init__(self, patch_id, topo, center, size, frame=None):
        self.id = int(patch_id)
        self.topo = topo
        self.size = float(size)
        self.frame = (np.eye(topo.ndim) if frame is None
                      else np.asarray(frame, dtype=np.float64))
        lattice = topo.rest_lattice() * self.size
        self.positions = lattice @ self.frame.T + np.asarray(center)
        self.prev_positions = self.positions.copy()
        self.age = 0
        self.weight = 1.0
        self.entry_id = None
        self.entry_frame = None
        self.match_distance = None
        self.playable = 0
        self.energy = 0.0

    @property
    def assigned(self):
        return self.entry_id is not None

    def centroid(self):
        return self.positions.mean(axis=0)

    def check_frame(self):
        err = np.abs(self.frame @ self.frame.T - np.eye(self.topo.ndim)).max()
        if err > 1e-6:
            raise ValueError(f"orientation frame not orthonormal (err={err:.2e})")

    def advance(self, vel, dt, lambda0, backward=False):
        """Advect, then limit deformation; updates the energy cache."""
        self.prev_positions = advect_vertices(self.positions, vel, dt,
                                              backward=backward)
        system = assemble_system(self.topo, self.prev_positions)
        self.positions = limit_deformation(self.topo, self.prev_positions,
                                           lambda0, system=system)
        self.energy = system.energy(self.positions)
        return self

    def sample_points(self, res):
        """World positions of a res^ndim sampling lattice mapped through the cage."""
        return map_unit_points(self.topo, self.positions,
                               unit_cell_centers(self.topo.ndim, res))


def unit_cell_centers(ndim, res):
    axes = [(np.arange(res) + 0.5) / res] * ndim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, ndim)


def map_unit_points(topo, positions, unit_points):
    """Map unit-cube points through the cage's multilinear cells."""
    u = np.clip(np.asarray(unit_points, dtype=np.float64), 0.0, 1.0)
    scaled = u * topo.n
    cell = np.minimum(scaled.astype(np.int64), topo.n - 1)
    t = scaled - cell
    grid = positions.reshape(topo.shape + (topo.ndim,))
    out = np.zeros((len(u), topo.ndim))
    for corner in np.ndindex(*(2,) * topo.ndim):
        w = np.ones(len(u))
        for a, bit in enumerate(corner):
            w = w * (t[:, a] if bit else 1.0 - t[:, a])
        idx = tuple(cell[:, a] + corner[a] for a in range(topo.ndim))
        out += w[:, None] * grid[idx]
    return out

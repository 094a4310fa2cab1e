"""Minimal inviscid grid smoke solver.

Velocity lives on a MAC grid inside a closed box with free-slip walls
(zero normal velocity on the boundary faces). One call to :func:`step`
advances one animation frame: source injection, buoyancy, semi-Lagrangian
advection (optionally with a center-of-mass correction offset) and a
conjugate-gradient pressure projection.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import DimensionMismatchError, EmptyFieldError
from .grids import ScalarGrid, VectorGrid, check_same_layout, staggered_shape

log = logging.getLogger("smokepatch")

GAUSS_TRUNCATE = 3.0


@dataclass
class SphereSource:
    """Spherical density emitter with a one-cell soft edge."""
    center: tuple
    radius: float
    rate: float


@dataclass
class SimParams:
    dt: float = 1.0
    buoyancy: tuple = (0.0, 0.0)
    source: SphereSource | None = None
    tolerance: float = 1e-5
    max_iterations: int = 4000
    seed: int = 0
    com_recenter: bool = False

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")


@dataclass
class SmokeState:
    density: ScalarGrid
    velocity: VectorGrid
    frame: int = 0

    def copy(self):
        return SmokeState(self.density.copy(), self.velocity.copy(), self.frame)


@dataclass
class ProjectionReport:
    iterations: int
    residual: float
    converged: bool


def new_state(dims, dx):
    return SmokeState(ScalarGrid(dims, dx), VectorGrid(dims, dx))


# ---------------------------------------------------------------------------
# advection

def _backtraced_points(points, vel, dt, offset):
    back = points - dt * vel.sample(points)
    if offset is not None:
        back = back + np.asarray(offset, dtype=np.float64)
    return back


def advect_semi_lagrangian(fld, vel, dt, offset=None):
    """One semi-Lagrangian step of a scalar or vector field through ``vel``.

    Each sample point is traced back one step through the velocity plus a
    constant correction ``offset`` (world units); the source field is read
    there with linear interpolation, clamped at the walls.
    """
    check_same_layout(fld, vel)
    if isinstance(fld, ScalarGrid):
        pts = fld.cell_centers().reshape(-1, fld.ndim)
        back = _backtraced_points(pts, vel, dt, offset)
        return ScalarGrid(fld.dims, fld.dx, fld.sample(back).reshape(fld.dims))
    comps = []
    for a in range(fld.ndim):
        pos = fld.component_positions(a)
        pts = pos.reshape(-1, fld.ndim)
        back = _backtraced_points(pts, vel, dt, offset)
        coords = fld._component_coords(back, a)
        comps.append(map_coordinates(fld.components[a], coords, order=1,
                                     mode="nearest").reshape(pos.shape[:-1]))
    return VectorGrid(fld.dims, fld.dx, comps, staggered=fld.staggered)


# ---------------------------------------------------------------------------
# projection

def zero_normal_boundary(vel):
    """Closed-box condition: zero the normal velocity on all wall faces."""
    out = vel.copy()
    for a, comp in enumerate(out.components):
        lo = [slice(None)] * vel.ndim
        hi = [slice(None)] * vel.ndim
        lo[a] = 0
        hi[a] = -1
        comp[tuple(lo)] = 0.0
        comp[tuple(hi)] = 0.0
    return out


def divergence(vel):
    """Discrete per-cell divergence (net face flux, velocity units)."""
    if not vel.staggered:
        raise DimensionMismatchError("divergence needs a staggered grid")
    div = np.zeros(vel.dims, dtype=np.float64)
    for a, comp in enumerate(vel.components):
        div += np.diff(comp, axis=a)
    return ScalarGrid(vel.dims, vel.dx, div)


def _neumann_laplacian(p):
    # graph Laplacian with missing neighbors dropped (closed box), negated
    # so the operator is positive semi-definite
    out = np.zeros_like(p)
    for a in range(p.ndim):
        d = np.diff(p, axis=a)
        lo = [slice(None)] * p.ndim
        hi = [slice(None)] * p.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        out[tuple(lo)] -= d
        out[tuple(hi)] += d
    return out


def solve_pressure(div_values, tol, max_iterations):
    """CG solve of the Neumann Poisson system for the divergence source."""
    b = -div_values
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rs = float(np.dot(r.ravel(), r.ravel()))
    it = 0
    converged = float(np.max(np.abs(r))) <= tol
    while not converged and it < max_iterations:
        q = _neumann_laplacian(d)
        alpha = rs / float(np.dot(d.ravel(), q.ravel()))
        x += alpha * d
        r -= alpha * q
        rs_new = float(np.dot(r.ravel(), r.ravel()))
        d = r + (rs_new / rs) * d
        rs = rs_new
        it += 1
        converged = float(np.max(np.abs(r))) <= tol
    return x, ProjectionReport(it, float(np.max(np.abs(r))), converged)


def project(vel, params, return_report=False):
    """Pressure projection: make ``vel`` discretely divergence-free.

    The interior CG tolerance is two orders tighter than
    ``params.tolerance`` so that re-projecting an already projected field
    is a near-identity. Non-convergence is reported, not fatal.
    """
    out = zero_normal_boundary(vel)
    div = divergence(out).values
    cg_tol = params.tolerance * 1e-2
    p, report = solve_pressure(div, cg_tol, params.max_iterations)
    if not report.converged:
        log.warning("pressure solve did not converge: %d iterations, "
                    "residual %.3e", report.iterations, report.residual)
    for a, comp in enumerate(out.components):
        interior = [slice(None)] * vel.ndim
        interior[a] = slice(1, -1)
        comp[tuple(interior)] -= np.diff(p, axis=a)
    if return_report:
        return out, report
    return out


# ---------------------------------------------------------------------------
# differential / filtering / resampling utilities

def curl(vel):
    """Vorticity of a velocity field at cell centers.

    Returns a ScalarGrid in 2D and a cell-centered VectorGrid in 3D.
    Central differences in the interior, one-sided at the boundaries.
    """
    centered = vel.to_cell_centered()
    grads = [np.gradient(c, vel.dx) for c in centered.components]
    if vel.ndim == 2:
        return ScalarGrid(vel.dims, vel.dx, grads[1][0] - grads[0][1])
    wx = grads[2][1] - grads[1][2]
    wy = grads[0][2] - grads[2][0]
    wz = grads[1][0] - grads[0][1]
    return VectorGrid(vel.dims, vel.dx, [wx, wy, wz], staggered=False)


def low_pass_array(values, sigma_cells):
    if np.all(np.asarray(sigma_cells) <= 0.0):
        return values.copy()
    return gaussian_filter(values, sigma=sigma_cells, mode="nearest",
                           truncate=GAUSS_TRUNCATE)


def low_pass(fld, cutoff_width):
    """Gaussian blur with sigma = cutoff_width / 2 (world units), 3-sigma kernel."""
    if cutoff_width < 0.0:
        raise ValueError("cutoff_width must be >= 0")
    sigma = 0.5 * cutoff_width / fld.dx
    if isinstance(fld, ScalarGrid):
        return ScalarGrid(fld.dims, fld.dx, low_pass_array(fld.values, sigma))
    return VectorGrid(fld.dims, fld.dx,
                      [low_pass_array(c, sigma) for c in fld.components],
                      staggered=fld.staggered)


def resample_array(values, new_shape, staggered_axis=None):
    """Linear resampling of an array onto a new shape (cell-center aligned).

    Downsampled axes are Gaussian pre-filtered with width = one source cell
    times the reduction ratio (sigma = ratio / 2 cells).
    """
    old_shape = values.shape
    if tuple(new_shape) == old_shape:
        return values.copy()
    if staggered_axis is None:
        scales = [o / n for o, n in zip(old_shape, new_shape)]
    else:
        scales = [(o - 1 if a == staggered_axis else o) /
                  (n - 1 if a == staggered_axis else n)
                  for a, (o, n) in enumerate(zip(old_shape, new_shape))]
    sigma = [0.5 * s if s > 1.0 else 0.0 for s in scales]
    src = low_pass_array(values, sigma)
    axes = []
    for a, (n, s) in enumerate(zip(new_shape, scales)):
        if staggered_axis is not None and a == staggered_axis:
            axes.append(np.arange(n) * s)
        else:
            axes.append((np.arange(n) + 0.5) * s - 0.5)
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=0)
    out = map_coordinates(src, coords, order=1, mode="nearest")
    return out.reshape(tuple(new_shape))


def resample(fld, new_dims):
    """Resample a grid to new cell counts; the world extent is preserved."""
    new_dims = tuple(int(d) for d in new_dims)
    if any(d < 1 for d in new_dims):
        raise ValueError("new_dims must be >= 1 per axis")
    scale = fld.dims[0] / new_dims[0]
    for o, n in zip(fld.dims, new_dims):
        if not np.isclose(o / n, scale):
            raise DimensionMismatchError(
                f"resample requires a uniform scale: {fld.dims} -> {new_dims}")
    new_dx = fld.dx * scale
    if isinstance(fld, ScalarGrid):
        return ScalarGrid(new_dims, new_dx,
                          resample_array(fld.values, new_dims))
    comps = []
    for a, comp in enumerate(fld.components):
        if fld.staggered:
            shape = staggered_shape(new_dims, a)
            comps.append(resample_array(comp, shape, staggered_axis=a))
        else:
            comps.append(resample_array(comp, new_dims))
    return VectorGrid(new_dims, new_dx, comps, staggered=fld.staggered)


def center_of_mass(density):
    """Density-weighted mean cell-center position (world units)."""
    total = density.total()
    if total <= 0.0:
        raise EmptyFieldError("center of mass of an empty density field")
    com = np.empty(density.ndim, dtype=np.float64)
    vals = density.values
    for a in range(density.ndim):
        other = tuple(i for i in range(density.ndim) if i != a)
        marginal = vals.sum(axis=other)
        centers = (np.arange(density.dims[a]) + 0.5) * density.dx
        com[a] = float(np.dot(marginal, centers)) / total
    return com


def domain_center(grid):
    return np.asarray([0.5 * d * grid.dx for d in grid.dims])


# ---------------------------------------------------------------------------
# solver step

def add_source(density, source, dt):
    out = density.copy()
    centers = density.cell_centers()
    dist = np.linalg.norm(centers - np.asarray(source.center), axis=-1)
    w = np.clip((source.radius - dist) / density.dx + 1.0, 0.0, 1.0)
    out.values += source.rate * dt * w
    return out


def add_buoyancy(vel, density, buoyancy, dt):
    out = vel.copy()
    for a, comp in enumerate(out.components):
        g = buoyancy[a] if a < len(buoyancy) else 0.0
        if g == 0.0:
            continue
        pos = vel.component_positions(a).reshape(-1, vel.ndim)
        d_face = density.sample(pos).reshape(comp.shape)
        comp += dt * g * d_face
    return out


def com_offset(density):
    """Correction offset that relocates the center of mass to the grid center."""
    return center_of_mass(density) - domain_center(density)


def step(state, params, dt=None, offset_override=None):
    """Advance one frame: source, buoyancy, advection, projection.

    ``offset_override`` replaces the internally computed center-of-mass
    correction (used when two coupled simulations must share one offset);
    ``dt`` overrides ``params.dt`` for substepping.
    """
    dt = params.dt if dt is None else dt
    density = state.density
    vel = state.velocity
    if params.source is not None:
        density = add_source(density, params.source, dt)
    vel = add_buoyancy(vel, density, params.buoyancy, dt)
    offset = offset_override
    if (offset is None and params.com_recenter and density.total() > 0.0):
        offset = com_offset(density)
    new_density = advect_semi_lagrangian(density, vel, dt, offset)
    new_vel = advect_semi_lagrangian(vel, vel, dt, offset)
    new_vel = project(new_vel, params)
    return SmokeState(new_density, new_vel, state.frame + 1)

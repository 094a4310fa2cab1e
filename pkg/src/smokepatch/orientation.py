"""Gradient-histogram orientation for freshly seeded patches.

The density gradient is sampled on a 9-per-axis lattice around the seed
point. Gradient directions are soft-binned over the unit sphere (meridians
and parallels; plain angular bins in 2D), weighted by gradient magnitude
and a Gaussian distance falloff, and normalized by bin solid angle. The
top bin becomes the main patch axis; the secondary axis comes from the
same histogram with gradients projected into the tangent plane.
"""

import numpy as np

from .grids import ScalarGrid

REGION_SAMPLES = 9


class GradientHistogram:
    def __init__(self, bins, directions, solid_angles):
        self.bins = bins
        self.directions = directions
        self.solid_angles = solid_angles

    def argmax_direction(self):
        """Direction of the strongest bin (first in scan order on ties)."""
        k = int(np.argmax(self.bins))
        return self.directions.reshape(-1, self.directions.shape[-1])[k]

    def is_empty(self, eps=0.0):
        return float(self.bins.max(initial=0.0)) <= eps


def bin_directions(n_b, ndim):
    dtheta = np.pi / n_b
    theta = (np.arange(2 * n_b) + 0.5) * dtheta
    if ndim == 2:
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return dirs, np.full(2 * n_b, dtheta)
    phi = (np.arange(n_b) + 0.5) * dtheta
    t, p = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(p) * np.cos(t),
                     np.sin(p) * np.sin(t),
                     np.cos(p)], axis=-1)
    edges = np.arange(n_b + 1) * dtheta
    band = np.cos(edges[:-1]) - np.cos(edges[1:])
    solid = np.broadcast_to(dtheta * band, (2 * n_b, n_b)).copy()
    return dirs, solid


def region_points(x, region_radius, ndim):
    offsets = np.linspace(-region_radius, region_radius, REGION_SAMPLES)
    mesh = np.meshgrid(*([offsets] * ndim), indexing="ij")
    return np.asarray(x) + np.stack(mesh, axis=-1).reshape(-1, ndim)


def sample_gradients(density, points):
    grads = np.gradient(density.values, density.dx)
    comps = [ScalarGrid(density.dims, density.dx, g).sample(points)
             for g in grads]
    return np.stack(comps, axis=-1)


def histogram_from_gradients(grads, distances2, n_b, sigma):
    """Soft-binned direction histogram of weighted gradient samples."""
    ndim = grads.shape[-1]
    dtheta = np.pi / n_b
    mag = np.linalg.norm(grads, axis=-1)
    weight = mag * np.exp(-distances2 / (2.0 * sigma ** 2))
    live = mag > 0.0
    dirs, solid = bin_directions(n_b, ndim)
    theta = np.arctan2(grads[live, 1], grads[live, 0]) % (2.0 * np.pi)
    centers_t = (np.arange(2 * n_b) + 0.5) * dtheta
    dt = np.abs((theta[:, None] - centers_t[None, :] + np.pi)
                % (2.0 * np.pi) - np.pi)
    wt = np.maximum(0.0, 1.0 - dt / dtheta)
    if ndim == 2:
        bins = (weight[live, None] * wt).sum(axis=0) / solid
        return GradientHistogram(bins, dirs, solid)
    phi = np.arccos(np.clip(grads[live, 2] / np.maximum(mag[live], 1e-300),
                            -1.0, 1.0))
    centers_p = (np.arange(n_b) + 0.5) * dtheta
    wp = np.maximum(0.0, 1.0 - np.abs(phi[:, None] - centers_p[None, :]) / dtheta)
    bins = np.einsum("s,si,sj->ij", weight[live], wt, wp) / solid
    return GradientHistogram(bins, dirs, solid)


def gradient_histogram(density, x, n_b=16, region_radius=None):
    """Histogram of density-gradient directions around a world point."""
    if region_radius is None:
        region_radius = 4.0 * density.dx
    pts = region_points(x, region_radius, density.ndim)
    grads = sample_gradients(density, pts)
    d2 = np.sum((pts - np.asarray(x)) ** 2, axis=-1)
    return histogram_from_gradients(grads, d2, n_b, sigma=region_radius)


def _fallback_orthogonal(v):
    probe = np.zeros_like(v)
    probe[int(np.argmin(np.abs(v)))] = 1.0
    w = probe - np.dot(probe, v) * v
    return w / np.linalg.norm(w)


def init_orientation(density, x, n_b=16, region_radius=None):
    """Orthonormal patch frame aligned with the local density gradients.

    Returns the identity frame when the histogram is empty (constant
    density). Columns are the main, secondary and (3D) cross axes.
    """
    ndim = density.ndim
    if region_radius is None:
        region_radius = 4.0 * density.dx
    pts = region_points(x, region_radius, ndim)
    grads = sample_gradients(density, pts)
    d2 = np.sum((pts - np.asarray(x)) ** 2, axis=-1)
    hist = histogram_from_gradients(grads, d2, n_b, sigma=region_radius)
    if hist.is_empty():
        return np.eye(ndim)
    bx = hist.argmax_direction()
    bx = bx / np.linalg.norm(bx)
    if ndim == 2:
        by = np.array([-bx[1], bx[0]])
        return np.stack([bx, by], axis=-1)
    tangent = grads - np.outer(grads @ bx, bx)
    hist2 = histogram_from_gradients(tangent, d2, n_b, sigma=region_radius)
    if hist2.is_empty():
        by = _fallback_orthogonal(bx)
    else:
        by = hist2.argmax_direction()
        by = by - np.dot(by, bx) * bx
        norm = np.linalg.norm(by)
        by = _fallback_orthogonal(bx) if norm < 1e-8 else by / norm
    bz = np.cross(bx, by)
    return np.stack([bx, by, bz], axis=-1)

"""Runtime synthesis: patch tracking, matching, anticipation, rendering.

The forward pass advances the source simulation and the patch cages,
seeds new patches on a jittered grid wherever the accumulated kernel
weight is low, matches their descriptors against the repository and
drops patches that deform or drift too far. The backward pass walks the
stored frames in reverse and back-tracks each patch over its fade-in
interval so it is undeformed exactly when fully visible. Rendering maps
repository density blocks through the deformed cages into a high
resolution volume, blends them by kernel weight and masks the result
with the blurred source density.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .cage import CageTopology, PatchCage
from .errors import (DimensionMismatchError, EmptyRepositoryError,
                     FormatError)
from .grids import ScalarGrid, VectorGrid, snap_coords, staggered_shape
from .net import combine_descriptors, is_degenerate_descriptor
from .orientation import init_orientation
from .repository import build_index
from .solver import curl, low_pass, low_pass_array, resample

log = logging.getLogger("smokepatch")


@dataclass
class SynthesisParams:
    patch_size: float = 0.25          # s_p, world units
    cage_subdivisions: int = 3        # cells per cage axis
    lambda0: float = 0.1
    seeding_threshold: float = 0.5    # w_s limit below which sites spawn
    seed_density_min: float = 0.01
    energy_coefficient: float = 0.15  # removal at E > coeff * s_p^2
    recheck_scale: float = 2.0        # descriptor re-check: scale * d0 + bias
    recheck_bias: float = 0.1
    fade_frames: int = 40             # t_f
    motion_weight: float = 0.6        # w_m of the combined descriptor
    max_age: int = 100
    wall_margin_factor: float = 1.0 / 6.0  # x s_p: removal inset from walls

    def __post_init__(self):
        for name in ("patch_size", "seeding_threshold", "energy_coefficient",
                     "recheck_scale", "recheck_bias", "lambda0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def cage_dx(self):
        return self.patch_size / self.cage_subdivisions

    @property
    def energy_threshold(self):
        return self.energy_coefficient * self.patch_size ** 2


def kernel_weight(r, patch_size):
    """Spherical blending kernel: flat core, linear falloff to s_p / 2."""
    inner = patch_size / 6.0
    outer = patch_size / 2.0
    r = np.asarray(r, dtype=np.float64)
    w = (outer - r) / (outer - inner)
    return np.clip(w, 0.0, 1.0) if w.ndim else float(np.clip(w, 0.0, 1.0))


def paint_kernel(values, dims, dx, center, patch_size):
    """Add one undeformed patch kernel into a weight array in place."""
    center = np.asarray(center, dtype=np.float64)
    radius = patch_size / 2.0
    lo = np.maximum(((center - radius) / dx - 0.5).astype(int), 0)
    hi = np.minimum(((center + radius) / dx + 1.5).astype(int),
                    np.asarray(dims))
    if np.any(lo >= hi):
        return
    axes = [(np.arange(a, b) + 0.5) * dx for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    d2 = sum((m - c) ** 2 for m, c in zip(mesh, center))
    region = tuple(slice(a, b) for a, b in zip(lo, hi))
    values[region] += kernel_weight(np.sqrt(d2), patch_size)


def accumulate_weights(patches, dims, dx, patch_size, deformed=False):
    """Sum the patch kernels into a fresh weight grid.

    The undeformed variant paints radial kernels at the cage centroids;
    the deformed variant evaluates the kernels through each cage mapping.
    """
    grid = ScalarGrid(dims, dx)
    if not deformed:
        for patch in patches:
            paint_kernel(grid.values, dims, dx, patch.centroid(), patch_size)
        return grid
    for patch in patches:
        w, region = deformed_kernel_weights(patch, dims, dx, patch_size)
        if region is not None:
            grid.values[region] += w
    return grid


# ---------------------------------------------------------------------------
# deformed cage sampling (render support)

def _cell_simplices(ndim):
    if ndim == 2:
        return [(0, 1, 3), (0, 3, 2)]  # corners in (x-major bit) order
    return [(0, 1, 3, 7), (0, 1, 7, 5), (0, 5, 7, 4),
            (0, 3, 2, 7), (0, 2, 6, 7), (0, 4, 7, 6)]


def inverse_cage_map(patch, points):
    """Cage-local [0,1] coordinates of world points (barycentric per cell).

    Points outside every deformed cell get NaN coordinates. The piecewise
    linear inverse is exact for affine (e.g. undeformed) cages.
    """
    topo = patch.topo
    nd = topo.ndim
    pts = np.asarray(points, dtype=np.float64)
    out = np.full(pts.shape, np.nan)
    grid = patch.positions.reshape(topo.shape + (nd,))
    corner_bits = list(np.ndindex(*(2,) * nd))
    unit_corners = np.asarray(corner_bits, dtype=np.float64)
    todo = np.ones(len(pts), dtype=bool)
    for cell in np.ndindex(*(topo.n,) * nd):
        if not np.any(todo):
            break
        verts = np.stack([grid[tuple(np.add(cell, b))] for b in corner_bits])
        lo = verts.min(axis=0)
        hi = verts.max(axis=0)
        cand = np.where(todo
                        & np.all(pts >= lo - 1e-12, axis=1)
                        & np.all(pts <= hi + 1e-12, axis=1))[0]
        if len(cand) == 0:
            continue
        local = np.full((len(cand), nd), np.nan)
        remaining = np.ones(len(cand), dtype=bool)
        for simplex in _cell_simplices(nd):
            if not np.any(remaining):
                break
            base = verts[simplex[0]]
            mat = np.stack([verts[i] - base for i in simplex[1:]], axis=1)
            try:
                inv = np.linalg.inv(mat)
            except np.linalg.LinAlgError:
                continue
            rel = pts[cand] - base
            bary = rel @ inv.T
            inside = (remaining & np.all(bary >= -1e-9, axis=1)
                      & (bary.sum(axis=1) <= 1.0 + 1e-9))
            if not np.any(inside):
                continue
            u_base = unit_corners[simplex[0]]
            u_mat = np.stack([unit_corners[i] - u_base for i in simplex[1:]],
                             axis=1)
            local[inside] = u_base + bary[inside] @ u_mat.T
            remaining &= ~inside
        hit = ~np.isnan(local[:, 0])
        sel = cand[hit]
        out[sel] = (local[hit] + np.asarray(cell)) / topo.n
        todo[sel] = False
    return out


def deformed_kernel_weights(patch, dims, dx, patch_size):
    """Kernel weights of one deformed patch on a target grid region."""
    lo_w = patch.positions.min(axis=0)
    hi_w = patch.positions.max(axis=0)
    lo = np.maximum((lo_w / dx - 0.5).astype(int), 0)
    hi = np.minimum((hi_w / dx + 1.5).astype(int), np.asarray(dims))
    if np.any(lo >= hi):
        return None, None
    axes = [(np.arange(a, b) + 0.5) * dx for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    local = inverse_cage_map(patch, pts)
    inside = ~np.isnan(local[:, 0])
    w = np.zeros(len(pts))
    if np.any(inside):
        rest_r = np.linalg.norm(local[inside] - 0.5, axis=1) * patch_size
        w[inside] = kernel_weight(rest_r, patch_size)
    region = tuple(slice(a, b) for a, b in zip(lo, hi))
    return w.reshape(tuple(hi - lo)), region


# ---------------------------------------------------------------------------
# patch tracking (shared by data generation, repository building, synthesis)

class PatchTracker:
    """Seeds and advances deformation-limited patches over a flow."""

    def __init__(self, dims, dx, params, rng):
        self.dims = tuple(dims)
        self.dx = float(dx)
        self.ndim = len(self.dims)
        self.params = params
        self.rng = rng
        self.topo = CageTopology(params.cage_subdivisions, self.ndim)
        self.active = []
        self.next_id = 0
        self.weights = ScalarGrid(self.dims, self.dx)

    def domain_extent(self):
        return np.asarray(self.dims) * self.dx

    def advance(self, velocity, dt, backward=False):
        """Advect and deformation-limit all cages; drop broken ones."""
        filtered = low_pass(velocity, self.params.cage_dx)
        removed = []
        margin = self.params.patch_size * self.params.wall_margin_factor
        hi = self.domain_extent() - margin
        for patch in self.active:
            patch.advance(filtered, dt, self.params.lambda0,
                          backward=backward)
            patch.age += 1
            c = patch.centroid()
            if (patch.energy > self.params.energy_threshold
                    or np.any(c < margin) or np.any(c > hi)
                    or patch.age > self.params.max_age):
                removed.append(patch)
        for patch in removed:
            self.active.remove(patch)
        return removed

    def seed(self, density):
        """Spawn patches on a jittered grid where the kernel weight is low."""
        p = self.params
        extent = self.domain_extent()
        counts = np.maximum((extent / (p.patch_size / 2.0)).astype(int), 1)
        work = self.weights.copy()
        born = []
        for site_idx in np.ndindex(*counts):
            jitter = self.rng.uniform(0.0, 1.0, self.ndim)
            site = (np.asarray(site_idx) + jitter) * extent / counts
            if density.sample(site[None])[0] < p.seed_density_min:
                continue
            if work.sample(site[None])[0] >= p.seeding_threshold:
                continue
            frame = init_orientation(density, site,
                                     region_radius=p.patch_size / 2.0)
            patch = PatchCage(self.next_id, self.topo, site, p.patch_size,
                              frame=frame)
            self.next_id += 1
            self.active.append(patch)
            born.append(patch)
            paint_kernel(work.values, self.dims, self.dx, site, p.patch_size)
        return born

    def accumulate(self):
        self.weights = accumulate_weights(self.active, self.dims, self.dx,
                                          self.params.patch_size)
        return self.weights


# ---------------------------------------------------------------------------
# descriptor extraction from flow fields

def patch_input_blocks(patch, density, vorticity, res):
    """Density and vorticity blocks sampled through the deformed cage.

    Blocks are normalized per patch: density min-max to [0, 1], vorticity
    by its largest magnitude, which makes descriptors invariant to scale
    and offset of the source data. Vorticity vectors are expressed in the
    patch's creation frame in 3D.
    """
    nd = density.ndim
    pts = patch.sample_points(res)
    den = density.sample(pts)
    lo, hi = den.min(), den.max()
    den = (den - lo) / (hi - lo) if hi > lo else np.zeros_like(den)
    if nd == 2:
        crl = vorticity.sample(pts)[None, :]
    else:
        crl = (vorticity.sample(pts) @ patch.frame).T
    peak = np.abs(crl).max()
    crl = crl / peak if peak > 0 else np.zeros_like(crl)
    shape = (res,) * nd
    return np.concatenate([den.reshape((1,) + shape),
                           crl.reshape((-1,) + shape)])


def block_descriptor(blocks, den_net, mot_net, w_m):
    d_den = den_net.descriptor(blocks[:1])
    d_mot = mot_net.descriptor(blocks[1:])
    return combine_descriptors(d_den, d_mot, w_m)


# ---------------------------------------------------------------------------
# frame store

@dataclass
class PatchSnapshot:
    patch_id: int
    entry_id: int
    entry_frame: int
    weight: float
    positions: np.ndarray

    def centroid(self):
        return self.positions.mean(axis=0)


@dataclass
class FrameRecord:
    frame: int
    density: ScalarGrid
    velocity: VectorGrid
    patches: list


@dataclass
class FrameStore:
    params: SynthesisParams
    dims: tuple
    dx: float
    frames: list = field(default_factory=list)

    @property
    def ndim(self):
        return len(self.dims)


FRAME_MAGIC = b"SPFRM"
FRAME_VERSION = 1


def _write_array(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_frame(record, store, path):
    nd = store.ndim
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<II", FRAME_VERSION, record.frame))
        f.write(struct.pack("<I", nd))
        f.write(struct.pack(f"<{nd}I", *store.dims))
        f.write(struct.pack("<f", store.dx))
        _write_array(f, record.density.values)
        for comp in record.velocity.components:
            _write_array(f, comp)
        f.write(struct.pack("<II", len(record.patches),
                            record.patches[0].positions.shape[0]
                            if record.patches else 0))
        for snap in record.patches:
            f.write(struct.pack("<III", snap.patch_id, snap.entry_id,
                                snap.entry_frame))
            f.write(struct.pack("<f", snap.weight))
            _write_array(f, snap.positions)


def _read_array(f, shape):
    n = int(np.prod(shape))
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated frame file")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def load_frame(path):
    with open(path, "rb") as f:
        if f.read(5) != FRAME_MAGIC:
            raise FormatError("bad frame magic")
        version, frame = struct.unpack("<II", f.read(8))
        if version != FRAME_VERSION:
            raise FormatError(f"unsupported frame version {version}")
        nd, = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{nd}I", f.read(4 * nd))
        dx, = struct.unpack("<f", f.read(4))
        density = ScalarGrid(dims, dx, _read_array(f, dims))
        comps = [_read_array(f, staggered_shape(dims, a)) for a in range(nd)]
        velocity = VectorGrid(dims, dx, comps)
        count, m = struct.unpack("<II", f.read(8))
        patches = []
        for _ in range(count):
            pid, eid, eframe = struct.unpack("<III", f.read(12))
            weight, = struct.unpack("<f", f.read(4))
            pos = _read_array(f, (m, nd))
            patches.append(PatchSnapshot(pid, eid, eframe, weight, pos))
    return FrameRecord(frame, density, velocity, patches), dims, dx


def save_frame_store(store, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(store.dims),
        "dx": store.dx,
        "frame_count": len(store.frames),
        "patch_size": store.params.patch_size,
        "cage_subdivisions": store.params.cage_subdivisions,
        "fade_frames": store.params.fade_frames,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for record in store.frames:
        save_frame(record, store, out / f"frame_{record.frame:05d}.spfrm")


def load_frame_store(in_dir, params=None):
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    params = params or SynthesisParams(
        patch_size=meta["patch_size"],
        cage_subdivisions=meta["cage_subdivisions"],
        fade_frames=meta["fade_frames"])
    store = FrameStore(params, tuple(meta["dims"]), meta["dx"])
    for i in range(meta["frame_count"]):
        record, _, _ = load_frame(src / f"frame_{i:05d}.spfrm")
        store.frames.append(record)
    return store


# ---------------------------------------------------------------------------
# the two-pass synthesis algorithm

def forward_pass(sim_stream, repo, den_net, mot_net, params, seed):
    """Track, match and snapshot patches over a source simulation stream.

    ``sim_stream`` yields (density, velocity) per frame. Returns the frame
    store with per-frame coarse fields and patch snapshots.
    """
    if not repo.entries:
        raise EmptyRepositoryError("repository has no entries")
    index = build_index(repo)
    entry_len = {e.entry_id: e.frame_count for e in repo.entries}
    expected_dim = repo.descriptor_dim
    rng = np.random.default_rng(seed)
    tracker = None
    store = None
    res = den_net.spec.input_res
    for frame_no, (density, velocity) in enumerate(sim_stream):
        if tracker is None:
            tracker = PatchTracker(density.dims, density.dx, params, rng)
            store = FrameStore(params, density.dims, density.dx)
        vort = curl(velocity)
        removed = tracker.advance(velocity, 1.0)
        for patch in removed:
            log.debug("frame %d: removed patch %d (age %d, E=%.4g)",
                      frame_no, patch.id, patch.age, patch.energy)
        tracker.seed(density)
        kept = []
        for patch in tracker.active:
            blocks = patch_input_blocks(patch, density, vort, res)
            desc = block_descriptor(blocks, den_net, mot_net,
                                    params.motion_weight)
            if len(desc) != expected_dim:
                raise DimensionMismatchError(
                    f"descriptor dim {len(desc)} != repository "
                    f"{expected_dim}")
            if not patch.assigned:
                if is_degenerate_descriptor(desc):
                    continue  # nothing to match against; patch is dropped
                eid, eframe, dist = index.query(desc, k=1)[0]
                patch.entry_id = eid
                patch.entry_frame = eframe
                patch.match_distance = dist
                patch.playable = entry_len[eid] - eframe
                kept.append(patch)
                continue
            # advance the repository cursor; drop exhausted or bad matches
            next_frame = patch.entry_frame + 1
            if next_frame >= entry_len[patch.entry_id]:
                continue
            patch.entry_frame = next_frame
            entry = repo.get(patch.entry_id)
            ref = entry.descriptors[next_frame].astype(np.float64)
            dist = float(np.linalg.norm(desc - ref))
            limit = (params.recheck_scale * patch.match_distance
                     + params.recheck_bias)
            if dist > limit:
                log.debug("frame %d: patch %d re-check failed "
                          "(%.4f > %.4f)", frame_no, patch.id, dist, limit)
                continue
            kept.append(patch)
        tracker.active = kept
        snaps = []
        for patch in tracker.active:
            remaining = entry_len[patch.entry_id] - 1 - patch.entry_frame
            fade_span = max(1, min(params.fade_frames, patch.playable))
            patch.weight = min(1.0, (remaining + 1) / fade_span)
            snaps.append(PatchSnapshot(patch.id, patch.entry_id,
                                       patch.entry_frame, patch.weight,
                                       patch.positions.copy()))
        tracker.accumulate()
        store.frames.append(FrameRecord(frame_no, density.copy(),
                                        velocity.copy(), snaps))
    return store


def backward_pass(store, params=None):
    """Add fade-in anticipation snapshots by back-tracking new patches.

    Walks the stored frames from last to first; every patch first seen at
    frame t gains snapshots on [t - t_f, t) with weights ramping 0 -> 1 so
    it is undeformed exactly when fully visible. The repository cursor is
    held at the matched frame while fading in.
    """
    params = params or store.params
    t_f = params.fade_frames
    first_seen = {}
    for record in store.frames:
        for snap in record.patches:
            if snap.patch_id not in first_seen:
                first_seen[snap.patch_id] = (record.frame, snap)
    topo = CageTopology(params.cage_subdivisions, store.ndim)
    ghosts = {}   # patch id -> (cage, first snapshot, creation frame)
    for record in reversed(store.frames):
        for pid, (t0, snap) in first_seen.items():
            if record.frame != t0 - 1 or pid in ghosts:
                continue
            cage = PatchCage(pid, topo, np.zeros(store.ndim),
                             params.patch_size)
            cage.positions = snap.positions.copy()
            ghosts[pid] = (cage, snap, t0)
        if not ghosts:
            continue
        filtered = low_pass(record.velocity, params.cage_dx)
        expired = []
        for pid, (cage, snap, t0) in ghosts.items():
            steps_back = t0 - record.frame
            if steps_back > t_f:
                expired.append(pid)
                continue
            cage.advance(filtered, 1.0, params.lambda0, backward=True)
            weight = max(0.0, 1.0 - steps_back / t_f)
            record.patches.append(PatchSnapshot(
                pid, snap.entry_id, snap.entry_frame, weight,
                cage.positions.copy()))
        for pid in expired:
            del ghosts[pid]
    return store


# ---------------------------------------------------------------------------
# rendering

MASK_EPS = 0.05
WEIGHT_EPS = 1e-4
MASK_BLUR_CELLS = 2.0


def render_volume(record, store, repo, factor):
    """High resolution density of one stored frame.

    Repository blocks are warped through the deformed cages, mapped to the
    min-max range of the local upsampled source density, blended by the
    deformed kernel weights and the patch fade weights, normalized by the
    accumulated weight, masked by the blurred source density and composited
    over the plain upsampled source field.
    """
    out_dims = tuple(int(d * factor) for d in store.dims)
    up = resample(record.density, out_dims)
    dx = up.dx
    numer = np.zeros(out_dims)
    w_r = np.zeros(out_dims)
    topo = CageTopology(store.params.cage_subdivisions, store.ndim)
    block_shape = repo.block_shape
    for snap in record.patches:
        entry = repo.get(snap.entry_id)
        cage = PatchCage(snap.patch_id, topo, np.zeros(store.ndim),
                         store.params.patch_size)
        cage.positions = snap.positions
        weights, region = deformed_kernel_weights(
            cage, out_dims, dx, store.params.patch_size)
        if region is None or not np.any(weights > 0.0):
            continue
        axes = [(np.arange(s.start, s.stop) + 0.5) * dx for s in region]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        local = inverse_cage_map(cage, pts)
        inside = ~np.isnan(local[:, 0])
        if not np.any(inside):
            continue
        block = entry.density_block(snap.entry_frame, block_shape)
        coords = (local[inside] * np.asarray(block_shape) - 0.5).T
        sampled = map_coordinates(block, snap_coords(coords), order=1,
                                  mode="nearest")
        target = up.values[region].ravel()[inside]
        lo, hi = float(target.min()), float(target.max())
        mapped = sampled * (hi - lo) + lo
        vals = np.zeros(len(pts))
        vals[inside] = mapped
        contrib = weights.ravel() * snap.weight
        numer[region] += (vals * contrib).reshape(weights.shape)
        w_r[region] += (contrib).reshape(weights.shape)
    blend = numer / np.maximum(w_r, WEIGHT_EPS)
    # mask blur width: MASK_BLUR_CELLS coarse cells, in output-cell units
    sigma = 0.5 * MASK_BLUR_CELLS * factor
    mask = np.clip(low_pass_array(up.values, sigma) / MASK_EPS, 0.0, 1.0)
    coverage = np.minimum(w_r, 1.0)
    out = coverage * blend * mask + (1.0 - coverage) * up.values
    return ScalarGrid(out_dims, dx, np.maximum(out, 0.0))

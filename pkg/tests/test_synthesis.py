import numpy as np
import pytest

from smokepatch.cage import CageTopology, PatchCage
from smokepatch.errors import EmptyRepositoryError
from smokepatch.grids import ScalarGrid, VectorGrid
from smokepatch.net import DescriptorNet, NetworkSpec
from smokepatch.repository import Repository, make_entry
from smokepatch.synthesis import (FrameRecord, FrameStore, PatchSnapshot,
                                  PatchTracker, SynthesisParams,
                                  accumulate_weights, backward_pass,
                                  forward_pass, kernel_weight, load_frame,
                                  load_frame_store, paint_kernel,
                                  render_volume, save_frame,
                                  save_frame_store)


def blob_density(dims, dx, center, sigma=0.12, amp=1.0):
    g = ScalarGrid(dims, dx)
    pts = g.cell_centers()
    g.values = amp * np.exp(-np.sum((pts - np.asarray(center)) ** 2, axis=-1)
                            / (2 * sigma ** 2))
    return g


# ---------------------------------------------------------------------------
# kernels and weight grids

def test_kernel_profile():
    sp = 0.3
    assert kernel_weight(0.0, sp) == 1.0
    assert kernel_weight(sp / 6, sp) == 1.0
    assert kernel_weight(sp / 3, sp) == pytest.approx(0.5)
    assert kernel_weight(sp / 2, sp) == 0.0
    assert kernel_weight(sp, sp) == 0.0


def test_single_patch_weight_grid_values():
    dims, dx, sp = (64, 64), 1.0 / 64, 0.25
    topo = CageTopology(2, 2)
    patch = PatchCage(0, topo, (0.5, 0.5), sp)
    grid = accumulate_weights([patch], dims, dx, sp)
    # cell (31, 31) center is (0.4921875, 0.4921875): inside the flat core
    assert grid.values[31, 31] == 1.0
    centers = grid.cell_centers()
    r = np.linalg.norm(centers - 0.5, axis=-1)
    np.testing.assert_array_equal(grid.values[r >= sp / 2], 0.0)
    inner = grid.values[r <= sp / 6]
    np.testing.assert_array_equal(inner, 1.0)


def test_coincident_patches_sum():
    dims, dx, sp = (32, 32), 1.0 / 32, 0.25
    topo = CageTopology(2, 2)
    patches = [PatchCage(i, topo, (0.5, 0.5), sp) for i in range(2)]
    grid = accumulate_weights(patches, dims, dx, sp)
    one = accumulate_weights(patches[:1], dims, dx, sp)
    np.testing.assert_allclose(grid.values, 2.0 * one.values, atol=1e-12)


def test_kernel_translation_moves_footprint_exactly():
    dims, dx, sp = (64, 64), 1.0 / 64, 0.25
    a = np.zeros(dims)
    b = np.zeros(dims)
    paint_kernel(a, dims, dx, (0.375, 0.5), sp)
    paint_kernel(b, dims, dx, (0.375 + 8 * dx, 0.5), sp)
    np.testing.assert_array_equal(b[8:, :], a[:-8, :])


def test_deformed_weights_match_radial_for_rest_cage():
    dims, dx, sp = (48, 48), 1.0 / 48, 0.3
    topo = CageTopology(2, 2)
    patch = PatchCage(0, topo, (0.5, 0.5), sp)
    plain = accumulate_weights([patch], dims, dx, sp)
    deformed = accumulate_weights([patch], dims, dx, sp, deformed=True)
    # inside the cage the piecewise-linear inverse is exact; outside the
    # cage bbox (radius between s_p/2 inscribed and the corners) the
    # deformed variant has no support
    centers = plain.cell_centers()
    r = np.linalg.norm(centers - 0.5, axis=-1)
    inside = r <= sp / 2 * 0.98
    np.testing.assert_allclose(deformed.values[inside],
                               plain.values[inside], atol=1e-9)


# ---------------------------------------------------------------------------
# seeding

def seed_params(**kw):
    base = dict(patch_size=0.25, cage_subdivisions=2, fade_frames=10,
                max_age=50)
    base.update(kw)
    return SynthesisParams(**base)


def test_seed_spawns_on_nonzero_density():
    dims, dx = (64, 64), 1.0 / 64
    tracker = PatchTracker(dims, dx, seed_params(),
                           np.random.default_rng(0))
    born = tracker.seed(blob_density(dims, dx, (0.5, 0.5), sigma=0.2))
    assert len(born) >= 1


def test_seed_blocked_by_full_weight_grid():
    dims, dx = (32, 32), 1.0 / 32
    tracker = PatchTracker(dims, dx, seed_params(),
                           np.random.default_rng(1))
    tracker.weights.values[...] = 1.0
    assert tracker.seed(blob_density(dims, dx, (0.5, 0.5))) == []


def test_seeded_patches_never_closer_than_a_third_patch_size():
    dims, dx = (48, 48), 1.0 / 48
    sp = 0.25
    for scene in range(100):
        tracker = PatchTracker(dims, dx, seed_params(),
                               np.random.default_rng(scene))
        rng = np.random.default_rng(1000 + scene)
        density = ScalarGrid(dims, dx, rng.uniform(0.5, 1.0, dims))
        born = tracker.seed(density)
        centers = np.asarray([p.centroid() for p in born])
        if len(centers) < 2:
            continue
        d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > sp / 3


def test_overdeformed_patch_removed_on_next_advance():
    dims, dx = (32, 32), 1.0 / 32
    params = seed_params(lambda0=0.01)
    tracker = PatchTracker(dims, dx, params, np.random.default_rng(2))
    patch = PatchCage(0, tracker.topo, (0.5, 0.5), params.patch_size)
    sheared = patch.positions.copy()
    sheared[:, 0] += 3.0 * (sheared[:, 1] - 0.5)  # far past the threshold
    patch.positions = sheared
    tracker.active.append(patch)
    removed = tracker.advance(VectorGrid(dims, dx), 1.0)
    assert removed == [patch]
    assert patch.energy > params.energy_threshold
    assert tracker.active == []


# ---------------------------------------------------------------------------
# forward / backward pass

def synthetic_repo(rng, entries=5, frames=4, dim=256, block=8, ndim=2):
    repo = Repository(ndim, block, dim)
    for e in range(entries):
        desc = rng.normal(size=(frames, dim))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        repo.add(make_entry(e, desc, rng.uniform(1, 2, (frames,)
                                                 + (block,) * ndim)))
    return repo


def still_scene(dims, dx, frames, appear_at=0):
    out = []
    for t in range(frames):
        if t >= appear_at:
            density = blob_density(dims, dx, (0.5, 0.5), sigma=0.18)
        else:
            density = ScalarGrid(dims, dx)
        out.append((density, VectorGrid(dims, dx)))
    return out


def make_nets():
    return (DescriptorNet(NetworkSpec(2, 1, seed=1)),
            DescriptorNet(NetworkSpec(2, 1, seed=2)))


def test_forward_pass_requires_entries():
    den, mot = make_nets()
    with pytest.raises(EmptyRepositoryError):
        forward_pass(iter([]), Repository(2, 8, 256), den, mot,
                     seed_params(), seed=0)


def test_patch_lifetime_bounded_by_entry_length():
    rng = np.random.default_rng(3)
    repo = synthetic_repo(rng, entries=4, frames=3)
    den, mot = make_nets()
    store = forward_pass(still_scene((32, 32), 1.0 / 32, 10), repo,
                         den, mot, seed_params(), seed=0)
    seen = {}
    for record in store.frames:
        for snap in record.patches:
            seen.setdefault(snap.patch_id, []).append(snap.entry_frame)
    assert seen, "no patches were matched"
    for pid, frames in seen.items():
        assert len(frames) <= 3
        assert frames == sorted(frames)  # cursor advances monotonically


def test_fade_weights_monotone_and_bounded():
    rng = np.random.default_rng(4)
    repo = synthetic_repo(rng, entries=4, frames=6)
    den, mot = make_nets()
    store = forward_pass(still_scene((32, 32), 1.0 / 32, 8), repo,
                         den, mot, seed_params(fade_frames=4), seed=0)
    by_patch = {}
    for record in store.frames:
        for snap in record.patches:
            by_patch.setdefault(snap.patch_id, []).append(snap.weight)
    for weights in by_patch.values():
        assert all(0.0 <= w <= 1.0 for w in weights)
        assert all(b <= a + 1e-12 for a, b in zip(weights, weights[1:]))


def test_backward_pass_still_fluid_keeps_creation_pose():
    rng = np.random.default_rng(5)
    repo = synthetic_repo(rng, entries=4, frames=6)
    den, mot = make_nets()
    store = forward_pass(still_scene((32, 32), 1.0 / 32, 6, appear_at=3),
                         repo, den, mot, seed_params(fade_frames=3), seed=0)
    backward_pass(store)
    first = {}
    for record in store.frames:
        for snap in record.patches:
            if snap.patch_id not in first or record.frame < first[
                    snap.patch_id][0]:
                pass
    # collect snapshots per patch in frame order
    timeline = {}
    for record in store.frames:
        for snap in record.patches:
            timeline.setdefault(snap.patch_id, []).append((record.frame,
                                                           snap))
    anticipated = 0
    for pid, snaps in timeline.items():
        snaps.sort(key=lambda x: x[0])
        frames = [f for f, _ in snaps]
        created = max(f for f, s in snaps if s.weight == 1.0) if any(
            s.weight == 1.0 for _, s in snaps) else frames[-1]
        for f, snap in snaps:
            if f < 3:  # before the smoke appears: anticipation ghosts
                anticipated += 1
                ref = [s for ff, s in snaps if ff == 3]
                if ref:
                    np.testing.assert_allclose(snap.positions,
                                               ref[0].positions, atol=1e-12)
    assert anticipated > 0


def test_backward_pass_uniform_flow_translates_anticipation():
    rng = np.random.default_rng(6)
    repo = synthetic_repo(rng, entries=4, frames=8)
    den, mot = make_nets()
    dims, dx = (32, 32), 1.0 / 32
    u = np.array([0.01, 0.004])
    scene = []
    for t in range(6):
        density = (blob_density(dims, dx, (0.5, 0.5), sigma=0.18)
                   if t >= 3 else ScalarGrid(dims, dx))
        vel = VectorGrid(dims, dx)
        for a, comp in enumerate(vel.components):
            comp.fill(u[a])
        scene.append((density, vel))
    store = forward_pass(scene, repo, den, mot,
                         seed_params(fade_frames=3), seed=0)
    backward_pass(store)
    timeline = {}
    for record in store.frames:
        for snap in record.patches:
            timeline.setdefault(snap.patch_id, {})[record.frame] = snap
    checked = 0
    for pid, by_frame in timeline.items():
        if 3 not in by_frame:
            continue
        base = by_frame[3].positions
        for back in (1, 2):
            if 3 - back in by_frame:
                np.testing.assert_allclose(
                    by_frame[3 - back].positions, base - back * u,
                    atol=1e-9)
                checked += 1
    assert checked > 0
    # fade-in ramp: weight 1 at creation, decreasing backwards
    for pid, by_frame in timeline.items():
        if 3 in by_frame and 2 in by_frame and 1 in by_frame:
            assert by_frame[3].weight == 1.0
            assert by_frame[2].weight == pytest.approx(1.0 - 1.0 / 3.0)
            assert by_frame[1].weight == pytest.approx(1.0 - 2.0 / 3.0)


# ---------------------------------------------------------------------------
# rendering

def identity_setup():
    dims, dx = (16, 16), 1.0 / 16
    sp = 0.25
    params = SynthesisParams(patch_size=sp, cage_subdivisions=2,
                             fade_frames=4)
    store = FrameStore(params, dims, dx)
    # smooth ramp well above the mask threshold
    density = ScalarGrid(dims, dx)
    density.values = 0.5 + 0.5 * density.cell_centers()[..., 0]
    topo = CageTopology(2, 2)
    cage = PatchCage(0, topo, (0.5, 0.5), sp)
    rng = np.random.default_rng(7)
    repo = Repository(2, 16, 4)
    raw = rng.uniform(2.0, 5.0, (1, 16, 16))
    desc = rng.normal(size=(1, 4))
    desc /= np.linalg.norm(desc)
    repo.add(make_entry(0, desc, raw))
    snap = PatchSnapshot(0, 0, 0, 1.0, cage.positions.copy())
    record = FrameRecord(0, density, VectorGrid(dims, dx), [snap])
    store.frames.append(record)
    return store, repo, record


def test_render_no_patches_equals_upsampled_coarse():
    store, repo, record = identity_setup()
    bare = FrameRecord(0, record.density, record.velocity, [])
    from smokepatch.solver import resample
    out = render_volume(bare, store, repo, 4)
    expect = resample(record.density, (64, 64))
    np.testing.assert_array_equal(out.values, expect.values)


def test_render_single_patch_plateau_identity():
    store, repo, record = identity_setup()
    out = render_volume(record, store, repo, 4)
    block = repo.entries[0].densities[0].reshape(16, 16).astype(np.float64)
    # target region: the output voxels covered by the cage
    region = out.values[24:40, 24:40]
    up_region_expected = None
    from smokepatch.solver import resample
    up = resample(record.density, (64, 64))
    target = up.values[24:40, 24:40]
    lo, hi = float(target.min()), float(target.max())
    mapped = block * (hi - lo) + lo
    # plateau voxels: rest-space radius <= s_p / 6
    jj, kk = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    u = np.stack([(jj + 0.5) / 16 - 0.5, (kk + 0.5) / 16 - 0.5], axis=-1)
    plateau = np.linalg.norm(u, axis=-1) * 0.25 <= 0.25 / 6
    assert plateau.sum() > 0
    np.testing.assert_array_equal(region[plateau], mapped[plateau])


def test_render_zero_density_region_masks_patch():
    store, repo, record = identity_setup()
    record.density.values[...] = 0.0  # no smoke anywhere
    out = render_volume(record, store, repo, 4)
    np.testing.assert_array_equal(out.values, 0.0)


def test_render_nonnegative_finite_and_deterministic():
    store, repo, record = identity_setup()
    a = render_volume(record, store, repo, 4)
    b = render_volume(record, store, repo, 4)
    assert np.all(np.isfinite(a.values))
    assert np.all(a.values >= 0.0)
    np.testing.assert_array_equal(a.values, b.values)


# ---------------------------------------------------------------------------
# frame store files

def test_frame_store_round_trip(tmp_path):
    store, repo, record = identity_setup()
    out = tmp_path / "frames"
    save_frame_store(store, out)
    back = load_frame_store(out)
    assert back.dims == store.dims
    assert len(back.frames) == 1
    got = back.frames[0]
    np.testing.assert_allclose(got.density.values, record.density.values,
                               atol=1e-6)
    assert len(got.patches) == 1
    assert got.patches[0].patch_id == 0
    # byte-identical on rewrite
    out2 = tmp_path / "frames2"
    save_frame_store(back, out2)
    a = (out / "frame_00000.spfrm").read_bytes()
    b = (out2 / "frame_00000.spfrm").read_bytes()
    assert a == b

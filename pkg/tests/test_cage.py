import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from smokepatch.cage import (CageTopology, PatchCage, advect_vertices,
                             assemble_system, deformation_energy,
                             limit_deformation, limiter_lambda,
                             map_unit_points, target_vertex_position,
                             unit_cell_centers)
from smokepatch.errors import DegenerateCellError
from smokepatch.grids import VectorGrid


def rot90(axis):
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis)
                                * (np.pi / 2)).as_matrix()


def brute_force_energy(topo, positions, linearization=None):
    """Independent per-corner summation of the deformation error."""
    w = np.asarray(positions, dtype=np.float64)
    lin = w if linearization is None else np.asarray(linearization)
    total = 0.0
    if topo.ndim == 3:
        for (i3, i0, i1, i2) in topo.corners:
            r10 = rot90(lin[i1] - lin[i0])
            r21 = rot90(lin[i2] - lin[i1])
            r02 = rot90(lin[i0] - lin[i2])
            vc = (w[i0] + w[i1] + w[i2]) / 3.0
            pred = vc + (r10 @ (vc - w[i2]) + r21 @ (vc - w[i0])
                         + r02 @ (vc - w[i1])) / (3.0 * np.sqrt(2.0))
            total += float(np.sum((pred - w[i3]) ** 2))
    else:
        j = np.array([[0.0, -1.0], [1.0, 0.0]])
        for (i2, i0, i1, sign) in topo.corners:
            rp, rm = (j, -j) if sign > 0 else (-j, j)
            vc = (w[i0] + w[i1]) / 2.0
            pred = vc + (rp @ (vc - w[i0]) + rm @ (vc - w[i1])) / 2.0
            total += float(np.sum((pred - w[i2]) ** 2))
    return total / topo.n


def random_rotation(rng, ndim):
    if ndim == 3:
        return Rotation.random(random_state=np.random.RandomState(
            rng.integers(1 << 30))).as_matrix()
    th = rng.uniform(0, 2 * np.pi)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


# ---------------------------------------------------------------------------
# target vertex position

def test_target_position_recovers_every_cube_corner():
    topo = CageTopology(1, 3)
    rest = topo.rest_lattice()
    for (v3, v0, v1, v2) in topo.corners:
        pred = target_vertex_position(rest[v0], rest[v1], rest[v2])
        np.testing.assert_allclose(pred, rest[v3], atol=1e-9)


def test_target_position_translation_equivariant():
    v = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    t = np.array([0.3, -1.2, 2.5])
    base = target_vertex_position(*v)
    moved = target_vertex_position(*(v + t))
    np.testing.assert_allclose(moved, base + t, atol=1e-12)


def test_target_position_rotation_equivariant():
    rng = np.random.default_rng(4)
    v = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    base = target_vertex_position(*v)
    for _ in range(10):
        q = random_rotation(rng, 3)
        rotated = target_vertex_position(*(v @ q.T))
        np.testing.assert_allclose(rotated, q @ base, atol=1e-9)


def test_target_position_collinear_raises():
    with pytest.raises(DegenerateCellError):
        target_vertex_position([0, 0, 0], [1, 0, 0], [2, 0, 0])


# ---------------------------------------------------------------------------
# energy assembly

@pytest.mark.parametrize("ndim", [2, 3])
@pytest.mark.parametrize("n", [1, 2, 3])
def test_energy_zero_for_rest_and_rigid_motion(ndim, n):
    topo = CageTopology(n, ndim)
    rest = topo.rest_lattice()
    assert abs(deformation_energy(topo, rest)) <= 1e-9
    rng = np.random.default_rng(n * 10 + ndim)
    for _ in range(3):
        q = random_rotation(rng, ndim)
        moved = rest @ q.T + rng.normal(0, 2.0, ndim)
        assert abs(deformation_energy(topo, moved)) <= 1e-8


@pytest.mark.parametrize("ndim", [2, 3])
@pytest.mark.parametrize("n", [1, 2])
def test_energy_matches_brute_force_summation(ndim, n):
    topo = CageTopology(n, ndim)
    rng = np.random.default_rng(7)
    for _ in range(5):
        v = topo.rest_lattice() + rng.normal(0, 0.15,
                                             (topo.m, topo.ndim))
        assert abs(deformation_energy(topo, v)
                   - brute_force_energy(topo, v)) <= 1e-9


def test_energy_single_displaced_corner_matches_direct_sum():
    topo = CageTopology(1, 3)
    v = topo.rest_lattice().copy()
    v[0] += np.array([0.07, -0.02, 0.04])
    assert abs(deformation_energy(topo, v)
               - brute_force_energy(topo, v)) <= 1e-12


def test_energy_nonnegative_and_matrix_psd():
    rng = np.random.default_rng(11)
    for ndim in (2, 3):
        topo = CageTopology(2, ndim)
        for _ in range(200):
            v = topo.rest_lattice() + rng.normal(0, 0.3, (topo.m, ndim))
            assert deformation_energy(topo, v) >= -1e-10
        system = assemble_system(
            topo, topo.rest_lattice() + rng.normal(0, 0.2, (topo.m, ndim)))
        for _ in range(200):
            z = rng.normal(size=topo.m * ndim)
            assert z @ (system.matrix @ z) >= -1e-10
        sym_err = abs(system.matrix - system.matrix.T).max()
        assert sym_err <= 1e-10


def test_energy_translation_invariant():
    rng = np.random.default_rng(3)
    for ndim in (2, 3):
        topo = CageTopology(2, ndim)
        v = topo.rest_lattice() + rng.normal(0, 0.2, (topo.m, ndim))
        system = assemble_system(topo, v)
        e0 = system.energy(v)
        e1 = system.energy(v + np.full(ndim, 17.5))
        assert abs(e1 - e0) <= 1e-9 * max(1.0, abs(e0))


def test_assemble_rejects_degenerate_cells():
    topo = CageTopology(1, 3)
    v = topo.rest_lattice().copy()
    v[1] = v[0]  # collapse one edge
    with pytest.raises(DegenerateCellError):
        assemble_system(topo, v)


# ---------------------------------------------------------------------------
# deformation limiting

def sheared_cage(topo, rng, shear=0.4, noise=0.05):
    v = topo.rest_lattice().copy()
    v[:, 0] += shear * v[:, 1]
    return v + rng.normal(0, noise, v.shape)


def test_limit_zero_lambda_returns_advected_exactly():
    topo = CageTopology(2, 3)
    v = sheared_cage(topo, np.random.default_rng(0))
    np.testing.assert_array_equal(limit_deformation(topo, v, 0.0), v)


@pytest.mark.parametrize("ndim", [2, 3])
def test_limit_energy_monotone_in_lambda(ndim):
    rng = np.random.default_rng(5)
    topo = CageTopology(2, ndim)
    for _ in range(5):
        adv = sheared_cage(topo, rng)
        system = assemble_system(topo, adv)
        energies = [system.energy(limit_deformation(topo, adv, lam0,
                                                    system=system))
                    for lam0 in (0.01, 0.1, 1.0, 10.0)]
        assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))


def total_energy(topo, system, v, vp, lambda0):
    return (lambda0 * system.energy(v)
            + float(np.sum((v - vp) ** 2)) / topo.m)


@pytest.mark.parametrize("lambda0", [0.01, 0.1, 1.0, 10.0])
def test_limit_never_increases_total_energy(lambda0):
    rng = np.random.default_rng(6)
    for ndim in (2, 3):
        topo = CageTopology(2, ndim)
        adv = sheared_cage(topo, rng)
        system = assemble_system(topo, adv)
        v = limit_deformation(topo, adv, lambda0, system=system)
        assert (total_energy(topo, system, v, adv, lambda0)
                <= total_energy(topo, system, adv, adv, lambda0) + 1e-12)


def test_limit_resolution_scaling_formula():
    for n in (1, 2, 3, 4):
        topo3 = CageTopology(n, 3)
        assert limiter_lambda(topo3, 0.1) == pytest.approx(
            (n + 1) ** 3 / n * 0.1)
        topo2 = CageTopology(n, 2)
        assert limiter_lambda(topo2, 0.1) == pytest.approx(
            (n + 1) ** 2 / n * 0.1)


def test_limit_solution_converges_to_advected_as_lambda_vanishes():
    topo = CageTopology(2, 3)
    adv = sheared_cage(topo, np.random.default_rng(9))
    system = assemble_system(topo, adv)
    lams = [1e-3, 1e-2, 1e-1]
    drift = [np.linalg.norm(limit_deformation(topo, adv, lam, system=system)
                            - adv) for lam in lams]
    c = 2.0 * drift[0] / lams[0]
    for lam, d in zip(lams, drift):
        assert d <= c * lam


def test_limit_cg_residual_contract():
    topo = CageTopology(3, 3)
    adv = sheared_cage(topo, np.random.default_rng(13))
    system = assemble_system(topo, adv)
    lam0 = 0.5
    v = limit_deformation(topo, adv, lam0, system=system)
    lam = limiter_lambda(topo, lam0)
    op = lam * system.matrix
    residual = op @ v.ravel() + v.ravel() - adv.ravel()
    assert np.linalg.norm(residual) <= 1e-8 * np.linalg.norm(adv)


# ---------------------------------------------------------------------------
# cage advection

def rotation_field(dims, dx, omega=1.0):
    vel = VectorGrid(dims, dx)
    c = np.asarray([0.5 * d * dx for d in dims])
    for a in range(2):
        pos = vel.component_positions(a)
        rel = pos - c
        vel.components[a][...] = (-omega * rel[..., 1] if a == 0
                                  else omega * rel[..., 0])
    return vel


def test_advect_vertices_zero_velocity():
    topo = CageTopology(2, 2)
    cage = PatchCage(0, topo, center=(0.5, 0.5), size=0.2)
    vel = VectorGrid((16, 16), 1.0 / 16)
    out = advect_vertices(cage.positions, vel, 1.0)
    np.testing.assert_array_equal(out, cage.positions)


def test_advect_vertices_uniform_translation_keeps_energy():
    topo = CageTopology(2, 2)
    cage = PatchCage(0, topo, center=(0.4, 0.4), size=0.2)
    vel = VectorGrid((16, 16), 1.0 / 16)
    for comp in vel.components:
        comp.fill(0.01)
    out = advect_vertices(cage.positions, vel, 1.0)
    np.testing.assert_allclose(out, cage.positions + 0.01, atol=1e-12)
    e0 = deformation_energy(topo, cage.positions)
    e1 = deformation_energy(topo, out)
    assert abs(e1 - e0) <= 1e-10


def test_advect_vertices_reversibility_second_order():
    dims, dx = (64, 64), 1.0 / 64
    vel = rotation_field(dims, dx)
    topo = CageTopology(2, 2)
    cage = PatchCage(0, topo, center=(0.6, 0.45), size=0.15)

    def roundtrip_error(dt):
        fwd = advect_vertices(cage.positions, vel, dt)
        back = advect_vertices(fwd, vel, dt, backward=True)
        return np.linalg.norm(back - cage.positions)

    e_full = roundtrip_error(0.3)
    e_half = roundtrip_error(0.15)
    assert e_half <= 0.35 * e_full


def test_advect_vertices_clamped_to_domain():
    topo = CageTopology(1, 2)
    cage = PatchCage(0, topo, center=(0.95, 0.5), size=0.2)
    vel = VectorGrid((16, 16), 1.0 / 16)
    vel.components[0].fill(10.0)
    out = advect_vertices(cage.positions, vel, 1.0)
    assert np.max(out[:, 0]) <= 1.0


# ---------------------------------------------------------------------------
# cage sampling lattice

def test_unit_lattice_maps_identically_on_rest_cage():
    topo = CageTopology(3, 2)
    cage = PatchCage(0, topo, center=(0.5, 0.5), size=0.3)
    unit = unit_cell_centers(2, 8)
    pts = map_unit_points(topo, cage.positions, unit)
    expect = (unit - 0.5) * 0.3 + np.array([0.5, 0.5])
    np.testing.assert_allclose(pts, expect, atol=1e-12)


def test_unit_lattice_follows_rotated_cage():
    topo = CageTopology(2, 2)
    th = 0.8
    q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    cage = PatchCage(0, topo, center=(0.4, 0.6), size=0.25, frame=q)
    unit = unit_cell_centers(2, 5)
    pts = map_unit_points(topo, cage.positions, unit)
    expect = (unit - 0.5) * 0.25 @ q.T + np.array([0.4, 0.6])
    np.testing.assert_allclose(pts, expect, atol=1e-12)

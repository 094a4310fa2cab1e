"""Paired coarse/fine simulations and training-pair recording.

Two solvers run in lockstep from the same randomized initial condition,
the fine one at ``fine_factor`` times the resolution with proportionally
smaller substeps. Every ``sync_interval`` frames the coarse fields are
re-initialized from the filtered, resampled fine fields. Patches are
seeded and tracked on the fine flow with the synthesis tracker, and each
live patch emits one positive coarse/fine block pair per frame.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .grids import ScalarGrid, VectorGrid
from .net import INPUT_RES
from .pairs import PairDataset
from .solver import (SimParams, SmokeState, center_of_mass, curl,
                     domain_center, low_pass, project, resample, step)
from .synthesis import PatchTracker, SynthesisParams, patch_input_blocks

log = logging.getLogger("smokepatch")


@dataclass
class PairedSimConfig:
    ndim: int = 2
    coarse_res: int = 32          # r_c cells per axis
    fine_factor: int = 4
    sync_interval: int = 40       # t_r
    total_frames: int = 160
    seed: int = 0
    blob_count: int = 4
    noise_scale: float = 0.15     # initial divergence-free velocity noise
    buoyancy: float = 0.0012
    patch: SynthesisParams = field(default_factory=lambda: SynthesisParams(
        patch_size=0.25, cage_subdivisions=3, max_age=100))

    def __post_init__(self):
        if self.fine_factor < 2:
            raise ValueError("fine_factor must be >= 2")
        if self.sync_interval < 1:
            raise ValueError("sync_interval must be >= 1")

    @property
    def fine_res(self):
        return self.coarse_res * self.fine_factor


def random_initial_state(config, rng):
    """Gaussian density blobs plus projected smooth velocity noise."""
    nd = config.ndim
    dims = (config.fine_res,) * nd
    dx = 1.0 / config.fine_res
    density = ScalarGrid(dims, dx)
    pts = density.cell_centers()
    for _ in range(config.blob_count):
        center = rng.uniform(0.3, 0.7, nd)
        sigma = rng.uniform(0.05, 0.12)
        amp = rng.uniform(0.6, 1.0)
        d2 = np.sum((pts - center) ** 2, axis=-1)
        density.values += amp * np.exp(-d2 / (2.0 * sigma ** 2))
    vel = VectorGrid(dims, dx)
    for comp in vel.components:
        comp[...] = rng.normal(0.0, config.noise_scale, comp.shape)
    vel = low_pass(vel, 8.0 * dx)
    vel = project(vel, SimParams(tolerance=1e-6))
    return SmokeState(density, vel)


def _sim_params(config):
    buoy = (0.0,) * (config.ndim - 1) + (config.buoyancy,)
    return SimParams(dt=1.0, buoyancy=buoy, tolerance=1e-5)


def run_paired(config):
    """Yield per-frame (coarse state, fine state), synchronized every t_r."""
    rng = np.random.default_rng(config.seed)
    fine = random_initial_state(config, rng)
    coarse_dims = (config.coarse_res,) * config.ndim
    coarse = SmokeState(resample(fine.density, coarse_dims),
                        resample(fine.velocity, coarse_dims))
    params = _sim_params(config)
    sub_dt = 1.0 / config.fine_factor
    for frame in range(config.total_frames):
        # one correction offset per frame, from the fine density, keeps the
        # two simulations co-located while recentering the rising smoke
        offset = np.zeros(config.ndim)
        if fine.density.total() > 0.0:
            offset = center_of_mass(fine.density) - domain_center(fine.density)
        coarse = step(coarse, params, dt=1.0, offset_override=offset)
        for _ in range(config.fine_factor):
            fine = step(fine, params, dt=sub_dt,
                        offset_override=offset * sub_dt)
        if (frame + 1) % config.sync_interval == 0:
            coarse = SmokeState(resample(fine.density, coarse_dims),
                                resample(fine.velocity, coarse_dims),
                                coarse.frame)
            log.info("frame %d: coarse re-initialized from fine", frame)
        yield frame, coarse, fine


def record_patches(config, progress=None):
    """Run the paired simulation and emit one positive pair per live patch
    per frame; patches are tracked on the fine flow."""
    rng = np.random.default_rng(config.seed + 1)
    res = INPUT_RES[config.ndim]
    channels = 1 + (1 if config.ndim == 2 else 3)
    dataset = PairDataset(config.ndim, channels, res)
    tracker = None
    for frame, coarse, fine in run_paired(config):
        if tracker is None:
            tracker = PatchTracker(fine.density.dims, fine.density.dx,
                                   config.patch, rng)
        tracker.advance(fine.velocity, 1.0)
        tracker.seed(fine.density)
        fine_vort = curl(fine.velocity)
        coarse_vort = curl(coarse.velocity)
        for patch in tracker.active:
            fine_block = patch_input_blocks(patch, fine.density, fine_vort,
                                            res)
            coarse_block = patch_input_blocks(patch, coarse.density,
                                              coarse_vort, res)
            dataset.add(patch.id, frame, 1, coarse_block, fine_block)
        tracker.accumulate()
        if progress:
            progress(frame, len(tracker.active), len(dataset))
    return dataset

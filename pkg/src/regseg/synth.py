"""Synthetic data: the critic's "ideal pair" disturbance pipeline and phantom cases.

The disturbance pipeline manufactures well-aligned training targets from a
fixed image alone: smoothing, noise, gamma, and a sub-voxel deformation, each
independently active with probability 0.5 per sample. The phantom generator
builds labeled anatomies with a known smooth deformation so registration
quality can be scored against ground truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import warpfield
from .volgrid import (Mask, Segmentation, Volume, load_segmentation, load_volume,
                      save_segmentation, save_volume)
from .warpfield import DVF, load_dvf, save_dvf, warp_labels, warp_trilinear

# Control-point spacing of the sub-voxel disturbance deformation (mm).
DISTURB_CONTROL_MM = 8.0


@dataclass
class DisturbConfig:
    """Amplitudes of the disturbance components; zero disables a component."""

    noise_std: float = 0.04
    smooth_std: float = 0.04
    gamma_range: tuple = (-0.4, 0.4)
    max_def_mm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0 or self.smooth_std < 0 or self.max_def_mm < 0:
            raise ValueError("disturbance amplitudes must be >= 0")
        lo, hi = self.gamma_range
        if not (lo <= 0 <= hi) or abs(lo + hi) > 1e-12:
            raise ValueError(f"gamma_range must be symmetric around 0, got {self.gamma_range}")


@dataclass
class DisturbanceParams:
    """One concrete draw of the disturbance pipeline."""

    smooth_std: float = 0.0
    noise_std: float = 0.0
    noise_seed: int = 0
    gamma: float = 0.0
    dvf: DVF | None = None


def sample_disturbance(cfg: DisturbConfig, dims, spacing, rng=None) -> DisturbanceParams:
    """Draw which components are active and their random parameters."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    coins = rng.random(4) < 0.5
    gamma_amp = cfg.gamma_range[1]
    params = DisturbanceParams()
    if coins[0] and cfg.smooth_std > 0:
        params.smooth_std = cfg.smooth_std
    if coins[1] and cfg.noise_std > 0:
        params.noise_std = cfg.noise_std
        params.noise_seed = int(rng.integers(2 ** 63))
    if coins[2] and gamma_amp > 0:
        params.gamma = float(rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1]))
    if coins[3] and cfg.max_def_mm > 0:
        amp = float(rng.uniform(0.0, cfg.max_def_mm))  # half-open: strictly < max
        params.dvf = random_smooth_dvf(dims, spacing, amp, DISTURB_CONTROL_MM,
                                       seed=int(rng.integers(2 ** 63)))
    return params


def apply_disturbance(vol: Volume, params: DisturbanceParams) -> Volume:
    """Apply a sampled disturbance: smooth, noise, gamma, then deform."""
    data = vol.data.astype(np.float64)
    if params.smooth_std > 0:
        data = ndimage.gaussian_filter(data, params.smooth_std, mode="nearest")
    if params.noise_std > 0:
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.noise_std, data.shape)
        # Keep outputs inside the documented [-1-4s, 1+4s] envelope.
        data = data + np.clip(noise, -4 * params.noise_std, 4 * params.noise_std)
    if params.gamma != 0.0:
        v01 = np.clip((data + 1.0) * 0.5, 0.0, 1.0)
        data = 2.0 * v01 ** (2.0 ** params.gamma) - 1.0
    out = Volume(data.astype(np.float32), vol.spacing, vol.origin)
    if params.dvf is not None:
        out = warp_trilinear(out, params.dvf)
    return out


def disturb(vol: Volume, cfg: DisturbConfig, rng=None) -> Volume:
    """Randomly disturbed copy of `vol`; deterministic given ``cfg.seed`` (or `rng`)."""
    params = sample_disturbance(cfg, vol.dims, vol.spacing, rng=rng)
    return apply_disturbance(vol, params)


# ---------------------------------------------------------------------------
# Random smooth fields


def random_smooth_dvf(dims, spacing, max_mm, control_spacing_mm, seed=None, rng=None) -> DVF:
    """Random displacements on a coarse control grid, trilinearly upsampled.

    The dense field is rescaled so its maximum magnitude equals `max_mm`.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if any(control_spacing_mm < 2.0 * s for s in spacing):
        raise ValueError(
            f"control spacing {control_spacing_mm} mm is below 2 voxels for spacing {spacing}"
        )
    if max_mm < 0:
        raise ValueError(f"max_mm must be >= 0, got {max_mm}")
    rng = np.random.default_rng(seed) if rng is None else rng
    cdims = tuple(
        max(2, int(np.ceil((d - 1) * s / control_spacing_mm)) + 1)
        for d, s in zip(dims, spacing)
    )
    control = rng.standard_normal((3,) + cdims)
    if max_mm == 0:
        return DVF(np.zeros((3,) + dims, dtype=np.float32), spacing)
    coords = np.meshgrid(
        *[np.arange(d) * s / control_spacing_mm for d, s in zip(dims, spacing)],
        indexing="ij",
    )
    coords = np.stack(coords)
    disp = np.stack([
        ndimage.map_coordinates(control[c], coords, order=1, mode="nearest")
        for c in range(3)
    ])
    mag = np.sqrt((disp ** 2).sum(axis=0)).max()
    disp *= max_mm / mag
    return DVF(disp.astype(np.float32), spacing)


def random_texture(dims, spacing, amplitude, control_spacing_mm, rng) -> np.ndarray:
    """Smooth scalar field in [-amplitude, amplitude] for background texture."""
    f = random_smooth_dvf(dims, spacing, 1.0, control_spacing_mm, rng=rng)
    tex = f.disp[0].astype(np.float64)
    peak = np.abs(tex).max()
    return tex * (amplitude / peak) if peak > 0 else tex


# ---------------------------------------------------------------------------
# Phantom generation


@dataclass
class PhantomSpec:
    """Geometry, intensity, and deformation settings of a synthetic case."""

    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    amplitude_mm: float = 5.0
    control_spacing_mm: float = 16.0
    seed: int = 0
    noise_std: float = 0.01
    texture_amplitude: float = 0.15
    texture_spacing_mm: float = 12.0
    # (name, primitive, intensity, size range in mm); sizes are semi-axes/radii.
    organs: tuple = (
        ("bladder", "ellipsoid", 0.45, (4.5, 6.5)),
        ("prostate", "sphere", 0.05, (3.0, 4.5)),
        ("rectum", "tube", -0.35, (2.5, 3.5)),
    )
    body_intensity: float = -0.25
    air_intensity: float = -1.0


def _physical_grid(dims, spacing):
    axes = [np.arange(d) * s for d, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid_mask(grid, center, semi_axes):
    acc = 0.0
    for g, c, a in zip(grid, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _tube_mask(grid, center, radius, half_length):
    # Axis-aligned along z.
    r2 = ((grid[0] - center[0]) ** 2 + (grid[1] - center[1]) ** 2)
    return (r2 <= radius ** 2) & (np.abs(grid[2] - center[2]) <= half_length)


def _draw_organs(spec: PhantomSpec, grid, body, extent, rng):
    """Place non-overlapping organ masks inside the body; None if placement failed."""
    masks = []
    occupied = np.zeros_like(body)
    for name, kind, _, (lo, hi) in spec.organs:
        size = rng.uniform(lo, hi)
        center = [extent[a] * (0.5 + 0.22 * rng.uniform(-1, 1)) for a in range(3)]
        if kind == "ellipsoid":
            axes = [size * rng.uniform(0.8, 1.2) for _ in range(3)]
            m = _ellipsoid_mask(grid, center, axes)
        elif kind == "sphere":
            m = _ellipsoid_mask(grid, center, (size, size, size))
        elif kind == "tube":
            m = _tube_mask(grid, center, size, 0.3 * extent[2])
        else:
            raise ValueError(f"unknown organ primitive {kind!r}")
        if not m.any() or (m & ~body).any() or (m & occupied).any():
            return None
        occupied |= m
        masks.append((name, m))
    return masks


def make_phantom_pair(spec: PhantomSpec):
    """Build (fixed, fixed_seg, moving, moving_seg, gt_dvf) with known ground truth.

    The moving pair is the fixed anatomy warped by a random smooth DVF with a
    strictly positive Jacobian; both images carry independent mild noise.
    Raises if organ placement keeps failing (overlapping primitives).
    """
    root = np.random.SeedSequence(spec.seed)
    body_seed, tex_seed, noise_seed = root.spawn(3)
    extent = [(d - 1) * s for d, s in zip(spec.dims, spec.spacing)]
    grid = _physical_grid(spec.dims, spec.spacing)

    body_rng = np.random.default_rng(body_seed)
    body_axes = [0.46 * e * body_rng.uniform(0.95, 1.05) for e in extent]
    body = _ellipsoid_mask(grid, [e / 2 for e in extent], body_axes)

    organs = None
    for attempt in range(100):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 101, attempt)))
        organs = _draw_organs(spec, grid, body, extent, rng)
        if organs is not None:
            break
    if organs is None:
        raise RuntimeError("phantom organ placement failed after 100 attempts")

    clean = np.full(spec.dims, spec.air_intensity)
    clean[body] = spec.body_intensity
    labels = np.zeros(spec.dims, dtype=np.uint8)
    names = {0: "background"}
    for k, ((name, _, intensity, _), (_, mask)) in enumerate(zip(spec.organs, organs), start=1):
        clean[mask] = intensity
        labels[mask] = k
        names[k] = name

    tex_rng = np.random.default_rng(tex_seed)
    clean[body] += random_texture(spec.dims, spec.spacing, spec.texture_amplitude,
                                  spec.texture_spacing_mm, tex_rng)[body]
    clean = np.clip(clean, -1.0, 1.0)

    fixed_seg = Segmentation(labels, names, spec.spacing)
    gt_dvf = None
    for attempt in range(100):
        dvf = random_smooth_dvf(spec.dims, spec.spacing, spec.amplitude_mm,
                                spec.control_spacing_mm,
                                seed=np.random.SeedSequence((spec.seed, 202, attempt)))
        if spec.amplitude_mm == 0 or warpfield.jacobian_determinant(dvf).data.min() > 0:
            gt_dvf = dvf
            break
    if gt_dvf is None:
        raise RuntimeError("could not draw a fold-free ground-truth deformation")

    clean_vol = Volume(clean.astype(np.float32), spec.spacing)
    moving_clean = warp_trilinear(clean_vol, gt_dvf)
    moving_seg = warp_labels(fixed_seg, gt_dvf)

    noise_rng = np.random.default_rng(noise_seed)
    fixed_data = clean + noise_rng.normal(0.0, spec.noise_std, spec.dims)
    moving_data = moving_clean.data + noise_rng.normal(0.0, spec.noise_std, spec.dims)
    fixed = Volume(np.clip(fixed_data, -1, 1).astype(np.float32), spec.spacing)
    moving = Volume(np.clip(moving_data, -1, 1).astype(np.float32), spec.spacing)
    return fixed, fixed_seg, moving, moving_seg, gt_dvf


@dataclass
class CaseData:
    """A registration case: fixed/moving images with segmentations."""

    case_id: str
    fixed: Volume
    fixed_seg: Segmentation
    moving: Volume
    moving_seg: Segmentation
    gt_dvf: DVF | None = None


def make_phantom_case(spec: PhantomSpec) -> CaseData:
    fixed, fixed_seg, moving, moving_seg, gt_dvf = make_phantom_pair(spec)
    return CaseData(f"case_{spec.seed}", fixed, fixed_seg, moving, moving_seg, gt_dvf)


CASE_FILES = ("fixed.mhd", "fixed_seg.mhd", "moving.mhd", "moving_seg.mhd", "gt_dvf.mhd")


def save_case(case: CaseData, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_volume(case.fixed, os.path.join(directory, "fixed.mhd"))
    save_segmentation(case.fixed_seg, os.path.join(directory, "fixed_seg.mhd"))
    save_volume(case.moving, os.path.join(directory, "moving.mhd"))
    save_segmentation(case.moving_seg, os.path.join(directory, "moving_seg.mhd"))
    if case.gt_dvf is not None:
        save_dvf(case.gt_dvf, os.path.join(directory, "gt_dvf.mhd"))


def load_case(directory) -> CaseData:
    gt_path = os.path.join(directory, "gt_dvf.mhd")
    return CaseData(
        case_id=os.path.basename(os.path.normpath(directory)),
        fixed=load_volume(os.path.join(directory, "fixed.mhd")),
        fixed_seg=load_segmentation(os.path.join(directory, "fixed_seg.mhd")),
        moving=load_volume(os.path.join(directory, "moving.mhd")),
        moving_seg=load_segmentation(os.path.join(directory, "moving_seg.mhd")),
        gt_dvf=load_dvf(gt_path) if os.path.exists(gt_path) else None,
    )

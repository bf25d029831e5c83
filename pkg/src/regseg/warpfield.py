"""Dense displacement fields, differentiable trilinear warping, and Jacobian analysis.

Displacements are stored in millimeters and divided by the grid spacing at
sampling time, so a field stays valid if the volume is resampled. The warp
samples with clamp-to-edge boundary handling and is differentiable in both
the image values and the displacements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .volgrid import Segmentation, Volume, _as_triple, _parse_header, _read_payload, _write_mhd


@dataclass
class DVF:
    """Per-voxel displacement field, shape (3, x, y, z), millimeters."""

    disp: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.disp = np.asarray(self.disp)
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise ValueError(f"disp must have shape (3, x, y, z), got {self.disp.shape}")
        if not np.isfinite(self.disp).all():
            raise ValueError("displacement field contains non-finite values")
        self.spacing = _as_triple(self.spacing, "spacing")
        self.origin = _as_triple(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.disp.shape[1:]

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.disp.astype(np.float64) ** 2).sum(axis=0))


def zero_dvf(dims, spacing=(1.0, 1.0, 1.0)) -> DVF:
    return DVF(np.zeros((3,) + tuple(dims), dtype=np.float32), spacing)


def save_dvf(dvf: DVF, path):
    _write_mhd(path, dvf.disp.astype("<f4", copy=False), dvf.spacing, dvf.origin,
               "MET_FLOAT", channels=3)


def load_dvf(path) -> DVF:
    header = _parse_header(path)
    if int(header.get("ElementNumberOfChannels", "1")) != 3:
        raise ValueError(f"{path}: expected ElementNumberOfChannels = 3")
    arr, spacing, origin = _read_payload(path, header)
    return DVF(arr, spacing, origin)


# ---------------------------------------------------------------------------
# Differentiable trilinear sampling


def _crop_offset(vol_dims, field_dims):
    """Offsets of a centered crop; errors unless the crop relationship is exact."""
    offsets = []
    for dv, df in zip(vol_dims, field_dims):
        if df > dv or (dv - df) % 2:
            raise ValueError(
                f"field dims {tuple(field_dims)} are not a centered crop of {tuple(vol_dims)}"
            )
        offsets.append((dv - df) // 2)
    return tuple(offsets)


def warp_tensor(values: torch.Tensor, disp_vox: torch.Tensor) -> torch.Tensor:
    """Sample `values` (C, X, Y, Z) at ``index + disp_vox`` with trilinear weights.

    ``disp_vox`` has shape (3, x, y, z) in voxel units of the `values` grid and
    may cover a centered crop of it. Out-of-range positions clamp to the edge.
    Gradients flow to both `values` and `disp_vox`.
    """
    if values.ndim != 4 or disp_vox.ndim != 4 or disp_vox.shape[0] != 3:
        raise ValueError("expected values (C, X, Y, Z) and disp_vox (3, x, y, z)")
    offsets = _crop_offset(values.shape[1:], disp_vox.shape[1:])
    dims = values.shape[1:]
    device = values.device
    base = torch.meshgrid(
        *[torch.arange(n, device=device, dtype=disp_vox.dtype) + off
          for n, off in zip(disp_vox.shape[1:], offsets)],
        indexing="ij",
    )

    idx0, fracs = [], []
    for axis in range(3):
        p = (base[axis] + disp_vox[axis]).clamp(0, dims[axis] - 1)
        i0 = p.floor().clamp(0, max(dims[axis] - 2, 0))
        fracs.append(p - i0)
        idx0.append(i0.long())

    def corner(dx, dy, dz):
        ix = (idx0[0] + dx).clamp(0, dims[0] - 1)
        iy = (idx0[1] + dy).clamp(0, dims[1] - 1)
        iz = (idx0[2] + dz).clamp(0, dims[2] - 1)
        return values[:, ix, iy, iz]

    fx, fy, fz = fracs
    out = torch.zeros((values.shape[0],) + disp_vox.shape[1:],
                      dtype=values.dtype, device=device)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                out = out + corner(dx, dy, dz) * (wx * wy * wz)
    return out


def disp_mm_to_vox(disp, spacing, like: torch.Tensor | None = None):
    """Convert a (3, ...) millimeter displacement to voxel units per axis."""
    if isinstance(disp, torch.Tensor):
        scale = torch.as_tensor(spacing, dtype=disp.dtype, device=disp.device)
        return disp / scale.view(3, 1, 1, 1)
    disp = np.asarray(disp)
    return disp / np.asarray(spacing, dtype=disp.dtype).reshape(3, 1, 1, 1)


def warp_trilinear(vol: Volume, dvf: DVF) -> Volume:
    """Warp a volume by a DVF: ``out(x) = vol(x + disp(x)/spacing)``.

    The DVF grid must equal the volume grid or a centered crop of it; the
    output covers the DVF grid (origin shifted accordingly).
    """
    offsets = _crop_offset(vol.dims, dvf.dims)
    values = torch.from_numpy(np.ascontiguousarray(vol.data, dtype=np.float64))[None]
    disp_vox = torch.from_numpy(disp_mm_to_vox(dvf.disp.astype(np.float64), vol.spacing))
    out = warp_tensor(values, disp_vox)
    data = out[0].numpy().astype(vol.data.dtype, copy=False)
    origin = tuple(o + off * s for o, off, s in zip(vol.origin, offsets, vol.spacing))
    return Volume(data, vol.spacing, origin)


def warp_labels(seg: Segmentation, dvf: DVF) -> Segmentation:
    """Warp labels by one-hot encoding, trilinear warping, and per-voxel argmax.

    Background is an ordinary channel; argmax ties resolve to the lower id.
    """
    offsets = _crop_offset(seg.dims, dvf.dims)
    n = seg.num_labels
    onehot = np.stack([(seg.labels == k) for k in range(n)]).astype(np.float64)
    warped = warp_tensor(
        torch.from_numpy(onehot),
        torch.from_numpy(disp_mm_to_vox(dvf.disp.astype(np.float64), seg.spacing)),
    ).numpy()
    labels = np.argmax(warped, axis=0).astype(seg.labels.dtype)
    origin = tuple(o + off * s for o, off, s in zip(seg.origin, offsets, seg.spacing))
    return Segmentation(labels, dict(seg.label_names), seg.spacing, origin)


# ---------------------------------------------------------------------------
# Regularity analysis


def jacobian_determinant(dvf: DVF) -> Volume:
    """Per-voxel ``det(I + du/dx)`` with derivatives in physical units.

    Central differences in the interior, one-sided at the borders.
    """
    if min(dvf.dims) < 2:
        raise ValueError(f"need at least 2 voxels per axis, got dims {dvf.dims}")
    u = dvf.disp.astype(np.float64)
    jac = np.empty((3, 3) + dvf.dims)
    for c in range(3):
        grads = np.gradient(u[c], *dvf.spacing)
        for a in range(3):
            jac[c, a] = grads[a] + (1.0 if c == a else 0.0)
    det = (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )
    return Volume(det, dvf.spacing, dvf.origin)

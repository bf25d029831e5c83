"""Training objectives: NCC, soft Dice, bending energy, and WGAN losses.

All functions accept numpy arrays or torch tensors and return 0-d torch
tensors, so they can sit directly in an autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

VARIANCE_FLOOR = 1e-12
DICE_EPS = 1e-6

# WGAN generator direction: minimizing -E[D(fake)] pushes fake scores up.
# Set to +1.0 to get the uncorrected (critic-aligned) direction instead.
WGAN_GENERATOR_SIGN = -1.0


def _pair(a, b, name):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def ncc(a, b) -> torch.Tensor:
    """Pearson correlation of two fields over all voxels, in [-1, 1].

    Returns 0 if either field is (near-)constant.
    """
    a, b = _pair(a, b, "ncc")
    if a.numel() < 2:
        raise ValueError("ncc needs at least 2 voxels")
    a = a.reshape(-1)
    b = b.reshape(-1)
    ac = a - a.mean()
    bc = b - b.mean()
    va = (ac * ac).mean()
    vb = (bc * bc).mean()
    if float(va.detach()) < VARIANCE_FLOOR or float(vb.detach()) < VARIANCE_FLOOR:
        return torch.zeros((), dtype=a.dtype, device=a.device)
    return (ac * bc).mean() / torch.sqrt(va * vb)


def soft_dice(p, q, eps: float = DICE_EPS) -> torch.Tensor:
    """Mean soft Dice overlap over foreground-label channels.

    `p` and `q` are per-label probability fields shaped (labels, x, y, z);
    a plain 3D field is treated as a single label.
    """
    p, q = _pair(p, q, "soft_dice")
    if p.ndim == 3:
        p = p[None]
        q = q[None]
    axes = tuple(range(1, p.ndim))
    inter = (p * q).sum(dim=axes)
    sizes = p.sum(dim=axes) + q.sum(dim=axes)
    return (2.0 * inter / (sizes + eps)).mean()


def similarity_loss(fixed_img, warped_img, fixed_seg, warped_seg) -> torch.Tensor:
    """Alignment loss ``(1 - Dice(warped_seg, fixed_seg)) + (1 - NCC(warped_img, fixed_img))``."""
    return (1.0 - soft_dice(warped_seg, fixed_seg)) + (1.0 - ncc(warped_img, fixed_img))


# ---------------------------------------------------------------------------
# Bending energy


def _replicate_edge(x, axis):
    first = x.narrow(axis, 0, 1)
    last = x.narrow(axis, x.shape[axis] - 1, 1)
    return torch.cat([first, x, last], dim=axis)


def _second_derivative(u, axis, h):
    n = u.shape[axis]
    hi = u.narrow(axis, 2, n - 2)
    mid = u.narrow(axis, 1, n - 2)
    lo = u.narrow(axis, 0, n - 2)
    return _replicate_edge((hi - 2.0 * mid + lo) / (h * h), axis)


def _central_interior(u, axis, h):
    n = u.shape[axis]
    return (u.narrow(axis, 2, n - 2) - u.narrow(axis, 0, n - 2)) / (2.0 * h)


def _mixed_derivative(u, axis_a, h_a, axis_b, h_b):
    d = _central_interior(_central_interior(u, axis_a, h_a), axis_b, h_b)
    return _replicate_edge(_replicate_edge(d, axis_a), axis_b)


def bending_energy(disp, spacing=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """Mean over voxels of the summed squared second derivatives of a (3, x, y, z) field.

    Per voxel the integrand is sum over components of
    ``uxx^2 + uyy^2 + uzz^2 + 2 uxy^2 + 2 uxz^2 + 2 uyz^2`` with derivatives in
    physical units, which vanishes exactly on affine fields. Border voxels
    reuse the nearest interior stencil.
    """
    u = torch.as_tensor(disp)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"expected displacement of shape (3, x, y, z), got {tuple(u.shape)}")
    if min(u.shape[1:]) < 3:
        raise ValueError(f"grid too small for second differences: dims {tuple(u.shape[1:])}")
    h = [float(s) for s in spacing]
    energy = 0.0
    for a in range(3):
        d = _second_derivative(u, a + 1, h[a])
        energy = energy + (d * d).sum(dim=0)
    for a in range(3):
        for b in range(a + 1, 3):
            d = _mixed_derivative(u, a + 1, h[a], b + 1, h[b])
            energy = energy + 2.0 * (d * d).sum(dim=0)
    return energy.mean()


# ---------------------------------------------------------------------------
# WGAN objectives


def wgan_critic_loss(d_fake, d_real) -> torch.Tensor:
    """Critic objective ``mean(d_fake) - mean(d_real)`` over the score grids."""
    d_fake = torch.as_tensor(d_fake)
    d_real = torch.as_tensor(d_real)
    return d_fake.mean() - d_real.mean()


def wgan_generator_loss(d_fake, sign: float = WGAN_GENERATOR_SIGN) -> torch.Tensor:
    """Adversarial generator objective ``sign * mean(d_fake)``."""
    return sign * torch.as_tensor(d_fake).mean()


@dataclass
class LossBreakdown:
    """Logged components of one generator update."""

    sim_ncc: float
    sim_dsc: float
    smooth: float
    adv: float
    total: float


def generator_total_loss(sim_ncc, sim_dsc, smooth, adv,
                         lam1: float = 1.0, lam2: float = 0.01) -> LossBreakdown:
    """Combine loss parts into ``sim + lam1*smooth + lam2*adv`` with its breakdown."""
    total = sim_ncc + sim_dsc + lam1 * smooth + lam2 * adv
    return LossBreakdown(
        sim_ncc=float(sim_ncc),
        sim_dsc=float(sim_dsc),
        smooth=float(smooth),
        adv=float(adv),
        total=float(total),
    )

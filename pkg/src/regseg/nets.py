"""Generator (U-net-like DVF estimator) and PatchGAN critic architectures.

The generator maps a 2-channel (fixed, moving) stack to a 3-channel
displacement field in millimeters over a centered crop of its input; the
final layer is zero-initialized so a fresh network performs the identity
warp. The critic emits a grid of unbounded patch scores rather than a
single scalar.
"""

from __future__ import annotations

from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


class CriticMode(str, Enum):
    """How segmentations enter the critic input stack."""

    CONCAT_CHANNEL = "concat_channel"
    MASK_MULTIPLY = "mask_multiply"

    @property
    def in_channels(self) -> int:
        return 3 if self is CriticMode.CONCAT_CHANNEL else 2


def _conv_block(in_ch, out_ch, stride=1, norm=True):
    # Paper ordering: convolution, LeakyReLU, then batch normalization.
    layers = [nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1),
              nn.LeakyReLU(LEAKY_SLOPE)]
    if norm:
        layers.append(nn.BatchNorm3d(out_ch))
    return nn.Sequential(*layers)


class DvfGenerator(nn.Module):
    """Encoder-decoder DVF estimator with strided-conv downsampling and skip connections."""

    def __init__(self, depth: int = 4, base_filters: int = 16, margin: int = 20,
                 in_channels: int = 2):
        super().__init__()
        if depth < 2:
            raise ValueError(f"depth must be >= 2, got {depth}")
        if margin < 0:
            raise ValueError(f"margin must be >= 0, got {margin}")
        self.depth = depth
        self.margin = margin
        self.scale = 2 ** (depth - 1)
        filters = [base_filters * 2 ** i for i in range(depth)]

        self.stem = _conv_block(in_channels, filters[0])
        self.down = nn.ModuleList()
        for i in range(depth - 1):
            self.down.append(nn.Sequential(
                _conv_block(filters[i], filters[i + 1], stride=2),
                _conv_block(filters[i + 1], filters[i + 1]),
            ))
        self.up_conv = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in reversed(range(depth - 1)):
            self.up_conv.append(_conv_block(filters[i + 1], filters[i]))
            self.merge.append(_conv_block(2 * filters[i], filters[i]))

        self.head = nn.Conv3d(filters[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def output_size_for(self, input_size: int) -> int:
        if input_size % self.scale:
            raise ValueError(
                f"input size {input_size} not divisible by 2^(depth-1) = {self.scale}"
            )
        out = input_size - 2 * self.margin
        if out < 1:
            raise ValueError(
                f"margin {self.margin} leaves no output for input size {input_size}"
            )
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 2, X, Y, Z) image stack -> (N, 3, X-2m, Y-2m, Z-2m) DVF in mm."""
        for size in x.shape[2:]:
            self.output_size_for(int(size))
        feats = [self.stem(x)]
        for block in self.down:
            feats.append(block(feats[-1]))
        y = feats[-1]
        for up, merge, skip in zip(self.up_conv, self.merge, reversed(feats[:-1])):
            y = up(F.interpolate(y, scale_factor=2, mode="nearest"))
            y = merge(torch.cat([y, skip], dim=1))
        y = self.head(y)
        m = self.margin
        if m:
            y = y[:, :, m:-m, m:-m, m:-m]
        return y


class PatchCritic(nn.Module):
    """Stack of stride-2 convolutions producing one score per receptive-field sub-patch.

    No normalization layers: weight clipping already constrains the scale.
    """

    def __init__(self, depth: int = 4, base_filters: int = 16,
                 mode: CriticMode = CriticMode.CONCAT_CHANNEL):
        super().__init__()
        self.mode = CriticMode(mode)
        self.depth = depth
        filters = [base_filters * 2 ** i for i in range(depth)]
        layers = []
        in_ch = self.mode.in_channels
        for f in filters:
            layers.append(nn.Conv3d(in_ch, f, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            in_ch = f
        layers.append(nn.Conv3d(in_ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, C, X, Y, Z) critic input -> (N, 1, x', y', z') score grid."""
        if x.shape[1] != self.mode.in_channels:
            raise ValueError(
                f"critic in mode {self.mode.value} expects {self.mode.in_channels} "
                f"channels, got {x.shape[1]}"
            )
        return self.net(x)


def build_generator(input_size: int, depth: int = 4, base_filters: int = 16,
                    margin: int = 20) -> DvfGenerator:
    """Construct the generator and validate the size arithmetic for `input_size`."""
    net = DvfGenerator(depth=depth, base_filters=base_filters, margin=margin)
    net.input_size = int(input_size)
    net.output_size = net.output_size_for(int(input_size))
    return net


def build_critic(depth: int = 4, base_filters: int = 16,
                 mode: CriticMode = CriticMode.CONCAT_CHANNEL) -> PatchCritic:
    return PatchCritic(depth=depth, base_filters=base_filters, mode=mode)


def assemble_critic_input(fixed, other, seg_fg, mode) -> torch.Tensor:
    """Stack critic input channels from an image pair and a soft foreground field.

    ``concat_channel`` yields (fixed, other, seg); ``mask_multiply`` yields
    (fixed*seg, other*seg). Inputs may be plain 3D fields or (N, 1, x, y, z)
    tensors; shapes must match exactly.
    """
    mode = CriticMode(mode)
    fixed = torch.as_tensor(fixed)
    other = torch.as_tensor(other)
    seg_fg = torch.as_tensor(seg_fg)
    if fixed.shape != other.shape or fixed.shape != seg_fg.shape:
        raise ValueError(
            f"critic input shape mismatch: {tuple(fixed.shape)}, "
            f"{tuple(other.shape)}, {tuple(seg_fg.shape)}"
        )
    if mode is CriticMode.CONCAT_CHANNEL:
        channels = (fixed, other, seg_fg)
    else:
        channels = (fixed * seg_fg, other * seg_fg)
    if fixed.ndim == 3:
        return torch.stack(channels, dim=0)
    if fixed.ndim == 5 and fixed.shape[1] == 1:
        return torch.cat(channels, dim=1)
    raise ValueError(f"expected (x, y, z) or (N, 1, x, y, z) inputs, got {tuple(fixed.shape)}")


def clip_parameters(net: nn.Module, c: float = 0.01) -> None:
    """Clamp every parameter of `net` to [-c, c] in place."""
    if c <= 0:
        raise ValueError(f"clip range must be positive, got {c}")
    with torch.no_grad():
        for p in net.parameters():
            p.clamp_(-c, c)

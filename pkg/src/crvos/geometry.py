"""Clue construction: coordinate channels, coarse-mask pooling, channel assembly.

Soft masks are channel-first tensors ``(..., 2, H, W)`` with channel 0 the
foreground probability and channel 1 the background probability. The Clue
channel order is fixed::

    0 fg, 1 bg, 2 height_ramp, 3 width_ramp, 4 center_distance
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

STRIDE = 16
CLUE_CHANNELS = ("fg", "bg", "height_ramp", "width_ramp", "center_distance")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CoordChannels:
    height_ramp: torch.Tensor
    width_ramp: torch.Tensor
    center_distance: torch.Tensor

    @property
    def shape(self) -> tuple:
        return tuple(self.height_ramp.shape)

    def stack(self) -> torch.Tensor:
        """(3, h, w) tensor in Clue order."""
        return torch.stack([self.height_ramp, self.width_ramp, self.center_distance])

    def to(self, dtype=None, device=None) -> "CoordChannels":
        return CoordChannels(*(t.to(device=device, dtype=dtype) for t in
                               (self.height_ramp, self.width_ramp, self.center_distance)))


def _ramp(n: int, dtype) -> torch.Tensor:
    if n == 1:
        return torch.zeros(1, dtype=dtype)
    return torch.linspace(-1.0, 1.0, n, dtype=dtype)


def make_coord_channels(h16: int, w16: int, dtype=torch.float32) -> CoordChannels:
    """Height/width ramps over [-1, 1] and the center distance rescaled to [-1, 1]."""
    if int(h16) != h16 or int(w16) != w16 or h16 < 1 or w16 < 1:
        raise ValueError(f"coordinate grid needs positive integer dimensions, got ({h16}, {w16})")
    ys = _ramp(int(h16), torch.float64)
    xs = _ramp(int(w16), torch.float64)
    hr, wr = torch.meshgrid(ys, xs, indexing="ij")
    dist = torch.sqrt(hr**2 + wr**2)
    d_max = math.hypot(float(ys.abs().max()), float(xs.abs().max()))
    if d_max == 0.0:
        cd = torch.full_like(dist, -1.0)
    else:
        cd = 2.0 * dist / d_max - 1.0
    return CoordChannels(hr.to(dtype).contiguous(), wr.to(dtype).contiguous(), cd.to(dtype).contiguous())


def downsample_mask(mask: torch.Tensor, factor: int = STRIDE) -> torch.Tensor:
    """Area pooling of a soft mask ``(..., 2, H, W)`` to ``(..., 2, H/factor, W/factor)``."""
    if mask.dim() < 3 or mask.shape[-3] != 2:
        raise ShapeError(f"expected a (..., 2, H, W) soft mask, got shape {tuple(mask.shape)}")
    h, w = mask.shape[-2:]
    bad = []
    if h % factor:
        bad.append(f"H={h}")
    if w % factor:
        bad.append(f"W={w}")
    if bad:
        raise ShapeError(f"mask dimensions not divisible by {factor}: {', '.join(bad)}")
    lead = mask.shape[:-2]
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(dim=(-3, -1))


def one_hot_mask(binary: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Binary ``(..., H, W)`` map -> soft ``(..., 2, H, W)`` mask."""
    fg = (binary > 0).to(dtype)
    return torch.stack([fg, 1.0 - fg], dim=-3)


def harden(mask: torch.Tensor) -> torch.Tensor:
    """Soft mask -> one-hot soft mask (fg wins ties)."""
    return one_hot_mask(mask[..., 0, :, :] >= mask[..., 1, :, :], dtype=mask.dtype)


def build_clue(prev_mask: torch.Tensor, coords: CoordChannels, hard: bool = False) -> torch.Tensor:
    """``(..., 2, H, W)`` previous mask -> ``(..., 5, H/16, W/16)`` Clue."""
    if hard:
        prev_mask = harden(prev_mask)
    coarse = downsample_mask(prev_mask, STRIDE)
    if tuple(coarse.shape[-2:]) != coords.shape:
        raise ShapeError(f"coarse mask is {tuple(coarse.shape[-2:])} but coords are {coords.shape}")
    grid = coords.stack().to(dtype=coarse.dtype, device=coarse.device)
    grid = grid.expand(*coarse.shape[:-3], *grid.shape)
    return torch.cat([coarse, grid], dim=-3)

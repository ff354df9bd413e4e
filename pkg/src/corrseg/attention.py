"""Dual attention fusion: modality-wise and spatial recalibration of
concatenated modality representations, summed into one fused map."""

from __future__ import annotations

import csv
import os
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ShapeMismatchError


def reduction_size(n_units: int) -> int:
    return max(1, n_units // 2)


def _check_units(units: Sequence[torch.Tensor]) -> None:
    if len(units) == 0:
        raise ShapeMismatchError("no feature units given")
    ref = units[0].shape
    for k, z in enumerate(units):
        if z.dim() != 5:
            raise ShapeMismatchError(f"unit {k} must be rank-5, got {tuple(z.shape)}")
        if z.shape[0] != ref[0] or z.shape[2:] != ref[2:]:
            raise ShapeMismatchError(
                f"unit {k} shape {tuple(z.shape)} incompatible with {tuple(ref)}")


class ModalityAttention(nn.Module):
    """One gate per modality unit.

    Each unit is pooled to a single scalar (mean over channels and all three
    spatial axes), the K scalars go through K -> K//2 -> K fully connected
    layers (no bias, ReLU in between) and a sigmoid gives the unit weights.
    """

    def __init__(self, n_units: int):
        super().__init__()
        self.n_units = n_units
        r = reduction_size(n_units)
        self.squeeze = nn.Linear(n_units, r, bias=False)
        self.expand = nn.Linear(r, n_units, bias=False)
        self.reset_parameters()

    def reset_parameters(self):
        for lin in (self.squeeze, self.expand):
            nn.init.kaiming_uniform_(lin.weight, a=0.01, nonlinearity="leaky_relu")

    def forward(self, units: Sequence[torch.Tensor]):
        _check_units(units)
        if len(units) != self.n_units:
            raise ShapeMismatchError(f"expected {self.n_units} units, got {len(units)}")
        g = torch.stack([z.mean(dim=(1, 2, 3, 4)) for z in units], dim=1)  # (B, K)
        g_hat = self.expand(torch.relu(self.squeeze(g)))
        weights = torch.sigmoid(g_hat)
        recal = [weights[:, k].view(-1, 1, 1, 1, 1) * z for k, z in enumerate(units)]
        return recal, weights


class SpatialAttention(nn.Module):
    """Per-voxel gate from a 1x1x1 convolution over all concatenated channels."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Conv3d(in_channels, 1, kernel_size=1, bias=True)
        nn.init.kaiming_uniform_(self.proj.weight, a=0.01, nonlinearity="leaky_relu")
        nn.init.zeros_(self.proj.bias)

    def forward(self, z: torch.Tensor):
        if z.dim() != 5 or z.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"expected {self.in_channels} channels, got shape {tuple(z.shape)}")
        spatial_map = torch.sigmoid(self.proj(z))
        return z * spatial_map, spatial_map[:, 0]


class DualFusion(nn.Module):
    """Z_f = Z_m + Z_s over the channel concatenation of ``n_units`` maps."""

    def __init__(self, n_units: int, unit_channels: int | Sequence[int]):
        super().__init__()
        if isinstance(unit_channels, int):
            unit_channels = [unit_channels] * n_units
        if len(unit_channels) != n_units:
            raise ShapeMismatchError("unit_channels length must equal n_units")
        self.unit_channels = list(unit_channels)
        self.modality = ModalityAttention(n_units)
        self.spatial = SpatialAttention(sum(self.unit_channels))
        self.last_weights: torch.Tensor | None = None

    def forward(self, units: Sequence[torch.Tensor]) -> torch.Tensor:
        _check_units(units)
        chans = [z.shape[1] for z in units]
        if chans != self.unit_channels:
            raise ShapeMismatchError(f"unit channels {chans} != {self.unit_channels}")
        z_m_units, weights = self.modality(units)
        z = torch.cat(list(units), dim=1)
        z_s, _ = self.spatial(z)
        self.last_weights = weights.detach()
        return torch.cat(z_m_units, dim=1) + z_s


class ConcatFusion(nn.Module):
    """Plain concatenation; stands in for DualFusion in the no-fusion ablation."""

    def __init__(self, n_units: int, unit_channels: int | Sequence[int]):
        super().__init__()
        self.n_units = n_units
        self.last_weights = None

    def forward(self, units: Sequence[torch.Tensor]) -> torch.Tensor:
        _check_units(units)
        return torch.cat(list(units), dim=1)


def write_modality_weights(path: str | os.PathLike, weights_by_level: dict[int, torch.Tensor]) -> None:
    """Dump per-level modality weights of the first batch item as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "unit", "weight"])
        for level in sorted(weights_by_level):
            vals = weights_by_level[level]
            if vals.dim() == 2:
                vals = vals[0]
            for k, v in enumerate(vals.tolist()):
                w.writerow([level, k, f"{v:.6f}"])

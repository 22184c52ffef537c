"""Patch encoding and positional encodings.

Every module here operates on batched grids ``[B, C, n, *]``.
"""

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from crisscross_eeg.core.errors import ConfigError, ShapeError

ENERGY_KINDS = ("power", "magnitude", "log_power")
PE_VARIANTS = ("acpe", "cpe", "ape", "none")


@dataclass(frozen=True)
class ConvSpec:
    """Per-layer channel counts, kernels, strides and paddings of the time branch."""

    in_channels: tuple[int, ...] = (1, 25, 25)
    out_channels: tuple[int, ...] = (25, 25, 25)
    kernel: tuple[int, ...] = (49, 3, 3)
    stride: tuple[int, ...] = (25, 1, 1)
    padding: tuple[int, ...] = (24, 1, 1)

    def __post_init__(self):
        lengths = {
            len(self.in_channels),
            len(self.out_channels),
            len(self.kernel),
            len(self.stride),
            len(self.padding),
        }
        if len(lengths) != 1 or not self.in_channels:
            raise ConfigError(f"Conv spec fields disagree on layer count: {self}")
        if self.in_channels[0] != 1:
            raise ConfigError("The first conv layer reads a single input channel")
        for i in range(1, len(self.in_channels)):
            if self.in_channels[i] != self.out_channels[i - 1]:
                raise ConfigError(
                    f"Conv layer {i} reads {self.in_channels[i]} channels but layer "
                    f"{i - 1} writes {self.out_channels[i - 1]}"
                )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(f"Invalid kernel/stride/padding in {self}")

    @property
    def n_layers(self) -> int:
        return len(self.in_channels)

    def lengths(self, patch_len: int) -> list[int]:
        """Output length after each layer: ``floor((L + 2p - k) / s) + 1``."""
        out = []
        length = patch_len
        for k, s, p in zip(self.kernel, self.stride, self.padding):
            length = (length + 2 * p - k) // s + 1
            if length < 1:
                raise ShapeError(f"Conv stack collapses a {patch_len}-point patch")
            out.append(length)
        return out

    def flat_dim(self, patch_len: int) -> int:
        return self.out_channels[-1] * self.lengths(patch_len)[-1]


def fft_energy(patch: torch.Tensor, kind: str = "power") -> torch.Tensor:
    """Energy vector of each patch along the last axis (``t // 2 + 1`` bins).

    ``power`` is ``|rfft|^2 / t``; ``magnitude`` its square root and
    ``log_power`` is ``log1p`` of it.
    """
    t = patch.shape[-1]
    if t < 2:
        raise ShapeError(f"Energy vector needs patches of >= 2 points, got {t}")
    power = torch.fft.rfft(patch, dim=-1).abs().square() / t
    if kind == "power":
        return power
    if kind == "magnitude":
        return power.sqrt()
    if kind == "log_power":
        return torch.log1p(power)
    raise ConfigError(f"Unknown energy kind {kind!r}; use one of {ENERGY_KINDS}")


class PatchEncoder(nn.Module):
    """Time-domain conv embedding plus frequency-domain energy embedding."""

    def __init__(
        self,
        patch_len: int,
        d: int,
        conv: ConvSpec,
        norm_groups: int = 5,
        energy: str = "power",
    ):
        super().__init__()
        if energy not in ENERGY_KINDS:
            raise ConfigError(
                f"Unknown energy kind {energy!r}; use one of {ENERGY_KINDS}"
            )
        flat = conv.flat_dim(patch_len)
        if flat != d:
            raise ShapeError(
                f"Conv stack flattens a {patch_len}-point patch to {flat} values, "
                f"expected d={d}"
            )
        blocks = []
        for c_in, c_out, k, s, p in zip(
            conv.in_channels, conv.out_channels, conv.kernel, conv.stride, conv.padding
        ):
            if c_out % norm_groups:
                raise ConfigError(
                    f"{norm_groups} norm groups do not divide {c_out} channels"
                )
            blocks += [
                nn.Conv1d(c_in, c_out, k, stride=s, padding=p),
                nn.GroupNorm(norm_groups, c_out),
                nn.GELU(),
            ]
        self.patch_len = patch_len
        self.energy = energy
        self.time_branch = nn.Sequential(*blocks)
        self.freq_proj = nn.Linear(patch_len // 2 + 1, d)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.patch_len:
            raise ShapeError(
                f"Patches of {patches.shape[-1]} points, encoder expects {self.patch_len}"
            )
        lead = patches.shape[:-1]
        flat = patches.reshape(-1, 1, self.patch_len)
        # position-major flatten: e^t = [pos0 channels..., pos1 channels..., ...]
        e_time = rearrange(self.time_branch(flat), "b c l -> b (l c)")
        e_freq = self.freq_proj(fft_energy(flat.squeeze(1), self.energy))
        return (e_time + e_freq).reshape(*lead, -1)


class ConvPositional(nn.Module):
    """Depthwise 2-D convolution over the (channel, time) grid, added residually.

    A tall ``(k_s, k_t)`` kernel with ``k_s > k_t`` is the asymmetric variant;
    a square kernel is the symmetric one.
    """

    def __init__(self, d: int, kernel: tuple[int, int]):
        super().__init__()
        k_s, k_t = kernel
        if k_s % 2 == 0 or k_t % 2 == 0:
            raise ConfigError(f"Positional kernel dims must be odd, got {kernel}")
        self.conv = nn.Conv2d(
            d, d, (k_s, k_t), padding=((k_s - 1) // 2, (k_t - 1) // 2), groups=d
        )

    def encoding(self, x: torch.Tensor) -> torch.Tensor:
        """E^p alone, ``[B, C, n, d]``."""
        grid = rearrange(x, "b c n d -> b d c n")
        return rearrange(self.conv(grid), "b d c n -> b c n d")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.encoding(x)


class AbsolutePositional(nn.Module):
    """Learned table indexed by (channel, time), truncated to the input grid."""

    def __init__(self, d: int, max_channels: int = 64, max_patches: int = 64):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(max_channels, max_patches, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        channels, n_patches = x.shape[-3], x.shape[-2]
        max_channels, max_patches = self.table.shape[:2]
        if channels > max_channels or n_patches > max_patches:
            raise ShapeError(
                f"Grid {channels}x{n_patches} exceeds the positional table "
                f"{max_channels}x{max_patches}"
            )
        return x + self.table[:channels, :n_patches]


def build_positional(
    variant: str,
    d: int,
    acpe_kernel: tuple[int, int],
    cpe_kernel: int = 7,
    ape_grid: tuple[int, int] = (64, 64),
) -> nn.Module:
    if variant == "acpe":
        return ConvPositional(d, acpe_kernel)
    if variant == "cpe":
        return ConvPositional(d, (cpe_kernel, cpe_kernel))
    if variant == "ape":
        return AbsolutePositional(d, *ape_grid)
    if variant == "none":
        return nn.Identity()
    raise ConfigError(
        f"Unknown positional encoding {variant!r}; use one of {PE_VARIANTS}"
    )

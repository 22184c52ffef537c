"""Patch grids and Bernoulli patch masking.

A sample ``[C x T]`` becomes a grid of ``C x n`` patches of ``t`` timepoints
(``n = T // t``; the remainder is dropped). Masking replaces whole patches by a
mask token at the raw-signal level, before any encoding, and keeps the
pre-mask patches around as reconstruction targets. Every function accepts
arbitrary leading batch dimensions.
"""

from dataclasses import dataclass, replace

import numpy as np
import torch
from einops import rearrange

from crisscross_eeg.core.errors import ConfigError, DataError, ShapeError
from crisscross_eeg.core.utils import torch_generator

TOKEN_KINDS = ("full_zero", "learnable")


@dataclass(frozen=True)
class MaskSpec:
    """Bernoulli mask ratio, mask-token kind and the seed of the draw."""

    ratio: float = 0.5
    token_kind: str = "full_zero"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"Mask ratio must lie in [0, 1], got {self.ratio}")
        if self.token_kind not in TOKEN_KINDS:
            raise ConfigError(
                f"Unknown mask token kind {self.token_kind!r}; use one of {TOKEN_KINDS}"
            )


@dataclass(frozen=True)
class PatchGrid:
    """Patches ``[..., C, n, t]``, boolean mask ``[..., C, n]`` and the originals."""

    patches: torch.Tensor
    mask: torch.Tensor
    patch_len: int
    originals: torch.Tensor | None = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        channels, n_patches = self.mask.shape[-2:]
        return channels, n_patches

    @property
    def targets(self) -> torch.Tensor:
        """Pre-mask patches (the patches themselves when never masked)."""
        return self.patches if self.originals is None else self.originals

    def reassemble(self) -> torch.Tensor:
        """Concatenate the pre-mask patches back into ``[..., C, n*t]``."""
        return rearrange(self.targets, "... c n t -> ... c (n t)")


def to_patches(
    sample: np.ndarray | torch.Tensor, t: int, dtype: torch.dtype | None = None
) -> PatchGrid:
    """Split ``[..., C, T]`` into an unmasked ``[..., C, n, t]`` grid."""
    data = torch.as_tensor(sample)
    if dtype is not None:
        data = data.to(dtype)
    if data.ndim < 2:
        raise ShapeError(f"Expected [..., C, T], got shape {tuple(data.shape)}")
    if t < 1:
        raise ConfigError(f"Patch length must be >= 1, got {t}")
    timepoints = data.shape[-1]
    if timepoints < t:
        raise DataError(
            f"Sample of {timepoints} points is shorter than patch length {t}"
        )
    n_patches = timepoints // t
    patches = rearrange(data[..., : n_patches * t], "... c (n t) -> ... c n t", t=t)
    mask = torch.zeros(patches.shape[:-1], dtype=torch.bool)
    return PatchGrid(patches=patches, mask=mask, patch_len=t)


def draw_mask(
    shape: tuple[int, ...], ratio: float, generator: torch.Generator
) -> torch.Tensor:
    """Independent Bernoulli(ratio) indicators."""
    return torch.rand(shape, generator=generator) < ratio


def apply_mask(
    grid: PatchGrid,
    spec: MaskSpec,
    token: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> PatchGrid:
    """Draw a fresh mask and replace masked patches by the mask token.

    ``token`` is the learnable token parameter when ``spec.token_kind`` is
    ``learnable`` (gradients flow into it through masked positions); a
    full-zero token is used otherwise. The draw is deterministic under
    ``spec.rng_seed`` unless an explicit ``generator`` is passed.
    """
    base = grid.targets
    t = grid.patch_len
    if spec.token_kind == "learnable" and token is None:
        raise ConfigError("A learnable mask token requires the token tensor")
    if token is not None and tuple(token.shape) != (t,):
        raise ShapeError(f"Mask token has shape {tuple(token.shape)}, expected ({t},)")
    if spec.token_kind == "full_zero" or token is None:
        token = torch.zeros(t, dtype=base.dtype)

    generator = generator if generator is not None else torch_generator(spec.rng_seed)
    mask = draw_mask(tuple(base.shape[:-1]), spec.ratio, generator)
    masked = torch.where(mask.unsqueeze(-1), token.to(base.dtype), base)
    return replace(grid, patches=masked, mask=mask, originals=base)


def masked_index_sets(
    grid: PatchGrid,
) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Index tuples of masked and unmasked patches (a partition of the grid)."""
    masked = [tuple(i) for i in torch.nonzero(grid.mask).tolist()]
    unmasked = [tuple(i) for i in torch.nonzero(~grid.mask).tolist()]
    return masked, unmasked

"""The criss-cross transformer encoder and its ablation variants.

`CrissCrossModel` is the module used for training. The functions at the
bottom of this file evaluate the same network as pure functions of a
`ParameterSet`, which is how checkpoints, gradient checks and oracles see it.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from crisscross_eeg.core.attention import GridAttention
from crisscross_eeg.core.encoder import (
    ENERGY_KINDS,
    PE_VARIANTS,
    ConvSpec,
    PatchEncoder,
    build_positional,
)
from crisscross_eeg.core.errors import ConfigError, DataError, ShapeError
from crisscross_eeg.core.patching import PatchGrid
from crisscross_eeg.core.utils import DTYPES, thread_cached

if TYPE_CHECKING:
    from crisscross_eeg.core.params import ParameterSet

ATTENTION_VARIANTS = ("criss_cross", "full", "axial")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size pre-training model."""

    d: int = 200
    n_layers: int = 12
    n_heads: int = 8
    spatial_heads: int = 4
    ffn_dim: int = 800
    patch_len: int = 200
    conv_spec: ConvSpec = field(default_factory=ConvSpec)
    norm_groups: int = 5
    acpe_kernel: tuple[int, int] = (19, 7)
    cpe_kernel: int = 7
    ape_grid: tuple[int, int] = (64, 64)
    attention_variant: str = "criss_cross"
    pe_variant: str = "acpe"
    dropout_p: float = 0.1
    axial_switch_layer: int = 6
    energy: str = "power"
    learnable_token: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.d < 1 or self.n_layers < 0 or self.n_heads < 1 or self.ffn_dim < 1:
            raise ConfigError("d, n_heads and ffn_dim must be positive")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.spatial_heads <= self.n_heads:
            raise ConfigError(
                f"spatial_heads={self.spatial_heads} must lie in [0, {self.n_heads}]"
            )
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ConfigError(
                f"Unknown attention variant {self.attention_variant!r}; "
                f"use one of {ATTENTION_VARIANTS}"
            )
        if self.pe_variant not in PE_VARIANTS:
            raise ConfigError(
                f"Unknown positional encoding {self.pe_variant!r}; use one of {PE_VARIANTS}"
            )
        if self.energy not in ENERGY_KINDS:
            raise ConfigError(f"Unknown energy kind {self.energy!r}")
        k_s, k_t = self.acpe_kernel
        if k_s % 2 == 0 or k_t % 2 == 0 or self.cpe_kernel % 2 == 0:
            raise ConfigError("Positional kernel sizes must be odd")
        if self.pe_variant == "acpe" and not k_s > k_t:
            raise ConfigError(
                f"ACPE kernel {self.acpe_kernel} must be taller than wide"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not 0 <= self.axial_switch_layer <= self.n_layers:
            raise ConfigError(
                f"axial_switch_layer={self.axial_switch_layer} outside [0, {self.n_layers}]"
            )
        if self.dtype not in DTYPES:
            raise ConfigError(
                f"Unsupported dtype {self.dtype!r}; use one of {list(DTYPES)}"
            )
        for c_out in self.conv_spec.out_channels:
            if c_out % self.norm_groups:
                raise ConfigError(
                    f"norm_groups={self.norm_groups} does not divide {c_out} conv channels"
                )
        flat = self.conv_spec.flat_dim(self.patch_len)
        if flat != self.d:
            raise ShapeError(
                f"Conv stack flattens a {self.patch_len}-point patch to {flat}, expected d={self.d}"
            )

    @property
    def temporal_heads(self) -> int:
        return self.n_heads - self.spatial_heads

    @property
    def dk(self) -> int:
        return self.d // self.n_heads

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """The small 64-bit network used by gradient checks and oracles."""
        base = dict(
            d=8,
            n_layers=2,
            n_heads=2,
            spatial_heads=1,
            ffn_dim=16,
            patch_len=16,
            conv_spec=ConvSpec(
                in_channels=(1, 2, 2),
                out_channels=(2, 2, 2),
                kernel=(7, 3, 3),
                stride=(4, 1, 1),
                padding=(3, 1, 1),
            ),
            norm_groups=1,
            acpe_kernel=(3, 1),
            cpe_kernel=3,
            ape_grid=(8, 8),
            dropout_p=0.0,
            axial_switch_layer=1,
            dtype="float64",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """A 2-layer network on 1 s patches, sized for CPU pre-training runs."""
        base = dict(n_layers=2, ffn_dim=256, axial_switch_layer=1)
        base.update(overrides)
        return cls(**base)


def head_axes_for(layer: int, cfg: ModelConfig) -> tuple[str, ...]:
    """Stripe axis of every head in ``layer`` for the configured variant."""
    if cfg.attention_variant == "criss_cross":
        return ("spatial",) * cfg.spatial_heads + ("temporal",) * cfg.temporal_heads
    if cfg.attention_variant == "full":
        return ("full",) * cfg.n_heads
    axis = "spatial" if layer < cfg.axial_switch_layer else "temporal"
    return (axis,) * cfg.n_heads


@dataclass
class Activation:
    """Embeddings ``[..., C, n, d]`` at a named stage, plus traced attention weights.

    Stages: ``patch`` (E), ``positional`` (E^o), ``block<i>`` and ``encoded``
    (E^r).
    """

    embeddings: torch.Tensor
    stage: str
    attention: list[dict[str, torch.Tensor]] | None = None


class CrissCrossBlock(nn.Module):
    """Pre-norm transformer block: attention then feed-forward, both residual."""

    def __init__(self, cfg: ModelConfig, layer: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.d)
        self.attn = GridAttention(cfg.d, head_axes_for(layer, cfg))
        self.attn_drop = nn.Dropout(cfg.dropout_p)
        self.ffn_norm = nn.LayerNorm(cfg.d)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, cfg.d)
        )
        self.ffn_drop = nn.Dropout(cfg.dropout_p)

    def forward(
        self, x: torch.Tensor, trace: bool = False
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor] | None]:
        attended, weights = self.attn(self.attn_norm(x), trace=trace)
        x = x + self.attn_drop(attended)
        x = x + self.ffn_drop(self.ffn(self.ffn_norm(x)))
        return x, weights


class CrissCrossModel(nn.Module):
    """Patch encoder, positional encoding, block stack and reconstruction head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_encoder = PatchEncoder(
            cfg.patch_len, cfg.d, cfg.conv_spec, cfg.norm_groups, cfg.energy
        )
        self.positional = build_positional(
            cfg.pe_variant, cfg.d, cfg.acpe_kernel, cfg.cpe_kernel, cfg.ape_grid
        )
        self.blocks = nn.ModuleList(
            CrissCrossBlock(cfg, i) for i in range(cfg.n_layers)
        )
        self.head = nn.Linear(cfg.d, cfg.patch_len)
        self.mask_token = (
            nn.Parameter(torch.zeros(cfg.patch_len)) if cfg.learnable_token else None
        )

    def encode(self, patches: torch.Tensor, trace: bool = False) -> Activation:
        """Run ``[B, C, n, t]`` patches through the encoder to E^r ``[B, C, n, d]``."""
        x = self.positional(self.patch_encoder(patches))
        traced = []
        for block in self.blocks:
            x, weights = block(x, trace=trace)
            if trace:
                traced.append(weights)
        return Activation(x, "encoded", traced if trace else None)

    def forward(self, patches: torch.Tensor, trace: bool = False) -> Activation:
        unbatched = patches.ndim == 3
        if unbatched:
            patches = patches.unsqueeze(0)
        if patches.ndim != 4:
            raise ShapeError(
                f"Expected [B, C, n, t] patches, got {tuple(patches.shape)}"
            )
        act = self.encode(patches, trace=trace)
        if unbatched:
            act.embeddings = act.embeddings.squeeze(0)
            if act.attention:
                act.attention = [
                    {axis: w.squeeze(0) for axis, w in layer.items()}
                    for layer in act.attention
                ]
        return act

    def reconstruct(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.head(embeddings)


def masked_mse(
    x_hat: torch.Tensor, originals: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean squared error over masked patch entries only.

    For a batch ``[B, C, n, t]`` each sample's masked mean is computed first
    and the batch loss averages those, skipping samples whose mask is empty.
    """
    if x_hat.shape != originals.shape or x_hat.shape[:-1] != mask.shape:
        raise ShapeError(
            f"Shapes disagree: x_hat {tuple(x_hat.shape)}, originals "
            f"{tuple(originals.shape)}, mask {tuple(mask.shape)}"
        )
    per_patch = (x_hat - originals).square().mean(dim=-1)
    if mask.ndim == 2:
        if not mask.any():
            raise DataError("Masked MSE is undefined without masked patches")
        return per_patch[mask].mean()
    weights = mask.flatten(1).to(per_patch.dtype)
    counts = weights.sum(dim=1)
    present = counts > 0
    if not present.any():
        raise DataError(
            "Masked MSE is undefined: no sample in the batch has masked patches"
        )
    per_sample = (per_patch.flatten(1) * weights).sum(dim=1)[present] / counts[present]
    return per_sample.mean()


# ---------------------------------------------------------------------------
# Pure functions over a ParameterSet
# ---------------------------------------------------------------------------


@thread_cached(maxsize=16)
def skeleton(cfg: ModelConfig) -> CrissCrossModel:
    """Parameter-free module graph for ``cfg``; weights come from a ParameterSet.

    Each thread gets its own graph: ``functional_call`` and ``train()`` mutate it.
    """
    with torch.device("meta"):
        return CrissCrossModel(cfg)


def _scoped(params: "ParameterSet", prefix: str) -> dict[str, torch.Tensor]:
    return {
        name[len(prefix) :]: tensor
        for name, tensor in params.tensors.items()
        if name.startswith(prefix)
    }


def _as_batch(x: torch.Tensor, feature_ndim: int = 3) -> tuple[torch.Tensor, bool]:
    unbatched = x.ndim == feature_ndim
    return (x.unsqueeze(0) if unbatched else x), unbatched


def _config(params: "ParameterSet", cfg: ModelConfig | None) -> ModelConfig:
    cfg = cfg or params.config
    params.validate(cfg)
    return cfg


def patch_encode(
    grid: PatchGrid, params: "ParameterSet", cfg: ModelConfig | None = None
) -> Activation:
    """E = time-branch embedding + frequency-branch embedding per patch."""
    cfg = _config(params, cfg)
    module = skeleton(cfg).patch_encoder
    out = functional_call(module, _scoped(params, "patch_encoder."), (grid.patches,))
    return Activation(out, "patch")


def _positional(
    embeddings: Activation, params: "ParameterSet", cfg: ModelConfig
) -> Activation:
    x, unbatched = _as_batch(embeddings.embeddings)
    module = skeleton(cfg).positional
    out = functional_call(module, _scoped(params, "positional."), (x,))
    return Activation(out.squeeze(0) if unbatched else out, "positional")


def acpe(
    embeddings: Activation, params: "ParameterSet", cfg: ModelConfig | None = None
) -> Activation:
    """E^o = E + depthwise asymmetric convolution of E over the grid."""
    cfg = _config(params, cfg)
    if cfg.pe_variant != "acpe":
        raise ConfigError(f"acpe() called for pe_variant={cfg.pe_variant!r}")
    return _positional(embeddings, params, cfg)


def pe_variant_forward(
    embeddings: Activation, params: "ParameterSet", cfg: ModelConfig | None = None
) -> Activation:
    """Ablation encodings: ``none``, ``ape`` (learned table) or ``cpe`` (square)."""
    cfg = _config(params, cfg)
    if cfg.pe_variant == "acpe":
        raise ConfigError("Use acpe() for the asymmetric positional encoding")
    return _positional(embeddings, params, cfg)


def _block(
    embeddings: Activation,
    layer: int,
    params: "ParameterSet",
    cfg: ModelConfig,
    training: bool,
) -> Activation:
    if not 0 <= layer < cfg.n_layers:
        raise ConfigError(f"Layer {layer} outside [0, {cfg.n_layers})")
    module = skeleton(cfg).blocks[layer]
    module.train(training)
    x, unbatched = _as_batch(embeddings.embeddings)
    out, weights = functional_call(
        module, _scoped(params, f"blocks.{layer}."), (x,), {"trace": True}
    )
    if unbatched:
        out = out.squeeze(0)
        weights = {axis: w.squeeze(0) for axis, w in weights.items()}
    return Activation(out, f"block{layer}", [weights])


def criss_cross_block(
    embeddings: Activation,
    layer: int,
    params: "ParameterSet",
    cfg: ModelConfig | None = None,
    training: bool = False,
) -> Activation:
    cfg = _config(params, cfg)
    if cfg.attention_variant != "criss_cross":
        raise ConfigError(f"criss_cross_block() called for {cfg.attention_variant!r}")
    return _block(embeddings, layer, params, cfg, training)


def variant_block(
    embeddings: Activation,
    layer: int,
    params: "ParameterSet",
    cfg: ModelConfig | None = None,
    training: bool = False,
) -> Activation:
    cfg = _config(params, cfg)
    if cfg.attention_variant not in ("full", "axial"):
        raise ConfigError(f"variant_block() called for {cfg.attention_variant!r}")
    return _block(embeddings, layer, params, cfg, training)


def encoder_forward(
    grid: PatchGrid,
    params: "ParameterSet",
    cfg: ModelConfig | None = None,
    trace: bool = False,
    training: bool = False,
) -> Activation:
    """Patch encoding, positional encoding and every block: E^r ``[..., C, n, d]``."""
    cfg = _config(params, cfg)
    module = skeleton(cfg)
    module.train(training)
    return functional_call(
        module, params.encoder_tensors(), (grid.patches,), {"trace": trace}
    )


def reconstruct(
    embeddings: Activation | torch.Tensor, params: "ParameterSet"
) -> torch.Tensor:
    """Per-patch linear map ``d -> t``."""
    x = embeddings.embeddings if isinstance(embeddings, Activation) else embeddings
    return F.linear(x, params.tensors["head.weight"], params.tensors["head.bias"])

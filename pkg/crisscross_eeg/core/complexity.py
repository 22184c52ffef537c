"""Analytic parameter and FLOP accounting.

Conventions: one multiply-add is 2 FLOPs; a normalization costs 5 FLOPs per
element, GELU 4, softmax 3 plus 1 for the logit scale. The real FFT is
charged ``2.5 * t * log2(t)``. Counts are per sample.
"""

import math
from dataclasses import dataclass, field, replace

import pandas as pd

from crisscross_eeg.core.model import ATTENTION_VARIANTS, ModelConfig, head_axes_for

NORM_FLOPS = 5
GELU_FLOPS = 4
SOFTMAX_FLOPS = 4

COMPONENTS = (
    "patch_encoder",
    "positional",
    "norms",
    "projections",
    "qk_norm",
    "spatial_scores",
    "temporal_scores",
    "full_scores",
    "ffn",
    "residual",
    "head",
)


@dataclass
class FlopBreakdown:
    """FLOPs per component for one config and grid size."""

    variant: str
    channels: int
    n_patches: int
    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def attention_scores(self) -> int:
        scores = ("spatial_scores", "temporal_scores", "full_scores")
        return sum(self.components[k] for k in scores)

    def as_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "component": list(self.components),
                "flops": list(self.components.values()),
            }
        )
        frame["share"] = frame["flops"] / max(self.total, 1)
        return frame


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Element counts per component, enumerated from the architecture."""
    d, t, dk = cfg.d, cfg.patch_len, cfg.dk
    conv = cfg.conv_spec
    conv_params = sum(
        c_in * c_out * k + c_out
        for c_in, c_out, k in zip(conv.in_channels, conv.out_channels, conv.kernel)
    )
    norm_params = sum(2 * c_out for c_out in conv.out_channels)
    if cfg.pe_variant == "acpe":
        positional = d * cfg.acpe_kernel[0] * cfg.acpe_kernel[1] + d
    elif cfg.pe_variant == "cpe":
        positional = d * cfg.cpe_kernel**2 + d
    elif cfg.pe_variant == "ape":
        positional = cfg.ape_grid[0] * cfg.ape_grid[1] * d
    else:
        positional = 0
    per_layer_attention = 4 * (d * d + d) + 2 * dk
    per_layer_norms = 2 * 2 * d
    per_layer_ffn = d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d
    return {
        "conv": conv_params,
        "norm": norm_params + cfg.n_layers * per_layer_norms,
        "frequency": (t // 2 + 1) * d + d,
        "positional": positional,
        "attention": cfg.n_layers * per_layer_attention,
        "ffn": cfg.n_layers * per_layer_ffn,
        "head": d * t + t,
        "token": t if cfg.learnable_token else 0,
    }


def count_params(cfg: ModelConfig) -> int:
    """Learnable encoder elements (task heads excluded)."""
    return sum(param_breakdown(cfg).values())


def _patch_encoder_flops(cfg: ModelConfig) -> int:
    conv = cfg.conv_spec
    flops = 0
    for c_in, c_out, k, length in zip(
        conv.in_channels, conv.out_channels, conv.kernel, conv.lengths(cfg.patch_len)
    ):
        flops += 2 * c_in * c_out * k * length + c_out * length
        flops += (NORM_FLOPS + GELU_FLOPS) * c_out * length
    t, bins = cfg.patch_len, cfg.patch_len // 2 + 1
    flops += round(2.5 * t * math.log2(t)) + 4 * bins
    flops += 2 * bins * cfg.d + cfg.d
    return flops + cfg.d


def _score_flops(axis: str, dk: int, channels: int, n_patches: int) -> int:
    """One head: logits, softmax and the weighted value sum."""
    if axis == "spatial":
        pairs = n_patches * channels**2
    elif axis == "temporal":
        pairs = channels * n_patches**2
    else:
        pairs = (channels * n_patches) ** 2
    return 2 * (2 * dk * pairs) + SOFTMAX_FLOPS * pairs


def count_flops(cfg: ModelConfig, channels: int, n_patches: int) -> FlopBreakdown:
    """FLOPs of one forward pass through encoder and reconstruction head."""
    d, tokens = cfg.d, channels * n_patches
    c = dict.fromkeys(COMPONENTS, 0)
    c["patch_encoder"] = tokens * _patch_encoder_flops(cfg)
    if cfg.pe_variant in ("acpe", "cpe"):
        if cfg.pe_variant == "acpe":
            k_s, k_t = cfg.acpe_kernel
        else:
            k_s = k_t = cfg.cpe_kernel
        c["positional"] = tokens * d * (2 * k_s * k_t + 2)
    elif cfg.pe_variant == "ape":
        c["positional"] = tokens * d

    for layer in range(cfg.n_layers):
        c["norms"] += 2 * NORM_FLOPS * tokens * d
        c["projections"] += 4 * (2 * tokens * d * d + tokens * d)
        c["qk_norm"] += 2 * NORM_FLOPS * tokens * d
        for axis in head_axes_for(layer, cfg):
            c[f"{axis}_scores"] += _score_flops(axis, cfg.dk, channels, n_patches)
        c["ffn"] += (
            2 * tokens * d * cfg.ffn_dim * 2
            + tokens * (cfg.ffn_dim + d)
            + GELU_FLOPS * tokens * cfg.ffn_dim
        )
        c["residual"] += 2 * tokens * d
    c["head"] = 2 * tokens * d * cfg.patch_len + tokens * cfg.patch_len
    return FlopBreakdown(cfg.attention_variant, channels, n_patches, c)


def compare_variants(cfg: ModelConfig, channels: int, n_patches: int) -> pd.DataFrame:
    """One row per attention variant: total FLOPs, score FLOPs and parameters."""
    rows = []
    for variant in ATTENTION_VARIANTS:
        variant_cfg = replace(cfg, attention_variant=variant)
        flops = count_flops(variant_cfg, channels, n_patches)
        rows.append(
            {
                "variant": variant,
                "total_flops": flops.total,
                "score_flops": flops.attention_scores,
                "params": count_params(variant_cfg),
            }
        )
    frame = pd.DataFrame(rows)
    full_total = frame.loc[frame["variant"] == "full", "total_flops"].iloc[0]
    frame["ratio_to_full"] = frame["total_flops"] / full_total
    return frame

"""Stripe attention over a (channel, time) patch grid.

A *spatial* head attends among the C patches that share a time index, a
*temporal* head among the n patches of one channel, and a *full* head among
all C*n patches. Criss-cross attention runs spatial and temporal heads side
by side in one layer and concatenates them.
"""

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from crisscross_eeg.core.errors import ConfigError, ShapeError

HEAD_AXES = ("spatial", "temporal", "full")


def stripe_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, axis: str
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention restricted to one stripe direction.

    Args:
        q, k, v: ``[B, h, C, n, dk]``
        axis: ``spatial``, ``temporal`` or ``full``

    Returns:
        Output ``[B, h, C, n, dk]`` and the attention weights: ``[B, h, n, C, C]``
        for spatial, ``[B, h, C, n, n]`` for temporal, ``[B, h, Cn, Cn]`` for full.
    """
    scale = q.shape[-1] ** -0.5
    if axis == "spatial":
        logits = torch.einsum("bhcnk,bhsnk->bhncs", q, k) * scale
        weights = logits.softmax(dim=-1)
        return torch.einsum("bhncs,bhsnk->bhcnk", weights, v), weights
    if axis == "temporal":
        logits = torch.einsum("bhcnk,bhcmk->bhcnm", q, k) * scale
        weights = logits.softmax(dim=-1)
        return torch.einsum("bhcnm,bhcmk->bhcnk", weights, v), weights
    if axis == "full":
        channels = q.shape[2]
        qf, kf, vf = (rearrange(x, "b h c n k -> b h (c n) k") for x in (q, k, v))
        weights = (torch.einsum("bhik,bhjk->bhij", qf, kf) * scale).softmax(dim=-1)
        out = torch.einsum("bhij,bhjk->bhik", weights, vf)
        return rearrange(out, "b h (c n) k -> b h c n k", c=channels), weights
    raise ConfigError(f"Unknown attention axis {axis!r}; use one of {HEAD_AXES}")


def _single_head(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    axis: str,
    q_scale: torch.Tensor | None,
    k_scale: torch.Tensor | None,
) -> torch.Tensor:
    unbatched = x.ndim == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ShapeError(f"Expected [C, n, d] or [B, C, n, d], got {tuple(x.shape)}")
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    dk = q.shape[-1]
    if q_scale is not None:
        q = F.layer_norm(q, (dk,), weight=q_scale)
    if k_scale is not None:
        k = F.layer_norm(k, (dk,), weight=k_scale)
    out, _ = stripe_attention(q.unsqueeze(1), k.unsqueeze(1), v.unsqueeze(1), axis)
    out = out.squeeze(1)
    return out.squeeze(0) if unbatched else out


def s_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    q_scale: torch.Tensor | None = None,
    k_scale: torch.Tensor | None = None,
) -> torch.Tensor:
    """One spatial head on ``[C, n, d_in]`` with ``[d_in, dk]`` projections.

    Passing ``q_scale``/``k_scale`` layer-normalizes queries and keys first.
    """
    return _single_head(x, w_q, w_k, w_v, "spatial", q_scale, k_scale)


def t_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    q_scale: torch.Tensor | None = None,
    k_scale: torch.Tensor | None = None,
) -> torch.Tensor:
    """One temporal head; the mirror image of `s_attention`."""
    return _single_head(x, w_q, w_k, w_v, "temporal", q_scale, k_scale)


class GridAttention(nn.Module):
    """Multi-head attention whose heads each follow one stripe axis.

    ``head_axes[i]`` names the axis of head ``i``. Queries and keys are
    layer-normalized per head over ``dk`` with a learnable scale shared by
    all heads of the layer.
    """

    def __init__(self, d: int, head_axes: tuple[str, ...]):
        super().__init__()
        n_heads = len(head_axes)
        if n_heads == 0 or d % n_heads:
            raise ConfigError(f"d={d} is not divisible by {n_heads} heads")
        unknown = set(head_axes) - set(HEAD_AXES)
        if unknown:
            raise ConfigError(f"Unknown attention axes {sorted(unknown)}")
        self.head_axes = tuple(head_axes)
        self.n_heads = n_heads
        self.dk = d // n_heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.q_norm = nn.LayerNorm(self.dk, bias=False)
        self.k_norm = nn.LayerNorm(self.dk, bias=False)

    def head_groups(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {}
        for i, axis in enumerate(self.head_axes):
            groups.setdefault(axis, []).append(i)
        return groups

    def forward(
        self, x: torch.Tensor, trace: bool = False
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor] | None]:
        """Attend over ``[B, C, n, d]``; with ``trace`` also return weights per axis."""
        split = "b c n (h k) -> b h c n k"
        q = self.q_norm(rearrange(self.q_proj(x), split, h=self.n_heads))
        k = self.k_norm(rearrange(self.k_proj(x), split, h=self.n_heads))
        v = rearrange(self.v_proj(x), split, h=self.n_heads)

        parts, order = [], []
        weights: dict[str, torch.Tensor] = {}
        for axis, heads in self.head_groups().items():
            index = torch.tensor(heads, device=x.device)
            out, w = stripe_attention(
                q.index_select(1, index),
                k.index_select(1, index),
                v.index_select(1, index),
                axis,
            )
            parts.append(out)
            order += heads
            if trace:
                weights[axis] = w.detach()
        merged = torch.cat(parts, dim=1)
        if order != sorted(order):
            inverse = torch.tensor(order, device=x.device).argsort()
            merged = merged.index_select(1, inverse)
        out = self.out_proj(rearrange(merged, "b h c n k -> b c n (h k)"))
        return out, (weights if trace else None)

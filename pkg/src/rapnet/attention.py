"""Scaled dot-product attention and its spatial / channel variants."""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
from torch import Tensor, nn

from .errors import InvalidMaskError, ShapeError

Projection = Optional[Callable[[Tensor], Tensor]]


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """Attention over token matrices.

    Args:
        q: queries ``[B, Lq, D]``.
        k: keys ``[B, Lk, D]``.
        v: values ``[B, Lk, Dv]``.
        mask: optional boolean ``[B, Lk]``; ``False`` hides a key.
        return_weights: also return the ``[B, Lq, Lk]`` softmax weights.

    The logits are divided by the square root of the key width ``D``.
    Hidden keys receive a weight of exactly zero.
    """
    if q.dim() != 3 or k.dim() != 3 or v.dim() != 3:
        raise ShapeError(
            f"expected rank-3 q/k/v, got {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}"
        )
    if q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0]:
        raise ShapeError("q, k and v must share the batch dimension")
    if q.shape[2] != k.shape[2]:
        raise ShapeError(f"q width {q.shape[2]} != k width {k.shape[2]}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"k has {k.shape[1]} tokens but v has {v.shape[1]}")
    if q.shape[1] < 1 or k.shape[1] < 1 or q.shape[2] < 1:
        raise ShapeError("token and feature dimensions must be >= 1")

    logits = torch.matmul(q, k.transpose(1, 2)) / math.sqrt(k.shape[2])
    if mask is not None:
        if mask.shape != (k.shape[0], k.shape[1]):
            raise ShapeError(f"mask shape {tuple(mask.shape)} != {(k.shape[0], k.shape[1])}")
        mask = mask.to(torch.bool)
        if not bool(mask.any(dim=1).all()):
            raise InvalidMaskError("every key is masked for at least one batch element")
        logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
    # torch.softmax subtracts the row max internally
    weights = torch.softmax(logits, dim=-1)
    out = torch.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def spatial_attention(
    f: Tensor,
    q_proj: Projection = None,
    k_proj: Projection = None,
    v_proj: Projection = None,
) -> Tensor:
    """Attention between the ``H*W`` positions of a feature map ``[B, C, H, W]``."""
    if f.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W], got {tuple(f.shape)}")
    b, c, h, w = f.shape
    q = q_proj(f) if q_proj is not None else f
    k = k_proj(f) if k_proj is not None else f
    v = v_proj(f) if v_proj is not None else f

    def tokens(t: Tensor) -> Tensor:
        return t.reshape(b, t.shape[1], h * w).transpose(1, 2)

    out = scaled_dot_attention(tokens(q), tokens(k), tokens(v))
    return out.transpose(1, 2).reshape(b, v.shape[1], h, w)


def channel_attention(
    query_map: Tensor,
    key_value_map: Tensor,
    mask: Optional[Tensor] = None,
    q_proj: Projection = None,
    k_proj: Projection = None,
    v_proj: Projection = None,
    return_weights: bool = False,
):
    """Attention between channels, each channel flattened into an ``H*W`` token.

    ``query_map`` is ``[B, Cq, H, W]`` and ``key_value_map`` is ``[B, Ckv, H, W]``;
    the channel counts may differ. ``mask`` is boolean ``[B, Ckv]``.
    """
    if query_map.dim() != 4 or key_value_map.dim() != 4:
        raise ShapeError("channel_attention expects rank-4 maps")
    b, cq, h, w = query_map.shape
    if key_value_map.shape[0] != b or key_value_map.shape[2:] != query_map.shape[2:]:
        raise ShapeError(
            f"query {tuple(query_map.shape)} and key/value {tuple(key_value_map.shape)} "
            "must share batch and spatial size"
        )
    q = q_proj(query_map) if q_proj is not None else query_map
    k = k_proj(key_value_map) if k_proj is not None else key_value_map
    v = v_proj(key_value_map) if v_proj is not None else key_value_map
    out, weights = scaled_dot_attention(
        q.reshape(b, q.shape[1], h * w),
        k.reshape(b, k.shape[1], h * w),
        v.reshape(b, v.shape[1], h * w),
        mask=mask,
        return_weights=True,
    )
    out = out.reshape(b, q.shape[1], h, w)
    if return_weights:
        return out, weights
    return out


class SpatialAttention(nn.Module):
    """Position attention with Q, K, V produced by 1x1 convolutions."""

    def __init__(self, channels: int):
        super().__init__()
        self.query = Conv1x1(channels, channels)
        self.key = Conv1x1(channels, channels, bias=False)
        self.value = Conv1x1(channels, channels)

    def forward(self, f: Tensor) -> Tensor:
        return spatial_attention(f, self.query, self.key, self.value)


class ChannelAttention(nn.Module):
    """Channel attention with optional 1x1 projections of query and key/value maps."""

    def __init__(self, query_channels: int, kv_channels: int, projections: bool = True):
        super().__init__()
        if projections:
            self.query = Conv1x1(query_channels, query_channels)
            self.key = Conv1x1(kv_channels, kv_channels, bias=False)
            self.value = Conv1x1(kv_channels, kv_channels)
        else:
            self.query = self.key = self.value = None

    def forward(self, query_map: Tensor, key_value_map: Tensor, mask=None) -> Tensor:
        return channel_attention(
            query_map, key_value_map, mask, self.query, self.key, self.value
        )


class Conv1x1(nn.Conv2d):
    """1x1 convolution evaluated as a channel matmul.

    Same parameters as ``nn.Conv2d(cin, cout, 1)``; avoids the slow mkldnn
    backward for few-channel inputs.
    """

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True):
        super().__init__(in_channels, out_channels, 1, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        out = torch.einsum("oc,bchw->bohw", self.weight[:, :, 0, 0], x)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out

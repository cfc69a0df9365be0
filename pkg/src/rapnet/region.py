"""Region Attention Block: soft region partition, cross-region attention, reintegration."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import Tensor, nn

from .attention import Conv1x1, scaled_dot_attention
from .errors import NumericError, ShapeError


def classify(f: Tensor, classifier: nn.Module) -> Tensor:
    """Per-pixel soft membership ``[B, N, H, W]``: convolution then softmax over regions."""
    if f.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W], got {tuple(f.shape)}")
    return torch.softmax(classifier(f), dim=1)


def split(p: Tensor, q: Tensor) -> Tensor:
    """Mask ``p [B, C, H, W]`` by every region of ``q [B, N, H, W]``.

    Returns the region stack ``[B, N, C, H, W]`` with ``stack[:, n] = p * q[:, n]``.
    """
    if p.dim() != 4 or q.dim() != 4:
        raise ShapeError("split expects rank-4 feature map and assignment")
    if p.shape[0] != q.shape[0] or p.shape[2:] != q.shape[2:]:
        raise ShapeError(f"feature map {tuple(p.shape)} and assignment {tuple(q.shape)} disagree")
    return p.unsqueeze(1) * q.unsqueeze(2)


def integrate(p: Tensor, q: Tensor) -> Tensor:
    """Collapse a region stack ``[B, N, C, H, W]`` weighted by ``q [B, N, H, W]``."""
    if p.dim() != 5 or q.dim() != 4:
        raise ShapeError("integrate expects a rank-5 stack and rank-4 assignment")
    if p.shape[:2] != q.shape[:2] or p.shape[3:] != q.shape[2:]:
        raise ShapeError(f"stack {tuple(p.shape)} and assignment {tuple(q.shape)} disagree")
    return (p * q.unsqueeze(2)).sum(dim=1)


def reduced_size(size: int, reduction: int) -> int:
    return -(-size // reduction)


class RABOutput(NamedTuple):
    out: Tensor
    assignment: Tensor
    weights: Tensor


class RegionAttentionBlock(nn.Module):
    """Region attention over ``n_regions`` learned soft regions.

    The query/key path runs every region copy through a stride-``reduction``
    convolution to ``ceil(C / 2)`` channels; the value path keeps full size.
    The integrated attention output is added to the input and normalized
    per sample over ``(C, H, W)`` with a per-channel affine.

    Both value convolutions are 1x1, so the value of region ``n`` is
    ``A(f) * q_n + beta`` for a pointwise linear ``A``. With ``fused_values``
    the attend-then-integrate step collapses to ``A(f) * s + beta`` with
    ``s = sum_{n,m} q_n w_nm q_m``, which never materializes the value stack.
    """

    def __init__(
        self,
        channels: int,
        n_regions: int = 64,
        reduction: int = 2,
        classifier_kernel: int = 3,
        eps: float = 1e-5,
        fused_values: bool = True,
        name: str = "rab",
    ):
        super().__init__()
        if n_regions < 1 or reduction < 1 or channels < 1:
            raise ValueError("channels, n_regions and reduction must be >= 1")
        self.channels = channels
        self.n_regions = n_regions
        self.reduction = reduction
        self.reduced_channels = max(1, math.ceil(channels / 2))
        self.fused_values = fused_values
        self.name = name
        self.classifier = nn.Conv2d(
            channels, n_regions, classifier_kernel, padding=classifier_kernel // 2
        )
        self.reduce_qk = nn.Conv2d(
            channels,
            self.reduced_channels,
            2 * reduction - 1,
            stride=reduction,
            padding=reduction - 1,
        )
        self.value = Conv1x1(channels, channels)
        self.proj_q = Conv1x1(self.reduced_channels, self.reduced_channels)
        self.proj_k = Conv1x1(self.reduced_channels, self.reduced_channels, bias=False)
        self.proj_v = Conv1x1(channels, channels)
        self.norm = nn.GroupNorm(1, channels, eps=eps)

    def forward(self, f: Tensor) -> Tensor:
        return self.forward_detailed(f).out

    def forward_detailed(self, f: Tensor) -> RABOutput:
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: expected [B, {self.channels}, H, W], got {tuple(f.shape)}"
            )
        b, c, h, w = f.shape
        n = self.n_regions
        assignment = classify(f, self.classifier)
        if self.fused_values:
            f_qk = self._reduce_regions_fused(f, assignment)
        else:
            regions = split(f, assignment).reshape(b * n, c, h, w)
            f_qk = self.reduce_qk(regions)
        q = self.proj_q(f_qk).reshape(b, n, -1)
        k = self.proj_k(f_qk).reshape(b, n, -1)
        if self.fused_values:
            # attending over the region masks themselves gives sum_m w_nm q_m
            mixed, weights = scaled_dot_attention(
                q, k, assignment.reshape(b, n, h * w), return_weights=True
            )
            linear = nn.functional.conv2d(
                nn.functional.conv2d(f, self.value.weight), self.proj_v.weight
            )
            offset = self.proj_v.weight[:, :, 0, 0] @ self.value.bias + self.proj_v.bias
            coverage = (assignment * mixed.reshape(b, n, h, w)).sum(dim=1, keepdim=True)
            integrated = linear * coverage + offset.reshape(1, c, 1, 1)
        else:
            v = self.proj_v(self.value(regions)).reshape(b, n, -1)
            attended, weights = scaled_dot_attention(q, k, v, return_weights=True)
            integrated = integrate(attended.reshape(b, n, c, h, w), assignment)
        out = self.norm(f + integrated)
        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite activation in region attention block '{self.name}'")
        return RABOutput(out, assignment, weights)


    def _reduce_regions_fused(self, f: Tensor, assignment: Tensor) -> Tensor:
        """``reduce_qk(split(f, assignment))`` without building the region stack.

        Each output pixel of the strided convolution is a sum over kernel taps
        of ``W_tap f * q_n`` at the tap position, so the taps of ``f`` and of
        the assignment can be unfolded once and contracted per region.
        """
        conv = self.reduce_qk
        b, c, h, w = f.shape
        n = assignment.shape[1]
        kh, kw = conv.kernel_size
        taps = kh * kw
        unfold = dict(kernel_size=conv.kernel_size, padding=conv.padding, stride=conv.stride)
        f_taps = nn.functional.unfold(f, **unfold).reshape(b, c, taps, -1)
        q_taps = nn.functional.unfold(assignment, **unfold).reshape(b, n, taps, -1)
        weight = conv.weight.reshape(conv.out_channels, c, taps)
        per_tap = torch.einsum("kct,bctl->bktl", weight, f_taps)
        # batched [N, taps] @ [taps, K] per output pixel
        out = torch.matmul(
            q_taps.permute(0, 3, 1, 2).contiguous(), per_tap.permute(0, 3, 2, 1).contiguous()
        ).permute(0, 2, 3, 1)
        out = out + conv.bias.reshape(1, 1, -1, 1)
        oh = (h + 2 * conv.padding[0] - kh) // conv.stride[0] + 1
        ow = (w + 2 * conv.padding[1] - kw) // conv.stride[1] + 1
        return out.reshape(b * n, conv.out_channels, oh, ow)


def rab_forward(f: Tensor, block: RegionAttentionBlock) -> Tensor:
    return block(f)

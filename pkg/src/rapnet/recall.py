"""Recall attention: a bounded buffer of raw past inputs queried by the hidden state."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attention import Conv1x1, scaled_dot_attention
from .errors import BufferFullError, InvalidStateError, NumericError, ShapeError


@dataclass(frozen=True)
class LongMemory:
    """Fixed-capacity history ``[B, T_cap, C, H, W]``; slots past ``fill_count`` are zero."""

    data: Tensor
    fill_count: int = 0

    @classmethod
    def empty(cls, batch, capacity, channels, height, width, dtype=None, device=None):
        data = torch.zeros(batch, capacity, channels, height, width, dtype=dtype, device=device)
        return cls(data, 0)

    @property
    def capacity(self) -> int:
        return self.data.shape[1]

    def slot_mask(self) -> Tensor:
        """Boolean ``[T_cap]``, true for filled slots."""
        return torch.arange(self.capacity, device=self.data.device) < self.fill_count

    def token_mask(self) -> Tensor:
        """Boolean ``[B, T_cap * C]`` over channel tokens, slot-major."""
        b, _, c = self.data.shape[:3]
        return self.slot_mask().repeat_interleave(c).unsqueeze(0).expand(b, -1)


def push_frame(mem: LongMemory, x: Tensor) -> LongMemory:
    """Write ``x [B, C, H, W]`` into the next free slot. The input memory is not modified."""
    if mem.fill_count >= mem.capacity:
        raise BufferFullError(f"long memory is full ({mem.capacity} slots)")
    if x.shape != mem.data.shape[:1] + mem.data.shape[2:]:
        raise ShapeError(
            f"frame {tuple(x.shape)} does not fit memory slots {tuple(mem.data.shape)}"
        )
    data = mem.data.clone()
    data[:, mem.fill_count] = x
    return LongMemory(data, mem.fill_count + 1)


class RecallAttention(nn.Module):
    """Convolve every memory slot with a shared kernel, then let the hidden state attend to it.

    Keys and values are the ``T_cap * C`` channel maps of the convolved memory;
    unfilled slots are masked out of the softmax. The attended map is added
    back onto the hidden state when ``residual`` is set.
    """

    def __init__(
        self,
        hidden_channels: int,
        memory_channels: int,
        kernel_size: int = 5,
        projections: bool = True,
        residual: bool = True,
        name: str = "ram",
    ):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.memory_channels = memory_channels
        self.residual = residual
        self.name = name
        self.extract = nn.Conv2d(
            memory_channels, memory_channels, kernel_size, padding=kernel_size // 2
        )
        if projections:
            self.query = Conv1x1(hidden_channels, hidden_channels)
            self.key = Conv1x1(memory_channels, memory_channels, bias=False)
            self.value = Conv1x1(memory_channels, memory_channels)
        else:
            self.query = self.key = self.value = None

    def convolve_memory(self, mem: LongMemory) -> LongMemory:
        b, t, c, h, w = mem.data.shape
        if c != self.memory_channels:
            raise ShapeError(f"{self.name}: memory has {c} channels, expected {self.memory_channels}")
        data = self.extract(mem.data.reshape(b * t, c, h, w)).reshape(b, t, c, h, w)
        keep = mem.slot_mask().to(data.dtype).reshape(1, t, 1, 1, 1)
        return LongMemory(data * keep, mem.fill_count)

    def forward(self, h: Tensor, mem: LongMemory, return_weights: bool = False):
        if mem.fill_count < 1:
            raise InvalidStateError(f"{self.name}: recall attention needs at least one stored frame")
        if h.dim() != 4 or h.shape[0] != mem.data.shape[0] or h.shape[2:] != mem.data.shape[3:]:
            raise ShapeError(
                f"{self.name}: hidden {tuple(h.shape)} incompatible with memory {tuple(mem.data.shape)}"
            )
        recalled = self.convolve_memory(mem)
        b, t, c, hh, ww = recalled.data.shape
        folded = recalled.data.reshape(b * t, c, hh, ww)
        keys = self.key(folded) if self.key is not None else folded
        values = self.value(folded) if self.value is not None else folded
        query = self.query(h) if self.query is not None else h
        # channel tokens: one H*W vector per (slot, channel), slot-major
        attended, weights = scaled_dot_attention(
            query.reshape(b, self.hidden_channels, hh * ww),
            keys.reshape(b, t * c, hh * ww),
            values.reshape(b, t * c, hh * ww),
            mask=mem.token_mask(),
            return_weights=True,
        )
        attended = attended.reshape(b, self.hidden_channels, hh, ww)
        out = h + attended if self.residual else attended
        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite activation in recall attention '{self.name}'")
        if return_weights:
            return out, recalled, weights
        return out, recalled


def ram_forward(h: Tensor, mem: LongMemory, block: RecallAttention):
    """Returns ``(new_hidden, convolved_memory)``."""
    return block(h, mem)

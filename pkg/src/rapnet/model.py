"""Stacked RAP cells with zig-zag spatial memory, the forecast loop and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch import Tensor, nn

from ._io import atomic_write_bytes
from .attention import Conv1x1
from .cell import AblationFlags, RAPCell
from .errors import BadMagicError, DataError, ShapeError, TruncatedFileError
from .recall import LongMemory, push_frame

CHECKPOINT_MAGIC = b"RAPNETCKPT1\n"


@dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 64
    n_regions: int = 64
    t_in: int = 5
    t_total: int = 15
    height: int = 32
    width: int = 32
    frame_channels: int = 1
    kernel_size: int = 5
    reduction: int = 2
    flags: AblationFlags = field(default_factory=AblationFlags)
    strict_fusion: bool = False
    ram_residual: bool = True

    def __post_init__(self):
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.layers < 1:
            problems.append("layers must be >= 1")
        if not 1 <= self.t_in < self.t_total:
            problems.append("t_in must satisfy 1 <= t_in < t_total")
        for name in ("hidden", "n_regions", "frame_channels", "kernel_size", "reduction"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.kernel_size % 2 == 0:
            problems.append("kernel_size must be odd")
        if min(self.height, self.width) < self.reduction:
            problems.append("height and width must be >= reduction")
        if problems:
            raise DataError("invalid model config: " + "; ".join(problems))

    @property
    def memory_capacity(self) -> int:
        return self.t_total

    @property
    def n_forecast(self) -> int:
        return self.t_total - self.t_in

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RAPState:
    h: List[Tensor]
    c: List[Tensor]
    m: Tensor
    memories: List[LongMemory]


def init_state(cfg: ModelConfig, batch: int, dtype=torch.float32, device=None) -> RAPState:
    """All-zero recurrent state. ``memories[0]`` is the raw frame buffer;
    ``memories[l]`` holds the recalled memory layer ``l`` reads."""

    def zeros(ch):
        return torch.zeros(batch, ch, cfg.height, cfg.width, dtype=dtype, device=device)

    return RAPState(
        h=[zeros(cfg.hidden) for _ in range(cfg.layers)],
        c=[zeros(cfg.hidden) for _ in range(cfg.layers)],
        m=zeros(cfg.hidden),
        memories=[
            LongMemory.empty(
                batch, cfg.memory_capacity, cfg.frame_channels, cfg.height, cfg.width, dtype, device
            )
            for _ in range(cfg.layers)
        ],
    )


class RAPNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.cells = nn.ModuleList(
            RAPCell(
                cfg.frame_channels if layer == 0 else cfg.hidden,
                cfg.hidden,
                memory_channels=cfg.frame_channels,
                n_regions=cfg.n_regions,
                kernel_size=cfg.kernel_size,
                flags=cfg.flags,
                strict_fusion=cfg.strict_fusion,
                reduction=cfg.reduction,
                ram_residual=cfg.ram_residual,
                name=f"cells.{layer}",
            )
            for layer in range(cfg.layers)
        )
        self.head = Conv1x1(cfg.hidden, cfg.frame_channels)

    def forward(self, frames: Tensor, teacher_mask: Optional[Tensor] = None, state: Optional[RAPState] = None) -> Tensor:
        """Run the sequence and return every generated frame ``[B, T_total - 1, C, H, W]``.

        ``frames`` holds either the full ``T_total`` sequence (training) or just
        the ``t_in`` observed frames (inference). Steps before ``t_in`` always
        read ground truth; later steps read ground truth where ``teacher_mask``
        is true and the previous prediction otherwise.
        """
        cfg = self.cfg
        self._check_frames(frames, teacher_mask)
        b = frames.shape[0]
        if state is None:
            state = init_state(cfg, b, frames.dtype, frames.device)
        h, c, m = list(state.h), list(state.c), state.m
        memories = list(state.memories)
        if teacher_mask is not None:
            teacher_mask = teacher_mask.to(torch.bool, copy=False).to(frames.device)
            if teacher_mask.dim() == 1:
                teacher_mask = teacher_mask.unsqueeze(0).expand(b, -1)

        generated = []
        prev = None
        for tau in range(cfg.t_total - 1):
            if tau < cfg.t_in:
                x = frames[:, tau]
            elif teacher_mask is not None:
                x = torch.where(teacher_mask[:, tau].reshape(b, 1, 1, 1), frames[:, tau], prev)
            else:
                x = prev
            memories[0] = push_frame(memories[0], x)
            inp, recalled = x, memories[0]
            for layer, cell in enumerate(self.cells):
                out = cell(inp, h[layer], c[layer], m, recalled)
                h[layer], c[layer], m, recalled = out
                if layer + 1 < cfg.layers:
                    memories[layer + 1] = recalled
                inp = out.h
            prev = self.head(h[-1])
            generated.append(prev)
        return torch.stack(generated, dim=1)

    @torch.no_grad()
    def predict(self, observed: Tensor) -> Tensor:
        """Forecast ``[B, t_total - t_in, C, H, W]`` clamped to ``[0, 1]``."""
        cfg = self.cfg
        out = self.forward(observed[:, : cfg.t_in])
        return out[:, cfg.t_in - 1 :].clamp(0.0, 1.0)

    def _check_frames(self, frames: Tensor, teacher_mask) -> None:
        cfg = self.cfg
        expected = (cfg.frame_channels, cfg.height, cfg.width)
        if frames.dim() != 5 or tuple(frames.shape[2:]) != expected:
            raise ShapeError(f"frames must be [B, T, {expected[0]}, {expected[1]}, {expected[2]}], got {tuple(frames.shape)}")
        t = frames.shape[1]
        if teacher_mask is not None and t != cfg.t_total:
            raise DataError(f"teacher forcing needs all {cfg.t_total} frames, got {t}")
        if t not in (cfg.t_in, cfg.t_total):
            raise DataError(f"expected {cfg.t_in} (inference) or {cfg.t_total} (training) frames, got {t}")
        if teacher_mask is not None and teacher_mask.shape[-1] != cfg.t_total - 1:
            raise ShapeError(f"teacher_mask must have {cfg.t_total - 1} steps")
        eps = 1e-6
        if frames.numel() and (frames.max() > 1 + eps or frames.min() < -eps):
            raise DataError("frames must be normalized to [0, 1]")


def forward_sequence(frames, model: RAPNet, teacher_mask=None) -> Tensor:
    return model(frames, teacher_mask)


def parameter_groups(names) -> set:
    """Map parameter names to their blocks, e.g. ``cells.0.rab_x`` or ``cells.1.gates``."""
    groups = set()
    for name in names:
        parts = name.split(".")
        if parts[0] == "cells":
            block = parts[2] if parts[2] in ("rab_x", "rab_h", "ram") else "gates"
            groups.add(f"cells.{parts[1]}.{block}")
        else:
            groups.add(parts[0])
    return groups


def encode_checkpoint(model: RAPNet, meta: Optional[dict] = None) -> bytes:
    """Serialize config and parameters to the versioned binary checkpoint format.

    Layout: magic, little-endian u64 header length, JSON header, raw tensors.
    The output is byte-for-byte deterministic for identical parameters.
    """
    entries, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": model.cfg.to_dict(), "meta": meta or {}, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)


def save_checkpoint(path, model: RAPNet, meta: Optional[dict] = None) -> bytes:
    payload = encode_checkpoint(model, meta)
    atomic_write_bytes(path, payload)
    return payload


def read_checkpoint_header(path) -> dict:
    return _decode(Path(path).read_bytes())[0]


def load_checkpoint(path):
    """Returns ``(model, meta)``; parameters keep their stored dtype."""
    header, body = _decode(Path(path).read_bytes())
    cfg = ModelConfig.from_dict(header["config"])
    model = RAPNet(cfg)
    state = {}
    for e in header["tensors"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise TruncatedFileError(f"checkpoint tensor {e['name']} is truncated")
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    dtypes = {t.dtype for t in state.values() if t.is_floating_point()}
    if dtypes == {torch.float64}:
        model.double()
    model.load_state_dict(state, strict=True)
    return model, header["meta"]


def _decode(payload: bytes):
    n = len(CHECKPOINT_MAGIC)
    if payload[:n] != CHECKPOINT_MAGIC:
        raise BadMagicError("not a RAPNETCKPT1 checkpoint")
    if len(payload) < n + 8:
        raise TruncatedFileError("checkpoint header is truncated")
    (hlen,) = struct.unpack("<Q", payload[n : n + 8])
    start = n + 8
    if len(payload) < start + hlen:
        raise TruncatedFileError("checkpoint header is truncated")
    header = json.loads(payload[start : start + hlen].decode("utf-8"))
    return header, payload[start + hlen :]

"""One recurrent step of the region-attention predictive unit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn

from .attention import Conv1x1
from .errors import InvalidStateError, NumericError, ShapeError
from .recall import LongMemory, RecallAttention
from .region import RegionAttentionBlock


@dataclass(frozen=True)
class AblationFlags:
    rab_on_input: bool = True
    rab_on_hidden: bool = True
    ram_enabled: bool = True

    @classmethod
    def from_variant(cls, name: str) -> "AblationFlags":
        try:
            return cls(*VARIANTS[name])
        except KeyError:
            raise ValueError(f"unknown ablation variant {name!r}; choose from {sorted(VARIANTS)}")

    @property
    def variant(self) -> Optional[str]:
        key = (self.rab_on_input, self.rab_on_hidden, self.ram_enabled)
        for name, flags in VARIANTS.items():
            if flags == key:
                return name
        return None


# x: RAB on input only, h: RAB on hidden only, cell: both, full: both plus recall attention
VARIANTS = {
    "x": (True, False, False),
    "h": (False, True, False),
    "cell": (True, True, False),
    "full": (True, True, True),
}


class CellOutput(NamedTuple):
    h: Tensor
    c: Tensor
    m: Tensor
    memory: LongMemory


class RAPCell(nn.Module):
    """Spatiotemporal LSTM step with optional region attention and recall attention.

    Gate convolutions are stacked per source: ``conv_x`` yields
    ``(i, g, f, i', g', f', o)`` and carries all gate biases, ``conv_h`` yields
    ``(i, g, f, o)``, ``conv_m`` yields ``(i', g', f')`` and ``conv_o`` maps
    ``[c_out, m_out]`` onto the output gate.

    With ``strict_fusion`` the 1x1 fusion reads ``[x, m_out]`` instead of
    ``[c_out, m_out]``.
    """

    def __init__(
        self,
        in_channels: int,
        hidden_channels: int,
        memory_channels: int = 1,
        n_regions: int = 64,
        kernel_size: int = 5,
        flags: AblationFlags = AblationFlags(),
        strict_fusion: bool = False,
        reduction: int = 2,
        ram_residual: bool = True,
        check_numerics: bool = True,
        name: str = "cell",
    ):
        super().__init__()
        hid = hidden_channels
        pad = kernel_size // 2
        self.in_channels = in_channels
        self.hidden_channels = hid
        self.flags = flags
        self.strict_fusion = strict_fusion
        self.check_numerics = check_numerics
        self.name = name

        self.conv_x = nn.Conv2d(in_channels, 7 * hid, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(hid, 4 * hid, kernel_size, padding=pad, bias=False)
        self.conv_m = nn.Conv2d(hid, 3 * hid, kernel_size, padding=pad, bias=False)
        self.conv_o = nn.Conv2d(2 * hid, hid, kernel_size, padding=pad, bias=False)
        fuse_in = in_channels + hid if strict_fusion else 2 * hid
        self.fuse = Conv1x1(fuse_in, hid, bias=False)

        self.rab_x = (
            RegionAttentionBlock(in_channels, n_regions, reduction, name=f"{name}.rab_x")
            if flags.rab_on_input
            else None
        )
        self.rab_h = (
            RegionAttentionBlock(hid, n_regions, reduction, name=f"{name}.rab_h")
            if flags.rab_on_hidden
            else None
        )
        self.ram = (
            RecallAttention(hid, memory_channels, kernel_size, residual=ram_residual, name=f"{name}.ram")
            if flags.ram_enabled
            else None
        )

    def forward(self, x: Tensor, h_prev: Tensor, c_prev: Tensor, m_in: Tensor, memory: LongMemory) -> CellOutput:
        if x.shape[1] != self.in_channels or h_prev.shape[1] != self.hidden_channels:
            raise ShapeError(
                f"{self.name}: got input {tuple(x.shape)} / hidden {tuple(h_prev.shape)}, "
                f"expected {self.in_channels} / {self.hidden_channels} channels"
            )
        flags = self.flags
        missing = [
            n for n, on in (("rab_x", flags.rab_on_input), ("rab_h", flags.rab_on_hidden), ("ram", flags.ram_enabled))
            if on and getattr(self, n) is None
        ]
        if missing:
            raise InvalidStateError(f"{self.name}: flags enable {missing} but the cell was built without them")
        if flags.rab_on_input:
            x = self.rab_x(x)
        if flags.rab_on_hidden:
            h_prev = self.rab_h(h_prev)

        xi, xg, xf, xi2, xg2, xf2, xo = torch.split(self.conv_x(x), self.hidden_channels, dim=1)
        hi, hg, hf, ho = torch.split(self.conv_h(h_prev), self.hidden_channels, dim=1)
        mi, mg, mf = torch.split(self.conv_m(m_in), self.hidden_channels, dim=1)

        i = torch.sigmoid(xi + hi)
        g = torch.tanh(xg + hg)
        f = torch.sigmoid(xf + hf)
        i2 = torch.sigmoid(xi2 + mi)
        g2 = torch.tanh(xg2 + mg)
        f2 = torch.sigmoid(xf2 + mf)
        c = i * g + f * c_prev
        m = i2 * g2 + f2 * m_in
        o = torch.sigmoid(xo + ho + self.conv_o(torch.cat([c, m], dim=1)))
        fused = self.fuse(torch.cat([x, m] if self.strict_fusion else [c, m], dim=1))
        h = o * torch.tanh(fused)

        if self.check_numerics and not (
            torch.isfinite(h).all() and torch.isfinite(c).all() and torch.isfinite(m).all()
        ):
            gates = {"i": i, "g": g, "f": f, "i'": i2, "g'": g2, "f'": f2, "o": o}
            bad = next((k for k, v in gates.items() if not torch.isfinite(v).all()), "output")
            raise NumericError(f"{self.name}: non-finite value in gate {bad}")

        if flags.ram_enabled:
            h, memory = self.ram(h, memory)
        return CellOutput(h, c, m, memory)


def rap_cell_step(x, h_prev, c_prev, m_in, memory, cell: RAPCell) -> CellOutput:
    return cell(x, h_prev, c_prev, m_in, memory)

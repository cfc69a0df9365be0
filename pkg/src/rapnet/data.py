"""Radar sequence files, normalization, dataset splits and a synthetic echo generator."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .errors import BadMagicError, DataError, TruncatedFileError

RSEQ_MAGIC = b"RSEQ1\0"
_HEADER = struct.Struct("<8s4I")  # magic padded to 8 bytes, then count, T, H, W
HEADER_SIZE = _HEADER.size  # 24
_MAX_DIM = 2**32 - 1


@dataclass
class RadarSequence:
    frames: np.ndarray  # uint8 [T, H, W]
    minutes_per_frame: float = 6.0
    km_per_pixel: float = 1.0


def encode_rseq(sequences) -> bytes:
    arr = np.asarray(sequences)
    if arr.ndim != 4:
        raise DataError(f"expected [count, T, H, W] sequences, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))):
            raise DataError("pixels must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    if any(d > _MAX_DIM for d in arr.shape):
        raise DataError(f"dimension overflow in shape {arr.shape}")
    header = _HEADER.pack(RSEQ_MAGIC, *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_rseq(payload: bytes) -> np.ndarray:
    if len(payload) < HEADER_SIZE:
        if payload[: len(RSEQ_MAGIC)] != RSEQ_MAGIC[: len(payload)]:
            raise BadMagicError("not an RSEQ1 file")
        raise TruncatedFileError("RSEQ header is truncated")
    magic, count, t, h, w = _HEADER.unpack_from(payload)
    if magic[: len(RSEQ_MAGIC)] != RSEQ_MAGIC:
        raise BadMagicError("not an RSEQ1 file")
    n = count * t * h * w
    body = payload[HEADER_SIZE:]
    if len(body) < n:
        raise TruncatedFileError(f"RSEQ payload has {len(body)} bytes, header promises {n}")
    if len(body) > n:
        raise DataError(f"RSEQ payload has {len(body) - n} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8, count=n).reshape(count, t, h, w).copy()


def write_rseq(path, sequences) -> None:
    """Write ``[count, T, H, W]`` uint8 sequences to ``path``."""
    atomic_write_bytes(path, encode_rseq(sequences))


def read_rseq(path) -> np.ndarray:
    return decode_rseq(Path(path).read_bytes())


def normalize(frames) -> np.ndarray:
    return np.asarray(frames, dtype=np.float32) / np.float32(255.0)


def denormalize(frames) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class DatasetSplit:
    train: List[int]
    val: List[int]
    test: List[int] = field(default_factory=list)
    seed: int = 0


def split_dataset(n_pool: int, n_val: int, seed: int, n_test: int = 0) -> DatasetSplit:
    """Shuffle ``range(n_pool)`` with ``seed`` and carve off validation (and test) indices."""
    if n_pool < 1 or n_val < 0 or n_test < 0 or n_val + n_test >= n_pool:
        raise DataError(f"cannot take {n_val} val + {n_test} test sequences from a pool of {n_pool}")
    order = np.random.default_rng(seed).permutation(n_pool).tolist()
    val = sorted(order[:n_val])
    test = sorted(order[n_val : n_val + n_test])
    train = sorted(order[n_val + n_test :])
    return DatasetSplit(train, val, test, seed)


@dataclass
class SynthParams:
    """Ranges sampled per echo. Speeds in pixels per frame, radii in pixels."""

    n_echoes: Tuple[int, int] = (1, 4)
    speed: Tuple[float, float] = (0.3, 1.5)
    radius: Tuple[float, float] = (2.5, 6.0)
    amplitude: Tuple[float, float] = (0.35, 0.95)
    growth: Tuple[float, float] = (-0.02, 0.04)  # amplitude change per frame


@dataclass
class Echo:
    center: Tuple[float, float]  # (row, col) at frame 0
    velocity: Tuple[float, float]
    sigma: float
    amplitude: float
    growth: float = 0.0

    def amplitude_at(self, t: int) -> float:
        return max(0.0, self.amplitude + self.growth * t)


def render_echoes(echoes, n_frames: int, height: int, width: int) -> np.ndarray:
    """Render Gaussian echoes under constant advection into uint8 frames ``[T, H, W]``."""
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    out = np.zeros((n_frames, height, width), dtype=np.float64)
    for t in range(n_frames):
        for e in echoes:
            r = e.center[0] + e.velocity[0] * t
            c = e.center[1] + e.velocity[1] * t
            d2 = (rows - r) ** 2 + (cols - c) ** 2
            out[t] += e.amplitude_at(t) * np.exp(-d2 / (2.0 * e.sigma**2))
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def _sample_echoes(rng, n_frames, height, width, params: SynthParams):
    k = int(rng.integers(params.n_echoes[0], params.n_echoes[1] + 1))
    # a shared steering flow keeps multi-echo scenes coherent
    heading = rng.uniform(0, 2 * np.pi)
    echoes = []
    for _ in range(k):
        speed = rng.uniform(*params.speed)
        angle = heading + rng.normal(0, 0.3)
        v = (speed * np.sin(angle), speed * np.cos(angle))
        # start so that the mid-sequence position sits inside the frame
        mid = (rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width)
        center = (mid[0] - v[0] * n_frames / 2, mid[1] - v[1] * n_frames / 2)
        echoes.append(
            Echo(
                center=center,
                velocity=v,
                sigma=rng.uniform(*params.radius),
                amplitude=rng.uniform(*params.amplitude),
                growth=rng.uniform(*params.growth),
            )
        )
    return echoes


def generate_synthetic(n_sequences: int, n_frames: int, height: int, width: int, seed: int, params: SynthParams = None) -> np.ndarray:
    """Deterministic ``[n, T, H, W]`` uint8 moving-echo sequences.

    Each sequence draws from its own child of ``SeedSequence(seed)``, so the
    result does not depend on how sequences are distributed over workers.
    """
    if height < 16 or width < 16:
        raise DataError("synthetic frames must be at least 16x16")
    params = params or SynthParams()
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    out = np.empty((n_sequences, n_frames, height, width), dtype=np.uint8)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        out[i] = render_echoes(_sample_echoes(rng, n_frames, height, width, params), n_frames, height, width)
    return out


def write_manifest(path, **fields) -> dict:
    atomic_write_text(path, json.dumps(fields, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return fields


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")

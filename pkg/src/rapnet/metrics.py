"""Forecast verification: reflectivity conversion, contingency scores, MAE and SSIM."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import correlate2d

from .errors import DataError, ShapeError

DEFAULT_THRESHOLDS = (5.0, 20.0, 40.0)
UNDEFINED = float("nan")


def pixel_to_dbz(p):
    """Reflectivity in dBZ of 8-bit pixel values (scalar or array)."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 255):
        raise DataError("pixel values must lie in [0, 255]")
    out = arr * 95.0 / 255.0 - 10.0
    return float(out) if out.ndim == 0 else out


def dbz_to_pixel(d):
    arr = np.clip((np.asarray(d, dtype=np.float64) + 10.0) * 255.0 / 95.0, 0.0, 255.0)
    return float(arr) if arr.ndim == 0 else arr


@dataclass(frozen=True)
class ContingencyTable:
    tp: int
    fn: int
    fp: int
    tn: int
    threshold_dbz: float = float("nan")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(
            self.tp + other.tp,
            self.fn + other.fn,
            self.fp + other.fp,
            self.tn + other.tn,
            self.threshold_dbz,
        )

    def swapped(self) -> "ContingencyTable":
        """Table with forecast and observation exchanged."""
        return ContingencyTable(self.tp, self.fp, self.fn, self.tn, self.threshold_dbz)


def contingency(pred, truth, tau_dbz: float) -> ContingencyTable:
    """Count hits, misses, false alarms and correct negatives for ``dBZ > tau``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} differ")
    p = pixel_to_dbz(pred) > tau_dbz
    t = pixel_to_dbz(truth) > tau_dbz
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ContingencyTable(tp, fn, fp, tn, float(tau_dbz))


def hss(t: ContingencyTable) -> float:
    """Heidke skill score; NaN when the denominator vanishes."""
    tp, fn, fp, tn = float(t.tp), float(t.fn), float(t.fp), float(t.tn)
    denom = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    if denom == 0:
        return UNDEFINED
    return 2.0 * (tp * tn - fn * fp) / denom


def csi(t: ContingencyTable) -> float:
    """Critical success index; NaN when no event was forecast or observed."""
    denom = t.tp + t.fn + t.fp
    if denom == 0:
        return UNDEFINED
    return t.tp / denom


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} differ")
    return float(np.mean(np.abs(pred - truth)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, truth, window_size: int = 11, sigma: float = 1.5, k1=0.01, k2=0.03, data_range=255.0) -> float:
    """Mean SSIM over all fully contained Gaussian window positions of two 2-D frames."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D frames, got {x.shape} and {y.shape}")
    if min(x.shape) < window_size:
        raise ShapeError(f"frame {x.shape} smaller than the {window_size}x{window_size} window")
    w = gaussian_window(window_size, sigma)

    def filt(a):
        return correlate2d(a, w, mode="valid")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else UNDEFINED


@dataclass
class EvalReport:
    thresholds: Sequence[float]
    hss: dict
    csi: dict
    mae: float
    ssim: float
    n_frames: int
    tables: dict

    @property
    def hss_avg(self) -> float:
        return _nanmean(self.hss.values())

    @property
    def csi_avg(self) -> float:
        return _nanmean(self.csi.values())

    def to_dict(self) -> dict:
        """Flat record with keys ``hss_5, ..., hss_avg, csi_*, mae, ssim, n_frames``.

        Undefined scores become ``None``.
        """
        out = {}
        for name, scores in (("hss", self.hss), ("csi", self.csi)):
            for t in self.thresholds:
                out[f"{name}_{t:g}"] = scores[t]
            out[f"{name}_avg"] = getattr(self, f"{name}_avg")
        out["mae"] = self.mae
        out["ssim"] = self.ssim
        out["n_frames"] = self.n_frames
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_fields(thresholds=DEFAULT_THRESHOLDS) -> list:
    names = []
    for name in ("hss", "csi"):
        names += [f"{name}_{t:g}" for t in thresholds] + [f"{name}_avg"]
    return names + ["mae", "ssim", "n_frames"]


def evaluate(predictions, truths, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Score aligned forecasts ``[S, T, H, W]`` in the 0-255 pixel domain.

    Contingency counts are pooled over every pixel, frame and sequence before
    HSS and CSI are computed; MAE and SSIM are per-frame means.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truths, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"predictions {pred.shape} and truths {truth.shape} differ")
    if pred.size == 0:
        raise DataError("nothing to evaluate")
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    if pred.ndim != 4:
        raise ShapeError("expected [S, T, H, W] or [T, H, W] arrays")
    frames_p = pred.reshape(-1, *pred.shape[-2:])
    frames_t = truth.reshape(-1, *truth.shape[-2:])

    tables = {}
    for tau in thresholds:
        total = ContingencyTable(0, 0, 0, 0, float(tau))
        for fp_, ft_ in zip(frames_p, frames_t):
            total = total + contingency(fp_, ft_, tau)
        tables[tau] = total
    return EvalReport(
        thresholds=tuple(thresholds),
        hss={t: hss(tables[t]) for t in thresholds},
        csi={t: csi(tables[t]) for t in thresholds},
        mae=float(np.mean([mae(a, b) for a, b in zip(frames_p, frames_t)])),
        ssim=float(np.mean([ssim(a, b) for a, b in zip(frames_p, frames_t)])),
        n_frames=len(frames_p),
        tables=tables,
    )

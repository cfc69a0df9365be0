"""Training loop, loss, scheduled sampling and the finite-difference gradient check."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional

import numpy as np
import torch
from torch import Tensor

from .data import DatasetSplit, normalize
from .errors import DataError, NumericError, ShapeError
from .model import ModelConfig, RAPNet, parameter_groups

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    max_iterations: int = 1000
    ss_iters: int = 50_000
    patience: int = 10
    eval_interval: int = 100
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        problems = []
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            problems.append("lambda1 and lambda2 must be >= 0 and not both 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_iterations < 0:
            problems.append("max_iterations must be >= 0")
        if self.ss_iters <= 0:
            problems.append("ss_iters must be > 0")
        if self.eval_interval < 1 or self.patience < 1:
            problems.append("eval_interval and patience must be >= 1")
        if problems:
            raise DataError("invalid train config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def loss(pred: Tensor, truth: Tensor, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """``lambda1 * mean|pred - truth| + lambda2 * mean((pred - truth)^2)``."""
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    diff = pred - truth
    return lambda1 * diff.abs().mean() + lambda2 * (diff * diff).mean()


def sampling_probability(iteration: int, ss_iters: int) -> float:
    """Probability of feeding ground truth at a decoding step; decays linearly to 0."""
    if ss_iters <= 0:
        raise ValueError("ss_iters must be > 0")
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(0.0, 1.0 - iteration / ss_iters)


def draw_teacher_mask(rng: np.random.Generator, batch: int, steps: int, p: float) -> Tensor:
    return torch.from_numpy(rng.random((batch, steps)) < p)


@dataclass
class TrainResult:
    model: RAPNet
    log: List[dict] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_iteration: int = 0
    iterations: int = 0

    def meta(self, train_cfg: TrainConfig) -> dict:
        """Checkpoint metadata; free of wall-clock values so reruns hash equal."""
        return {
            "best_val_loss": None if math.isinf(self.best_val_loss) else self.best_val_loss,
            "best_iteration": self.best_iteration,
            "iterations": self.iterations,
            "train_config": train_cfg.to_dict(),
        }


def _frames_tensor(sequences, dtype) -> Tensor:
    arr = normalize(sequences)
    return torch.from_numpy(arr).to(dtype).unsqueeze(2)


@torch.no_grad()
def validation_loss(model: RAPNet, frames: Tensor, cfg: TrainConfig) -> float:
    """Free-running loss (no teacher forcing after the observed frames)."""
    model.eval()
    total, count = 0.0, 0
    for start in range(0, frames.shape[0], cfg.batch_size):
        batch = frames[start : start + cfg.batch_size]
        pred = model(batch[:, : model.cfg.t_total], torch.zeros(model.cfg.t_total - 1, dtype=torch.bool))
        total += float(loss(pred, batch[:, 1:], cfg.lambda1, cfg.lambda2)) * batch.shape[0]
        count += batch.shape[0]
    model.train()
    return total / count


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sequences,
    split: DatasetSplit,
    on_record: Optional[Callable[[dict], None]] = None,
    dtype=torch.float32,
) -> TrainResult:
    """Fit a fresh model on ``sequences[split.train]`` with early stopping on ``split.val``.

    Returns the model holding the best-validation weights. Given the seed the
    run is deterministic on one platform and thread count.
    """
    sequences = np.asarray(sequences)
    if sequences.ndim != 4 or sequences.shape[1] < model_cfg.t_total:
        raise DataError(f"need [n, >={model_cfg.t_total}, H, W] sequences, got {sequences.shape}")
    if sequences.shape[2:] != (model_cfg.height, model_cfg.width):
        raise DataError(
            f"frames are {sequences.shape[2:]}, model expects {(model_cfg.height, model_cfg.width)}"
        )
    if not split.train:
        raise DataError("training split is empty")

    torch.manual_seed(train_cfg.seed)
    model = RAPNet(model_cfg).to(dtype)
    result = TrainResult(model)
    if train_cfg.max_iterations == 0:
        return result

    frames = _frames_tensor(sequences[:, : model_cfg.t_total], dtype)
    train_frames = frames[split.train]
    val_frames = frames[split.val] if split.val else None
    rng = np.random.default_rng(train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas, eps=train_cfg.adam_eps)

    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    order = rng.permutation(len(train_frames))
    cursor = 0
    interval_losses = []
    t0 = time.perf_counter()
    steps = model_cfg.t_total - 1
    model.train()
    for it in range(train_cfg.max_iterations):
        if cursor + train_cfg.batch_size > len(order):
            order = rng.permutation(len(train_frames))
            cursor = 0
        idx = order[cursor : cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        batch = train_frames[torch.from_numpy(idx)]
        p = sampling_probability(it, train_cfg.ss_iters)
        mask = draw_teacher_mask(rng, len(idx), steps, p)

        pred = model(batch, mask)
        value = loss(pred, batch[:, 1:], train_cfg.lambda1, train_cfg.lambda2)
        if not torch.isfinite(value):
            raise NumericError(f"non-finite training loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        interval_losses.append(value.item())

        done = it + 1 == train_cfg.max_iterations
        if (it + 1) % train_cfg.eval_interval == 0 or done:
            val = validation_loss(model, val_frames, train_cfg) if val_frames is not None else float(np.mean(interval_losses))
            record = {
                "iter": it + 1,
                "train_loss": float(np.mean(interval_losses)),
                "val_loss": val,
                "sampling_p": p,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            result.log.append(record)
            interval_losses = []
            log.info("iter %d train %.5f val %.5f p %.3f", record["iter"], record["train_loss"], val, p)
            if on_record is not None:
                on_record(record)
            if val < result.best_val_loss:
                result.best_val_loss = val
                result.best_iteration = it + 1
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    result.iterations = it + 1
                    break
        result.iterations = it + 1

    model.load_state_dict(best_state)
    return result


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-8)


def gradient_check_entries(
    model: RAPNet,
    frames: Tensor,
    epsilon: float = 1e-5,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    min_entries: int = 100,
    seed: int = 0,
) -> List[GradCheckEntry]:
    """Autograd vs central differences on a random subset of parameter entries.

    Every parameter tensor contributes at least one entry, so every block is
    covered. Runs under full teacher forcing so the loss is a smooth function
    of the parameters. The loss equals ``loss(...)`` but is kept per pixel so
    the two perturbed evaluations are subtracted before summation.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    mask = torch.ones(model.cfg.t_total - 1, dtype=torch.bool)
    truth = frames[:, 1:]

    def pointwise() -> Tensor:
        diff = model(frames, mask) - truth
        return (lambda1 * diff.abs() + lambda2 * diff * diff) / diff.numel()

    model.zero_grad(set_to_none=True)
    value = pointwise().sum()
    if lambda1 == 0 and lambda2 == 0:
        grads = {n: torch.zeros_like(p) for n, p in named}
    else:
        value.backward()
        grads = {n: p.grad.detach().clone() for n, p in named}
    for n, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}")

    rng = np.random.default_rng(seed)
    per_tensor = max(1, math.ceil(min_entries / len(named)))
    entries = []
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for j in picks:
                j = int(j)
                old = float(flat[j])
                flat[j] = old + epsilon
                up = pointwise()
                flat[j] = old - epsilon
                down = pointwise()
                flat[j] = old
                # difference per pixel before reducing keeps roundoff near the size of each term
                numeric = float((up - down).sum()) / (2 * epsilon)
                idx = tuple(int(i) for i in np.unravel_index(j, tuple(p.shape)))
                entries.append(GradCheckEntry(name, idx, float(grads[name].view(-1)[j]), numeric))
    return entries


def grad_check(model_cfg: ModelConfig, sample, epsilon: float = 1e-5, lambda1: float = 1.0, lambda2: float = 1.0, seed: int = 0, min_entries: int = 100) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    ``sample`` is a ``[B, T, H, W]`` uint8 array or a normalized
    ``[B, T, C, H, W]`` tensor. Evaluation runs in float64.
    """
    torch.manual_seed(seed)
    model = RAPNet(model_cfg).double()
    if isinstance(sample, Tensor):
        frames = sample.to(torch.float64)
    else:
        frames = _frames_tensor(np.asarray(sample)[:, : model_cfg.t_total], torch.float64)
    entries = gradient_check_entries(model, frames, epsilon, lambda1, lambda2, min_entries, seed)
    return max(e.rel_error for e in entries)


def covered_groups(entries: List[GradCheckEntry]) -> set:
    return parameter_groups(e.name for e in entries)

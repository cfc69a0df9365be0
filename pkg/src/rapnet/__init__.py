"""Region-attention ConvRNN for radar echo extrapolation, with data, metrics and training tools."""

from .attention import channel_attention, scaled_dot_attention, spatial_attention
from .cell import AblationFlags, RAPCell, rap_cell_step
from .data import (
    DatasetSplit,
    RadarSequence,
    generate_synthetic,
    normalize,
    denormalize,
    read_rseq,
    split_dataset,
    write_rseq,
)
from .metrics import ContingencyTable, EvalReport, contingency, csi, evaluate, hss, mae, ssim
from .model import ModelConfig, RAPNet, RAPState, init_state, load_checkpoint, save_checkpoint
from .recall import LongMemory, RecallAttention, push_frame, ram_forward
from .region import RegionAttentionBlock, classify, integrate, rab_forward, split
from .trainer import TrainConfig, grad_check, loss, sampling_probability, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "channel_attention",
    "classify",
    "contingency",
    "ContingencyTable",
    "csi",
    "DatasetSplit",
    "denormalize",
    "EvalReport",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "hss",
    "init_state",
    "integrate",
    "load_checkpoint",
    "LongMemory",
    "loss",
    "mae",
    "ModelConfig",
    "normalize",
    "push_frame",
    "rab_forward",
    "RadarSequence",
    "ram_forward",
    "rap_cell_step",
    "RAPCell",
    "RAPNet",
    "RAPState",
    "read_rseq",
    "RecallAttention",
    "RegionAttentionBlock",
    "sampling_probability",
    "save_checkpoint",
    "scaled_dot_attention",
    "spatial_attention",
    "split",
    "split_dataset",
    "ssim",
    "train",
    "TrainConfig",
    "write_rseq",
]

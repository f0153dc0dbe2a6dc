"""Robust CNN building blocks on a small numpy autodiff engine.

Patchify stems, large-kernel depthwise convolutions and reduced
normalization/activation blocks, with a MAC counter, budget tuner,
desk-scale trainer and a synthetic corruption benchmark.
"""

from .blocks import BlockKind, BlockSpec, NormActPlacement, build_block, optimal_placement, parse_descriptor
from .corruptions import SEVERITY_TABLE, CorruptionSpec, corrupt
from .data import Dataset, load_dataset, save_dataset, synthetic_dataset
from .evaluate import RobustnessReport, evaluate
from .flops import FlopsReport, count_flops
from .gradcheck import grad_check
from .layers import ConvParams, batch_norm, conv2d, gelu, global_avg_pool, linear, max_pool2d, relu
from .losses import DistillConfig, cross_entropy, kd_loss
from .models import (
    PRESETS,
    ConfigError,
    ModelSpec,
    StemSpec,
    build_model,
    get_preset,
    load_checkpoint,
    save_checkpoint,
    stride_plan,
    tune_stage3_depth,
)
from .optim import TrainConfig, adamw_step, cosine_lr
from .tensor import HIGH, STANDARD, Tensor, backward, no_grad
from .train import train

__version__ = "0.1.0"

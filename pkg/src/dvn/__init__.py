"""Deep virtual networks: task-specific nested sub-networks over one shared parameter store."""

from .backbone import (
    BackboneSpec,
    LayerSpec,
    ModelParams,
    TaskSpec,
    attach_hierarchy,
    conv_preset,
    forward_logits,
    init_params,
    mlp_preset,
)
from .budget import BudgetReport, budget_table, count_params, select_level
from .partition import (
    LevelMask,
    UnitPartition,
    VirtualNetConfig,
    build_hierarchy,
    derive_orders,
    equal_partition,
    full_mask,
    level_mask,
    s_value,
    validate,
)
from .tensor import Tape, Tensor, backward_eval, finite_diff_grad, forward_eval
from .trainer import TrainConfig, joint_loss, sequential_loss, train_joint, train_sequential, train_single

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "LayerSpec",
    "ModelParams",
    "TaskSpec",
    "attach_hierarchy",
    "conv_preset",
    "forward_logits",
    "init_params",
    "mlp_preset",
    "BudgetReport",
    "budget_table",
    "count_params",
    "select_level",
    "LevelMask",
    "UnitPartition",
    "VirtualNetConfig",
    "build_hierarchy",
    "derive_orders",
    "equal_partition",
    "full_mask",
    "level_mask",
    "s_value",
    "validate",
    "Tape",
    "Tensor",
    "backward_eval",
    "finite_diff_grad",
    "forward_eval",
    "TrainConfig",
    "joint_loss",
    "sequential_loss",
    "train_joint",
    "train_sequential",
    "train_single",
]

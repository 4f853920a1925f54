from .guidance import RegressorGuidance, guided_reverse_step, reweight
from .nets import (
    DenoiserHandle,
    Inputs,
    ModelConfig,
    NonFiniteLoss,
    RegressorHandle,
    denoiser_forward,
    denoiser_loss,
    gradients,
    init_params,
    make_inputs,
    param_shapes,
    regressor_forward,
    regressor_loss,
)
from .optim import LocalOptimizer, OptimizerConfig, OptimizerState, adamw_step, init_optimizer, sgd_step
from .params import ParamStore, ShapeMismatch

__all__ = [
    "DenoiserHandle", "Inputs", "LocalOptimizer", "ModelConfig", "NonFiniteLoss", "OptimizerConfig",
    "OptimizerState", "ParamStore", "RegressorGuidance", "RegressorHandle", "ShapeMismatch",
    "adamw_step", "denoiser_forward", "denoiser_loss", "gradients", "guided_reverse_step",
    "init_optimizer", "init_params", "make_inputs", "param_shapes", "regressor_forward",
    "regressor_loss", "reweight", "sgd_step",
]

from .autodiff import ShapeMismatch, Tensor, concat, minimum, no_grad, softmax
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    MLP,
    Adam,
    Linear,
    ParamStore,
    clip_grad_norm,
    grad_norm,
    load_params,
    save_params,
)
from .models import (
    ANGLE_COLS,
    VELOCITY_COLS,
    ActionWorldModel,
    AWMConfig,
    DecoupledEncoder,
    EncoderConfig,
    FlatMLPEncoder,
    PairSetEncoder,
    SelfAttention,
    SetEncoder,
    decoupled_encode,
    fit_points_to_n,
    flat_mlp_encode,
    loss_bc_wm,
    make_encoder,
    pair_set_encode,
)

__all__ = [
    "ANGLE_COLS", "VELOCITY_COLS", "ActionWorldModel", "AWMConfig", "Adam",
    "DecoupledEncoder", "EncoderConfig", "FlatMLPEncoder", "GradCheckReport",
    "Linear", "MLP", "PairSetEncoder", "ParamStore", "SelfAttention",
    "SetEncoder", "ShapeMismatch", "Tensor", "clip_grad_norm", "concat",
    "decoupled_encode", "fit_points_to_n", "flat_mlp_encode", "grad_check",
    "grad_norm", "load_params", "loss_bc_wm", "make_encoder", "minimum",
    "no_grad", "pair_set_encode", "save_params", "softmax",
]

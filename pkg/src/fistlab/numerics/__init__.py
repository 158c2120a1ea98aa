from .autodiff import ShapeError, Tape, Tensor
from .checkpoint import CheckpointError, load_params, save_params
from .distributions import DiagGaussian, gaussian_kl, gaussian_log_prob, gaussian_rsample
from .gradcheck import check_gradients
from .layers import LOG_STD_MAX, LOG_STD_MIN, MLP, Linear, LSTMCell, ParamSet, linear_forward, recurrent_step
from .optim import AdamState, NonFiniteGradientError, adam_step

__all__ = [
    "AdamState",
    "CheckpointError",
    "DiagGaussian",
    "LOG_STD_MAX",
    "LOG_STD_MIN",
    "LSTMCell",
    "Linear",
    "MLP",
    "NonFiniteGradientError",
    "ParamSet",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "check_gradients",
    "gaussian_kl",
    "gaussian_log_prob",
    "gaussian_rsample",
    "linear_forward",
    "load_params",
    "recurrent_step",
    "save_params",
]

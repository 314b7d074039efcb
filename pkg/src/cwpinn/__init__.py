"""Physics-informed neural network training with convolution-weighted residuals."""

from .diffnet import NetworkConfig, forward, init_params, input_jet, param_gradient
from .problems import burgers1d, burgers_reference, get_problem, heat1d, klein_gordon2d, poisson_inverse2d
from .estimator import PINNRegressor
from .trainer import TrainConfig, train
from .weighting import SchemeConfig, WeightState

__all__ = [
    "NetworkConfig", "forward", "init_params", "input_jet", "param_gradient",
    "burgers1d", "burgers_reference", "get_problem", "heat1d", "klein_gordon2d", "poisson_inverse2d",
    "TrainConfig", "train", "SchemeConfig", "WeightState", "PINNRegressor",
]
__version__ = "0.1.0"

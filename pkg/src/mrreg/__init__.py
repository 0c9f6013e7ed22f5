"""Multi-resolution deformable image registration on numpy.

The main entry points are re-exported here; submodules hold the details:
``diffgraph`` (autodiff), ``regcore`` (pyramids, warping, Jacobians),
``network``, ``losses``, ``train``, ``metrics``, ``demons``, ``datagen``,
``io`` and ``cli``.
"""

from .datagen import SynthConfig, generate, random_smooth_field
from .demons import DemonsConfig, demons_register
from .errors import (
    DatasetTooSmall,
    DetachedTensorError,
    EmptyMaskError,
    FormatError,
    MrRegError,
    NonFiniteLossError,
    OddExtentError,
    ShapeError,
    ZeroVarianceError,
)
from .losses import LossWeights, default_lambdas, gncc, multires_loss, smoothness, soft_dice
from .metrics import dice_hard, endpoint_error, evaluate_pairs, hausdorff, protocol_pairs, ssim
from .network import ModelConfig, ModelParams, forward, init_params, load_params, register, save_params
from .regcore import (
    build_pyramid,
    compose_residual,
    jacobian_det_map,
    nonpositive_jacobian_rate,
    upsample_field,
    warp,
)
from .train import TrainConfig, train

__version__ = "0.1.0"

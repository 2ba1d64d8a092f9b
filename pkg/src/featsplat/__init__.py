"""Feature-distilled dynamic Gaussian splatting on the CPU.

Joint reconstruction of a deforming RGB-D scene and a dense semantic feature
field, rendered in one differentiable compositing pass and trained end-to-end
with hand-derived gradients.
"""

__version__ = "0.1.0"

from .gaussians import CameraFrame, GaussianCloud
from .hexplane import HexPlaneConfig, HexPlaneField
from .deformation import DeformationConfig, DeformationNet, deform
from .rasterizer import RasterConfig, render, render_backward
from .semantic import FeatureMap, PointwiseDecoder
from .training import TrainConfig, init_training, load_checkpoint, save_checkpoint

__all__ = [
    "CameraFrame", "GaussianCloud", "HexPlaneConfig", "HexPlaneField",
    "DeformationConfig", "DeformationNet", "deform", "RasterConfig", "render",
    "render_backward", "FeatureMap", "PointwiseDecoder", "TrainConfig",
    "init_training", "load_checkpoint", "save_checkpoint", "__version__",
]

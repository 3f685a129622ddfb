"""occflow: unsupervised occlusion-inpainting optical flow at desk scale.

A numpy package with numba-accelerated kernels (selected via the
OCCFLOW_BACKEND env var) implementing occlusion detection by
forward-backward consistency, boundary dilated warping, appearance-flow
occlusion inpainting, a coarse-to-fine flow network, the four-term
unsupervised loss, flow I/O and metrics, and a training/ablation harness.
"""

from . import backend
from .appflow import AppFlowNetLite, appflow_forward, masked_image, refine_flow
from .diffcore import (
    ConvLayer,
    Tensor,
    concat,
    conv2d,
    get_default_dtype,
    leaky_relu,
    load_checkpoint,
    no_grad,
    resize_bilinear,
    save_checkpoint,
    set_default_dtype,
)
from .flowio import (
    FlowMetrics,
    SceneConfig,
    SyntheticScene,
    aggregate_metrics,
    compute_metrics,
    flow_to_color,
    generate_scene,
    read_flo,
    read_kitti_png,
    write_flo,
    write_kitti_png,
)
from .flowops import (
    FlowField,
    FramePair,
    OccCheckParams,
    OcclusionMask,
    boundary_dilated_warp,
    census_transform,
    correlation,
    flow_resize,
    in_frame_mask,
    occlusion_mask,
    warp_bilinear,
)
from .harness import TrainConfig, TrainResult, ablate, evaluate, load_net, train
from .losses import (
    LossReport,
    LossWeights,
    census_loss,
    inpainting_loss,
    photometric_loss,
    robust_penalty,
    smoothness_loss,
    total_loss,
)
from .network import NetworkConfig, OccInpFlowNet, PyramidOutput, forward_pass

__version__ = "0.1.0"

__all__ = [
    "AppFlowNetLite",
    "ConvLayer",
    "FlowField",
    "FlowMetrics",
    "FramePair",
    "LossReport",
    "LossWeights",
    "NetworkConfig",
    "OccCheckParams",
    "OccInpFlowNet",
    "OcclusionMask",
    "PyramidOutput",
    "SceneConfig",
    "SyntheticScene",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "ablate",
    "aggregate_metrics",
    "appflow_forward",
    "backend",
    "boundary_dilated_warp",
    "census_loss",
    "census_transform",
    "compute_metrics",
    "concat",
    "conv2d",
    "correlation",
    "evaluate",
    "flow_resize",
    "flow_to_color",
    "forward_pass",
    "generate_scene",
    "get_default_dtype",
    "in_frame_mask",
    "inpainting_loss",
    "leaky_relu",
    "load_checkpoint",
    "load_net",
    "masked_image",
    "no_grad",
    "occlusion_mask",
    "photometric_loss",
    "read_flo",
    "read_kitti_png",
    "refine_flow",
    "resize_bilinear",
    "robust_penalty",
    "save_checkpoint",
    "set_default_dtype",
    "smoothness_loss",
    "total_loss",
    "train",
    "warp_bilinear",
    "write_flo",
    "write_kitti_png",
    "__version__",
]

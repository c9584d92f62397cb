"""Multi-view 3D morphable model fitting with differentiable rendering.

Core pieces: a linear morphable model, a pinhole camera with a numpy
rasterizer and its analytic backward pass, mask-derived weight maps, the
weakly supervised losses, similarity ICP and point-to-plane evaluation, the
feature-fusion operators, and an Adam-based analysis-by-synthesis fitter.
"""
from .camera import CameraIntrinsics, ViewPose, pose_to_matrix, project, to_camera
from .errors import (
    BadInitializationError,
    BehindCameraError,
    DegenerateConfigurationError,
    EmptyCropError,
    EmptyOverlapError,
    FitAbortedError,
    InvalidArgumentError,
    InvalidMeshError,
)
from .fitter import FitConfig, FitResult, Observation, fit, fit_poses, staged_fit
from .losses import (
    LossWeights,
    landmark2d_loss,
    landmark3d_loss,
    mask_loss,
    photo_loss,
    regularization_loss,
    total_loss,
)
from .masks import dilate, to_weight_map
from .metrics import Mesh, error_map, evaluate_meshes, icp_register, point_to_plane_rmse
from .morphable_model import FaceParams, MorphableModel, evaluate_shape, evaluate_texture, generate_toy_model
from .render import RenderedFrame, rasterize, rasterize_backward
from .similarity import SimilarityTransform, solve_similarity

__version__ = "0.1.0"

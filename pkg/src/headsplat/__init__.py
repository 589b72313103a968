"""Template-anchored 3D Gaussian head avatars."""

from .adaptive import AdaptiveConfig, GradAccumulator, densify_and_prune, \
    prune_disconnected, prune_splats, reset_opacity, should_fire
from .errors import ConfigError, GuidanceError, HeadsplatError, \
    MeshParseError, RenderError, ShapeMismatchError, TopologyError, \
    TrainingError
from .guidance import AnalyticPointMassDenoiser, ConditionEmbedding, \
    DiffusionSchedule, blend_condition, bucket_view, ddim_denoise, \
    ddim_invert, ism_gradient, linear_schedule, load_embedding, \
    photometric_gradient, save_embedding, sds_gradient
from .imgio import psnr, read_png, write_png
from .pipeline import AdamOptimizer, LrSchedule, RunConfig, express, \
    fit_mean_texture, generate, load_run_config, lr_at, \
    regularizer_gradients, save_run_config
from .rasterizer import CameraPose, pose_from_spherical, render, \
    render_backward
from .sampler import CameraRanges, relax, sample_batch
from .splats import SplatCloud, deform_by_template, init_from_template, \
    load_splat_ply, save_splat_ply
from .template import TemplateMesh, apply_blendshapes, face_laplacian, \
    load_template, load_template_bundle, render_mesh_target, \
    save_template_bundle, subdivide_partitioned

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig", "AdamOptimizer", "AnalyticPointMassDenoiser",
    "CameraPose", "CameraRanges", "ConditionEmbedding", "ConfigError",
    "DiffusionSchedule", "GradAccumulator", "GuidanceError",
    "HeadsplatError", "LrSchedule", "MeshParseError", "RenderError",
    "RunConfig", "ShapeMismatchError", "SplatCloud", "TemplateMesh",
    "TopologyError", "TrainingError", "apply_blendshapes", "blend_condition",
    "bucket_view", "ddim_denoise", "ddim_invert", "deform_by_template",
    "densify_and_prune", "express", "face_laplacian", "fit_mean_texture",
    "generate", "init_from_template", "ism_gradient", "linear_schedule",
    "load_embedding", "load_run_config", "load_splat_ply", "load_template",
    "load_template_bundle", "lr_at", "photometric_gradient",
    "pose_from_spherical", "prune_disconnected", "prune_splats", "psnr",
    "read_png", "regularizer_gradients", "relax", "render",
    "render_backward", "render_mesh_target", "reset_opacity",
    "sample_batch", "save_embedding", "save_run_config", "save_splat_ply", "should_fire",
    "save_template_bundle", "sds_gradient", "subdivide_partitioned",
    "write_png",
]

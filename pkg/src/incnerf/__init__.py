"""Incremental neural radiance fields on CPU.

Self-distillation from a frozen snapshot with a ray generator, plus the
incremental, joint, EWC, PackNet and replay baselines.
"""

__version__ = "0.1.0"

from .camera import Intrinsics, Pose, Ray, pixel_ray, principal_ray, sample_nonprincipal
from .estimator import IncrementalNeRF
from .metrics import ms_ssim, psnr
from .mlp import EncodingConfig, NetworkConfig, ParamSet
from .render import SampleSpec, composite, render_image, render_ray
from .rgn import RayGenerator
from .scenes import (
    SceneDef, Sphere, Task, TrajectorySpec, analytic_render, build_tasks, holdout_split, reference_tasks,
)
from .sequence import MetricsLog, run_sequence
from .trainers import TrainConfig

__all__ = [
    "EncodingConfig", "IncrementalNeRF", "Intrinsics", "MetricsLog", "NetworkConfig", "ParamSet",
    "Pose", "Ray", "RayGenerator", "SampleSpec", "SceneDef", "Sphere", "Task", "TrainConfig",
    "TrajectorySpec", "analytic_render", "build_tasks", "composite", "ms_ssim", "pixel_ray",
    "holdout_split", "principal_ray", "psnr", "reference_tasks", "render_image", "render_ray", "run_sequence",
    "sample_nonprincipal",
]

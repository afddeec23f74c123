"""Joint post-training of a multi-view denoiser and a voxel reconstructor,
with distribution alignment and few-step 3D-aware sampling.

Subsystems:
    diffusion   noise schedules, forward diffusion, deterministic denoising steps
    cameras     pinhole poses, ray generation, projection
    scene       explicit density/color voxel grids and their binary format
    renderer    differentiable emission-absorption volume rendering
    denoiser    the multi-view eps-prediction network (teacher + LoRA student)
    recon       feed-forward multi-view -> voxel-grid reconstruction
    alignment   distillation / adversarial / regression objectives, joint step
    sampling    two-stage and 3D-aware inference loops
    data        procedural synthetic multi-view dataset
    metrics     PSNR, SSIM, depth-warp cross-view-consistency proxy
    harness     config, checkpoints, training/ablation runners, CLI
"""

from .diffusion import (
    NoiseSchedule,
    TimestepPlan,
    build_schedule,
    make_inference_plan,
    predict_x0,
    q_sample,
    renoise,
    denoise_step,
)
from .cameras import CameraPose, CameraPoseSet, make_pose_set
from .scene import Scene3D
from .renderer import RenderConfig, render, render_multiview

__all__ = [
    "NoiseSchedule",
    "TimestepPlan",
    "build_schedule",
    "make_inference_plan",
    "predict_x0",
    "q_sample",
    "renoise",
    "denoise_step",
    "CameraPose",
    "CameraPoseSet",
    "make_pose_set",
    "Scene3D",
    "RenderConfig",
    "render",
    "render_multiview",
]

__version__ = "0.1.0"

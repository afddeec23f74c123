"""Differentiable emission-absorption rendering of voxel scenes.

Per pixel a ray is marched with `samples_per_ray` midpoint samples between
near and far. Density and color are trilinearly interpolated at each sample,
fading to zero over the half-cell border outside the grid. With step length
d and sample densities sigma_i the compositing weights are

    T_i = exp(-sum_{j<i} sigma_j d),   w_i = T_i * (1 - exp(-sigma_i d))

and the pixel is sum_i w_i c_i + (1 - sum_i w_i) * background. Expected depth
sum_i w_i s_i (distance along the unit ray) and accumulated opacity sum_i w_i
come along for warp-based consistency checks.

Interpolation runs through F.grid_sample with align_corners=False, whose
cell-centre convention matches Scene3D (centre of cell idx at
-extent + (idx + 0.5) * cell). Everything is a differentiable torch
expression: gradients flow into the density and color grids and onward into
whatever produced them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .cameras import CameraPose, CameraPoseSet, ray_grid
from .scene import Scene3D


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 32
    resolution: int = 32
    fov_deg: float = 40.0
    near: float | None = None  # default brackets the grid's bounding sphere
    far: float | None = None
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.near is not None and self.far is not None and not (self.near < self.far):
            raise ValueError("need near < far")

    def bounds(self, pose: CameraPose, extent: float) -> tuple[float, float]:
        half_diag = math.sqrt(3.0) * extent
        near = self.near if self.near is not None else max(pose.radius - half_diag, 1e-3)
        far = self.far if self.far is not None else pose.radius + half_diag
        if not near < far:
            raise ValueError(f"degenerate ray bounds near={near} far={far}")
        return near, far


_RAY_CACHE: dict = {}


def _rays_for(poses: tuple, cfg: RenderConfig, extent: float, dtype: torch.dtype):
    """Cached sample points and distances for a pose tuple.

    Returns (pts (N, R, R, S, 3), dist (N, S), delta (N,)).
    """
    key = (poses, cfg.samples_per_ray, cfg.resolution, cfg.fov_deg, cfg.near, cfg.far, extent, dtype)
    hit = _RAY_CACHE.get(key)
    if hit is not None:
        return hit
    pts_all, dist_all, delta_all = [], [], []
    s = cfg.samples_per_ray
    for az, el, rad in poses:
        pose = CameraPose(az, el, rad)
        origin, dirs = ray_grid(pose, cfg.resolution, cfg.fov_deg, dtype=dtype)
        near, far = cfg.bounds(pose, extent)
        delta = (far - near) / s
        dist = near + (torch.arange(s, dtype=dtype) + 0.5) * delta
        pts = origin.view(1, 1, 1, 3) + dirs.unsqueeze(2) * dist.view(1, 1, s, 1)
        pts_all.append(pts)
        dist_all.append(dist)
        delta_all.append(delta)
    out = (
        torch.stack(pts_all, dim=0),
        torch.stack(dist_all, dim=0),
        torch.tensor(delta_all, dtype=dtype),
    )
    if len(_RAY_CACHE) > 64:
        _RAY_CACHE.clear()
    _RAY_CACHE[key] = out
    return out


def sample_grid(density: torch.Tensor, color: torch.Tensor, extent: float, points: torch.Tensor):
    """Trilinear density/color at world points.

    density (B, G, G, G), color (B, G, G, G, 3), points (..., 3) shared across
    the batch. Returns (sigma (B, ...), rgb (B, ..., 3)).
    """
    b, g = density.shape[0], density.shape[1]
    both = torch.cat([density.unsqueeze(-1), color], dim=-1)  # (B,G,G,G,4)
    vol = both.permute(0, 4, 1, 2, 3)  # (B,4,ix,iy,iz) as (B,C,D,H,W)
    shape = points.shape[:-1]
    # grid_sample wants x->W (=iz), y->H (=iy), z->D (=ix); normalized p/extent
    coords = (points.reshape(1, 1, 1, -1, 3) / extent)[..., [2, 1, 0]]
    coords = coords.expand(b, 1, 1, -1, 3).to(vol.dtype)
    samp = F.grid_sample(vol, coords, mode="bilinear", padding_mode="zeros", align_corners=False)
    samp = samp[:, :, 0, 0, :].permute(0, 2, 1)  # (B, P, 4)
    sigma = torch.clamp(samp[..., 0], min=0.0)
    rgb = samp[..., 1:]
    return sigma.reshape(b, *shape), rgb.reshape(b, *shape, 3)


def render_batch(
    density: torch.Tensor,
    color: torch.Tensor,
    extent: float,
    poses: CameraPoseSet,
    cfg: RenderConfig,
):
    """Render a batch of scenes at every pose.

    density (B, G, G, G), color (B, G, G, G, 3). Returns
    (images (B, N, 3, R, R), depths (B, N, R, R), opacities (B, N, R, R)).
    """
    pose_key = tuple(p.as_tuple() for p in poses)
    pts, dist, delta = _rays_for(pose_key, cfg, extent, density.dtype)
    n, r, _, s, _ = pts.shape
    b = density.shape[0]

    sigma, rgb = sample_grid(density, color, extent, pts)  # (B,N,R,R,S), (...,3)
    tau = sigma * delta.view(1, n, 1, 1, 1)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(acc - tau))  # exclusive prefix: T_i
    w = trans * (1.0 - torch.exp(-tau))

    w_sum = w.sum(dim=-1)
    bg = torch.tensor(cfg.background, dtype=density.dtype, device=density.device)
    img = (w.unsqueeze(-1) * rgb).sum(dim=-2) + (1.0 - w_sum).unsqueeze(-1) * bg
    depth = (w * dist.view(1, n, 1, 1, s)).sum(dim=-1)
    return img.permute(0, 1, 4, 2, 3), depth, w_sum


def render_aux(scene: Scene3D, pose: CameraPose, cfg: RenderConfig):
    """Render one view with auxiliaries: (image (3,R,R), depth, opacity)."""
    img, depth, opac = render_batch(
        scene.density.unsqueeze(0), scene.color.unsqueeze(0), scene.extent,
        CameraPoseSet(poses=(pose,)), cfg,
    )
    return img[0, 0], depth[0, 0], opac[0, 0]


def render(scene: Scene3D, pose: CameraPose, cfg: RenderConfig) -> torch.Tensor:
    """Render one view; returns a (3, R, R) image in [0, 1]."""
    return render_aux(scene, pose, cfg)[0]


def render_multiview(scene: Scene3D, poses: CameraPoseSet, cfg: RenderConfig) -> torch.Tensor:
    """Stacked renders (N, 3, R, R) of one scene."""
    img, _, _ = render_batch(scene.density.unsqueeze(0), scene.color.unsqueeze(0), scene.extent, poses, cfg)
    return img[0]


def render_multiview_aux(scene: Scene3D, poses: CameraPoseSet, cfg: RenderConfig):
    """(views (N,3,R,R), depths (N,R,R), opacities (N,R,R)) of one scene."""
    img, depth, opac = render_batch(
        scene.density.unsqueeze(0), scene.color.unsqueeze(0), scene.extent, poses, cfg
    )
    return img[0], depth[0], opac[0]

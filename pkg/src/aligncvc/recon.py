"""Feed-forward reconstruction: N posed views -> density/color voxel grid.

Each view runs through a small shared conv encoder; every voxel centre is
projected into every view and bilinearly samples that view's feature map;
per-view samples are mean-pooled (masked by frustum visibility) and two dense
heads map the pooled feature to density (softplus) and color (sigmoid).

The whole map is one differentiable expression, so gradients reach the input
pixels - and through them whatever generated the views.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPose, CameraPoseSet, project_points
from .scene import Scene3D


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


_PROJ_CACHE: dict = {}


def _projection_grid(poses: tuple, resolution: int, fov_deg: float, grid_size: int, extent: float, dtype):
    """Normalized sampling coordinates of voxel centres in each view.

    Returns (coords (N, G^3, 2) in grid_sample convention, valid (N, G^3)).
    """
    key = (poses, resolution, fov_deg, grid_size, extent, dtype)
    hit = _PROJ_CACHE.get(key)
    if hit is not None:
        return hit
    centers = Scene3D.empty(grid_size, extent, dtype=dtype).voxel_centers(dtype).reshape(-1, 3)
    coords, valid = [], []
    for az, el, rad in poses:
        pose = CameraPose(az, el, rad)
        rows, cols, z = project_points(centers, pose, resolution, fov_deg)
        x = (cols + 0.5) / resolution * 2.0 - 1.0
        y = (rows + 0.5) / resolution * 2.0 - 1.0
        ok = (z > 0) & (x.abs() <= 1.0) & (y.abs() <= 1.0)
        coords.append(torch.stack([x, y], dim=-1))
        valid.append(ok)
    out = (torch.stack(coords), torch.stack(valid).to(dtype))
    if len(_PROJ_CACHE) > 64:
        _PROJ_CACHE.clear()
    _PROJ_CACHE[key] = out
    return out


class Reconstructor(nn.Module):
    def __init__(
        self,
        grid_size: int = 16,
        extent: float = 1.0,
        feat_dim: int = 48,
        hidden: int = 64,
        resolution: int = 32,
        fov_deg: float = 40.0,
    ):
        super().__init__()
        self.grid_size = grid_size
        self.extent = extent
        self.resolution = resolution
        self.fov_deg = fov_deg
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 24, 3, 1, 1), _gn(24), nn.SiLU(),
            nn.Conv2d(24, 32, 3, 2, 1), _gn(32), nn.SiLU(),
            nn.Conv2d(32, feat_dim, 3, 1, 1), _gn(feat_dim), nn.SiLU(),
        )
        self.trunk = nn.Sequential(
            nn.Linear(feat_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
        )
        self.density_head = nn.Linear(hidden, 1)
        self.color_head = nn.Linear(hidden, 3)
        # start with low density so fresh models render mostly background
        nn.init.constant_(self.density_head.bias, -3.0)

    def forward(self, views: torch.Tensor, poses) -> tuple[torch.Tensor, torch.Tensor]:
        """views (B, N, 3, R, R) in [0, 1]-ish, poses shared across the batch.

        Returns (density (B, G, G, G), color (B, G, G, G, 3)).
        """
        if isinstance(poses, CameraPoseSet):
            pose_key = tuple(p.as_tuple() for p in poses)
        else:
            pose_key = tuple(tuple(float(v) for v in row) for row in poses)
        b, n = views.shape[:2]
        if n != len(pose_key):
            raise ValueError(f"{n} views but {len(pose_key)} poses")
        g = self.grid_size
        dtype = views.dtype
        coords, valid = _projection_grid(pose_key, self.resolution, self.fov_deg, g, self.extent, dtype)

        feats = self.encoder(views.reshape(b * n, *views.shape[2:]))  # (B*N, F, r, r)
        grid = coords.unsqueeze(1).repeat(b, 1, 1, 1)  # (B*N, 1, G^3, 2)
        samp = F.grid_sample(feats, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        samp = samp[:, :, 0, :].reshape(b, n, feats.shape[1], g**3)

        m = valid.unsqueeze(0).unsqueeze(2)  # (1, N, 1, G^3)
        pooled = (samp * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)  # (B, F, G^3)
        h = self.trunk(pooled.permute(0, 2, 1))  # (B, G^3, hidden)
        density = F.softplus(self.density_head(h)).squeeze(-1).reshape(b, g, g, g)
        color = torch.sigmoid(self.color_head(h)).reshape(b, g, g, g, 3)
        return density, color


def reconstruct(model: Reconstructor, views: torch.Tensor, poses) -> Scene3D:
    """Single-scene convenience wrapper; views (N, 3, R, R)."""
    if views.ndim != 4:
        raise ValueError(f"expected (N, 3, R, R) views, got {tuple(views.shape)}")
    density, color = model(views.unsqueeze(0), poses)
    return Scene3D(density[0], color[0], model.extent)

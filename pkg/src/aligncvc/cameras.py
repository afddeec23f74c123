"""Pinhole cameras on an origin-centred orbit.

A pose is (azimuth, elevation, radius): the camera sits at

    p = r * (cos e cos a, cos e sin a, sin e)

looking at the origin with +z as world up. Rays and projections share one
convention so that projecting a point on a pixel's ray lands back on that
pixel exactly: pixel (row i, col j) maps to normalized screen coordinates
u = (j + 0.5) / R * 2 - 1 (right-positive), v = (i + 0.5) / R * 2 - 1
(down-positive).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class CameraPose:
    azimuth_deg: float
    elevation_deg: float
    radius: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.azimuth_deg, self.elevation_deg, self.radius)


@dataclass(frozen=True)
class CameraPoseSet:
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        az = [round(p.azimuth_deg % 360.0, 9) for p in self.poses]
        if len(set(az)) != len(az):
            raise ValueError("pose azimuths must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i: int) -> CameraPose:
        return self.poses[i]

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """(N, 3) tensor of (azimuth_deg, elevation_deg, radius)."""
        return torch.tensor([p.as_tuple() for p in self.poses], dtype=dtype)


def make_pose_set(
    azimuths_deg=(0.0, 90.0, 180.0, 270.0),
    elevation_deg: float = 0.0,
    radius: float = 3.4,
) -> CameraPoseSet:
    """Orbit pose set at a common elevation and radius. Azimuths are
    normalized into [0, 360)."""
    if len(azimuths_deg) == 0:
        raise ValueError("need at least one azimuth")
    return CameraPoseSet(
        poses=tuple(CameraPose(float(a) % 360.0, float(elevation_deg), float(radius)) for a in azimuths_deg)
    )


def camera_basis(pose: CameraPose, dtype: torch.dtype = torch.float32):
    """Return (origin, right, up, forward) unit vectors as (3,) tensors."""
    a = math.radians(pose.azimuth_deg)
    e = math.radians(pose.elevation_deg)
    pos = torch.tensor(
        [
            pose.radius * math.cos(e) * math.cos(a),
            pose.radius * math.cos(e) * math.sin(a),
            pose.radius * math.sin(e),
        ],
        dtype=dtype,
    )
    forward = -pos / torch.linalg.norm(pos)
    world_up = torch.tensor([0.0, 0.0, 1.0], dtype=dtype)
    right = torch.linalg.cross(forward, world_up)
    nr = torch.linalg.norm(right)
    if float(nr) < 1e-8:
        raise ValueError("camera looking straight along world up; elevation +-90 unsupported")
    right = right / nr
    up = torch.linalg.cross(right, forward)
    return pos, right, up, forward


def ray_grid(pose: CameraPose, resolution: int, fov_deg: float, dtype: torch.dtype = torch.float32):
    """Per-pixel unit ray directions (R, R, 3) plus the shared origin (3,)."""
    pos, right, up, forward = camera_basis(pose, dtype)
    tan_half = math.tan(math.radians(fov_deg) / 2.0)
    idx = (torch.arange(resolution, dtype=dtype) + 0.5) / resolution * 2.0 - 1.0
    v, u = torch.meshgrid(idx, idx, indexing="ij")  # v: rows (down), u: cols (right)
    dirs = (
        forward.view(1, 1, 3)
        + u.unsqueeze(-1) * tan_half * right.view(1, 1, 3)
        - v.unsqueeze(-1) * tan_half * up.view(1, 1, 3)
    )
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    return pos, dirs


def project_points(points: torch.Tensor, pose: CameraPose, resolution: int, fov_deg: float):
    """Project world points (..., 3) to pixel coordinates.

    Returns (rows, cols, depth_along_axis) where rows/cols are continuous
    pixel coordinates (pixel centres at integers) and depth is the distance
    along the optical axis; points behind the camera get depth <= 0.
    """
    pos, right, up, forward = camera_basis(pose, points.dtype)
    rel = points - pos
    x = (rel * right).sum(-1)
    y = (rel * up).sum(-1)
    z = (rel * forward).sum(-1)
    tan_half = math.tan(math.radians(fov_deg) / 2.0)
    eps = torch.finfo(points.dtype).tiny
    zc = torch.clamp(z, min=eps)
    u = x / (zc * tan_half)
    v = -y / (zc * tan_half)
    cols = (u + 1.0) * 0.5 * resolution - 0.5
    rows = (v + 1.0) * 0.5 * resolution - 0.5
    return rows, cols, z

"""Explicit voxel scenes and their on-disk binary format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

_MAGIC = b"S3DB"
_VERSION = 1


@dataclass
class Scene3D:
    """Density/color voxel grid over the cube [-extent, extent]^3.

    density: (G, G, G) non-negative; color: (G, G, G, 3) in [0, 1].
    Cell centres sit at -extent + (idx + 0.5) * (2 * extent / G).
    """

    density: torch.Tensor
    color: torch.Tensor
    extent: float = 1.0

    def __post_init__(self):
        if self.density.ndim != 3 or len(set(self.density.shape)) != 1:
            raise ValueError(f"density must be a cubic grid, got {tuple(self.density.shape)}")
        if self.color.shape != (*self.density.shape, 3):
            raise ValueError(f"color must be density shape + (3,), got {tuple(self.color.shape)}")

    @property
    def grid_size(self) -> int:
        return self.density.shape[0]

    def stats(self) -> dict:
        d = self.density
        return {
            "grid_size": self.grid_size,
            "density_min": float(d.min()),
            "density_max": float(d.max()),
            "density_mean": float(d.mean()),
            "color_mean": float(self.color.mean()),
            "occupied_frac": float((d > 1.0).float().mean()),
        }

    def detach_cpu(self) -> "Scene3D":
        return Scene3D(self.density.detach().cpu(), self.color.detach().cpu(), self.extent)

    def save(self, path: str | Path) -> None:
        """Versioned binary: magic, version, G, extent, then float32 density
        and color grids in row-major order."""
        d = self.density.detach().cpu().numpy().astype(np.float32)
        c = self.color.detach().cpu().numpy().astype(np.float32)
        g = self.grid_size
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IIf", _VERSION, g, float(self.extent)))
            f.write(d.tobytes(order="C"))
            f.write(c.tobytes(order="C"))

    @staticmethod
    def load(path: str | Path) -> "Scene3D":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise ValueError(f"{path}: not a scene file (bad magic {magic!r})")
            version, g, extent = struct.unpack("<IIf", f.read(12))
            if version != _VERSION:
                raise ValueError(f"{path}: unsupported scene format version {version}")
            d = np.frombuffer(f.read(4 * g**3), dtype=np.float32).reshape(g, g, g)
            c = np.frombuffer(f.read(4 * g**3 * 3), dtype=np.float32).reshape(g, g, g, 3)
        return Scene3D(torch.from_numpy(d.copy()), torch.from_numpy(c.copy()), float(extent))

    @staticmethod
    def empty(grid_size: int, extent: float = 1.0, dtype: torch.dtype = torch.float32) -> "Scene3D":
        return Scene3D(
            torch.zeros(grid_size, grid_size, grid_size, dtype=dtype),
            torch.zeros(grid_size, grid_size, grid_size, 3, dtype=dtype),
            extent,
        )

    def voxel_centers(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """(G, G, G, 3) world coordinates of cell centres."""
        g = self.grid_size
        axis = -self.extent + (torch.arange(g, dtype=dtype) + 0.5) * (2.0 * self.extent / g)
        # grids are indexed [ix, iy, iz]
        xx, yy, zz = torch.meshgrid(axis, axis, axis, indexing="ij")
        return torch.stack([xx, yy, zz], dim=-1)

"""Procedural synthetic multi-view dataset.

Scenes are 1-4 colored primitives (boxes and spheres) voxelized into a
density/color grid, rendered at four orthogonal azimuths for ground truth and
at one held-out oblique pose for the conditioning image. Everything is a
deterministic function of (count, seed): rerunning produces byte-identical
files apart from timestamps.

Layout under out_dir:
    manifest.json
    scene_00000/{cond,view_0..N-1}.png      8-bit preview
    scene_00000/{cond,view_0..N-1}.raw      float32 (3,R,R) exact pixels
    scene_00000/scene.s3d                   ground-truth voxel grid
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cameras import CameraPose, CameraPoseSet, make_pose_set
from .renderer import RenderConfig, render, render_multiview
from .scene import Scene3D
from .seeding import np_rng, seed_for

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    shape: str  # "box" | "sphere"
    center: tuple[float, float, float]
    size: float  # half-extent for boxes, radius for spheres
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple[Primitive, ...]


def random_scene_spec(
    seed: int,
    min_primitives: int = 1,
    max_primitives: int = 4,
    center_range: float = 0.5,
    size_range: tuple[float, float] = (0.12, 0.28),
    axis_margin: float = 0.15,
) -> SceneSpec:
    """Sample a scene spec. The first primitive is kept off the vertical axis
    so no scene is exactly rotation-symmetric about the camera orbit."""
    rng = np_rng(seed)
    n = int(rng.integers(min_primitives, max_primitives + 1))
    prims = []
    for i in range(n):
        shape = "box" if rng.random() < 0.5 else "sphere"
        while True:
            center = rng.uniform(-center_range, center_range, size=3)
            if i > 0 or float(np.hypot(center[0], center[1])) >= axis_margin:
                break
        size = float(rng.uniform(*size_range))
        color = rng.uniform(0.1, 0.9, size=3)
        prims.append(Primitive(shape, tuple(float(c) for c in center), size, tuple(float(c) for c in color)))
    return SceneSpec(seed=seed, primitives=tuple(prims))


def generate_scene(
    spec: SceneSpec,
    grid_size: int = 16,
    extent: float = 1.0,
    density: float = 60.0,
) -> Scene3D:
    """Voxelize primitives: opaque interiors at a constant density, hard
    surfaces. Color is also painted into a one-cell halo around each
    primitive (cores override halos, later primitives override earlier) so
    trilinear color interpolation does not bleed background black into
    silhouettes. Deterministic per spec."""
    for p in spec.primitives:
        if max(abs(c) for c in p.center) + p.size > extent:
            raise ValueError(f"primitive {p} extends outside the grid extent {extent}")
    scene = Scene3D.empty(grid_size, extent)
    centers = scene.voxel_centers()  # (G,G,G,3)
    cell = 2.0 * extent / grid_size

    def inside(p: Primitive, slack: float) -> torch.Tensor:
        c = torch.tensor(p.center)
        if p.shape == "box":
            return (centers - c).abs().amax(dim=-1) <= p.size + slack
        if p.shape == "sphere":
            return torch.linalg.norm(centers - c, dim=-1) <= p.size + slack
        raise ValueError(f"unknown primitive shape {p.shape!r}")

    for p in spec.primitives:  # halos first
        m = inside(p, cell)
        scene.color[m] = torch.tensor(p.color)
    for p in spec.primitives:  # cores override
        m = inside(p, 0.0)
        scene.density[m] = density
        scene.color[m] = torch.tensor(p.color)
    return scene


@dataclass
class DatasetManifest:
    format_version: int
    count: int
    resolution: int
    n_views: int
    grid_size: int
    extent: float
    seed: int
    azimuths: list[float]
    elevation: float
    radius: float
    cond_azimuth: float
    cond_elevation: float
    fov_deg: float
    samples_per_ray: int
    gt_density: float
    scene_dirs: list[str] = field(default_factory=list)
    root: str = ""

    def pose_set(self) -> CameraPoseSet:
        return make_pose_set(self.azimuths, self.elevation, self.radius)

    def cond_pose(self) -> CameraPose:
        return CameraPose(self.cond_azimuth, self.cond_elevation, self.radius)

    def render_config(self) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray, resolution=self.resolution)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "root"}
        return d

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        tmp = out_dir / "manifest.json.tmp"
        final = out_dir / "manifest.json"
        with open(tmp, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, final)  # atomic finalize: no manifest until complete
        return final

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        with open(path) as f:
            d = json.load(f)
        if d.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('format_version')}")
        m = DatasetManifest(root=str(path.parent), **d)
        for rel in m.scene_dirs:
            sd = Path(m.root) / rel
            expected = [f"view_{i}.raw" for i in range(m.n_views)] + ["cond.raw", "scene.s3d"]
            for name in expected:
                if not (sd / name).exists():
                    raise FileNotFoundError(f"manifest references missing file {sd / name}")
        return m


def _save_image(img: torch.Tensor, stem: Path) -> None:
    arr = img.detach().cpu().numpy().astype(np.float32)  # (3,R,R)
    with open(stem.with_suffix(".raw"), "wb") as f:
        f.write(arr.tobytes(order="C"))
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8).save(stem.with_suffix(".png"))


def _load_image(stem: Path, resolution: int) -> torch.Tensor:
    raw = np.fromfile(stem.with_suffix(".raw"), dtype=np.float32)
    return torch.from_numpy(raw.reshape(3, resolution, resolution).copy())


def build_dataset(
    count: int,
    seed: int,
    out_dir: str | Path,
    resolution: int = 32,
    grid_size: int = 16,
    extent: float = 1.0,
    azimuths=(0.0, 90.0, 180.0, 270.0),
    elevation: float = 0.0,
    radius: float = 3.4,
    cond_azimuth: float = 30.0,
    cond_elevation: float = 20.0,
    fov_deg: float = 40.0,
    samples_per_ray: int = 32,
    gt_density: float = 60.0,
    min_primitives: int = 1,
    max_primitives: int = 4,
) -> DatasetManifest:
    """Generate, render and write `count` scenes; returns the manifest.

    The manifest is written last (atomically), so a partial run leaves no
    manifest behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    poses = make_pose_set(azimuths, elevation, radius)
    cond_pose = CameraPose(cond_azimuth, cond_elevation, radius)
    cfg = RenderConfig(samples_per_ray=samples_per_ray, resolution=resolution, fov_deg=fov_deg)

    manifest = DatasetManifest(
        format_version=MANIFEST_VERSION,
        count=count,
        resolution=resolution,
        n_views=len(poses),
        grid_size=grid_size,
        extent=extent,
        seed=seed,
        azimuths=[p.azimuth_deg for p in poses],
        elevation=elevation,
        radius=radius,
        cond_azimuth=cond_azimuth,
        cond_elevation=cond_elevation,
        fov_deg=fov_deg,
        samples_per_ray=samples_per_ray,
        gt_density=gt_density,
        root=str(out_dir),
    )
    for i in range(count):
        spec = random_scene_spec(
            seed_for(seed, "scene", i),
            min_primitives=min_primitives,
            max_primitives=max_primitives,
        )
        scene = generate_scene(spec, grid_size=grid_size, extent=extent, density=gt_density)
        rel = f"scene_{i:05d}"
        sd = out_dir / rel
        sd.mkdir(exist_ok=True)
        views = render_multiview(scene, poses, cfg)
        for v in range(len(poses)):
            _save_image(views[v], sd / f"view_{v}")
        _save_image(render(scene, cond_pose, cfg), sd / "cond")
        scene.save(sd / "scene.s3d")
        manifest.scene_dirs.append(rel)
    manifest.save(out_dir)
    return manifest


@dataclass
class SceneItem:
    index: int
    cond: torch.Tensor  # (3,R,R) in [0,1]
    views: torch.Tensor  # (N,3,R,R) in [0,1]
    poses: CameraPoseSet
    scene_path: Path

    def load_scene(self) -> Scene3D:
        return Scene3D.load(self.scene_path)


def load_item(manifest: DatasetManifest, index: int) -> SceneItem:
    if not (0 <= index < manifest.count):
        raise IndexError(f"scene index {index} out of range [0, {manifest.count})")
    sd = Path(manifest.root) / manifest.scene_dirs[index]
    r = manifest.resolution
    try:
        views = torch.stack([_load_image(sd / f"view_{v}", r) for v in range(manifest.n_views)])
        cond = _load_image(sd / "cond", r)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"dataset file missing for scene {index}: {e}") from e
    return SceneItem(
        index=index,
        cond=cond,
        views=views,
        poses=manifest.pose_set(),
        scene_path=sd / "scene.s3d",
    )


def load_batch(
    manifest: DatasetManifest,
    indices,
    seed: int | None = None,
) -> list[SceneItem]:
    """Load the given scene indices in order; with a seed, the order is a
    reproducible shuffle instead."""
    indices = list(indices)
    if seed is not None:
        perm = np_rng(seed).permutation(len(indices))
        indices = [indices[int(i)] for i in perm]
    return [load_item(manifest, i) for i in indices]


def stack_batch(items: list[SceneItem]):
    """(cond (B,3,R,R), views (B,N,3,R,R), poses) for training."""
    cond = torch.stack([it.cond for it in items])
    views = torch.stack([it.views for it in items])
    return cond, views, items[0].poses

"""Evaluation metrics: PSNR, SSIM, and a depth-warp cross-view-consistency
proxy, plus the held-out evaluation driver.

The CVC proxy scores a set of renders by warping each view into its azimuth
neighbour through the renderer's expected depth: opaque pixels are lifted to
3D along their ray, projected into the neighbour view, and compared
photometrically. Per ordered pair the top-100 agreements are averaged (pixels
are "matched points"; agreement a = max(0, 1 - |dc| / scale)), then averaged
over pairs. Renders of a single explicit scene score near 1; view sets whose
images do not share one geometry score low.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.signal import convolve2d

from .cameras import CameraPose, CameraPoseSet, project_points, ray_grid


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB (the value for MSE == 0)."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * math.log10(peak**2 / mse), 99.0)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM, mean over valid windows and channels.

    C1 = (0.01 peak)^2, C2 = (0.03 peak)^2. Inputs are (H, W) or (C, H, W).
    """
    if window % 2 != 1:
        raise ValueError("window must be odd")
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    k = _gaussian_kernel(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = convolve2d(x, k, mode="valid")
        my = convolve2d(y, k, mode="valid")
        sxx = convolve2d(x * x, k, mode="valid") - mx * mx
        syy = convolve2d(y * y, k, mode="valid") - my * my
        sxy = convolve2d(x * y, k, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def _bilinear_sample(img: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Sample (C, H, W) at continuous in-range (rows, cols); returns (P, C)."""
    h, w = img.shape[-2:]
    r0 = torch.clamp(torch.floor(rows), 0, h - 1)
    c0 = torch.clamp(torch.floor(cols), 0, w - 1)
    r1 = torch.clamp(r0 + 1, 0, h - 1)
    c1 = torch.clamp(c0 + 1, 0, w - 1)
    fr = (rows - r0).unsqueeze(-1)
    fc = (cols - c0).unsqueeze(-1)
    r0, c0, r1, c1 = r0.long(), c0.long(), r1.long(), c1.long()
    flat = img.reshape(img.shape[0], -1).t()  # (H*W, C)
    v00 = flat[r0 * w + c0]
    v01 = flat[r0 * w + c1]
    v10 = flat[r1 * w + c0]
    v11 = flat[r1 * w + c1]
    return (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )


@dataclass(frozen=True)
class CvcResult:
    score: float
    degenerate: bool  # no valid warp pixels anywhere

    def __float__(self) -> float:
        return self.score


def cvc_proxy(
    views: torch.Tensor,
    depths: torch.Tensor,
    opacities: torch.Tensor,
    poses: CameraPoseSet,
    fov_deg: float = 40.0,
    scale: float = 0.5,
    opacity_threshold: float = 0.5,
    top_k: int = 100,
) -> CvcResult:
    """Depth-warp consistency in [0, 1] for (N, 3, R, R) views.

    depths/opacities are the renderer's expected depth and accumulated weight
    per pixel. A source pixel participates when it is opaque, warps inside
    the neighbour image, and lands on opaque content there.
    """
    n = views.shape[0]
    r = views.shape[-1]
    if n < 2:
        return CvcResult(0.0, True)
    pair_scores = []
    degenerate = False
    for i in range(n):
        j = (i + 1) % n
        pose_i, pose_j = poses[i], poses[j]
        origin, dirs = ray_grid(pose_i, r, fov_deg, dtype=views.dtype)
        pts = origin.view(1, 1, 3) + dirs * depths[i].unsqueeze(-1)
        rows, cols, z = project_points(pts, pose_j, r, fov_deg)
        valid = (
            (opacities[i] > opacity_threshold)
            & (z > 0)
            & (rows >= 0) & (rows <= r - 1)
            & (cols >= 0) & (cols <= r - 1)
        )
        if not bool(valid.any()):
            degenerate = True
            pair_scores.append(0.0)
            continue
        rs, cs = rows[valid], cols[valid]
        tgt = _bilinear_sample(views[j], rs, cs)  # (P, 3)
        tgt_op = _bilinear_sample(opacities[j].unsqueeze(0), rs, cs)[:, 0]
        src = views[i].permute(1, 2, 0)[valid]
        keep = tgt_op > opacity_threshold
        if not bool(keep.any()):
            degenerate = True
            pair_scores.append(0.0)
            continue
        dc = (src[keep] - tgt[keep]).abs().mean(dim=-1)
        agree = torch.clamp(1.0 - dc / scale, min=0.0)
        k = min(top_k, agree.numel())
        pair_scores.append(float(agree.topk(k).values.mean()))
    return CvcResult(float(np.mean(pair_scores)), degenerate)


@dataclass
class SceneEval:
    index: int
    psnr: float = float("nan")
    ssim: float = float("nan")
    cvc: float = float("nan")
    cvc_degenerate: bool = False
    seconds: float = 0.0
    error: str = ""


@dataclass
class EvalReport:
    pipeline: str
    scenes: list[SceneEval] = field(default_factory=list)

    @property
    def n_scenes(self) -> int:
        return len(self.scenes)

    def _ok(self) -> list[SceneEval]:
        return [s for s in self.scenes if not s.error]

    def aggregate(self) -> dict:
        ok = self._ok()
        agg = {
            "pipeline": self.pipeline,
            "n_scenes": self.n_scenes,
            "n_failed": self.n_scenes - len(ok),
        }
        for name in ("psnr", "ssim", "cvc", "seconds"):
            agg[name] = float(np.mean([getattr(s, name) for s in ok])) if ok else float("nan")
        return agg

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate(),
            "scenes": [s.__dict__ for s in self.scenes],
        }

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("scene_id,psnr,ssim,cvc,seconds\n")
            for s in self.scenes:
                f.write(f"{s.index},{s.psnr:.6f},{s.ssim:.6f},{s.cvc:.6f},{s.seconds:.3f}\n")


def evaluate(
    bundle,
    manifest,
    split: list[int],
    plan,
    pipeline: str = "aligncvc",
    seed: int = 0,
) -> EvalReport:
    """Sample each held-out scene from its condition image, render the final
    scene at the ground-truth poses and score against the stored views."""
    from .data import load_item
    from .renderer import render_multiview_aux
    from .sampling import aligncvc_sample, two_stage_sample
    from .seeding import seed_for

    report = EvalReport(pipeline=pipeline)
    cfg = bundle.render_cfg
    for index in split:
        rec = SceneEval(index=index)
        t0 = time.perf_counter()
        try:
            item = load_item(manifest, index)
            scene_seed = seed_for(seed, "eval", index)
            if pipeline == "aligncvc":
                scene, _ = aligncvc_sample(
                    item.cond, item.poses, bundle.student, bundle.recon, plan, scene_seed,
                    bundle.schedule, cfg,
                )
            elif pipeline == "two_stage":
                _, scene, _ = two_stage_sample(
                    item.cond, item.poses, bundle.student, bundle.recon, plan, scene_seed,
                    bundle.schedule, cfg,
                )
            else:
                raise ValueError(f"unknown pipeline {pipeline!r}")
            renders, depths, opac = render_multiview_aux(scene, item.poses, cfg)
            rec.psnr = float(np.mean([psnr(renders[v], item.views[v]) for v in range(len(item.poses))]))
            rec.ssim = float(np.mean([ssim(renders[v], item.views[v]) for v in range(len(item.poses))]))
            c = cvc_proxy(renders, depths, opac, item.poses, fov_deg=cfg.fov_deg)
            rec.cvc = c.score
            rec.cvc_degenerate = c.degenerate
        except Exception as e:  # per-scene failures recorded, not fatal
            rec.error = f"{type(e).__name__}: {e}"
        rec.seconds = time.perf_counter() - t0
        report.scenes.append(rec)
    return report

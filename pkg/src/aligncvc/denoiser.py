"""Multi-view eps-prediction network: frozen teacher and LoRA student.

A small three-level conv encoder/decoder shared across views, with one
cross-view mixing layer at the bottleneck (views exchange information through
their mean feature map) and additive conditioning on the timestep embedding,
a learned pose embedding, and the encoded condition image, all injected at
the bottleneck.

The student is the same network with low-rank adapters on every bottleneck
and decoder convolution. Adapters are zero-initialized, so a fresh student is
bit-identical to its teacher; base weights never receive gradients.

All image tensors here live in the [-1, 1] signal range.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPoseSet
from .diffusion import NoiseSchedule, predict_x0, q_sample, to_signal
from .seeding import np_rng, seed_for, torch_gen


class LoRAConv(nn.Module):
    """Conv2d / ConvTranspose2d with an optional low-rank additive adapter.

    rank == 0 keeps just the base convolution. Otherwise the adapter is
    down (same spatial config, rank channels) followed by a 1x1 up projection
    initialized to zero, scaled by 1/rank.
    """

    def __init__(self, conv: nn.Module, rank: int = 0):
        super().__init__()
        self.base = conv
        self.rank = rank
        if rank > 0:
            if isinstance(conv, nn.ConvTranspose2d):
                self.down = nn.ConvTranspose2d(
                    conv.in_channels, rank, conv.kernel_size, conv.stride, conv.padding, bias=False
                )
            else:
                self.down = nn.Conv2d(
                    conv.in_channels, rank, conv.kernel_size, conv.stride, conv.padding, bias=False
                )
            self.up = nn.Conv2d(rank, conv.out_channels, 1, bias=False)
            nn.init.zeros_(self.up.weight)
            self.scale = 1.0 / rank

    def forward(self, x):
        y = self.base(x)
        if self.rank > 0:
            y = y + self.scale * self.up(self.down(x))
        return y


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (B,) timesteps to (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def pose_features(poses) -> torch.Tensor:
    """(N, 5) features [sin az, cos az, sin el, cos el, radius/10]."""
    if isinstance(poses, CameraPoseSet):
        poses = poses.as_tensor()
    az = torch.deg2rad(poses[..., 0])
    el = torch.deg2rad(poses[..., 1])
    return torch.stack(
        [torch.sin(az), torch.cos(az), torch.sin(el), torch.cos(el), poses[..., 2] / 10.0], dim=-1
    )


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class MultiViewDenoiser(nn.Module):
    def __init__(
        self,
        channels: tuple[int, int, int] = (16, 32, 64),
        emb_dim: int = 64,
        lora_rank: int = 0,
    ):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.emb_dim = emb_dim
        self.lora_rank = lora_rank
        r = lora_rank

        self.enc1 = nn.Conv2d(3, c1, 3, 1, 1)
        self.gn1 = _gn(c1)
        self.enc2 = nn.Conv2d(c1, c2, 3, 2, 1)
        self.gn2 = _gn(c2)
        self.enc3 = nn.Conv2d(c2, c3, 3, 2, 1)
        self.gn3 = _gn(c3)

        self.t_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, c3))
        self.pose_mlp = nn.Sequential(nn.Linear(5, emb_dim), nn.SiLU(), nn.Linear(emb_dim, c3))
        self.cond_proj = LoRAConv(nn.Conv2d(c3, c3, 1), r)

        self.mid1 = LoRAConv(nn.Conv2d(c3, c3, 3, 1, 1), r)
        self.gn_mid1 = _gn(c3)
        self.mix = LoRAConv(nn.Conv2d(c3, c3, 1), r)
        self.mid2 = LoRAConv(nn.Conv2d(c3, c3, 3, 1, 1), r)
        self.gn_mid2 = _gn(c3)

        self.up1 = LoRAConv(nn.ConvTranspose2d(c3, c2, 4, 2, 1), r)
        self.dec1 = LoRAConv(nn.Conv2d(c2 + c2, c2, 3, 1, 1), r)
        self.gn_dec1 = _gn(c2)
        self.up2 = LoRAConv(nn.ConvTranspose2d(c2, c1, 4, 2, 1), r)
        self.dec2 = LoRAConv(nn.Conv2d(c1 + c1, c1, 3, 1, 1), r)
        self.gn_dec2 = _gn(c1)
        self.out = LoRAConv(nn.Conv2d(c1, 3, 3, 1, 1), r)
        nn.init.zeros_(self.out.base.weight)
        nn.init.zeros_(self.out.base.bias)

    def _encode(self, x: torch.Tensor):
        e1 = F.silu(self.gn1(self.enc1(x)))
        e2 = F.silu(self.gn2(self.enc2(e1)))
        e3 = F.silu(self.gn3(self.enc3(e2)))
        return e1, e2, e3

    def forward(self, x: torch.Tensor, t, x_c: torch.Tensor, poses) -> torch.Tensor:
        """Predict per-view noise.

        x: (B, N, 3, R, R) noised views; t: int or (B,) tensor; x_c: (B, 3, R, R)
        condition image; poses: CameraPoseSet or (N, 3) tensor of
        (azimuth_deg, elevation_deg, radius).
        """
        b, n, c, h, w = x.shape
        if x_c.shape != (b, c, h, w):
            raise ValueError(f"condition shape {tuple(x_c.shape)} does not match views {tuple(x.shape)}")
        flat = x.reshape(b * n, c, h, w)
        e1, e2, e3 = self._encode(flat)

        _, _, ce3 = self._encode(x_c)
        cond = self.cond_proj(ce3)  # (B, c3, h/4, w/4)

        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), int(t), dtype=torch.long)
        elif t.ndim == 0:
            t = t.expand(b).long()
        temb = self.t_mlp(timestep_embedding(t, self.emb_dim))  # (B, c3)

        pf = pose_features(poses).to(x.dtype)
        if pf.ndim == 2:
            pf = pf.unsqueeze(0).expand(b, -1, -1)
        pemb = self.pose_mlp(pf)  # (B, N, c3)

        c3 = e3.shape[1]
        hh, ww = e3.shape[-2:]
        h3 = e3.reshape(b, n, c3, hh, ww)
        h3 = h3 + cond.unsqueeze(1) + temb.view(b, 1, c3, 1, 1) + pemb.view(b, n, c3, 1, 1)
        h3 = h3.reshape(b * n, c3, hh, ww)

        h3 = F.silu(self.gn_mid1(self.mid1(h3)))
        # cross-view mixing: each view receives a projection of the view mean;
        # accumulate in float64 so the result is invariant to view order
        mean = h3.reshape(b, n, c3, hh, ww).mean(dim=1, dtype=torch.float64).to(h3.dtype)
        h3 = h3 + self.mix(mean).repeat_interleave(n, dim=0)
        h3 = F.silu(self.gn_mid2(self.mid2(h3)))

        d1 = self.up1(h3)
        d1 = F.silu(self.gn_dec1(self.dec1(torch.cat([d1, e2], dim=1))))
        d2 = self.up2(d1)
        d2 = F.silu(self.gn_dec2(self.dec2(torch.cat([d2, e1], dim=1))))
        return self.out(d2).reshape(b, n, c, h, w)

    def adapter_parameters(self):
        for m in self.modules():
            if isinstance(m, LoRAConv) and m.rank > 0:
                yield m.down.weight
                yield m.up.weight

    def adapter_state_keys(self) -> set[str]:
        return {
            k
            for k, _ in self.named_parameters()
            if k.endswith("down.weight") or k.endswith("up.weight")
        }

    def freeze_base(self):
        """Only adapter factors stay trainable."""
        adapters = set(id(p) for p in self.adapter_parameters())
        for p in self.parameters():
            p.requires_grad_(id(p) in adapters)


def make_student(teacher: MultiViewDenoiser, rank: int) -> MultiViewDenoiser:
    """LoRA student initialized to reproduce the teacher exactly."""
    student = MultiViewDenoiser(teacher.channels, teacher.emb_dim, lora_rank=rank)
    missing, unexpected = student.load_state_dict(teacher.state_dict(), strict=False)
    if unexpected:
        raise RuntimeError(f"teacher state had unexpected keys: {unexpected}")
    extra = set(missing) - student.adapter_state_keys()
    if extra:
        raise RuntimeError(f"student is missing non-adapter keys: {extra}")
    student.freeze_base()
    return student


def student_denoise(model: MultiViewDenoiser, x_t, t, x_c, poses, s: NoiseSchedule):
    """One eps prediction plus the implied clean-signal estimate."""
    eps = model(x_t, t, x_c, poses)
    return eps, predict_x0(x_t, eps, t, s)


def pretrain_teacher(
    items: list,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    schedule: NoiseSchedule,
    channels: tuple[int, int, int] = (16, 32, 64),
    emb_dim: int = 64,
    log_every: int = 0,
    holdout: list | None = None,
):
    """Standard denoising pretraining over in-memory scene items.

    Minimizes ||eps - model(q_sample(x0, t, eps), t, x_c, poses)||^2 with t
    uniform per item. Deterministic for a fixed seed. Returns the frozen
    model and the per-step loss history.
    """
    if len(items) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    torch.manual_seed(seed_for(seed, "teacher_init"))
    model = MultiViewDenoiser(channels, emb_dim, lora_rank=0)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    poses = items[0].poses
    cond_all = torch.stack([it.cond for it in items])
    views_all = torch.stack([it.views for it in items])

    def denoise_loss(cond, views, gen):
        b = views.shape[0]
        t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
        eps = torch.randn(views.shape, generator=gen)
        x0 = to_signal(views)
        x_t = q_sample(x0, t, eps, schedule)
        pred = model(x_t, t, to_signal(cond), poses)
        return F.mse_loss(pred, eps)

    history = []
    hold_cond = hold_views = None
    if holdout:
        hold_cond = torch.stack([it.cond for it in holdout])
        hold_views = torch.stack([it.views for it in holdout])

    def holdout_loss():
        if hold_cond is None:
            return None
        with torch.no_grad():
            return float(denoise_loss(hold_cond, hold_views, torch_gen(seed_for(seed, "holdout"))))

    initial_holdout = holdout_loss()
    for step in range(steps):
        idx = np_rng(seed_for(seed, "batch", step)).choice(len(items), size=min(batch_size, len(items)), replace=False)
        gen = torch_gen(seed_for(seed, "noise", step))
        loss = denoise_loss(cond_all[idx], views_all[idx], gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))
        if log_every and (step + 1) % log_every == 0:
            print(f"[teacher] step {step + 1}/{steps} loss {history[-1]:.4f}", flush=True)
    final_holdout = holdout_loss()
    model.requires_grad_(False)
    return model, {"loss": history, "holdout_initial": initial_holdout, "holdout_final": final_holdout}

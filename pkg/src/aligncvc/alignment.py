"""Training objectives: soft alignment for the generator, hard alignment for
the reconstructor, and the joint step that ties them together.

Soft alignment is an asynchronous score-distillation gradient: the frozen
teacher denoises the student's current prediction diffused to two timesteps
t and t + dt (same noise draw), and the weighted difference of its two noise
predictions is the prescribed gradient with respect to the prediction. It is
injected through a stop-gradient surrogate so autodiff applies the chain
factor onto the student parameters.

Hard alignment is a non-saturating GAN on renders of the reconstruction,
assisted by mean-squared regression against the ground-truth views. Both
flow through the renderer and reconstructor back into the generator, keeping
the gradient connection between the two models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import MultiViewDenoiser
from .diffusion import NoiseSchedule, TimestepPlan, from_signal, predict_x0, q_sample, to_signal
from .recon import Reconstructor
from .renderer import RenderConfig, render_batch
from .seeding import seed_for, torch_gen

_PROB_EPS = 1e-6  # probability clamp against log(0)


@dataclass(frozen=True)
class DistillConfig:
    """Weighting and timestep sampling for the distillation gradient.

    The shift dt is sampled from [delta_t_min, delta_t_max] (negative by
    default: the second teacher evaluation sees a lower noise level) and
    t + dt is clamped into [1, T].
    """

    omega_const: float = 1.0
    delta_t_min: int = -150
    delta_t_max: int = -50
    t_min: int = 50
    t_max: int = 950

    def omega(self, t: int) -> float:
        return self.omega_const


@dataclass(frozen=True)
class AlignConfig:
    distill: DistillConfig = field(default_factory=DistillConfig)
    lambda_distill: float = 1.0
    lambda_gan: float = 0.1
    lambda_recon: float = 1.0
    gan_variant: str = "non_saturating"
    objective: str = "distill"  # student objective: distill | diffusion | gan
    recon_objective: str = "gan"  # reconstructor alignment: gan | distill

    def __post_init__(self):
        if self.objective not in ("distill", "diffusion", "gan"):
            raise ValueError(f"unknown student objective {self.objective!r}")
        if self.recon_objective not in ("gan", "distill"):
            raise ValueError(f"unknown recon objective {self.recon_objective!r}")
        if self.gan_variant != "non_saturating":
            raise ValueError(f"unknown gan variant {self.gan_variant!r}")


class Discriminator(nn.Module):
    """Strided conv classifier over channel-concatenated views, so it can
    exploit cross-view structure; one logit per batch element."""

    def __init__(self, n_views: int = 4, resolution: int = 32, base: int = 32):
        super().__init__()
        self.n_views = n_views
        layers = [nn.Conv2d(3 * n_views, base, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = base
        size = resolution // 2
        while size > 4:
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.GroupNorm(8, ch * 2), nn.LeakyReLU(0.2)]
            ch *= 2
            size //= 2
        layers += [nn.Conv2d(ch, 1, size, 1, 0)]
        self.net = nn.Sequential(*layers)

    def forward(self, views: torch.Tensor) -> torch.Tensor:
        """views (B, N, 3, R, R) -> logits (B,)."""
        b, n = views.shape[:2]
        if n != self.n_views:
            raise ValueError(f"discriminator built for {self.n_views} views, got {n}")
        return self.net(views.reshape(b, n * 3, *views.shape[3:])).reshape(b)


def _probs(disc: Discriminator, views: torch.Tensor) -> torch.Tensor:
    return torch.clamp(torch.sigmoid(disc(views)), _PROB_EPS, 1.0 - _PROB_EPS)


def gan_loss_discriminator(disc: Discriminator, x_gt: torch.Tensor, x_fake: torch.Tensor) -> torch.Tensor:
    """E[log D(gt)] + E[log(1 - D(fake))]; the discriminator maximizes this
    (training descends its negation)."""
    if x_gt.shape != x_fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    return torch.log(_probs(disc, x_gt)).mean() + torch.log(1.0 - _probs(disc, x_fake)).mean()


def gan_loss_generator(disc: Discriminator, x_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -E[log D(fake)]."""
    return -torch.log(_probs(disc, x_fake)).mean()


def recon_loss(x_gt: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all views and pixels (mean, not sum, so
    tolerances stay resolution-independent)."""
    if x_gt.shape != x_tilde.shape:
        raise ValueError("batches must have the same shape")
    return F.mse_loss(x_tilde, x_gt)


def draw_distill_times(cfg: DistillConfig, T: int, gen: torch.Generator) -> tuple[int, int]:
    """One (t, t_shifted) draw per batch; the shifted timestep is clamped
    into [1, T]."""
    t = int(torch.randint(cfg.t_min, cfg.t_max + 1, (1,), generator=gen))
    dt = int(torch.randint(cfg.delta_t_min, cfg.delta_t_max + 1, (1,), generator=gen))
    return t, min(max(t + dt, 1), T)


def distill_gradient_at(
    x_hat: torch.Tensor,
    x_c: torch.Tensor,
    poses,
    teacher_fn,
    s: NoiseSchedule,
    cfg: DistillConfig,
    t: int,
    t_shifted: int,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Gradient w.r.t. x_hat for explicit draws: omega(t) * (teacher noise
    prediction at t minus at t_shifted), both on the same-eps diffusion of
    x_hat. The teacher receives no parameter gradient."""
    with torch.no_grad():
        x_t = q_sample(x_hat, t, eps, s)
        e1 = teacher_fn(x_t, t, x_c, poses)
        if t_shifted == t:
            e2 = e1
        else:
            x_ts = q_sample(x_hat, t_shifted, eps, s)
            e2 = teacher_fn(x_ts, t_shifted, x_c, poses)
        return cfg.omega(t) * (e1 - e2)


def distill_gradient(
    x_hat: torch.Tensor,
    x_c: torch.Tensor,
    poses,
    teacher_fn,
    s: NoiseSchedule,
    cfg: DistillConfig,
    seed: int,
) -> torch.Tensor:
    """Seeded draw of (t, dt, eps) followed by distill_gradient_at."""
    gen = torch_gen(seed)
    t, t_shifted = draw_distill_times(cfg, s.T, gen)
    eps = torch.randn(x_hat.shape, generator=gen, dtype=x_hat.dtype)
    return distill_gradient_at(x_hat, x_c, poses, teacher_fn, s, cfg, t, t_shifted, eps)


def distill_surrogate(x_hat: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Stop-gradient surrogate whose autodiff gradient w.r.t. x_hat is
    grad / numel; the mean reduction matches the mean-reduced regression
    term so default loss weights stay comparable."""
    return (grad.detach() * x_hat).mean()


def diffusion_loss_variant(
    student: MultiViewDenoiser,
    batch,
    s: NoiseSchedule,
    seed: int,
) -> torch.Tensor:
    """Plain denoising MSE on the student; the ablation replacement for the
    distillation objective."""
    cond, views, poses = batch
    gen = torch_gen(seed)
    b = views.shape[0]
    t = torch.randint(1, s.T + 1, (b,), generator=gen)
    eps = torch.randn(views.shape, generator=gen, dtype=views.dtype)
    x_t = q_sample(to_signal(views), t, eps, s)
    pred = student(x_t, t, to_signal(cond), poses)
    return F.mse_loss(pred, eps)


@dataclass
class ModelBundle:
    teacher: MultiViewDenoiser
    student: MultiViewDenoiser
    recon: Reconstructor
    disc: Discriminator
    schedule: NoiseSchedule
    plan: TimestepPlan
    render_cfg: RenderConfig
    disc_mvg: Discriminator | None = None  # hard-aligned-generator ablation


@dataclass
class LossBundle:
    l_distill_surrogate: float
    l_gan_d: float
    l_gan_g: float
    l_recon: float
    lambda_distill: float
    lambda_gan: float
    lambda_recon: float
    t_k: int = 0

    def terms(self) -> dict:
        return {
            "l_distill_surrogate": self.l_distill_surrogate,
            "l_gan_d": self.l_gan_d,
            "l_gan_g": self.l_gan_g,
            "l_recon": self.l_recon,
        }


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, value: float, step_seed: int):
        super().__init__(f"non-finite loss term {term}={value} (step seed {step_seed})")
        self.term = term


def _check_finite(name: str, value: float, seed: int) -> float:
    if not torch.isfinite(torch.tensor(float(value))):
        raise NonFiniteLossError(name, float(value), seed)
    return float(value)


def joint_train_step(
    batch,
    models: ModelBundle,
    opts,
    cfg: AlignConfig,
    seed: int,
) -> LossBundle:
    """One coordinated update.

    1. the student one-step-predicts clean views from ground truth re-noised
       at a plan timestep drawn uniformly (mirroring the sampling loop);
    2. the prediction is reconstructed and re-rendered;
    3. the discriminator ascends its objective on (gt, detached renders);
    4. student adapter and reconstructor descend
       lambda_distill * student objective + lambda_gan * render alignment
       + lambda_recon * regression, with render gradients flowing through
       the reconstructor into the student.

    opts is (generator_optimizer, discriminator_optimizer) or
    (..., ..., mvg_discriminator_optimizer).
    """
    cond, views_gt, poses = batch
    opt_gen, opt_disc = opts[0], opts[1]
    opt_disc_mvg = opts[2] if len(opts) > 2 else None
    s = models.schedule

    gen = torch_gen(seed)
    k_idx = int(torch.randint(0, models.plan.K, (1,), generator=gen))
    t_k = models.plan.steps[k_idx]
    eps0 = torch.randn(views_gt.shape, generator=gen, dtype=views_gt.dtype)

    x0_sig = to_signal(views_gt)
    xc_sig = to_signal(cond)
    x_t = q_sample(x0_sig, t_k, eps0, s)
    eps_pred = models.student(x_t, t_k, xc_sig, poses)
    x_hat = predict_x0(x_t, eps_pred, t_k, s)  # signal space, in the graph
    views_hat = from_signal(x_hat)

    density, color = models.recon(views_hat, poses)
    x_tilde, _, _ = render_batch(density, color, models.recon.extent, poses, models.render_cfg)

    # -- discriminator update (never touches generator parameters)
    l_gan_d = 0.0
    if cfg.lambda_gan > 0 and cfg.recon_objective == "gan":
        d_val = gan_loss_discriminator(models.disc, views_gt, x_tilde.detach())
        opt_disc.zero_grad()
        (-d_val).backward()
        opt_disc.step()
        l_gan_d = _check_finite("l_gan_d", float(d_val), seed)

    if cfg.objective == "gan" and cfg.lambda_distill > 0:
        if models.disc_mvg is None or opt_disc_mvg is None:
            raise ValueError("hard-aligned generator objective needs disc_mvg and its optimizer")
        d_val2 = gan_loss_discriminator(models.disc_mvg, views_gt, views_hat.detach())
        opt_disc_mvg.zero_grad()
        (-d_val2).backward()
        opt_disc_mvg.step()

    # -- joint generator-side objective
    total = None
    l_distill = 0.0
    if cfg.lambda_distill > 0:
        if cfg.objective == "distill":
            grad = distill_gradient(
                x_hat.detach(), xc_sig, poses, models.teacher, s, cfg.distill,
                seed_for(seed, "distill"),
            )
            term = distill_surrogate(x_hat, grad)
        elif cfg.objective == "diffusion":
            term = diffusion_loss_variant(models.student, batch, s, seed_for(seed, "diff"))
        else:  # gan: hard alignment directly on generated views
            term = gan_loss_generator(models.disc_mvg, views_hat)
        l_distill = _check_finite("l_distill_surrogate", float(term), seed)
        total = cfg.lambda_distill * term

    l_gan_g = 0.0
    if cfg.lambda_gan > 0:
        if cfg.recon_objective == "gan":
            term = gan_loss_generator(models.disc, x_tilde)
        else:  # soft-aligned reconstruction ablation
            tilde_sig = to_signal(x_tilde)
            grad = distill_gradient(
                tilde_sig.detach(), xc_sig, poses, models.teacher, s, cfg.distill,
                seed_for(seed, "recon_distill"),
            )
            term = distill_surrogate(tilde_sig, grad)
        l_gan_g = _check_finite("l_gan_g", float(term), seed)
        total = term * cfg.lambda_gan if total is None else total + cfg.lambda_gan * term

    l_rec_t = recon_loss(views_gt, x_tilde)
    l_rec = _check_finite("l_recon", float(l_rec_t), seed)
    if cfg.lambda_recon > 0:
        total = l_rec_t * cfg.lambda_recon if total is None else total + cfg.lambda_recon * l_rec_t

    if total is not None and total.requires_grad:
        opt_gen.zero_grad()
        total.backward()
        opt_gen.step()

    return LossBundle(
        l_distill_surrogate=l_distill,
        l_gan_d=l_gan_d,
        l_gan_g=l_gan_g,
        l_recon=l_rec,
        lambda_distill=cfg.lambda_distill,
        lambda_gan=cfg.lambda_gan,
        lambda_recon=cfg.lambda_recon,
        t_k=t_k,
    )

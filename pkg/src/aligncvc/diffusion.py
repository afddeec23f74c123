"""Discrete-time diffusion arithmetic.

Implements the DDPM forward process, its inversion, deterministic few-step
denoising and the inference timestep plan. Everything here is a pure function
of its inputs; stochastic operations take an explicit seed.

Conventions:
    - Timesteps are 1-based: t in {1, ..., T}. Index 0 is the clean signal,
      with alpha_bar[0] == 1 so the general reprojection formula also covers
      the terminal step to t=0.
    - The denoiser operates on a [-1, 1] signal range. Images in [0, 1] are
      mapped at module boundaries via `to_signal` / `from_signal`.
    - Schedule tables are float64; per-call arithmetic follows the dtype of
      the image tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .seeding import torch_gen


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise tables, length T+1 with the t=0 slot set to the clean
    limit (beta=0, alpha=1, alpha_bar=1)."""

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def validate(self) -> None:
        if self.beta.shape != (self.T + 1,):
            raise ValueError("schedule tables must have length T+1")
        if not bool((self.beta[1:] > 0).all() and (self.beta[1:] < 1).all()):
            raise ValueError("beta must lie in (0, 1) for t >= 1")
        if not bool((self.alpha_bar[1:] < self.alpha_bar[:-1]).all()):
            raise ValueError("alpha_bar must be strictly decreasing")


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing inference timesteps t_K > ... > t_1."""

    steps: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("plan must contain at least one timestep")
        if any(b <= a for a, b in zip(self.steps[1:], self.steps[:-1])):
            # steps are stored descending: steps[0] = t_K
            pass
        for a, b in zip(self.steps[:-1], self.steps[1:]):
            if b >= a:
                raise ValueError("plan timesteps must be strictly decreasing")

    @property
    def K(self) -> int:
        return len(self.steps)


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha_bar.

    beta[t] interpolates linearly from beta_start (t=1) to beta_end (t=T).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = torch.empty(T + 1, dtype=torch.float64)
    beta[0] = 0.0
    if T == 1:
        beta[1] = beta_start
    else:
        beta[1:] = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    sched = NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
    sched.validate()
    return sched


def to_signal(img: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] image values to the [-1, 1] signal range."""
    return img * 2.0 - 1.0


def from_signal(x: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] signal values back to image range (not clamped)."""
    return (x + 1.0) * 0.5


def _gather_ab(s: NoiseSchedule, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar[t] broadcast against `like`: scalar t gives a scalar tensor,
    a batch of timesteps gives shape (B, 1, ..., 1)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if bool((t < 0).any() or (t > s.T).any()):
            raise ValueError("timestep out of range")
        ab = s.alpha_bar[t.long()]
        return ab.view(-1, *([1] * (like.ndim - 1))).to(like.dtype)
    ti = int(t)
    if not (0 <= ti <= s.T):
        raise ValueError(f"timestep {ti} out of range [0, {s.T}]")
    return s.alpha_bar[ti].to(like.dtype)


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    `t` must be in [1, T]; it may be a scalar or a per-batch-item 1-D tensor.
    """
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if bool((t < 1).any()):
            raise ValueError("timestep out of range")
    elif int(t) < 1:
        raise ValueError(f"timestep {int(t)} out of range [1, {s.T}]")
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = _gather_ab(s, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def draw_noise(shape, seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Seeded standard-normal draw; fixed seed gives a bit-identical tensor."""
    return torch.randn(*shape, generator=torch_gen(seed), dtype=dtype)


def renoise(rendering: torch.Tensor, t_k: int, seed: int, s: NoiseSchedule) -> torch.Tensor:
    """Re-noise a clean [0, 1] rendering at timestep t_k with a fresh draw.

    The rendering is mapped to the signal range first; the result is exactly
    q_sample(to_signal(rendering), t_k, draw) for the seeded draw.
    """
    eps = draw_noise(rendering.shape, seed, dtype=rendering.dtype)
    return q_sample(to_signal(rendering), t_k, eps, s)


def predict_x0(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int | torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process: (x_t - sqrt(1 - ab_t) * eps_pred) / sqrt(ab_t)."""
    if eps_pred.shape != x_t.shape:
        raise ValueError("eps_pred shape must match x_t")
    ab = _gather_ab(s, t, x_t)
    return (x_t - torch.sqrt(1.0 - ab) * eps_pred) / torch.sqrt(ab)


def denoise_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t_from: int,
    t_to: int,
    s: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic (eta=0) denoising step t_from -> t_to.

    Computes the x0 estimate from eps_pred, then reprojects it to t_to with
    the same eps_pred. t_to == 0 returns the x0 estimate itself (alpha_bar[0]
    is 1, so the general formula covers it).
    """
    if not (0 <= t_to < t_from <= s.T):
        raise ValueError(f"need T >= t_from > t_to >= 0, got t_from={t_from}, t_to={t_to}")
    x0_hat = predict_x0(x_t, eps_pred, t_from, s)
    ab_to = _gather_ab(s, t_to, x_t)
    return torch.sqrt(ab_to) * x0_hat + torch.sqrt(1.0 - ab_to) * eps_pred


def make_inference_plan(K: int, s: NoiseSchedule) -> TimestepPlan:
    """Uniformly spaced plan with trailing placement: steps[i] = T-1-i*(T//K).

    The first step sits next to pure noise (t = T-1); spacing is T//K. K must
    be small enough that the last timestep stays >= 1.
    """
    if not (1 <= K <= s.T):
        raise ValueError(f"K must be in [1, {s.T}], got {K}")
    stride = s.T // K
    steps = tuple(s.T - 1 - i * stride for i in range(K))
    if steps[-1] < 1:
        raise ValueError(f"K={K} leaves no room for trailing spacing with T={s.T}")
    return TimestepPlan(steps=steps)

"""Core diffusion mechanics on latent video tensors.

Implements the mathematics shared by training and sampling, independent of
any network architecture:

- forward process:  x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps
- training loss:    mean squared error between true and predicted noise
- ancestral step:   x_{t-1} ~ N(mu(x_t, eps_theta), btilde_t I)
- DDIM sampling:    deterministic (eta = 0) strided reverse trajectory

Conventions: timesteps are 1-based, t in [1, T]; latent clips are tensors of
shape [T_frames, C, H, W]; schedules are built and stored in float64 so the
cumulative-product identity abar_t = prod(1 - beta_i) holds to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

DenoiserFn = Callable[[torch.Tensor, int, object], torch.Tensor]
"""Signature of a denoiser handle: (x_t, t, cond) -> predicted noise."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise strengths beta_t and their cumulative products abar_t.

    betas[i] and alphas_bar[i] hold the values for timestep t = i + 1.
    """

    num_steps: int
    betas: torch.Tensor
    alphas_bar: torch.Tensor

    def alpha_bar(self, t: int) -> float:
        """abar_t for 1-based t, with the abar_0 = 1 convention."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alphas_bar[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")


def build_schedule(
    num_steps: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Construct a noise schedule.

    ``linear`` interpolates beta uniformly between ``beta_start`` and
    ``beta_end``; ``cosine`` derives betas from a squared-cosine abar curve
    (beta endpoints are validated but otherwise unused).
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    elif kind == "cosine":
        steps = torch.arange(num_steps + 1, dtype=torch.float64) / num_steps
        s = 0.008
        abar = torch.cos((steps + s) / (1 + s) * torch.pi / 2) ** 2
        abar = abar / abar[0]
        betas = torch.clamp(1 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas_bar = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(num_steps=num_steps, betas=betas, alphas_bar=alphas_bar)


def _gather_abar(schedule: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """abar_t shaped to broadcast against ``like``; t is an int or a 1-D
    tensor of per-sample timesteps aligned with dim 0."""
    if isinstance(t, int):
        return torch.tensor(schedule.alpha_bar(t), dtype=like.dtype)
    t = torch.as_tensor(t, dtype=torch.long)
    if t.min() < 1 or t.max() > schedule.num_steps:
        raise ValueError(f"timesteps outside [1, {schedule.num_steps}]")
    abar = schedule.alphas_bar[t - 1].to(like.dtype)
    return abar.view(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Diffuse a clean latent to timestep t in closed form.

    x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    abar = _gather_abar(schedule, t, x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def denoising_loss(predicted_eps: torch.Tensor, true_eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements (mean reduction)."""
    if predicted_eps.shape != true_eps.shape:
        raise ValueError(
            f"shape mismatch: {tuple(predicted_eps.shape)} vs {tuple(true_eps.shape)}"
        )
    return ((predicted_eps - true_eps) ** 2).mean()


def predict_x0_from_eps(
    x_t: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward process: x0_hat = (x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)."""
    abar = schedule.alpha_bar(t)
    return (x_t - (1.0 - abar) ** 0.5 * eps) / abar**0.5


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    """Fixed posterior variance btilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    return (1.0 - abar_prev) / (1.0 - abar_t) * schedule.beta(t)


def posterior_step(
    x_t: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One ancestral reverse step x_t -> x_{t-1}.

    The mean follows the epsilon parameterization

        mu = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(1 - beta_t)

    and the variance is the fixed btilde_t. ``noise`` is ignored (forced to
    zero) at the final step t = 1, which makes the last step deterministic.
    """
    schedule._check_t(t)
    beta_t = schedule.beta(t)
    abar_t = schedule.alpha_bar(t)
    mean = (x_t - beta_t / (1.0 - abar_t) ** 0.5 * eps_pred) / (1.0 - beta_t) ** 0.5
    if t == 1 or noise is None:
        return mean
    sigma = posterior_variance(schedule, t) ** 0.5
    return mean + sigma * noise


def ddim_timesteps(num_steps: int, num_inference_steps: int) -> list[int]:
    """Evenly strided, strictly increasing subset of [1, T].

    With num_inference_steps == T this is exactly [1, ..., T].
    """
    if not 1 <= num_inference_steps <= num_steps:
        raise ValueError(
            f"num_inference_steps must be in [1, {num_steps}], got {num_inference_steps}"
        )
    ts = [int(k * num_steps / num_inference_steps) + 1 for k in range(num_inference_steps)]
    return ts


def ddim_step(
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic DDIM update from t to t_prev (t_prev = 0 lands on x0_hat)."""
    abar_prev = schedule.alpha_bar(t_prev)
    x0_hat = predict_x0_from_eps(x_t, t, eps, schedule)
    return abar_prev**0.5 * x0_hat + (1.0 - abar_prev) ** 0.5 * eps


def ddim_sample(
    model: DenoiserFn,
    cond,
    schedule: NoiseSchedule,
    num_inference_steps: int,
    seed: int,
    shape: Optional[Sequence[int]] = None,
    guidance_scale: float = 1.0,
    uncond=None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the full deterministic (eta = 0) DDIM trajectory.

    The initial latent is drawn from a generator seeded with ``seed``, so the
    output is a pure function of (model weights, cond, schedule,
    num_inference_steps, seed). ``shape`` defaults to ``cond.latent_shape``.

    ``guidance_scale`` != 1 enables classifier-free guidance against the
    ``uncond`` bundle: eps = eps_u + scale * (eps_c - eps_u). Off by default.
    """
    if shape is None:
        shape = cond.latent_shape
    if guidance_scale != 1.0 and uncond is None:
        raise ValueError("guidance_scale != 1 requires an uncond bundle")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    timesteps = ddim_timesteps(schedule.num_steps, num_inference_steps)
    for i in range(len(timesteps) - 1, -1, -1):
        t = timesteps[i]
        t_prev = timesteps[i - 1] if i > 0 else 0
        eps = model(x, t, cond)
        if guidance_scale != 1.0:
            eps_u = model(x, t, uncond)
            eps = eps_u + guidance_scale * (eps - eps_u)
        x = ddim_step(x, t, t_prev, eps, schedule)
    return x

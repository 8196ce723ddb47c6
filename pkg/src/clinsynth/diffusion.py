"""DDPM noise schedule, epsilon-prediction objective and ancestral sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError

DEFAULT_T = 250


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, length T

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ConfigError("betas must be a non-empty 1-D array")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check(self, t: int) -> int:
        if not 0 <= int(t) < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return int(t)


def linear_schedule(T: int = DEFAULT_T, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def cosine_schedule(T: int = DEFAULT_T, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
    betas = [min(1 - f(i + 1) / f(i), max_beta) for i in range(T)]
    return NoiseSchedule(np.array(betas, dtype=np.float64))


def make_schedule(T: int = DEFAULT_T, kind: str = "linear") -> NoiseSchedule:
    if kind == "linear":
        return linear_schedule(T)
    if kind == "cosine":
        return cosine_schedule(T)
    raise ConfigError(f"diffusion.beta_schedule must be 'linear' or 'cosine', got {kind!r}")


def _per_sample(values: np.ndarray, t: torch.Tensor, ndim: int) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=torch.float64)[t]
    return out.view(-1, *([1] * (ndim - 1)))


def _as_t(t, batch: int, schedule: NoiseSchedule) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.long().reshape(-1)
        if t.numel() == 1 and batch > 1:
            t = t.expand(batch)
    else:
        t = torch.full((batch,), int(t), dtype=torch.long)
    if torch.any(t < 0) or torch.any(t >= schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}): {t.tolist()}")
    return t


def q_sample(x0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    """sqrt(abar) * x0 + sqrt(1 - abar) * eps for a given cumulative alpha."""
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(x0.shape)}")
    alpha_bar = torch.as_tensor(alpha_bar, dtype=x0.dtype)
    return alpha_bar.sqrt() * x0 + (1 - alpha_bar).sqrt() * eps


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(x0.shape)}")
    t = _as_t(t, x0.shape[0], schedule)
    abar = _per_sample(schedule.alpha_bars, t, x0.dim()).to(x0.dtype)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


def predict_x0(x_t: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert add_noise given the noise."""
    t = _as_t(t, x_t.shape[0], schedule)
    abar = _per_sample(schedule.alpha_bars, t, x_t.dim()).to(x_t.dtype)
    return (x_t - (1 - abar).sqrt() * eps) / abar.sqrt()


def posterior_mean(x_t: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Reverse-step mean 1/sqrt(a_t) * (x_t - beta_t / sqrt(1 - abar_t) * eps)."""
    t = _as_t(t, x_t.shape[0], schedule)
    a = _per_sample(schedule.alphas, t, x_t.dim()).to(x_t.dtype)
    b = _per_sample(schedule.betas, t, x_t.dim()).to(x_t.dtype)
    abar = _per_sample(schedule.alpha_bars, t, x_t.dim()).to(x_t.dtype)
    return (x_t - b / (1 - abar).sqrt() * eps) / a.sqrt()


def sigma(t: int, schedule: NoiseSchedule, mode: str = "beta") -> float:
    if mode == "beta":
        return math.sqrt(schedule.betas[t])
    if mode == "posterior":
        abar = schedule.alpha_bars
        prev = abar[t - 1] if t > 0 else 1.0
        return math.sqrt(schedule.betas[t] * (1 - prev) / (1 - abar[t]))
    raise ConfigError(f"diffusion.sigma_mode must be 'beta' or 'posterior', got {mode!r}")


def training_loss(model, x0: torch.Tensor, mask_onehot: torch.Tensor, embedding: Optional[torch.Tensor],
                  schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
                  t: Optional[torch.Tensor] = None, eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Epsilon-prediction MSE at uniformly drawn timesteps.

    ``t`` and ``eps`` may be fixed by the caller (used for probe evaluations).
    """
    B = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.T, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = add_noise(x0, t, eps, schedule)
    pred = model(x_t, mask_onehot, t, embedding)
    return F.mse_loss(pred, eps)


@torch.no_grad()
def sample(model, mask_onehot: torch.Tensor, embedding: Optional[torch.Tensor], schedule: NoiseSchedule,
           generator: Optional[torch.Generator], shape: tuple[int, ...], sigma_mode: str = "beta",
           snapshot_every: int = 0, snapshot_dir: str | Path | None = None,
           callback: Callable[[int, torch.Tensor], None] | None = None) -> torch.Tensor:
    """Ancestral sampling from t = T-1 down to 0.

    Noise is drawn from ``generator`` only, so two calls with identically
    seeded generators consume identical noise.
    """
    if tuple(shape[2:]) != tuple(mask_onehot.shape[2:]) or shape[0] != mask_onehot.shape[0]:
        raise ValueError(f"requested shape {tuple(shape)} does not match mask {tuple(mask_onehot.shape)}")
    x = torch.randn(shape, generator=generator)
    for t in range(schedule.T - 1, -1, -1):
        eps = model(x, mask_onehot, torch.full((shape[0],), t, dtype=torch.long), embedding)
        x = posterior_mean(x, t, eps, schedule)
        if t > 0:
            x = x + sigma(t, schedule, sigma_mode) * torch.randn(shape, generator=generator)
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite values in the sampling chain at step t={t}")
        if callback is not None:
            callback(t, x)
        if snapshot_every and snapshot_dir is not None and t % snapshot_every == 0:
            Path(snapshot_dir).mkdir(parents=True, exist_ok=True)
            np.save(Path(snapshot_dir) / f"x_t{t:04d}.npy", x.numpy())
    return x

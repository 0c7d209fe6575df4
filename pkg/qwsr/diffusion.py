"""Noise schedule, forward process, training objectives and samplers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from qwsr.common import DivergenceError, FrozenParameterError
from qwsr.conditioning import (
    CondEncoderModel,
    ConditioningBundle,
    encode_condition,
    fuse_embeddings,
    time_embedding,
)
from qwsr.networks import (
    AutoencoderModel,
    CfwModule,
    UNetModel,
    as_batch,
    unet_forward,
    vae_encode,
)
from qwsr.numerics import ImageGrid, ParamStore
from qwsr.quave import QuaveModel, quave_embed_batch

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep beta, alpha and cumulative alpha_bar."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:  # pylint: disable=invalid-name
        """Number of timesteps."""
        return len(self.beta)

    @property
    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar)."""
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar of the step before t; 1 before the first step."""
        return 1.0 if t < 0 else float(self.alpha_bar[t])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(z_{t-1} | z_t, z_0)."""
        return float(
            self.beta[t] * (1.0 - self.alpha_bar_prev(t - 1)) / (1.0 - self.alpha_bar[t])
        )


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:  # pylint: disable=invalid-name
    """Linear beta schedule."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(
            f"Expected 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def _per_sample(values: np.ndarray, t: torch.Tensor | int, like: torch.Tensor) -> torch.Tensor:
    steps = torch.as_tensor(t, dtype=torch.int64).reshape(-1)
    if steps.numel() == 1:
        steps = steps.expand(like.shape[0])
    if steps.numel() != like.shape[0]:
        raise ValueError(f"Expected {like.shape[0]} timesteps, got {steps.numel()}")
    table = torch.from_numpy(values).to(like.dtype)
    return table[steps].reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(
    z0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"Noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    signal = _per_sample(np.sqrt(schedule.alpha_bar), t, z0)
    noise = _per_sample(np.sqrt(1.0 - schedule.alpha_bar), t, z0)
    return signal * z0 + noise * eps


@dataclass
class SrModels:
    """Every network of the pipeline."""

    quave: QuaveModel
    vae: AutoencoderModel
    unet: UNetModel
    cond: CondEncoderModel
    cfw: CfwModule | None = None

    @classmethod
    def create(cls, d_q: int = 512, base_channels: int = 32, seed: int = 0) -> SrModels:
        """Freshly initialized float64 models."""
        torch.manual_seed(seed)
        vae = AutoencoderModel(base_channels=base_channels)
        unet = UNetModel(base_channels=base_channels)
        return cls(
            quave=QuaveModel(d_q=d_q).double(),
            vae=vae.double(),
            unet=unet.double(),
            cond=CondEncoderModel(unet.hook_channels, base_channels=base_channels).double(),
            cfw=CfwModule(vae.feature_channels).double(),
        )

    def modules(self) -> dict[str, torch.nn.Module]:
        """Models by name."""
        modules = {
            "quave": self.quave,
            "vae": self.vae,
            "unet": self.unet,
            "cond": self.cond,
        }
        if self.cfw is not None:
            modules["cfw"] = self.cfw
        return modules


@dataclass
class PairBatch:
    """HR images, their LR versions and the LR versions upsampled to HR size."""

    hr: torch.Tensor
    lr: np.ndarray
    lr_upsampled: torch.Tensor

    def __len__(self) -> int:
        return self.hr.shape[0]


@dataclass
class SamplerCondition:
    """Inputs that condition every denoising step of one batch."""

    z_lr: torch.Tensor
    quave_emb: torch.Tensor

    @classmethod
    def from_images(
        cls,
        models: SrModels,
        lr_images: Sequence[ImageGrid],
        lr_upsampled: ImageGrid | torch.Tensor,
    ) -> SamplerCondition:
        """Encode the wavelet embedding and LR latent."""
        with torch.no_grad():
            return cls(
                z_lr=vae_encode(models.vae, as_batch(lr_upsampled)),
                quave_emb=quave_embed_batch(models.quave, lr_images),
            )


def condition_at(models: SrModels, condition: SamplerCondition, t: torch.Tensor | int, num_timesteps: int) -> ConditioningBundle:
    """Conditioning bundle of a batch at timestep(s) t."""
    steps = torch.as_tensor(t, dtype=torch.int64).reshape(-1)
    b = fuse_embeddings(condition.quave_emb, time_embedding(steps, num_timesteps=num_timesteps))
    return encode_condition(models.cond, condition.z_lr, b)


def predict_noise(
    models: SrModels,
    z_t: torch.Tensor,
    t: torch.Tensor | int,
    condition: SamplerCondition | None,
    num_timesteps: int,
) -> torch.Tensor:
    """eps_theta(z_t, delta_theta(c, t, z)); unconditioned when condition is None."""
    steps = torch.as_tensor(t, dtype=torch.int64).reshape(-1)
    if steps.numel() == 1:
        steps = steps.expand(z_t.shape[0])
    t_embedding = time_embedding(steps, models.unet.time_dim, num_timesteps)
    sft = None
    if condition is not None:
        sft = condition_at(models, condition, steps, num_timesteps).sft
    return unet_forward(models.unet, z_t, t_embedding, sft)


def conditional_loss(
    models: SrModels,
    z0: torch.Tensor,
    condition: SamplerCondition,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """|| eps - eps_theta(z_t, delta_theta(c, t, z)) ||^2, averaged."""
    z_t = q_sample(z0, t, eps, schedule)
    return F.mse_loss(predict_noise(models, z_t, t, condition, schedule.T), eps)


def _draw(shape: Sequence[int], schedule: NoiseSchedule, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    t = torch.randint(0, schedule.T, (shape[0],), generator=generator)
    eps = torch.randn(tuple(shape), generator=generator, dtype=torch.float64)
    return t, eps


def train_step(
    unet: ParamStore,
    cond: ParamStore,
    vae: ParamStore,
    quave: ParamStore,
    batch: PairBatch,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> float:
    """
    One step of conditional noise-prediction training.

    The autoencoder and the wavelet embedding must be frozen. Only the
    trainable entries of the denoiser store (its head) and the conditioning
    encoder are stepped.
    """
    if len(batch) == 0:
        raise ValueError("Empty batch")
    for name, store in (("autoencoder", vae), ("wavelet embedding", quave)):
        if not store.is_frozen:
            raise FrozenParameterError(f"The {name} must be frozen for conditional training")

    models = SrModels(quave.module, vae.module, unet.module, cond.module)
    with torch.no_grad():
        z0 = vae_encode(models.vae, batch.hr)
    condition = SamplerCondition.from_images(models, batch.lr, batch.lr_upsampled)
    t, eps = _draw(z0.shape, schedule, generator)

    unet.zero_grad()
    cond.zero_grad()
    loss = conditional_loss(models, z0, condition, t, eps, schedule)
    if not torch.isfinite(loss):
        raise DivergenceError("Diffusion loss is not finite", step=cond.step_count)
    loss.backward()
    if unet.trainable_names:
        unet.step()
    cond.step()
    return float(loss.item())


def unconditional_loss(
    unet: UNetModel, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noise-prediction loss of the denoiser alone."""
    z_t = q_sample(z0, t, eps, schedule)
    t_embedding = time_embedding(t, unet.time_dim, schedule.T)
    return F.mse_loss(unet_forward(unet, z_t, t_embedding), eps)


def pretrain_unet_step(
    unet: ParamStore,
    vae: AutoencoderModel,
    hr: ImageGrid | torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> float:
    """One step of unconditional backbone training on HR latents."""
    if unet.is_frozen:
        raise FrozenParameterError("Denoiser is frozen and cannot be pretrained")
    with torch.no_grad():
        z0 = vae_encode(vae, as_batch(hr))
    t, eps = _draw(z0.shape, schedule, generator)
    unet.zero_grad()
    loss = unconditional_loss(unet.module, z0, t, eps, schedule)
    if not torch.isfinite(loss):
        raise DivergenceError("Denoiser loss is not finite", step=unet.step_count)
    loss.backward()
    unet.step()
    return float(loss.item())


def ddpm_step(
    z: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule, noise: torch.Tensor | None
) -> torch.Tensor:
    """Ancestral update z_t -> z_{t-1} with posterior variance."""
    eps_scale = float(schedule.beta[t] / np.sqrt(1.0 - schedule.alpha_bar[t]))
    mean = (z - eps_scale * eps) / float(np.sqrt(schedule.alpha[t]))
    if t == 0 or noise is None:
        return mean
    return mean + float(np.sqrt(schedule.posterior_variance(t))) * noise


def ddim_step(
    z: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float,
    noise: torch.Tensor | None,
) -> torch.Tensor:
    """Implicit update z_t -> z_{t_prev}; t_prev = -1 is the final clean step."""
    alpha_bar = float(schedule.alpha_bar[t])
    alpha_bar_prev = schedule.alpha_bar_prev(t_prev)
    z0_estimate = (z - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)
    sigma = eta * math.sqrt(
        (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_prev)
    )
    direction = math.sqrt(max(1.0 - alpha_bar_prev - sigma * sigma, 0.0)) * eps
    z_prev = math.sqrt(alpha_bar_prev) * z0_estimate + direction
    if sigma > 0.0 and noise is not None:
        z_prev = z_prev + sigma * noise
    return z_prev


def _check_finite(z: torch.Tensor, t: int) -> None:
    if not torch.all(torch.isfinite(z)):
        raise DivergenceError("Sampler state is not finite", step=t)


def ddpm_sample(
    models: SrModels,
    condition: SamplerCondition,
    schedule: NoiseSchedule,
    seed: int,
    progress: bool = False,
) -> torch.Tensor:
    """Full T-step ancestral sampling from seeded noise."""
    generator = torch.Generator().manual_seed(seed)
    z = torch.randn(tuple(condition.z_lr.shape), generator=generator, dtype=torch.float64)
    with torch.no_grad():
        for t in tqdm(range(schedule.T - 1, -1, -1), desc="ddpm", disable=not progress):
            eps = predict_noise(models, z, t, condition, schedule.T)
            noise = (
                torch.randn(tuple(z.shape), generator=generator, dtype=torch.float64)
                if t > 0
                else None
            )
            z = ddpm_step(z, eps, t, schedule, noise)
            _check_finite(z, t)
    return z


def ddim_timesteps(num_timesteps: int, steps: int) -> list[int]:
    """Uniform-stride descending subsequence from T-1 to 0."""
    if not 1 <= steps <= num_timesteps:
        raise ValueError(f"Steps must be in [1, {num_timesteps}], got {steps}")
    if steps == 1:
        return [num_timesteps - 1]
    return [int(t) for t in np.round(np.linspace(num_timesteps - 1, 0, steps))]


def ddim_sample(
    models: SrModels,
    condition: SamplerCondition,
    schedule: NoiseSchedule,
    steps: int,
    eta: float = 0.0,
    seed: int = 0,
    progress: bool = False,
) -> torch.Tensor:
    """DDIM sampling over a uniform-stride timestep subsequence."""
    timesteps = ddim_timesteps(schedule.T, steps)
    generator = torch.Generator().manual_seed(seed)
    z = torch.randn(tuple(condition.z_lr.shape), generator=generator, dtype=torch.float64)
    with torch.no_grad():
        for index, t in enumerate(tqdm(timesteps, desc="ddim", disable=not progress)):
            t_prev = timesteps[index + 1] if index + 1 < len(timesteps) else -1
            eps = predict_noise(models, z, t, condition, schedule.T)
            noise = (
                torch.randn(tuple(z.shape), generator=generator, dtype=torch.float64)
                if eta > 0.0 and t_prev >= 0
                else None
            )
            z = ddim_step(z, eps, t, t_prev, schedule, eta, noise)
            _check_finite(z, t)
    return z

"""
Time- and wavelet-aware conditioning of the denoiser.

The conditioning encoder mirrors the denoiser's encoder. It reads the latent
of the upsampled low-resolution image, receives the fused vector b
(wavelet embedding ⊕ timestep embedding) at every scale, and emits one
(gamma, beta) pair per denoiser decoder scale. These pairs modulate the
denoiser features as gamma * F + beta.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from qwsr.layers import Downsample, ResBlock, conv3x3, zero_module

_LOGGER = logging.getLogger(__name__)

EMBEDDING_DIM = 512
FUSED_DIM = 2 * EMBEDDING_DIM
MAX_PERIOD = 10000.0

SftPair = tuple[torch.Tensor, torch.Tensor]


def time_embedding(
    t: int | Sequence[int] | torch.Tensor,
    dim: int = EMBEDDING_DIM,
    num_timesteps: int = 1000,
) -> torch.Tensor:
    """Sinusoidal embedding, sin half then cos half, one row per timestep."""
    steps = torch.as_tensor(t, dtype=torch.int64).reshape(-1)
    if steps.numel() == 0:
        raise ValueError("No timesteps given")
    if int(steps.min()) < 0 or int(steps.max()) >= num_timesteps:
        raise ValueError(f"Timesteps must lie in [0, {num_timesteps}), got {steps.tolist()}")
    if dim % 2:
        raise ValueError(f"Embedding dim must be even, got {dim}")
    half = dim // 2
    frequencies = torch.exp(
        -math.log(MAX_PERIOD) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = steps.to(torch.float64)[:, None] * frequencies[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def fuse_embeddings(quave_emb: torch.Tensor, time_emb: torch.Tensor) -> torch.Tensor:
    """Concatenate wavelet and time embeddings into b."""
    quave_emb = torch.atleast_2d(quave_emb)
    time_emb = torch.atleast_2d(time_emb)
    if quave_emb.shape[-1] != EMBEDDING_DIM or time_emb.shape[-1] != EMBEDDING_DIM:
        raise ValueError(
            f"Both embeddings must have {EMBEDDING_DIM} components, "
            f"got {quave_emb.shape[-1]} and {time_emb.shape[-1]}"
        )
    if quave_emb.shape[0] != time_emb.shape[0]:
        if time_emb.shape[0] == 1:
            time_emb = time_emb.expand(quave_emb.shape[0], -1)
        else:
            raise ValueError(
                f"Batch sizes differ: {quave_emb.shape[0]} != {time_emb.shape[0]}"
            )
    return torch.cat([quave_emb, time_emb], dim=1)


def sft_modulate(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Spatial feature transform gamma * F + beta."""
    if features.shape != gamma.shape or features.shape != beta.shape:
        raise ValueError(
            f"SFT shapes differ: F {tuple(features.shape)}, "
            f"gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}"
        )
    return gamma * features + beta


@dataclass
class ConditioningBundle:
    """Fused vector b and one SFT pair per denoiser hook, coarsest first."""

    b: torch.Tensor
    sft: list[SftPair]

    def strength(self) -> float:
        """Mean |gamma - 1| + mean |beta|, averaged over hooks."""
        values = [
            float(torch.mean(torch.abs(gamma - 1.0)) + torch.mean(torch.abs(beta)))
            for gamma, beta in self.sft
        ]
        return sum(values) / len(values)


class CondEncoderModel(nn.Module):
    """Three-scale trunk with FiLM injection of b and zero-initialized SFT heads."""

    def __init__(
        self,
        hook_channels: Sequence[int],
        latent_channels: int = 4,
        base_channels: int = 32,
        cond_dim: int = FUSED_DIM,
    ) -> None:
        super().__init__()
        if len(hook_channels) != 3:
            raise ValueError(f"Expected 3 hook scales, got {len(hook_channels)}")
        c = base_channels
        self.cond_dim = cond_dim
        self.hook_channels = tuple(hook_channels)
        self.conv_in = conv3x3(latent_channels, c)
        self.block0 = ResBlock(c, c)
        self.down0 = Downsample(c, c)
        self.block1 = ResBlock(c, 2 * c)
        self.down1 = Downsample(2 * c, 2 * c)
        self.block2 = ResBlock(2 * c, 2 * c)
        self.film = nn.ModuleList(
            [nn.Linear(cond_dim, c), nn.Linear(cond_dim, 2 * c), nn.Linear(cond_dim, 2 * c)]
        )
        # hook order is coarsest first: trunk scale 2, 1, 0
        trunk_channels = (2 * c, 2 * c, c)
        self.gamma_heads = nn.ModuleList(
            [zero_module(conv3x3(src, dst)) for src, dst in zip(trunk_channels, hook_channels)]
        )
        self.beta_heads = nn.ModuleList(
            [zero_module(conv3x3(src, dst)) for src, dst in zip(trunk_channels, hook_channels)]
        )

    def forward(self, z_lr: torch.Tensor, b: torch.Tensor) -> list[SftPair]:
        film = [projection(b)[:, :, None, None] for projection in self.film]
        h0 = self.block0(self.conv_in(z_lr)) + film[0]
        h1 = self.block1(self.down0(h0)) + film[1]
        h2 = self.block2(self.down1(h1)) + film[2]
        pairs = []
        for features, gamma_head, beta_head in zip(
            (h2, h1, h0), self.gamma_heads, self.beta_heads
        ):
            pairs.append((1.0 + gamma_head(features), beta_head(features)))
        return pairs


def encode_condition(model: CondEncoderModel, z_lr: torch.Tensor, b: torch.Tensor) -> ConditioningBundle:
    """Run the conditioning encoder on a low-resolution latent and fused vector b."""
    if z_lr.ndim != 4 or z_lr.shape[2] % 4 or z_lr.shape[3] % 4:
        raise ValueError(f"Latent must be N×C×H×W with H, W divisible by 4, got {tuple(z_lr.shape)}")
    if b.ndim != 2 or b.shape[1] != model.cond_dim or b.shape[0] != z_lr.shape[0]:
        raise ValueError(
            f"Expected b of shape ({z_lr.shape[0]}, {model.cond_dim}), got {tuple(b.shape)}"
        )
    return ConditioningBundle(b, model(z_lr, b))


def conditioning_strength_probe(
    model: CondEncoderModel,
    num_timesteps: int,
    t_list: Sequence[int],
    z_lr: torch.Tensor,
    quave_emb: torch.Tensor,
) -> list[float]:
    """Modulation magnitude mean|gamma - 1| + mean|beta| per timestep."""
    strengths = []
    with torch.no_grad():
        for t in t_list:
            b = fuse_embeddings(quave_emb, time_embedding(t, num_timesteps=num_timesteps))
            strength = encode_condition(model, z_lr, b).strength()
            _LOGGER.debug("Conditioning strength at t=%d: %g", t, strength)
            strengths.append(strength)
    return strengths

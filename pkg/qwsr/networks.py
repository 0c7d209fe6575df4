"""Autoencoder, time-conditional denoiser and decoder feature fusion."""
from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from qwsr.common import DivergenceError, FrozenParameterError
from qwsr.conditioning import SftPair, sft_modulate
from qwsr.layers import Downsample, ResBlock, Upsample, conv3x3, group_norm
from qwsr.numerics import ImageGrid, ParamStore, to_tensor

_LOGGER = logging.getLogger(__name__)

LATENT_CHANNELS = 4
LATENT_DOWNSCALE = 4
UNET_HEAD_PREFIX = "head."
"""Parameters of the denoiser that stay trainable in conditional training."""

FeatureFusion = Callable[[int, torch.Tensor], torch.Tensor]


def as_batch(images: ImageGrid | Sequence[ImageGrid] | torch.Tensor) -> torch.Tensor:
    """Return images as an N×C×H×W float64 tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.ndim == 4 else images.unsqueeze(0)
    return to_tensor(np.asarray(images))


class _Encoder(nn.Module):
    def __init__(self, image_channels: int, base_channels: int, latent_channels: int) -> None:
        super().__init__()
        c = base_channels
        self.conv_in = conv3x3(image_channels, c)
        self.block0 = ResBlock(c, c)
        self.down0 = Downsample(c, 2 * c)
        self.block1 = ResBlock(2 * c, 2 * c)
        self.down1 = Downsample(2 * c, 2 * c)
        self.block2 = ResBlock(2 * c, 2 * c)
        self.norm_out = group_norm(2 * c)
        self.conv_out = conv3x3(2 * c, latent_channels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        f0 = self.block0(self.conv_in(x))
        f1 = self.block1(self.down0(f0))
        f2 = self.block2(self.down1(f1))
        z = self.conv_out(F.silu(self.norm_out(f2)))
        # coarsest first, matching the decoder order
        return z, [f2, f1, f0]


class _Decoder(nn.Module):
    def __init__(self, image_channels: int, base_channels: int, latent_channels: int) -> None:
        super().__init__()
        c = base_channels
        self.conv_in = conv3x3(latent_channels, 2 * c)
        self.block2 = ResBlock(2 * c, 2 * c)
        self.up1 = Upsample(2 * c, 2 * c)
        self.block1 = ResBlock(2 * c, 2 * c)
        self.up0 = Upsample(2 * c, c)
        self.block0 = ResBlock(c, c)
        self.norm_out = group_norm(c)
        self.conv_out = conv3x3(c, image_channels)

    def forward(self, z: torch.Tensor, fuse: FeatureFusion | None = None) -> torch.Tensor:
        h = self.block2(self.conv_in(z))
        if fuse is not None:
            h = fuse(0, h)
        h = self.block1(self.up1(h))
        if fuse is not None:
            h = fuse(1, h)
        h = self.block0(self.up0(h))
        if fuse is not None:
            h = fuse(2, h)
        return self.conv_out(F.silu(self.norm_out(h)))


class AutoencoderModel(nn.Module):
    """Convolutional autoencoder, spatial ÷4 with 4 latent channels."""

    def __init__(
        self,
        base_channels: int = 32,
        latent_channels: int = LATENT_CHANNELS,
        image_channels: int = 3,
    ) -> None:
        super().__init__()
        self.encoder = _Encoder(image_channels, base_channels, latent_channels)
        self.decoder = _Decoder(image_channels, base_channels, latent_channels)
        self.feature_channels = (2 * base_channels, 2 * base_channels, base_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z, _ = self.encoder(x)
        return self.decoder(z)


class CfwModule(nn.Module):
    """Per-scale fusion convs C(F_e, F_d) on the concatenated features."""

    def __init__(self, feature_channels: Sequence[int]) -> None:
        super().__init__()
        self.fusers = nn.ModuleList(
            [
                nn.Sequential(conv3x3(2 * channels, channels), nn.SiLU(), conv3x3(channels, channels))
                for channels in feature_channels
            ]
        )

    def correction(self, scale: int, encoder_features: torch.Tensor, decoder_features: torch.Tensor) -> torch.Tensor:
        """C(F_e, F_d) at one scale."""
        return self.fusers[scale](torch.cat([encoder_features, decoder_features], dim=1))

    def fuse(
        self,
        scale: int,
        encoder_features: torch.Tensor,
        decoder_features: torch.Tensor,
        w: float,
    ) -> torch.Tensor:
        """F_d + w * C(F_e, F_d)."""
        return decoder_features + w * self.correction(scale, encoder_features, decoder_features)


def _check_image_dims(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[2] % LATENT_DOWNSCALE or x.shape[3] % LATENT_DOWNSCALE:
        raise ValueError(
            f"Image dims must be divisible by {LATENT_DOWNSCALE}, got {tuple(x.shape)}"
        )


def vae_encode(model: AutoencoderModel, x: ImageGrid | torch.Tensor) -> torch.Tensor:
    """Latent of an image batch, N×4×H/4×W/4."""
    z, _ = vae_encode_features(model, x)
    return z


def vae_encode_features(
    model: AutoencoderModel, x: ImageGrid | torch.Tensor
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Latent plus encoder features per scale, coarsest first."""
    batch = as_batch(x)
    _check_image_dims(batch)
    return model.encoder(batch)


def _decode_raw(
    model: AutoencoderModel,
    z: torch.Tensor,
    encoder_feats: Sequence[torch.Tensor] | None,
    cfw: CfwModule | None,
    w: float,
) -> torch.Tensor:
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"Fusion coefficient must be in [0, 1], got {w}")
    if w == 0.0:
        return model.decoder(z)
    if encoder_feats is None or cfw is None:
        raise ValueError("Encoder features and a fusion module are required when w > 0")
    if len(encoder_feats) != len(cfw.fusers):
        raise ValueError(
            f"Expected {len(cfw.fusers)} encoder feature maps, got {len(encoder_feats)}"
        )

    def fuse(scale: int, decoder_features: torch.Tensor) -> torch.Tensor:
        return cfw.fuse(scale, encoder_feats[scale], decoder_features, w)

    return model.decoder(z, fuse)


def vae_decode(
    model: AutoencoderModel,
    z: torch.Tensor,
    encoder_feats: Sequence[torch.Tensor] | None = None,
    cfw: CfwModule | None = None,
    w: float = 0.0,
) -> torch.Tensor:
    """Decode a latent to an image in [0, 1], optionally fusing encoder features."""
    return torch.clamp(_decode_raw(model, z, encoder_feats, cfw, w), 0.0, 1.0)


def _finite_loss(loss: torch.Tensor, what: str, store: ParamStore) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{what} loss is not finite", step=store.step_count)
    return loss


def vae_loss(model: AutoencoderModel, batch: torch.Tensor) -> torch.Tensor:
    """L2 reconstruction loss on the unclamped decoder output."""
    _check_image_dims(batch)
    return F.mse_loss(model(batch), batch)


def vae_pretrain_step(store: ParamStore, batch: ImageGrid | torch.Tensor) -> float:
    """One AdamW step of reconstruction training."""
    if store.is_frozen:
        raise FrozenParameterError("Autoencoder is frozen and cannot be trained")
    model = store.module
    store.zero_grad()
    loss = _finite_loss(vae_loss(model, as_batch(batch)), "Autoencoder", store)
    loss.backward()
    store.step()
    return float(loss.item())


def cfw_loss(
    cfw: CfwModule,
    vae: AutoencoderModel,
    hr: torch.Tensor,
    lr_upsampled: torch.Tensor,
) -> torch.Tensor:
    """Restore hr by decoding the latent of lr_upsampled with fused encoder features at w=1."""
    with torch.no_grad():
        z, features = vae_encode_features(vae, lr_upsampled)
    return F.mse_loss(_decode_raw(vae, z, features, cfw, 1.0), hr)


def cfw_train_step(
    store: ParamStore,
    vae: AutoencoderModel,
    hr: ImageGrid | torch.Tensor,
    lr_upsampled: ImageGrid | torch.Tensor,
) -> float:
    """One AdamW step of fusion training against a frozen autoencoder."""
    store.zero_grad()
    loss = _finite_loss(cfw_loss(store.module, vae, as_batch(hr), as_batch(lr_upsampled)), "Fusion", store)
    loss.backward()
    store.step()
    return float(loss.item())


class UNetModel(nn.Module):
    """
    Three-scale denoiser with time injection in every residual block.

    Decoder scales expose SFT hooks, coarsest first; each hook modulates the
    output of that scale's residual block.
    """

    def __init__(
        self,
        latent_channels: int = LATENT_CHANNELS,
        base_channels: int = 32,
        time_dim: int = 128,
    ) -> None:
        super().__init__()
        c = base_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = conv3x3(latent_channels, c)
        self.down0 = ResBlock(c, c, time_dim)
        self.downsample0 = Downsample(c, c)
        self.down1 = ResBlock(c, 2 * c, time_dim)
        self.downsample1 = Downsample(2 * c, 2 * c)
        self.down2 = ResBlock(2 * c, 2 * c, time_dim)
        self.mid = ResBlock(2 * c, 2 * c, time_dim)
        self.up2 = ResBlock(4 * c, 2 * c, time_dim)
        self.upsample1 = Upsample(2 * c, 2 * c)
        self.up1 = ResBlock(4 * c, 2 * c, time_dim)
        self.upsample0 = Upsample(2 * c, 2 * c)
        self.up0 = ResBlock(3 * c, c, time_dim)
        self.head = nn.Sequential(group_norm(c), nn.SiLU(), conv3x3(c, latent_channels))
        self.hook_channels = (2 * c, 2 * c, c)

    def forward(
        self,
        z_t: torch.Tensor,
        t_embedding: torch.Tensor,
        sft: Sequence[SftPair] | None = None,
    ) -> torch.Tensor:
        temb = self.time_mlp(t_embedding)
        skip0 = self.down0(self.conv_in(z_t), temb)
        skip1 = self.down1(self.downsample0(skip0), temb)
        skip2 = self.down2(self.downsample1(skip1), temb)
        h = self.mid(skip2, temb)

        h = self._modulate(self.up2(torch.cat([h, skip2], dim=1), temb), sft, 0)
        h = self.upsample1(h)
        h = self._modulate(self.up1(torch.cat([h, skip1], dim=1), temb), sft, 1)
        h = self.upsample0(h)
        h = self._modulate(self.up0(torch.cat([h, skip0], dim=1), temb), sft, 2)
        return self.head(h)

    @staticmethod
    def _modulate(features: torch.Tensor, sft: Sequence[SftPair] | None, hook: int) -> torch.Tensor:
        if sft is None:
            return features
        gamma, beta = sft[hook]
        return sft_modulate(features, gamma, beta)


def unet_forward(
    model: UNetModel,
    z_t: torch.Tensor,
    t_embedding: torch.Tensor,
    sft_params: Sequence[SftPair] | None = None,
) -> torch.Tensor:
    """Predict the noise of z_t, modulating decoder scales with sft_params."""
    if z_t.ndim != 4 or z_t.shape[2] % 4 or z_t.shape[3] % 4:
        raise ValueError(f"Latent must be N×C×H×W with H, W divisible by 4, got {tuple(z_t.shape)}")
    if t_embedding.shape != (z_t.shape[0], model.time_dim):
        raise ValueError(
            f"Expected time embedding of shape ({z_t.shape[0]}, {model.time_dim}), "
            f"got {tuple(t_embedding.shape)}"
        )
    if sft_params is not None and len(sft_params) != len(model.hook_channels):
        raise ValueError(
            f"Expected {len(model.hook_channels)} SFT pairs, got {len(sft_params)}"
        )
    prediction = model(z_t, t_embedding, sft_params)
    if not torch.all(torch.isfinite(prediction)):
        raise DivergenceError("Denoiser output is not finite")
    return prediction

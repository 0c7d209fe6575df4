"""
Learned quaternion sub-band embedding.

The 16 first-level QWT planes of the luma channel are weighted by softmax
gates and encoded to a fixed-size vector. Pretraining reconstructs the luma
from the gated planes through the embedding, so the gates concentrate on
the sub-bands that carry the image content.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from qwsr.common import DivergenceError, FrozenParameterError
from qwsr.conditioning import EMBEDDING_DIM
from qwsr.layers import Upsample
from qwsr.metrics import luma
from qwsr.numerics import ImageGrid, ParamStore, as_grid
from qwsr.qwt import PLANES_PER_LEVEL, qwt_forward, qwt_planes

_LOGGER = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 8


class QuaveModel(nn.Module):
    """Sub-band gates, strided conv encoder and the pretraining decoder."""

    def __init__(self, d_q: int = EMBEDDING_DIM, planes: int = PLANES_PER_LEVEL) -> None:
        super().__init__()
        self.d_q = d_q
        self.planes = planes
        self.gate_logits = nn.Parameter(torch.zeros(planes))
        self.conv1 = nn.Conv2d(planes, 32, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1)
        self.proj = nn.Linear(64, d_q)
        self.decoder_in = nn.Linear(d_q, 64)
        self.decoder = nn.Sequential(
            Upsample(64, 32),
            nn.SiLU(),
            Upsample(32, 16),
            nn.SiLU(),
            Upsample(16, 1),
        )

    def gates(self) -> torch.Tensor:
        """Softmax of the gate logits."""
        return torch.softmax(self.gate_logits, dim=0)

    def features(self, planes: torch.Tensor) -> torch.Tensor:
        """Spatial encoder features of gated planes."""
        gated = planes * self.gates()[None, :, None, None]
        return F.silu(self.conv2(F.silu(self.conv1(gated))))

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        """Global average pool and project to d_q."""
        return self.proj(features.mean(dim=(2, 3)))

    def forward(self, planes: torch.Tensor) -> torch.Tensor:
        return self.embed(self.features(planes))

    def reconstruct(self, planes: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        """Luma estimate from gated planes through the embedding."""
        features = self.features(planes)
        embedding = self.embed(features)
        h = F.silu(features + self.decoder_in(embedding)[:, :, None, None])
        luma_estimate = self.decoder(h)
        return luma_estimate[:, :, : size[0], : size[1]]


def _image_list(images: Sequence[ImageGrid]) -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim != 4:
        raise ValueError(
            f"Expected a batch of H×W×C grids, got shape {images.shape}; "
            "use quave_embed for a single image"
        )
    return [as_grid(image) for image in images]


def luma_batch(images: Sequence[ImageGrid]) -> torch.Tensor:
    """Y planes of a batch of images as an N×1×H×W tensor."""
    planes = [luma(image) for image in _image_list(images)]
    return torch.from_numpy(np.stack(planes)[:, np.newaxis])


def quave_planes(images: Sequence[ImageGrid]) -> torch.Tensor:
    """First-level QWT planes of the luma channel, N×16×H/2×W/2."""
    planes = []
    for image in _image_list(images):
        if min(image.shape[:2]) < MIN_IMAGE_SIZE:
            raise ValueError(
                f"Image must be at least {MIN_IMAGE_SIZE}×{MIN_IMAGE_SIZE}, got {image.shape[:2]}"
            )
        planes.append(qwt_planes(qwt_forward(luma(image), levels=1), level=1))
    if not planes:
        raise ValueError("Empty batch")
    shapes = {plane.shape for plane in planes}
    if len(shapes) != 1:
        raise ValueError(f"Images of a batch must share dims, got {sorted(shapes)}")
    return torch.from_numpy(np.ascontiguousarray(np.stack(planes).transpose(0, 3, 1, 2)))


def quave_gates(model: QuaveModel) -> np.ndarray:
    """Current gate weights."""
    with torch.no_grad():
        return model.gates().cpu().numpy()


def quave_embed_batch(model: QuaveModel, lr_images: Sequence[ImageGrid]) -> torch.Tensor:
    """Embedding of each image of a batch, N×d_q."""
    embedding = model(quave_planes(lr_images))
    if not torch.all(torch.isfinite(embedding)):
        raise DivergenceError("Wavelet embedding is not finite")
    return embedding


def quave_embed(model: QuaveModel, lr_image: ImageGrid) -> torch.Tensor:
    """Embedding of one image, d_q values."""
    return quave_embed_batch(model, [lr_image])[0]


def quave_loss(model: QuaveModel, images: Sequence[ImageGrid]) -> torch.Tensor:
    """L2 loss of the gated reconstruction of the luma channel."""
    target = luma_batch(images)
    estimate = model.reconstruct(quave_planes(images), (target.shape[2], target.shape[3]))
    return F.mse_loss(estimate, target)


def quave_pretrain_step(store: ParamStore, images: Sequence[ImageGrid]) -> float:
    """One AdamW step of gated reconstruction training."""
    if len(images) == 0:
        raise ValueError("Empty batch")
    if store.is_frozen:
        raise FrozenParameterError("Wavelet embedding model is frozen and cannot be trained")
    store.zero_grad()
    loss = quave_loss(store.module, images)
    if not torch.isfinite(loss):
        raise DivergenceError("Wavelet embedding loss is not finite", step=store.step_count)
    loss.backward()
    store.step()
    _LOGGER.debug("Wavelet embedding step %d loss %g", store.step_count, loss.item())
    return float(loss.item())

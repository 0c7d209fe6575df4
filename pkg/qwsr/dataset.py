"""Image ingestion, HR/LR pair synthesis and PNG IO."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
from Crypto.Hash import SHA256
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from qwsr.common import DatasetError
from qwsr.degradation import DegradationSpec, bicubic_resize, degrade
from qwsr.diffusion import PairBatch
from qwsr.numerics import ImageGrid, as_grid, to_tensor

_LOGGER = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


def list_images(directory: str) -> list[str]:
    """Image file names of a directory, lexicographic."""
    if not os.path.isdir(directory):
        raise DatasetError(f"Not a directory: {directory}")
    return sorted(
        name
        for name in os.listdir(directory)
        if name.lower().endswith(IMAGE_SUFFIXES)
        and os.path.isfile(os.path.join(directory, name))
    )


def load_image(path: str) -> ImageGrid:
    """Decode an image file to an RGB grid in [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            rgb = img.convert("RGB")
    except (OSError, SyntaxError, ValueError) as ex:
        raise DatasetError(f"Cannot decode image {path}: {ex}") from ex
    return np.asarray(rgb, dtype=np.float64) / 255.0


def save_png(path: str, image: ImageGrid) -> None:
    """Write a grid in [0, 1] as an 8-bit PNG."""
    grid = as_grid(image)
    pixels = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PNG")


def center_crop_resize(image: ImageGrid, size: int) -> ImageGrid:
    """Center-crop to a square and resize to size×size with bicubic resampling."""
    grid = as_grid(image)
    side = min(grid.shape[:2])
    top = (grid.shape[0] - side) // 2
    left = (grid.shape[1] - side) // 2
    square = grid[top : top + side, left : left + side]
    if side == size:
        return square.copy()
    return np.clip(bicubic_resize(square, size, size), 0.0, 1.0)


class ImageDataset(Dataset):
    """
    Decoded images of a directory, in file name order.

    indices hold the position of every image in the ingested corpus. Subsets
    keep them, so an image draws the same degradation noise in every split.
    """

    def __init__(
        self,
        names: Sequence[str],
        images: Sequence[ImageGrid],
        indices: Sequence[int] | None = None,
    ) -> None:
        """Initialize ImageDataset."""
        if len(names) != len(images):
            raise ValueError(f"{len(names)} names for {len(images)} images")
        self.names = list(names)
        self.images = list(images)
        self.indices = list(range(len(self.images)) if indices is None else indices)
        if len(self.indices) != len(self.images):
            raise ValueError(f"{len(self.indices)} indices for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> ImageGrid:
        return self.images[index]

    def subset(self, names: Sequence[str]) -> ImageDataset:
        """Dataset of the named images, in this dataset's order."""
        wanted = set(names)
        picked = [position for position, name in enumerate(self.names) if name in wanted]
        return ImageDataset(
            [self.names[position] for position in picked],
            [self.images[position] for position in picked],
            [self.indices[position] for position in picked],
        )


def ingest_dataset(directory: str, hr_size: int, strict: bool = False) -> ImageDataset:
    """
    Load every PNG/PPM image of a directory.

    Images are normalized to [0, 1] and center-cropped/resized to
    hr_size×hr_size. Undecodable files are skipped with a warning, or raise
    when strict.
    """
    names = list_images(directory)
    if not names:
        raise DatasetError(f"No PNG or PPM images in {directory}")
    kept_names: list[str] = []
    images: list[ImageGrid] = []
    for name in names:
        try:
            image = load_image(os.path.join(directory, name))
        except DatasetError:
            if strict:
                raise
            _LOGGER.warning("Skipping undecodable image %s", name)
            continue
        kept_names.append(name)
        images.append(center_crop_resize(image, hr_size))
    if not images:
        raise DatasetError(f"No decodable images in {directory}")
    _LOGGER.info("Ingested %d images from %s", len(images), directory)
    return ImageDataset(kept_names, images)


def is_validation(name: str, val_fraction: float) -> bool:
    """Return True when the file name hashes into the validation fraction."""
    digest = SHA256.new(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64 < val_fraction


def split_dataset(names: Sequence[str], val_fraction: float = 0.1) -> tuple[list[str], list[str]]:
    """Deterministic train/validation split by file name hash."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"Validation fraction must be in [0, 1), got {val_fraction}")
    train = [name for name in names if not is_validation(name, val_fraction)]
    val = [name for name in names if is_validation(name, val_fraction)]
    return train, val


@dataclass
class ImagePair:
    """One HR image with its degraded and re-upsampled versions."""

    name: str
    hr: ImageGrid
    lr: ImageGrid
    lr_upsampled: ImageGrid


def make_pair(name: str, hr: ImageGrid, spec: DegradationSpec, index: int) -> ImagePair:
    """Degrade hr with the noise stream of image index."""
    lr = degrade(hr, spec, index)
    lr_upsampled = np.clip(bicubic_resize(lr, hr.shape[0], hr.shape[1]), 0.0, 1.0)
    return ImagePair(name, hr, lr, lr_upsampled)


class PairDataset(Dataset):
    """HR/LR pairs synthesized on access; the noise of an item depends only on its corpus index."""

    def __init__(self, images: ImageDataset, spec: DegradationSpec) -> None:
        """Initialize PairDataset."""
        self.images = images
        self.spec = spec

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> ImagePair:
        return make_pair(
            self.images.names[index], self.images[index], self.spec, self.images.indices[index]
        )


def collate_pairs(pairs: Sequence[ImagePair]) -> PairBatch:
    """Stack pairs into a PairBatch."""
    return PairBatch(
        hr=to_tensor([pair.hr for pair in pairs]),
        lr=np.stack([pair.lr for pair in pairs]),
        lr_upsampled=to_tensor([pair.lr_upsampled for pair in pairs]),
    )


def pair_loader(dataset: PairDataset, batch_size: int, seed: int, workers: int = 1) -> DataLoader:
    """Shuffling loader whose order depends only on seed."""
    return DataLoader(
        dataset,
        batch_size=min(batch_size, len(dataset)),
        shuffle=True,
        generator=torch.Generator().manual_seed(seed),
        collate_fn=collate_pairs,
        num_workers=0 if workers <= 1 else workers,
    )


def cycle_batches(loader: DataLoader, steps: int) -> Iterator[PairBatch]:
    """Yield exactly steps batches, starting new epochs as needed."""
    produced = 0
    while produced < steps:
        for batch in loader:
            if produced >= steps:
                return
            yield batch
            produced += 1

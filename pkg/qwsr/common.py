"""Common types used by other modules."""
from __future__ import annotations

from enum import Enum, auto


class ModelKind(Enum):
    """Kind tag of a checkpoint."""

    QUAVE = auto()
    VAE = auto()
    UNET = auto()
    DIFFUSION = auto()
    CFW = auto()


class Stage(Enum):
    """Training stages in the order they must run."""

    QUAVE = "quave"
    VAE = "vae"
    UNET = "unet"
    DIFFUSION = "diffusion"
    CFW = "cfw"

    @property
    def checkpoint_name(self) -> str:
        """File name of the checkpoint written by this stage."""
        return f"{self.value}.ckpt"

    @property
    def prerequisites(self) -> tuple[Stage, ...]:
        """Stages that must have completed before this one."""
        return _PREREQUISITES[self]


_PREREQUISITES: dict[Stage, tuple[Stage, ...]] = {
    Stage.QUAVE: (),
    Stage.VAE: (),
    Stage.UNET: (Stage.VAE,),
    Stage.DIFFUSION: (Stage.QUAVE, Stage.VAE, Stage.UNET),
    Stage.CFW: (Stage.VAE,),
}


class QwsrError(RuntimeError):
    """Base class for pipeline failures."""


class DivergenceError(QwsrError):
    """A loss, activation or sampler state became non-finite."""

    def __init__(self, message: str, step: int | None = None) -> None:
        """Initialize DivergenceError."""
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class FrozenParameterError(QwsrError):
    """Frozen parameters were asked to change, or changed."""


class MissingStageError(QwsrError):
    """A prerequisite stage has not produced its checkpoint."""

    def __init__(self, stage: Stage, path: str) -> None:
        """Initialize MissingStageError."""
        super().__init__(
            f"Stage '{stage.value}' has not been run: missing checkpoint {path}"
        )
        self.stage = stage


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or of another format version."""


class DatasetError(ValueError):
    """Image directory cannot be used as a dataset."""

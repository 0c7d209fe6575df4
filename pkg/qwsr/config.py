"""Run configuration: INI file, flag overrides and provenance echo."""
from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Any, Mapping

from qwsr.wavelet import FilterName

_LOGGER = logging.getLogger(__name__)

SECTION = "run"
OUTPUT_ROOT_ENV = "QWSR_OUTPUT_ROOT"
SAMPLERS = ("ddim", "ddpm")


@dataclass
class RunConfig:
    """Every knob of a training, sampling or evaluation run."""

    scale_factor: int = 4
    lr_size: int = 32
    hr_size: int = 128
    learning_rate: float = 5e-5
    batch_size: int = 6
    quave_steps: int = 500
    vae_steps: int = 2000
    unet_steps: int = 2000
    diffusion_steps: int = 2000
    cfw_steps: int = 500
    timesteps: int = 1000
    sample_steps: int = 200
    seed: int = 7
    data_dir: str = "data"
    output_dir: str = "runs"
    cfw_w: float = 0.5
    blur_sigma: float = 1.2
    kernel_size: int = 7
    noise_sigma: float = 0.01
    filter_family: str = FilterName.DAUB4.value
    d_q: int = 512
    base_channels: int = 32
    sampler: str = "ddim"
    eta: float = 0.0
    val_fraction: float = 0.1
    workers: int = 1
    progress: bool = True
    eval_limit: int = 0
    strict: bool = False

    def validate(self) -> RunConfig:
        """Check field ranges and cross-field invariants."""
        if self.scale_factor < 1:
            raise ValueError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if self.hr_size != self.lr_size * self.scale_factor:
            raise ValueError(
                f"hr_size ({self.hr_size}) must equal lr_size ({self.lr_size}) "
                f"× scale_factor ({self.scale_factor})"
            )
        if self.hr_size % 4 or self.lr_size < 8:
            raise ValueError(
                f"hr_size must be divisible by 4 and lr_size >= 8, got {self.hr_size}, {self.lr_size}"
            )
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("quave_steps", "vae_steps", "unet_steps", "diffusion_steps", "cfw_steps", "eval_limit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise ValueError(
                f"sample_steps must be in [1, {self.timesteps}], got {self.sample_steps}"
            )
        if not 0.0 <= self.cfw_w <= 1.0:
            raise ValueError(f"cfw_w must be in [0, 1], got {self.cfw_w}")
        if self.blur_sigma <= 0.0 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(
                f"Need blur_sigma > 0 and an odd kernel_size, got {self.blur_sigma}, {self.kernel_size}"
            )
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        FilterName(self.filter_family)
        if self.d_q < 1 or self.base_channels < 8 or self.base_channels % 8:
            raise ValueError(
                f"Need d_q >= 1 and base_channels a multiple of 8, got {self.d_q}, {self.base_channels}"
            )
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got '{self.sampler}'")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        for name in ("data_dir", "output_dir"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must not be empty")
        return self

    def check_paths(self, need_data: bool = False, need_checkpoints: bool = False) -> RunConfig:
        """
        Check the directories a command reads before any work starts.

        The output directory may be missing unless checkpoints are read
        from it, but it must never be a file.
        """
        if need_data and not os.path.isdir(self.data_dir):
            raise ValueError(f"data_dir is not a directory: {self.data_dir}")
        if os.path.exists(self.output_dir) and not os.path.isdir(self.output_dir):
            raise ValueError(f"output_dir is not a directory: {self.output_dir}")
        if need_checkpoints and not os.path.isdir(self.output_dir):
            raise ValueError(f"No checkpoint directory at {self.output_dir}")
        return self

    def with_overrides(self, overrides: Mapping[str, Any]) -> RunConfig:
        """Copy with the given fields replaced; None values are ignored."""
        known = {field.name for field in dataclasses.fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"Unknown config keys {unknown}")
        changes = {key: value for key, value in overrides.items() if value is not None}
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """Field values by name."""
        return dataclasses.asdict(self)


def _convert(field: dataclasses.Field, text: str) -> Any:
    if field.type in ("bool", bool):
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"Not a boolean for '{field.name}': '{text}'")
    if field.type in ("int", int):
        return int(text)
    if field.type in ("float", float):
        return float(text)
    return text.strip()


def parse_config(text: str) -> dict[str, Any]:
    """Typed values of the [run] section of an INI text."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if not parser.has_section(SECTION):
        raise ValueError(f"Config has no [{SECTION}] section")
    fields = {field.name: field for field in dataclasses.fields(RunConfig)}
    values: dict[str, Any] = {}
    for key, text_value in parser.items(SECTION):
        if key not in fields:
            raise ValueError(f"Unknown config key '{key}'")
        try:
            values[key] = _convert(fields[key], text_value)
        except ValueError as ex:
            raise ValueError(f"Bad value for '{key}': {ex}") from ex
    return values


def load_config(
    path: str | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """
    Effective configuration.

    Precedence, lowest first: defaults, the config file, flag overrides.
    The output root alone may also come from QWSR_OUTPUT_ROOT, which wins
    over everything.
    """
    config = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as config_file:
            config = config.with_overrides(parse_config(config_file.read()))
        _LOGGER.debug("Read config file %s", path)
    if overrides:
        config = config.with_overrides(overrides)
    environ = os.environ if environ is None else environ
    if environ.get(OUTPUT_ROOT_ENV):
        config = config.with_overrides({"output_dir": environ[OUTPUT_ROOT_ENV]})
    return config.validate()


def format_config(config: RunConfig) -> str:
    """INI text that parse_config reads back to the same values."""
    lines = [f"[{SECTION}]"]
    for key, value in config.to_dict().items():
        lines.append(f"{key} = {repr(value) if isinstance(value, float) else value}")
    return "\n".join(lines) + "\n"


def echo_config(config: RunConfig, directory: str) -> str:
    """Write the effective config to <directory>/config.ini."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.ini")
    with open(path, "w", encoding="utf-8") as config_file:
        config_file.write(format_config(config))
    return path

"""Training stages, super-resolution, evaluation and ablation workflows."""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from tqdm import tqdm

from qwsr.checkpoint import (
    Checkpoint,
    load_checkpoint,
    restore_stores,
    save_checkpoint,
    stores_to_tensors,
)
from qwsr.common import (
    CheckpointError,
    DatasetError,
    FrozenParameterError,
    MissingStageError,
    ModelKind,
    Stage,
)
from qwsr.conditioning import conditioning_strength_probe
from qwsr.config import RunConfig, echo_config
from qwsr.dataset import (
    ImageDataset,
    PairDataset,
    cycle_batches,
    ingest_dataset,
    list_images,
    load_image,
    pair_loader,
    save_png,
    split_dataset,
)
from qwsr.degradation import DegradationSpec, bicubic_resize, degrade_batch
from qwsr.diffusion import (
    NoiseSchedule,
    PairBatch,
    SamplerCondition,
    SrModels,
    ddim_sample,
    ddpm_sample,
    make_schedule,
    pretrain_unet_step,
    train_step,
)
from qwsr.metrics import MetricReport, MetricRow, evaluate_pair, luma
from qwsr.networks import (
    LATENT_DOWNSCALE,
    UNET_HEAD_PREFIX,
    cfw_train_step,
    vae_decode,
    vae_encode_features,
    vae_pretrain_step,
)
from qwsr.numerics import ImageGrid, ParamStore, check_pixel_grid, to_grid
from qwsr.quave import quave_gates, quave_pretrain_step
from qwsr.qwt import (
    BANDS,
    QWT_TREES,
    detail_magnitude_energy,
    qwt_forward,
    qwt_magnitudes,
    qwt_phases,
    qwt_planes,
)
from qwsr.wavelet import FilterName, dwt2d_multilevel, filter_pair, subband_energy

_LOGGER = logging.getLogger(__name__)

PHASE_ANGLES = (("phi", -np.pi, np.pi), ("theta", -np.pi / 2, np.pi / 2), ("psi", -np.pi / 4, np.pi / 4))
"""Phase angle names with the range each is mapped from in decompose maps."""

DWT_BANDS = ("ll", "lh", "hl", "hh")

STAGE_MODELS: dict[Stage, tuple[str, ...]] = {
    Stage.QUAVE: ("quave",),
    Stage.VAE: ("vae",),
    Stage.UNET: ("unet",),
    Stage.DIFFUSION: ("unet", "cond"),
    Stage.CFW: ("cfw",),
}

STAGE_KINDS: dict[Stage, ModelKind] = {
    Stage.QUAVE: ModelKind.QUAVE,
    Stage.VAE: ModelKind.VAE,
    Stage.UNET: ModelKind.UNET,
    Stage.DIFFUSION: ModelKind.DIFFUSION,
    Stage.CFW: ModelKind.CFW,
}

LOSS_LOG = "losses.csv"


def degradation_spec(config: RunConfig) -> DegradationSpec:
    """Degradation of a run."""
    return DegradationSpec.gaussian(
        config.blur_sigma,
        config.kernel_size,
        config.noise_sigma,
        config.scale_factor,
        config.seed,
    )


def build_models(config: RunConfig) -> tuple[SrModels, dict[str, ParamStore]]:
    """Freshly initialized models and one AdamW store per model."""
    models = SrModels.create(config.d_q, config.base_channels, config.seed)
    stores = {
        name: ParamStore(module, learning_rate=config.learning_rate)
        for name, module in models.modules().items()
    }
    return models, stores


def checkpoint_path(config: RunConfig, stage: Stage) -> str:
    """Final path of a stage checkpoint."""
    return os.path.join(config.output_dir, stage.checkpoint_name)


def save_stage(
    config: RunConfig,
    stage: Stage,
    stores: dict[str, ParamStore],
    rng_state: bytes = b"",
) -> str:
    """Write the checkpoint of the models a stage trains."""
    tensors, step_counts = stores_to_tensors({name: stores[name] for name in STAGE_MODELS[stage]})
    path = checkpoint_path(config, stage)
    save_checkpoint(
        path,
        Checkpoint(
            kind=STAGE_KINDS[stage],
            tensors=tensors,
            config=config.to_dict(),
            rng_state=rng_state,
            metadata={"stage": stage.value, "step_counts": step_counts},
        ),
    )
    return path


def load_stage(config: RunConfig, stage: Stage, stores: dict[str, ParamStore]) -> None:
    """Restore the models of a completed stage."""
    path = checkpoint_path(config, stage)
    if not os.path.isfile(path):
        raise MissingStageError(stage, path)
    checkpoint = load_checkpoint(path)
    if checkpoint.kind != STAGE_KINDS[stage]:
        raise CheckpointError(
            f"{path} holds a {checkpoint.kind.name} checkpoint, expected {STAGE_KINDS[stage].name}"
        )
    restore_stores(checkpoint, {name: stores[name] for name in STAGE_MODELS[stage]})
    _LOGGER.debug("Restored stage '%s' from %s", stage.value, path)


def _frozen_digests(stage: Stage, stores: dict[str, ParamStore]) -> dict[str, str]:
    """Digests of every entry a stage must leave untouched."""
    trained = set(STAGE_MODELS[stage])
    digests = {}
    for name, store in stores.items():
        if name not in trained:
            digests[name] = store.digest()
        else:
            frozen = [entry for entry in store.entries if store.is_entry_frozen(entry)]
            if frozen:
                digests[name] = store.digest(frozen)
    return digests


def _verify_frozen(stage: Stage, stores: dict[str, ParamStore], before: dict[str, str]) -> None:
    after = _frozen_digests(stage, stores)
    changed = sorted(name for name, digest in before.items() if after.get(name) != digest)
    if changed:
        raise FrozenParameterError(
            f"Stage '{stage.value}' changed frozen parameters of {changed}"
        )


def _prepare_stage(stage: Stage, stores: dict[str, ParamStore]) -> None:
    """Set the frozen/trainable split a stage trains with."""
    for name, store in stores.items():
        if name in STAGE_MODELS[stage]:
            store.unfreeze()
        else:
            store.freeze()
    if stage is Stage.DIFFUSION:
        # backbone stays fixed, only its output head adapts
        stores["unet"].freeze()
        stores["unet"].unfreeze([UNET_HEAD_PREFIX])


StageStep = Callable[[SrModels, dict[str, ParamStore], PairBatch, NoiseSchedule, torch.Generator], float]

_STAGE_STEPS: dict[Stage, StageStep] = {
    Stage.QUAVE: lambda models, stores, batch, schedule, gen: quave_pretrain_step(
        stores["quave"], batch.lr
    ),
    Stage.VAE: lambda models, stores, batch, schedule, gen: vae_pretrain_step(
        stores["vae"], batch.hr
    ),
    Stage.UNET: lambda models, stores, batch, schedule, gen: pretrain_unet_step(
        stores["unet"], models.vae, batch.hr, schedule, gen
    ),
    Stage.DIFFUSION: lambda models, stores, batch, schedule, gen: train_step(
        stores["unet"], stores["cond"], stores["vae"], stores["quave"], batch, schedule, gen
    ),
    Stage.CFW: lambda models, stores, batch, schedule, gen: cfw_train_step(
        stores["cfw"], models.vae, batch.hr, batch.lr_upsampled
    ),
}


def stage_steps(config: RunConfig, stage: Stage) -> int:
    """Configured number of steps of a stage."""
    return int(getattr(config, f"{stage.value}_steps"))


def run_stage(
    config: RunConfig,
    stage: Stage,
    models: SrModels,
    stores: dict[str, ParamStore],
    pairs: PairDataset,
    schedule: NoiseSchedule,
) -> list[float]:
    """Train one stage, verify frozen tensors and write its checkpoint."""
    _prepare_stage(stage, stores)
    before = _frozen_digests(stage, stores)
    stage_index = list(Stage).index(stage)
    generator = torch.Generator().manual_seed(config.seed + 1000 * (stage_index + 1))
    loader = pair_loader(pairs, config.batch_size, config.seed + stage_index, config.workers)
    steps = stage_steps(config, stage)
    step_fn = _STAGE_STEPS[stage]

    _LOGGER.info("Stage '%s': %d steps on %d images", stage.value, steps, len(pairs))
    losses = []
    for batch in tqdm(
        cycle_batches(loader, steps), total=steps, desc=stage.value, disable=not config.progress
    ):
        losses.append(step_fn(models, stores, batch, schedule, generator))
        _LOGGER.debug("%s step %d loss %g", stage.value, len(losses), losses[-1])

    _verify_frozen(stage, stores, before)
    if stage is Stage.QUAVE:
        _LOGGER.debug("Sub-band gates: %s", np.array2string(quave_gates(models.quave), precision=4))
    save_stage(config, stage, stores, generator.get_state().numpy().tobytes())
    if losses:
        _LOGGER.info("Stage '%s' done, final loss %g", stage.value, losses[-1])
    return losses


def training_images(config: RunConfig) -> tuple[ImageDataset, ImageDataset]:
    """Train and validation splits of the configured data directory."""
    dataset = ingest_dataset(config.data_dir, config.hr_size, config.strict)
    train_names, val_names = split_dataset(dataset.names, config.val_fraction)
    if not train_names:
        raise DatasetError(f"Every image of {config.data_dir} fell into the validation split")
    return dataset.subset(train_names), dataset.subset(val_names)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Write a CSV table with a header row."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(header)
        writer.writerows(rows)


def run_training(config: RunConfig, stages: Sequence[Stage]) -> dict[Stage, list[float]]:
    """
    Run stages in pipeline order.

    Prerequisites not run in this call are restored from their checkpoints.
    Losses of this call go to losses.csv in the output directory.
    """
    if not stages:
        raise ValueError("No stages to run")
    config.check_paths(need_data=True)
    ordered = [stage for stage in Stage if stage in set(stages)]
    train, _ = training_images(config)
    pairs = PairDataset(train, degradation_spec(config))
    models, stores = build_models(config)
    schedule = make_schedule(config.timesteps)
    echo_config(config, config.output_dir)

    needed = {prerequisite for stage in ordered for prerequisite in stage.prerequisites}
    for prerequisite in sorted(needed - set(ordered), key=list(Stage).index):
        load_stage(config, prerequisite, stores)

    losses: dict[Stage, list[float]] = {}
    for stage in ordered:
        losses[stage] = run_stage(config, stage, models, stores, pairs, schedule)

    write_csv(
        os.path.join(config.output_dir, LOSS_LOG),
        ("stage", "step", "loss"),
        (
            (stage.value, step, repr(loss))
            for stage, values in losses.items()
            for step, loss in enumerate(values, start=1)
        ),
    )
    return losses


def load_sr_models(config: RunConfig, need_cfw: bool | None = None) -> SrModels:
    """Models of a trained pipeline; the fusion module only when needed."""
    models, stores = build_models(config)
    for stage in (Stage.QUAVE, Stage.VAE, Stage.DIFFUSION):
        load_stage(config, stage, stores)
    if need_cfw is None:
        need_cfw = config.cfw_w > 0.0
    if need_cfw:
        load_stage(config, Stage.CFW, stores)
    else:
        models.cfw = None
    for module in models.modules().values():
        module.eval()
    return models


def upsample_lr(lr: ImageGrid, scale_factor: int) -> ImageGrid:
    """Bicubic upsampling of an LR image to the HR size."""
    grid = check_pixel_grid(lr)
    out_h, out_w = grid.shape[0] * scale_factor, grid.shape[1] * scale_factor
    if out_h % LATENT_DOWNSCALE or out_w % LATENT_DOWNSCALE:
        raise ValueError(
            f"Upsampled size {out_h}×{out_w} must be divisible by {LATENT_DOWNSCALE}"
        )
    return np.clip(bicubic_resize(grid, out_h, out_w), 0.0, 1.0)


def sample_latent(
    models: SrModels,
    condition: SamplerCondition,
    schedule: NoiseSchedule,
    config: RunConfig,
    seed: int,
    steps: int | None = None,
) -> torch.Tensor:
    """Run the configured sampler; an explicit step count forces DDIM."""
    if steps is None and config.sampler == "ddpm":
        return ddpm_sample(models, condition, schedule, seed)
    return ddim_sample(
        models, condition, schedule, steps or config.sample_steps, config.eta, seed
    )


def decode_latent(models: SrModels, z: torch.Tensor, lr_upsampled: ImageGrid, w: float) -> ImageGrid:
    """Decode a sampled latent, fusing encoder features of the upsampled LR at w."""
    with torch.no_grad():
        features = None
        if w > 0.0:
            _, features = vae_encode_features(models.vae, lr_upsampled)
        return to_grid(vae_decode(models.vae, z, features, models.cfw, w))[0]


def super_resolve(
    models: SrModels,
    schedule: NoiseSchedule,
    config: RunConfig,
    lr: ImageGrid,
    seed: int,
    steps: int | None = None,
    w: float | None = None,
) -> tuple[ImageGrid, ImageGrid]:
    """SR image and bicubic baseline of one LR image."""
    lr_upsampled = upsample_lr(lr, config.scale_factor)
    condition = SamplerCondition.from_images(models, [check_pixel_grid(lr)], lr_upsampled)
    z = sample_latent(models, condition, schedule, config, seed, steps)
    sr = decode_latent(models, z, lr_upsampled, config.cfw_w if w is None else w)
    return sr, lr_upsampled


@dataclass
class SrResult:
    """Output of one super-resolution run."""

    image: ImageGrid
    bicubic: ImageGrid
    report: MetricReport | None = None
    bicubic_report: MetricReport | None = None


def run_sr(
    config: RunConfig,
    lr: ImageGrid,
    reference: ImageGrid | None = None,
    name: str = "image.png",
    models: SrModels | None = None,
) -> SrResult:
    """Super-resolve one LR image, measuring against reference when given."""
    models = models or load_sr_models(config)
    schedule = make_schedule(config.timesteps)
    sr, bicubic = super_resolve(models, schedule, config, lr, config.seed)
    result = SrResult(sr, bicubic)
    if reference is not None:
        reference = check_pixel_grid(reference)
        if reference.shape != sr.shape:
            raise ValueError(f"Reference shape {reference.shape} != output shape {sr.shape}")
        result.report = MetricReport()
        result.report.add(name, sr, reference)
        result.bicubic_report = MetricReport()
        result.bicubic_report.add(name, bicubic, reference)
    return result


def make_pairs(config: RunConfig, output_dir: str, split: str = "val") -> int:
    """
    Write hr/ and lr/ PNG pairs of a data split.

    split is 'train', 'val' or 'all'.
    """
    if split not in ("train", "val", "all"):
        raise ValueError(f"Split must be 'train', 'val' or 'all', got '{split}'")
    config.check_paths(need_data=True)
    dataset = ingest_dataset(config.data_dir, config.hr_size, config.strict)
    train_names, val_names = split_dataset(dataset.names, config.val_fraction)
    names = {"train": train_names, "val": val_names, "all": dataset.names}[split]
    selected = dataset.subset(names)
    lr_images = degrade_batch(selected.images, degradation_spec(config), selected.indices)
    for name, hr, lr in zip(selected.names, selected.images, lr_images):
        stem = os.path.splitext(name)[0] + ".png"
        save_png(os.path.join(output_dir, "hr", stem), hr)
        save_png(os.path.join(output_dir, "lr", stem), lr)
    echo_config(config, output_dir)
    _LOGGER.info("Wrote %d %s pairs to %s", len(selected), split, output_dir)
    return len(selected)


def _limited(names: list[str], limit: int) -> list[str]:
    return names[:limit] if limit > 0 else names


def sample_directory(
    config: RunConfig, input_dir: str, output_dir: str, reference_dir: str | None = None
) -> MetricReport | None:
    """
    Super-resolve every LR image of a directory into output_dir.

    Images are used at their own size. Image i is sampled with seed
    config.seed + i. With a reference directory, metrics.csv reports PSNR_Y
    and SSIM_Y of the output and of the bicubic baseline.
    """
    names = _limited(list_images(input_dir), config.eval_limit)
    if not names:
        raise DatasetError(f"No PNG or PPM images in {input_dir}")
    models = load_sr_models(config)
    schedule = make_schedule(config.timesteps)
    echo_config(config, output_dir)
    report = MetricReport() if reference_dir else None
    bicubic_report = MetricReport() if reference_dir else None
    for index, name in enumerate(tqdm(names, desc="sample", disable=not config.progress)):
        lr = load_image(os.path.join(input_dir, name))
        sr, bicubic = super_resolve(models, schedule, config, lr, config.seed + index)
        stem = os.path.splitext(name)[0] + ".png"
        save_png(os.path.join(output_dir, stem), sr)
        if report is not None and bicubic_report is not None and reference_dir:
            reference = load_image(os.path.join(reference_dir, stem))
            report.add(stem, sr, reference)
            bicubic_report.add(stem, bicubic, reference)
    if report is not None and bicubic_report is not None:
        write_csv(
            os.path.join(output_dir, "metrics.csv"),
            ("filename", "psnr_y", "ssim_y", "psnr_y_bicubic", "ssim_y_bicubic"),
            (
                (row.filename, row.psnr_y, row.ssim_y, base.psnr_y, base.ssim_y)
                for row, base in zip(report.rows, bicubic_report.rows)
            ),
        )
        _LOGGER.info(
            "PSNR_Y %.3f dB (bicubic %.3f), SSIM_Y %.4f (bicubic %.4f)",
            report.psnr_db,
            bicubic_report.psnr_db,
            report.ssim,
            bicubic_report.ssim,
        )
    return report


def evaluate_directory(
    hr_dir: str, sr_dir: str, csv_path: str | None = None, workers: int = 1, limit: int = 0
) -> MetricReport:
    """PSNR_Y and SSIM_Y of every SR image against the same-named HR image."""
    names = _limited(list_images(sr_dir), limit)
    if not names:
        raise DatasetError(f"No PNG or PPM images in {sr_dir}")
    missing = [name for name in names if not os.path.isfile(os.path.join(hr_dir, name))]
    if missing:
        raise DatasetError(f"No reference in {hr_dir} for {missing}")

    def evaluate(name: str) -> MetricRow:
        return evaluate_pair(
            name,
            load_image(os.path.join(sr_dir, name)),
            load_image(os.path.join(hr_dir, name)),
        )

    # map keeps file order whatever the worker scheduling
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        report = MetricReport(list(executor.map(evaluate, names)))
    if csv_path:
        write_csv(
            csv_path,
            ("filename", "psnr_y", "ssim_y"),
            ((row.filename, row.psnr_y, row.ssim_y) for row in report.rows),
        )
    _LOGGER.info("%d images: PSNR_Y %.3f dB, SSIM_Y %.4f", len(report.rows), report.psnr_db, report.ssim)
    return report


def _evaluation_pairs(config: RunConfig) -> list[tuple[str, ImageGrid, ImageGrid]]:
    """(name, hr, lr) of the validation split, or of the train split when it is empty."""
    train, val = training_images(config)
    images = val
    if len(val) == 0:
        _LOGGER.warning("Validation split is empty, evaluating on training images")
        images = train
    images = images.subset(_limited(images.names, config.eval_limit))
    lr_images = degrade_batch(images.images, degradation_spec(config), images.indices)
    return list(zip(images.names, images.images, lr_images))


@dataclass
class AblationRow:
    """Metrics and wall time of one ablation setting."""

    setting: float
    psnr_y: float
    ssim_y: float
    psnr_y_bicubic: float
    ssim_y_bicubic: float
    seconds: float


def _write_ablation(path: str | None, column: str, rows: Sequence[AblationRow]) -> None:
    if path is None:
        return
    write_csv(
        path,
        (column, "psnr_y", "ssim_y", "psnr_y_bicubic", "ssim_y_bicubic", "seconds"),
        (
            (row.setting, row.psnr_y, row.ssim_y, row.psnr_y_bicubic, row.ssim_y_bicubic, row.seconds)
            for row in rows
        ),
    )


def run_ablation_steps(
    config: RunConfig,
    step_list: Sequence[int],
    csv_path: str | None = None,
    models: SrModels | None = None,
) -> list[AblationRow]:
    """Metrics and wall time of DDIM sampling for each step count."""
    if not step_list:
        raise ValueError("No step counts given")
    for steps in step_list:
        if not 1 <= steps <= config.timesteps:
            raise ValueError(f"Step count must be in [1, {config.timesteps}], got {steps}")
    models = models or load_sr_models(config)
    schedule = make_schedule(config.timesteps)
    pairs = _evaluation_pairs(config)

    rows = []
    for steps in tqdm(step_list, desc="ablate-steps", disable=not config.progress):
        report, bicubic_report = MetricReport(), MetricReport()
        start = time.perf_counter()
        for index, (name, hr, lr) in enumerate(pairs):
            sr, bicubic = super_resolve(models, schedule, config, lr, config.seed + index, steps=steps)
            report.add(name, sr, hr)
            bicubic_report.add(name, bicubic, hr)
        elapsed = time.perf_counter() - start
        rows.append(
            AblationRow(steps, report.psnr_db, report.ssim, bicubic_report.psnr_db, bicubic_report.ssim, elapsed)
        )
        _LOGGER.info("%d steps: PSNR_Y %.3f dB, %.2f s", steps, report.psnr_db, elapsed)
    _write_ablation(csv_path, "steps", rows)
    return rows


def run_ablation_cfw(
    config: RunConfig,
    w_list: Sequence[float],
    csv_path: str | None = None,
    models: SrModels | None = None,
) -> list[AblationRow]:
    """
    Metrics of decoding the same sampled latents at each fusion coefficient w.

    Wall time covers decoding only.
    """
    if not w_list:
        raise ValueError("No fusion coefficients given")
    for w in w_list:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"Fusion coefficient must be in [0, 1], got {w}")
    models = models or load_sr_models(config, need_cfw=any(w > 0.0 for w in w_list))
    schedule = make_schedule(config.timesteps)

    sampled = []
    for index, (name, hr, lr) in enumerate(_evaluation_pairs(config)):
        lr_upsampled = upsample_lr(lr, config.scale_factor)
        condition = SamplerCondition.from_images(models, [lr], lr_upsampled)
        z = sample_latent(models, condition, schedule, config, config.seed + index)
        sampled.append((name, hr, lr_upsampled, z))

    rows = []
    for w in w_list:
        report, bicubic_report = MetricReport(), MetricReport()
        start = time.perf_counter()
        decoded = [decode_latent(models, z, lr_upsampled, w) for _, _, lr_upsampled, z in sampled]
        elapsed = time.perf_counter() - start
        for (name, hr, lr_upsampled, _), sr in zip(sampled, decoded):
            report.add(name, sr, hr)
            bicubic_report.add(name, lr_upsampled, hr)
        rows.append(
            AblationRow(w, report.psnr_db, report.ssim, bicubic_report.psnr_db, bicubic_report.ssim, elapsed)
        )
        _LOGGER.info("w=%g: PSNR_Y %.3f dB, SSIM_Y %.4f", w, report.psnr_db, report.ssim)
    _write_ablation(csv_path, "w", rows)
    return rows


def probe_conditioning(
    config: RunConfig,
    t_list: Sequence[int],
    lr: ImageGrid | None = None,
    csv_path: str | None = None,
    models: SrModels | None = None,
) -> list[tuple[int, float]]:
    """
    Conditioning strength at each timestep.

    Measured on one LR image, or averaged over the evaluation pairs of the
    data directory when no image is given.
    """
    if not t_list:
        raise ValueError("No timesteps given")
    models = models or load_sr_models(config, need_cfw=False)
    lr_images = [lr] if lr is not None else [pair_lr for _, _, pair_lr in _evaluation_pairs(config)]
    per_image = []
    for image in lr_images:
        lr_upsampled = upsample_lr(image, config.scale_factor)
        condition = SamplerCondition.from_images(models, [check_pixel_grid(image)], lr_upsampled)
        per_image.append(
            conditioning_strength_probe(
                models.cond, config.timesteps, t_list, condition.z_lr, condition.quave_emb
            )
        )
    strengths = np.mean(per_image, axis=0)
    rows = [(int(t), float(strength)) for t, strength in zip(t_list, strengths)]
    if csv_path:
        write_csv(csv_path, ("t", "strength"), rows)
    return rows


def _signed_map(plane: np.ndarray) -> np.ndarray:
    # zero at mid gray
    peak = np.abs(plane).max()
    return 0.5 + 0.5 * plane / peak if peak > 0 else np.full_like(plane, 0.5)


def decompose_image(
    image: ImageGrid,
    output_dir: str,
    levels: int = 1,
    filter_family: str = FilterName.DAUB4.value,
) -> dict[str, float]:
    """
    Write the QWT and real DWT sub-bands of the luma as PNG maps and NPZ arrays.

    Per level n the directory gets

    - level{n}_{band}.png: quaternion magnitude, scaled to its peak
    - level{n}_{band}_{tree}.png: the 16 real planes, zero at mid gray
    - level{n}_{band}_{angle}.png: phi, theta and psi mapped from their
      ranges onto [0, 1]
    - dwt_level{n}_{ll,lh,hl,hh}.png: real DWT with filter_family

    and qwt.npz holds magnitude_n, phase_n, planes_n and dwt_n arrays.
    Returns the QWT detail magnitude energy (level{n}) and the real DWT
    sub-band energy (dwt_level{n}) of each level.
    """
    y = luma(image)
    decomp = qwt_forward(y, levels)
    pyramid = dwt2d_multilevel(y, filter_pair(filter_family), levels)
    energies = {}
    arrays = {}
    for level, subbands in enumerate(pyramid, start=1):
        prefix = os.path.join(output_dir, f"level{level}")
        magnitudes = qwt_magnitudes(decomp, level)
        phases = qwt_phases(decomp, level)
        planes = qwt_planes(decomp, level)
        arrays[f"magnitude_{level}"] = magnitudes
        arrays[f"phase_{level}"] = phases
        arrays[f"planes_{level}"] = planes
        for index, band in enumerate(BANDS):
            band_map = magnitudes[..., index]
            peak = band_map.max()
            save_png(f"{prefix}_{band}.png", band_map / peak if peak > 0 else band_map)
            for component, tree in enumerate(QWT_TREES):
                save_png(f"{prefix}_{band}_{tree}.png", _signed_map(planes[..., 4 * index + component]))
            for angle, (name, low, high) in enumerate(PHASE_ANGLES):
                save_png(f"{prefix}_{band}_{name}.png", (phases[..., index, angle] - low) / (high - low))

        dwt_bands = (subbands.ll, *subbands.details)
        arrays[f"dwt_{level}"] = np.stack(dwt_bands, axis=-1)
        for name, band_grid in zip(DWT_BANDS, dwt_bands):
            save_png(os.path.join(output_dir, f"dwt_level{level}_{name}.png"), _signed_map(band_grid))

        energies[f"level{level}"] = detail_magnitude_energy(decomp, level)
        energies[f"dwt_level{level}"] = subband_energy(subbands)
    os.makedirs(output_dir, exist_ok=True)
    np.savez(os.path.join(output_dir, "qwt.npz"), **arrays)
    _LOGGER.info("Decomposed %d levels into %s", levels, output_dir)
    return energies

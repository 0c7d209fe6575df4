"""Test diffusion module."""
from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from torch import nn

from qwsr.common import FrozenParameterError
from qwsr.dataset import collate_pairs, make_pair
from qwsr.degradation import DegradationSpec
from qwsr.diffusion import (
    SamplerCondition,
    SrModels,
    conditional_loss,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    ddpm_sample,
    ddpm_step,
    make_schedule,
    pretrain_unet_step,
    q_sample,
    train_step,
)
from qwsr.numerics import ParamStore, grad_check
from tests.assert_utils import assert_snapshots_equal, random_rgb, smooth_rgb


def _models(seed=0):
    return SrModels.create(base_channels=8, seed=seed)


def _condition(models):
    return SamplerCondition.from_images(models, [random_rgb(8, 8, seed=1)], [random_rgb(16, 16, seed=2)])


def _silence(models):
    with torch.no_grad():
        for parameter in models.unet.head[-1].parameters():
            parameter.zero_()


def _batch():
    spec = DegradationSpec.gaussian(1.0, 3, 0.01, 2, 7)
    return collate_pairs([make_pair(f"{i}.png", smooth_rgb(16, 16, seed=i), spec, i) for i in range(2)])


def _stores(models, learning_rate=1e-3):
    stores = {name: ParamStore(module, learning_rate=learning_rate) for name, module in models.modules().items()}
    stores["vae"].freeze()
    stores["quave"].freeze()
    stores["unet"].freeze()
    stores["unet"].unfreeze(["head."])
    return stores


class TestSchedule:
    """Test the linear noise schedule."""

    def test_default(self):
        """T = 1000 runs from nearly clean to nearly pure noise."""
        schedule = make_schedule()
        assert schedule.T == 1000
        assert schedule.alpha_bar[0] > 0.99
        assert schedule.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.05)
        assert np.all(np.diff(schedule.alpha_bar) < 0)
        assert np.allclose(schedule.alpha, 1.0 - schedule.beta)

    def test_single_step(self):
        """T = 1 has alpha_bar[0] = 1 - beta_start."""
        schedule = make_schedule(1)
        assert schedule.alpha_bar[0] == pytest.approx(1.0 - 1e-4)

    @pytest.mark.parametrize("T", [10, 100, 1000])
    def test_snr_decreasing(self, T):
        """SNR strictly decreases."""
        assert np.all(np.diff(make_schedule(T).snr) < 0)

    @pytest.mark.parametrize("T, start, end", [(0, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.02)])
    def test_invalid(self, T, start, end):
        """Empty schedules and bad beta bounds are rejected."""
        with pytest.raises(ValueError):
            make_schedule(T, start, end)


class TestForwardProcess:
    """Test q_sample."""

    def test_zero_noise(self):
        """eps = 0 scales the clean latent."""
        schedule = make_schedule(100)
        z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        z_t = q_sample(z0, 40, torch.zeros_like(z0), schedule)
        assert torch.allclose(z_t, math.sqrt(schedule.alpha_bar[40]) * z0, atol=1e-15)

    def test_per_sample_timesteps(self):
        """Each batch row uses its own timestep."""
        schedule = make_schedule(100)
        z0 = torch.ones(2, 1, 4, 4, dtype=torch.float64)
        eps = torch.ones_like(z0)
        z_t = q_sample(z0, torch.tensor([0, 99]), eps, schedule)
        for row, t in enumerate((0, 99)):
            expected = math.sqrt(schedule.alpha_bar[t]) + math.sqrt(1.0 - schedule.alpha_bar[t])
            assert torch.allclose(z_t[row], torch.full_like(z_t[row], expected), atol=1e-12)

    def test_variance(self):
        """Noise-only draws have variance 1 - alpha_bar."""
        schedule = make_schedule(1000)
        generator = torch.Generator().manual_seed(0)
        eps = torch.randn(10000, 1, 1, 1, generator=generator, dtype=torch.float64)
        z_t = q_sample(torch.zeros_like(eps), 300, eps, schedule)
        assert float(z_t.var()) == pytest.approx(1.0 - schedule.alpha_bar[300], rel=0.05)

    def test_shape_mismatch(self):
        """Noise must match the latent shape."""
        with pytest.raises(ValueError):
            q_sample(torch.zeros(1, 4, 4, 4), 0, torch.zeros(1, 4, 4, 2), make_schedule(10))


class TestSamplerSteps:
    """Test single sampler updates."""

    def test_timesteps(self):
        """Uniform descending subsequences from T-1 to 0."""
        assert ddim_timesteps(1000, 1) == [999]
        assert ddim_timesteps(10, 10) == list(range(9, -1, -1))
        steps = ddim_timesteps(1000, 50)
        assert steps[0] == 999 and steps[-1] == 0
        assert len(set(steps)) == 50
        assert steps == sorted(steps, reverse=True)

    @pytest.mark.parametrize("steps", [0, 11])
    def test_timesteps_range(self, steps):
        """Step counts outside [1, T] are rejected."""
        with pytest.raises(ValueError):
            ddim_timesteps(10, steps)

    @pytest.mark.parametrize("t", [0, 1, 17, 500, 999])
    def test_ddim_eta_one_is_ddpm(self, t):
        """DDIM with eta 1 over consecutive steps equals the ancestral update."""
        schedule = make_schedule(1000)
        generator = torch.Generator().manual_seed(t)
        z, eps, noise = (
            torch.randn(1, 4, 4, 4, generator=generator, dtype=torch.float64) for _ in range(3)
        )
        expected = ddpm_step(z, eps, t, schedule, noise)
        actual = ddim_step(z, eps, t, t - 1, schedule, 1.0, noise)
        assert torch.allclose(actual, expected, atol=1e-9)

    def test_ddim_exact_noise_recovers_latent(self):
        """Deterministic step with the true noise lands on the forward-process latent."""
        schedule = make_schedule(100)
        z0 = torch.randn(1, 4, 4, 4, dtype=torch.float64)
        eps = torch.randn(1, 4, 4, 4, dtype=torch.float64)
        z_t = q_sample(z0, 60, eps, schedule)
        z_prev = ddim_step(z_t, eps, 60, 30, schedule, 0.0, None)
        assert torch.allclose(z_prev, q_sample(z0, 30, eps, schedule), atol=1e-10)
        z_clean = ddim_step(z_t, eps, 60, -1, schedule, 0.0, None)
        assert torch.allclose(z_clean, z0, atol=1e-10)


class TestSamplers:
    """Test full sampling loops."""

    def test_ddpm_matches_oracle_for_silent_denoiser(self):
        """With a zero denoiser every step only rescales and adds seeded noise."""
        models = _models()
        _silence(models)
        condition = _condition(models)
        schedule = make_schedule(10)
        result = ddpm_sample(models, condition, schedule, seed=5)

        generator = torch.Generator().manual_seed(5)
        z = torch.randn(tuple(condition.z_lr.shape), generator=generator, dtype=torch.float64)
        for t in range(9, -1, -1):
            z = z / math.sqrt(1.0 - schedule.beta[t])
            if t > 0:
                variance = schedule.beta[t] * (1.0 - schedule.alpha_bar[t - 1]) / (1.0 - schedule.alpha_bar[t])
                z = z + math.sqrt(variance) * torch.randn(tuple(z.shape), generator=generator, dtype=torch.float64)
        assert torch.allclose(result, z, atol=1e-9)

    def test_seed_determinism(self):
        """Same seed gives bitwise equal latents, another seed differs."""
        models = _models()
        condition = _condition(models)
        schedule = make_schedule(10)
        first = ddim_sample(models, condition, schedule, steps=3, eta=0.5, seed=1)
        second = ddim_sample(models, condition, schedule, steps=3, eta=0.5, seed=1)
        other = ddim_sample(models, condition, schedule, steps=3, eta=0.5, seed=2)
        assert torch.equal(first, second)
        assert not torch.equal(first, other)
        assert torch.equal(
            ddpm_sample(models, condition, schedule, seed=3),
            ddpm_sample(models, condition, schedule, seed=3),
        )

    def test_single_step(self):
        """One DDIM step gives a finite latent of the condition shape."""
        models = _models()
        condition = _condition(models)
        z = ddim_sample(models, condition, make_schedule(10), steps=1)
        assert z.shape == condition.z_lr.shape
        assert torch.all(torch.isfinite(z))


class TestTraining:
    """Test the training objectives."""

    def test_train_step_updates_trainable_only(self):
        """Conditional training moves the conditioning encoder and head only."""
        models = _models()
        stores = _stores(models)
        frozen = {name: stores[name].snapshot() for name in ("vae", "quave")}
        unet_before = stores["unet"].snapshot()
        cond_before = stores["cond"].digest()
        loss = train_step(
            stores["unet"], stores["cond"], stores["vae"], stores["quave"],
            _batch(), make_schedule(10), torch.Generator().manual_seed(0),
        )
        assert np.isfinite(loss)
        for name, snapshot in frozen.items():
            assert_snapshots_equal(snapshot, stores[name].snapshot())
        unet_after = stores["unet"].snapshot()
        for name, value in unet_before.items():
            if not name.startswith("head."):
                assert np.array_equal(value, unet_after[name]), name
        assert stores["cond"].digest() != cond_before

    def test_train_step_zero_learning_rate(self):
        """Learning rate 0 leaves every value unchanged."""
        models = _models()
        stores = _stores(models, learning_rate=0.0)
        before = {name: store.snapshot() for name, store in stores.items()}
        train_step(
            stores["unet"], stores["cond"], stores["vae"], stores["quave"],
            _batch(), make_schedule(10), torch.Generator().manual_seed(0),
        )
        for name, store in stores.items():
            assert_snapshots_equal(before[name], store.snapshot())

    def test_train_step_requires_frozen_autoencoder(self):
        """An unfrozen autoencoder is rejected."""
        models = _models()
        stores = _stores(models)
        stores["vae"].unfreeze()
        with pytest.raises(FrozenParameterError):
            train_step(
                stores["unet"], stores["cond"], stores["vae"], stores["quave"],
                _batch(), make_schedule(10), torch.Generator().manual_seed(0),
            )

    def test_pretrain_unet(self):
        """Unconditional pretraining steps the denoiser; frozen denoisers are rejected."""
        models = _models()
        store = ParamStore(models.unet, learning_rate=1e-3)
        before = store.digest()
        loss = pretrain_unet_step(store, models.vae, _batch().hr, make_schedule(10), torch.Generator().manual_seed(0))
        assert np.isfinite(loss)
        assert store.digest() != before
        store.freeze()
        with pytest.raises(FrozenParameterError):
            pretrain_unet_step(store, models.vae, _batch().hr, make_schedule(10), torch.Generator())

    @pytest.mark.slow
    def test_conditional_loss_falls(self):
        """500 conditional steps cut the smoothed noise-prediction loss by 40%."""
        stores = _stores(_models())
        spec = DegradationSpec.gaussian(1.0, 3, 0.01, 2, 7)
        batch = collate_pairs([make_pair(f"{i}.png", smooth_rgb(16, 16, seed=i), spec, i) for i in range(8)])
        schedule = make_schedule()
        generator = torch.Generator().manual_seed(0)
        losses = [
            train_step(stores["unet"], stores["cond"], stores["vae"], stores["quave"], batch, schedule, generator)
            for _ in range(500)
        ]
        assert np.mean(losses[-50:]) <= 0.6 * np.mean(losses[:50])

    def test_conditional_gradients(self):
        """Gradients through conditioning encoder and denoiser match central differences."""
        models = _models()
        torch.manual_seed(1)
        with torch.no_grad():
            for heads in (models.cond.gamma_heads, models.cond.beta_heads):
                for parameter in heads.parameters():
                    parameter.normal_(std=0.01)
        condition = _condition(models)
        schedule = make_schedule(10)
        generator = torch.Generator().manual_seed(2)
        z0 = torch.randn(tuple(condition.z_lr.shape), generator=generator, dtype=torch.float64)
        eps = torch.randn(tuple(z0.shape), generator=generator, dtype=torch.float64)
        t = torch.tensor([4])
        store = ParamStore(nn.ModuleDict({"unet": models.unet, "cond": models.cond}))
        error = grad_check(
            lambda _s: conditional_loss(models, z0, condition, t, eps, schedule),
            store,
            max_entries_per_tensor=2,
            seed=3,
        )
        assert error < 1e-3

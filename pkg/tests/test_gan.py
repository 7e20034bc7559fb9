import numpy as np
import pytest
import torch
from torch import nn

from fovrecon import gan
from fovrecon.errors import ConvergenceError, ValidationError
from fovrecon.gan.networks import Critic, CriticSpec, Generator, GeneratorSpec, parameter_count
from fovrecon.gan import losses as L
from fovrecon.imaging import ImagePatch, build_laplacian_pyramid

from conftest import random_patch


class TestGenerator:
    def test_forward_shape_and_range(self):
        gen = gan.build_generator()
        out = gen(torch.zeros(1, 3, 64, 64))
        assert out.shape == (1, 3, 64, 64)
        assert out.min() > -1.0 and out.max() < 1.0  # open tanh range

    def test_256_shape(self):
        gen = gan.build_generator()
        with torch.no_grad():
            out = gen(torch.rand(1, 3, 256, 256, generator=torch.Generator().manual_seed(0)))
        assert out.shape == (1, 3, 256, 256)

    def test_filters_match_4_spec(self):
        spec = GeneratorSpec()
        assert spec.encoder_filters == (16, 32, 64, 128, 128)
        assert spec.conv_kernel == 5
        assert spec.leaky_slope == 0.2
        gen = Generator(spec)
        slopes = {m.negative_slope for m in gen.modules() if isinstance(m, nn.LeakyReLU)}
        assert slopes == {0.2}
        kernels = {m.kernel_size for m in gen.modules() if isinstance(m, nn.Conv2d)}
        assert (5, 5) in kernels and (1, 1) in kernels

    def test_param_count_smaller_than_doubled(self):
        ours = parameter_count(gan.build_generator())
        doubled = parameter_count(Generator(GeneratorSpec(encoder_filters=(32, 32, 128, 256, 256))))
        assert ours < doubled

    def test_forward_determinism(self):
        torch.manual_seed(0)
        gen = Generator(GeneratorSpec())
        x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            a = gen(x)
            b = gen(x)
        assert torch.equal(a, b)

    def test_bad_spatial_size_rejected(self):
        gen = gan.build_generator()
        with pytest.raises(ValidationError):
            gen(torch.zeros(1, 3, 48, 48))

    def test_bad_channels_rejected(self):
        gen = gan.build_generator()
        with pytest.raises(ValidationError):
            gen(torch.zeros(1, 4, 64, 64))


class TestCritic:
    def test_single_patch_scalar(self):
        critic = gan.build_critic()
        out = critic(torch.zeros(1, 3, 64, 64))
        assert out.shape == (1,)

    def test_tiling_256(self):
        critic = gan.build_critic()
        out = critic(torch.rand(2, 3, 256, 256, generator=torch.Generator().manual_seed(0)))
        assert out.shape == (2,)

    def test_tile_average_matches_manual(self):
        torch.manual_seed(1)
        critic = Critic(CriticSpec())
        x = torch.rand(1, 3, 128, 128, generator=torch.Generator().manual_seed(2))
        with torch.no_grad():
            whole = critic(x)
            tiles = [
                critic(x[:, :, i * 64 : (i + 1) * 64, j * 64 : (j + 1) * 64])
                for i in range(2) for j in range(2)
            ]
        assert torch.allclose(whole, torch.stack(tiles).mean(dim=0), atol=1e-6)

    def test_shuffled_patch_order_same_score(self):
        torch.manual_seed(3)
        critic = Critic(CriticSpec())
        tiles = torch.rand(4, 3, 64, 64, generator=torch.Generator().manual_seed(4))

        def image_from(order):
            top = torch.cat([tiles[order[0]], tiles[order[1]]], dim=2)
            bottom = torch.cat([tiles[order[2]], tiles[order[3]]], dim=2)
            return torch.cat([top, bottom], dim=1).unsqueeze(0)

        with torch.no_grad():
            a = critic(image_from([0, 1, 2, 3]))
            b = critic(image_from([2, 0, 3, 1]))
        assert torch.allclose(a, b, atol=1e-6)

    def test_non_tiling_input_rejected(self):
        critic = gan.build_critic()
        with pytest.raises(ValidationError):
            critic(torch.zeros(1, 3, 96, 96))


class _ConstCritic(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0],), self.value, dtype=x.dtype)


class _PerSampleCritic(nn.Module):
    """Scores each sample by its mean pixel value (for batch-mean checks)."""

    def forward(self, x):
        return x.flatten(1).mean(dim=1)


class _LinearFunctionalCritic(nn.Module):
    """Exact unit-slope linear functional: gradient norm is 1 everywhere."""

    def __init__(self, shape):
        super().__init__()
        n = int(np.prod(shape))
        w = torch.full((n,), 1.0 / n**0.5)
        self.register_buffer("w", w)

    def forward(self, x):
        return x.flatten(1) @ self.w


class TestCriticLoss:
    def test_constant_critic_zero(self):
        crit = _ConstCritic(3.7)
        a = torch.rand(4, 3, 8, 8)
        b = torch.rand(4, 3, 8, 8)
        assert float(L.critic_loss(crit, a, b)) == pytest.approx(0.0)

    def test_arithmetic(self):
        calls = iter([3.0, 1.0])

        class Stub(nn.Module):
            def forward(self, x):
                return torch.full((x.shape[0],), next(calls))

        assert float(L.critic_loss(Stub(), torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 8, 8))) == 2.0

    def test_batch_equals_mean_of_samples(self):
        crit = _PerSampleCritic()
        gen = torch.Generator().manual_seed(5)
        a = torch.rand(6, 3, 8, 8, generator=gen)
        b = torch.rand(6, 3, 8, 8, generator=gen)
        batch = float(L.critic_loss(crit, a, b))
        loop = float(np.mean([
            float(L.critic_loss(crit, a[i : i + 1], b[i : i + 1])) for i in range(6)
        ]))
        assert batch == pytest.approx(loop, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            L.critic_loss(_ConstCritic(0), torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16))


class TestGradientPenalty:
    def test_unit_slope_linear_critic_zero(self):
        crit = _LinearFunctionalCritic((3, 8, 8))
        gen = torch.Generator().manual_seed(0)
        a = torch.rand(4, 3, 8, 8, generator=gen)
        b = torch.rand(4, 3, 8, 8, generator=gen)
        assert float(L.gradient_penalty(crit, a, b, gp_weight=10.0)) == pytest.approx(0.0, abs=1e-10)

    def test_zero_critic_gives_gp_weight(self):
        crit = _ConstCritic(0.0)
        a = torch.rand(4, 3, 8, 8)
        b = torch.rand(4, 3, 8, 8)
        # zero gradient everywhere: penalty = gp_weight * (0 - 1)^2
        assert float(L.gradient_penalty(crit, a, b, gp_weight=7.5)) == pytest.approx(7.5)

    def test_gradient_norm_matches_finite_differences(self):
        torch.manual_seed(6)
        crit = Critic(CriticSpec(patch_size=16, block_filters=(4, 8))).double()
        gen = torch.Generator().manual_seed(7)
        x = torch.rand(1, 3, 16, 16, generator=gen).double()
        x_req = x.clone().requires_grad_(True)
        score = crit(x_req)
        grads = torch.autograd.grad(score.sum(), x_req)[0]
        autograd_norm = float(grads.flatten().norm())
        h = 1e-6
        sq = 0.0
        flat = x.flatten()
        for i in range(flat.numel()):
            plus = flat.clone(); plus[i] += h
            minus = flat.clone(); minus[i] -= h
            fd = (float(crit(plus.view(1, 3, 16, 16))) - float(crit(minus.view(1, 3, 16, 16)))) / (2 * h)
            sq += fd * fd
        assert abs(sq**0.5 - autograd_norm) <= 1e-2 * autograd_norm

    def test_interpolate_norm_diagnostic(self):
        crit = _LinearFunctionalCritic((3, 8, 8))
        a = torch.rand(4, 3, 8, 8)
        b = torch.rand(4, 3, 8, 8)
        assert L.interpolate_gradient_norm(crit, a, b) == pytest.approx(1.0, abs=1e-6)


class TestLevelWeights:
    def test_peak_zero_five_levels(self):
        got = L.gaussian_level_weights(0, 1.0, 5)
        raw = np.exp(-np.arange(5.0) ** 2 / 2.0)
        expected = raw / raw.sum()
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(
            got, [0.5703, 0.3459, 0.0772, 0.00634, 0.000192], rtol=2e-2)

    def test_flat_limit(self):
        got = L.gaussian_level_weights(2, 1e6, 5)
        np.testing.assert_allclose(got, 0.2, atol=1e-6)

    def test_sum_to_one(self):
        for peak in range(5):
            assert L.gaussian_level_weights(peak, 1.0, 5).sum() == pytest.approx(1.0)

    def test_bad_peak_rejected(self):
        with pytest.raises(ValidationError):
            L.gaussian_level_weights(5, 1.0, 5)


def _tensor_of(img: ImagePatch) -> torch.Tensor:
    return torch.from_numpy(img.data.transpose(2, 0, 1).copy()).unsqueeze(0)


class TestLaplacianLoss:
    def test_zero_on_equal(self):
        x = _tensor_of(random_patch(32, seed=0))
        w = L.gaussian_level_weights(0, 1.0, 4)
        assert float(L.laplacian_loss(x, x.clone(), w)) == 0.0

    def test_matches_numpy_pyramid_oracle(self):
        a_img = random_patch(64, seed=1)
        b_img = random_patch(64, seed=2)
        w = L.gaussian_level_weights(1, 1.0, 4)
        got = float(L.laplacian_loss(_tensor_of(a_img), _tensor_of(b_img), w))
        pa = build_laplacian_pyramid(a_img, 4)
        pb = build_laplacian_pyramid(b_img, 4)
        expected = 0.0
        levels_a = list(pa.levels) + [pa.residual]
        levels_b = list(pb.levels) + [pb.residual]
        for wi, la, lb in zip(w, levels_a, levels_b):
            expected += wi * float(((la - lb) ** 2).mean())
        assert abs(got - expected) < 1e-9

    def test_residual_only_difference(self):
        # shift an image by a constant: every band is unchanged, only the
        # residual moves, so the loss is exactly w_last * delta^2
        a_img = random_patch(64, seed=3)
        shifted = ImagePatch(np.clip(a_img.data * 0.5 + 0.1, 0, 1))
        base = ImagePatch(a_img.data * 0.5)
        w = L.gaussian_level_weights(0, 1.0, 4)
        got = float(L.laplacian_loss(_tensor_of(base), _tensor_of(shifted), w))
        assert got == pytest.approx(w[-1] * 0.1**2, rel=1e-9)

    def test_dimension_mismatch(self):
        w = L.gaussian_level_weights(0, 1.0, 3)
        with pytest.raises(ValidationError):
            L.laplacian_loss(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 16, 16), w)


class TestGeneratorLoss:
    def test_all_variants_zero_on_identical(self, net):
        x = _tensor_of(random_patch(64, seed=4)).float()
        for variant in L.GENERATOR_VARIANTS:
            total, recon = L.generator_loss(
                variant, x, x.clone(), critic_score=torch.tensor(0.0), net=net)
            assert float(total) == pytest.approx(0.0, abs=1e-9)
            assert float(recon) == pytest.approx(0.0, abs=1e-9)

    def test_pure_l2_weighting(self):
        gen = torch.Generator().manual_seed(8)
        a = torch.rand(1, 3, 16, 16, generator=gen)
        b = torch.rand(1, 3, 16, 16, generator=gen)
        total, recon = L.generator_loss("l2", a, b, critic_score=torch.tensor(0.0))
        expected = 2000.0 * float(((a - b) ** 2).mean())
        assert float(total) == pytest.approx(expected, rel=1e-6)

    def test_lpips_identical_leaves_adv_term(self, net):
        x = _tensor_of(random_patch(64, seed=5)).float()
        total, recon = L.generator_loss("lpips", x, x.clone(), critic_score=torch.tensor(2.5), net=net)
        assert float(recon) == pytest.approx(0.0, abs=1e-9)
        assert float(total) == pytest.approx(-2.5, abs=1e-6)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValidationError):
            L.generator_loss("huber", torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), 0.0)

    def test_all_variants_finite_on_random(self, net):
        gen = torch.Generator().manual_seed(9)
        a = torch.rand(1, 3, 64, 64, generator=gen)
        b = torch.rand(1, 3, 64, 64, generator=gen)
        for variant in L.GENERATOR_VARIANTS:
            total, _ = L.generator_loss(variant, a, b, critic_score=torch.tensor(0.3), net=net)
            assert torch.isfinite(total)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory, net):
    from fovrecon.datasets import EXPERT_THRESHOLDS, build_critic_dataset, build_generator_dataset
    from fovrecon.demo import make_demo_images
    from fovrecon.synthesis import SynthesisConfig

    root = tmp_path_factory.mktemp("tiny_gan")
    make_demo_images(root / "img", n=3, size=96, seed=1)
    gm = build_generator_dataset(root / "img", root / "gen", n_patches=6, patch=64, seed=0)
    cm = build_critic_dataset(
        root / "img", root / "crit", EXPERT_THRESHOLDS, n_patches=3, patch=64, seed=0,
        synthesis_cfg=SynthesisConfig(strategy="B", max_iters=5, seed=0), net=net,
    )
    return root, gm, cm


def _smoke_cfg(**kw):
    base = dict(loss_variant="l2_ours", n_critic=1, batch_size=4, lr=1e-4,
                max_generator_steps=12, seed=3, plateau_window=10**6)
    base.update(kw)
    return gan.TrainConfig(**base)


class TestTrainLoop:
    def test_history_and_checkpoint(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        ckpt = gan.train(gm, cm, _smoke_cfg(), tmp_path / "run", region="near")
        assert ckpt.step == 12
        assert len(ckpt.loss_history) == 12
        assert (tmp_path / "run" / "checkpoint_latest.pt").is_file()
        assert (tmp_path / "run" / "loss_history.csv").is_file()

    def test_seed_reproducibility(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        a = gan.train(gm, cm, _smoke_cfg(), tmp_path / "a", region="near")
        b = gan.train(gm, cm, _smoke_cfg(), tmp_path / "b", region="near")
        assert a.loss_history == b.loss_history

    def test_checkpoint_resume_bitwise(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        full = gan.train(gm, cm, _smoke_cfg(max_generator_steps=10), tmp_path / "full", region="near")
        part = gan.train(gm, cm, _smoke_cfg(max_generator_steps=6), tmp_path / "part", region="near")
        resumed = gan.train(gm, cm, _smoke_cfg(max_generator_steps=10), tmp_path / "part2",
                            region="near", resume=part)
        assert resumed.loss_history == full.loss_history
        ga = full.generator_state
        gb = resumed.generator_state
        assert all(torch.equal(ga[k], gb[k]) for k in ga)

    def test_checkpoint_save_load_round_trip(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        ckpt = gan.train(gm, cm, _smoke_cfg(max_generator_steps=4), tmp_path / "r", region="near")
        loaded = gan.load_checkpoint(tmp_path / "r" / "checkpoint_latest.pt")
        assert loaded.step == ckpt.step
        assert loaded.loss_history == ckpt.loss_history
        for k, v in ckpt.generator_state.items():
            assert torch.equal(loaded.generator_state[k], v)

    def test_ours_mode_consumes_only_distorted(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        cfg = _smoke_cfg(pristine_mix=0.0, max_generator_steps=6)
        ckpt = gan.train(gm, cm, cfg, tmp_path / "ours", region="near")
        assert ckpt.consumed_kinds == ("distorted",)

    def test_standard_mode_consumes_naturals(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        cfg = _smoke_cfg(loss_variant="l2", max_generator_steps=6)
        ckpt = gan.train(gm, gm, cfg, tmp_path / "std", region="near")
        assert ckpt.consumed_kinds == ("natural",)

    def test_divergence_aborts_with_checkpoint(self, tiny_dataset, tmp_path, monkeypatch):
        root, gm, cm = tiny_dataset

        def poisoned(critic, x_target, x_fake):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(gan.train.__globals__["L"], "critic_loss", poisoned)
        with pytest.raises(ConvergenceError) as info:
            gan.train(gm, cm, _smoke_cfg(), tmp_path / "div", region="near")
        assert info.value.best is not None
        assert (tmp_path / "div" / "checkpoint_diverged.pt").is_file()

    def test_empty_selection_rejected(self, tiny_dataset, tmp_path):
        root, gm, cm = tiny_dataset
        cfg = _smoke_cfg()
        with pytest.raises(ValidationError):
            gan.train(gm, gm, cfg, tmp_path / "bad", region="near")  # gm has no distorted


class TestReconstruct:
    def test_untrained_generator_valid_output(self):
        gen = gan.build_generator()
        ckpt = _wrap_checkpoint(gen)
        img = random_patch(64, seed=6)
        out = gan.reconstruct(ckpt, img)
        assert (out.height, out.width) == (64, 64)
        assert out.range_tag == "unit"

    def test_deterministic(self):
        gen = gan.build_generator()
        ckpt = _wrap_checkpoint(gen)
        img = random_patch(64, seed=7)
        a = gan.reconstruct(ckpt, img)
        b = gan.reconstruct(ckpt, img)
        np.testing.assert_array_equal(a.data, b.data)

    def test_non_multiple_size_padded(self):
        gen = gan.build_generator()
        ckpt = _wrap_checkpoint(gen)
        img = random_patch(48, seed=8)
        out = gan.reconstruct(ckpt, img)
        assert (out.height, out.width) == (48, 48)


def _wrap_checkpoint(gen) -> gan.Checkpoint:
    critic = gan.build_critic()
    return gan.Checkpoint(
        generator_spec=gen.spec, critic_spec=critic.spec,
        generator_state=gen.state_dict(), critic_state=critic.state_dict(),
        gen_opt_state={}, critic_opt_state={}, config={}, epoch=0, step=0,
    )

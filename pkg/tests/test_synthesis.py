import numpy as np
import pytest

from fovrecon.demo import brick_texture
from fovrecon.errors import ValidationError
from fovrecon.features import extract_features, gram_loss_value, gram_matrices
from fovrecon.imaging import ImagePatch, gaussian_blur
from fovrecon.manifest import DatasetManifest
from fovrecon.synthesis import (
    SynthesisConfig,
    batch_synthesize,
    checkerboard_energy,
    project_constraint,
    select_guiding_samples,
    synthesize,
)

from conftest import random_patch


class TestGuidingSamples:
    def test_p_zero_empty(self):
        mask = select_guiding_samples(random_patch(32), 0.0, seed=1)
        assert mask.n_samples == 0

    def test_p_hundred_full(self):
        mask = select_guiding_samples(random_patch(32), 100.0, seed=1)
        assert mask.bits.all()

    def test_count_at_9_09_percent(self):
        img = ImagePatch(np.zeros((256, 256, 3)))
        mask = select_guiding_samples(img, 9.09, seed=0)
        assert mask.n_samples == 5957  # round(0.0909 * 65536)

    def test_deterministic(self):
        a = select_guiding_samples(random_patch(32), 10.0, seed=3)
        b = select_guiding_samples(random_patch(32), 10.0, seed=3)
        assert np.array_equal(a.bits, b.bits)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            select_guiding_samples(random_patch(32), 101.0, seed=0)


class TestProjection:
    def test_empty_mask_unchanged(self):
        img, ex = random_patch(32, 1), random_patch(32, 2)
        mask = select_guiding_samples(ex, 0.0, seed=0)
        out = project_constraint(img, ex, mask)
        np.testing.assert_array_equal(out.data, img.data)

    def test_full_mask_gives_exemplar(self):
        img, ex = random_patch(32, 1), random_patch(32, 2)
        mask = select_guiding_samples(ex, 100.0, seed=0)
        out = project_constraint(img, ex, mask)
        np.testing.assert_array_equal(out.data, ex.data)

    def test_idempotent(self):
        img, ex = random_patch(32, 3), random_patch(32, 4)
        mask = select_guiding_samples(ex, 25.0, seed=5)
        once = project_constraint(img, ex, mask)
        twice = project_constraint(once, ex, mask)
        np.testing.assert_array_equal(once.data, twice.data)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            project_constraint(random_patch(32), random_patch(16),
                               select_guiding_samples(random_patch(16), 10, 0))


class TestCheckerboardEnergy:
    def test_constant_zero(self):
        assert checkerboard_energy(np.full((16, 16), 0.5)) == 0.0

    def test_perfect_checkerboard(self):
        ys, xs = np.mgrid[0:16, 0:16]
        board = np.where((xs + ys) % 2 == 0, 1.0, -1.0)
        assert checkerboard_energy(board) == pytest.approx(1.0)

    def test_smooth_ramp_negligible(self):
        ramp = np.linspace(0, 1, 32)[None, :] * np.ones((32, 1))
        assert checkerboard_energy(ramp) < 1e-6


class TestSynthesize:
    def test_strategy_b_constraint_exact(self, net):
        ex = brick_texture(48, seed=4)
        cfg = SynthesisConfig(guiding_percent=9.09, strategy="B", max_iters=40,
                              step_size=0.02, seed=7)
        res = synthesize(ex, cfg, net=net)
        err = np.abs(res.image.data - ex.data)[res.guiding_mask.bits]
        assert err.max() == 0.0

    def test_strategy_a_stage1_exact(self, net):
        ex = brick_texture(48, seed=5)
        cfg = SynthesisConfig(guiding_percent=5.0, strategy="A", max_iters=30,
                              stage2_iters=10, step_size=0.02, seed=8)
        res = synthesize(ex, cfg, net=net)
        err = np.abs(res.stage1.data - ex.data)[res.guiding_mask.bits]
        assert err.max() == 0.0

    def test_p100_strategy_b_returns_exemplar(self, net):
        ex = brick_texture(48, seed=6)
        cfg = SynthesisConfig(guiding_percent=100.0, strategy="B", max_iters=5, seed=0)
        res = synthesize(ex, cfg, net=net)
        np.testing.assert_array_equal(res.image.data, ex.data)

    def test_p100_strategy_a_improves_on_blur(self, net):
        ex = brick_texture(48, seed=7)
        cfg = SynthesisConfig(guiding_percent=100.0, strategy="A", max_iters=60,
                              stage2_iters=60, step_size=0.02, seed=0)
        res = synthesize(ex, cfg, net=net)
        np.testing.assert_array_equal(res.stage1.data, ex.data)
        target = gram_matrices(extract_features(ex, cfg.layer_set, net))
        blurred = gaussian_blur(ex, cfg.blur_sigma)
        loss_blur = gram_loss_value(
            gram_matrices(extract_features(blurred, cfg.layer_set, net)), target)
        loss_out = gram_loss_value(
            gram_matrices(extract_features(res.image, cfg.layer_set, net)), target)
        assert loss_out < loss_blur

    def test_deterministic(self, net):
        ex = brick_texture(48, seed=8)
        cfg = SynthesisConfig(guiding_percent=5.0, strategy="B", max_iters=25,
                              step_size=0.02, seed=11)
        a = synthesize(ex, cfg, net=net)
        b = synthesize(ex, cfg, net=net)
        np.testing.assert_array_equal(a.image.data, b.image.data)
        assert a.loss_history == b.loss_history

    def test_loss_decreases(self, net):
        ex = brick_texture(48, seed=9)
        cfg = SynthesisConfig(guiding_percent=0.0, strategy="B", max_iters=120,
                              step_size=0.02, seed=2)
        res = synthesize(ex, cfg, net=net)
        assert res.final_loss < 0.5 * res.initial_loss

    def test_monotone_trend_in_p(self, net):
        """More guidance pulls the statistics closer: median final Gram loss
        is non-increasing in the guiding percentage."""
        medians = []
        for p in (0.0, 5.0, 10.0):
            finals = []
            for seed in range(3):
                ex = brick_texture(48, seed=20 + seed)
                cfg = SynthesisConfig(guiding_percent=p, strategy="B",
                                      max_iters=100, step_size=0.02, seed=seed)
                finals.append(synthesize(ex, cfg, net=net).final_loss)
            medians.append(float(np.median(finals)))
        assert medians[0] >= medians[1] >= medians[2]

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SynthesisConfig(guiding_percent=-1)
        with pytest.raises(ValidationError):
            SynthesisConfig(strategy="C")


class TestBatchSynthesize:
    def _exemplars(self, tmp_path, n=3):
        from fovrecon.imaging import save_png

        paths = []
        for i in range(n):
            p = tmp_path / f"ex_{i}.png"
            save_png(brick_texture(32, seed=i), p)
            paths.append(p)
        return paths

    def test_counts_and_percents(self, tmp_path, net):
        paths = self._exemplars(tmp_path)
        manifest = DatasetManifest(tmp_path / "manifest.jsonl")
        cfg = SynthesisConfig(strategy="B", max_iters=4, step_size=0.02, seed=0)
        entries, n_failed = batch_synthesize(
            paths, cfg, tmp_path / "out", {"near": 9.09, "far": 6.89},
            manifest=manifest, net=net,
        )
        assert n_failed == 0
        assert len(entries) == 6  # 3 exemplars x 2 regions
        assert {e.rate_or_percent for e in entries} == {9.09, 6.89}
        assert all((tmp_path / e.patch_path).is_file() for e in entries)

    def test_rerun_skips_existing(self, tmp_path, net):
        paths = self._exemplars(tmp_path, n=2)
        cfg = SynthesisConfig(strategy="B", max_iters=4, step_size=0.02, seed=0)
        manifest = DatasetManifest(tmp_path / "manifest.jsonl")
        first, _ = batch_synthesize(paths, cfg, tmp_path / "out", {"near": 5.0},
                                    manifest=manifest, net=net)
        reloaded = DatasetManifest(tmp_path / "manifest.jsonl")
        second, _ = batch_synthesize(paths, cfg, tmp_path / "out", {"near": 5.0},
                                     manifest=reloaded, net=net)
        assert len(first) == 2 and len(second) == 0
        assert len(reloaded) == 2

    def test_unreadable_exemplar_counted(self, tmp_path, net):
        paths = self._exemplars(tmp_path, n=1)
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not a png")
        cfg = SynthesisConfig(strategy="B", max_iters=4, seed=0)
        entries, n_failed = batch_synthesize(
            paths + [bad], cfg, tmp_path / "out", {"near": 5.0}, net=net)
        assert n_failed == 1
        assert len(entries) == 1

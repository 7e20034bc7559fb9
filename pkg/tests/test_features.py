import numpy as np
import pytest
import torch
import torch.nn.functional as TF

from fovrecon import features as F
from fovrecon.errors import ValidationError
from fovrecon.imaging import ImagePatch

from conftest import random_patch


class TestBackbone:
    def test_determinism_bitwise(self, net):
        img = random_patch(32, seed=0)
        a = F.extract_features(img, ("conv1_1", "conv3_1"), net)
        b = F.extract_features(img, ("conv1_1", "conv3_1"), net)
        for name in a.layer_set:
            assert torch.equal(a.maps[name], b.maps[name])

    def test_unknown_layer_rejected(self, net):
        with pytest.raises(ValidationError):
            F.extract_features(random_patch(32), ("conv9_9",), net)

    def test_channel_counts_match_architecture(self, net):
        img = random_patch(32, seed=1)
        stack = F.extract_features(img, F.STYLE_LAYERS, net)
        expected = {"conv1_1": 64, "conv2_1": 128, "conv3_1": 256,
                    "conv4_1": 512, "conv5_1": 512}
        for name, n in expected.items():
            assert stack.channels(name) == n

    def test_spatial_size_after_second_pooling(self, net):
        img = ImagePatch(np.zeros((256, 256, 3)))
        stack = F.extract_features(img, ("pool2",), net)
        assert stack.maps["pool2"].shape[1:] == (64, 64)

    def test_zero_image_matches_manual_forward(self, net):
        """Independent oracle: chain the raw conv/relu/pool functionals with
        the same weights and compare activations for the zero image."""
        img = ImagePatch(np.zeros((32, 32, 3)))
        stack = F.extract_features(img, ("conv1_1", "relu1_2", "pool1", "conv2_1"), net)

        x = torch.zeros(1, 3, 32, 32)
        x = (x - net.mean) / net.std
        acts = {}
        x = TF.conv2d(x, net.ops["conv1_1"].weight, net.ops["conv1_1"].bias, padding=1)
        acts["conv1_1"] = x.clone()
        x = TF.relu(x)
        x = TF.conv2d(x, net.ops["conv1_2"].weight, net.ops["conv1_2"].bias, padding=1)
        x = TF.relu(x)
        acts["relu1_2"] = x.clone()
        x = TF.max_pool2d(x, 2)
        acts["pool1"] = x.clone()
        x = TF.conv2d(x, net.ops["conv2_1"].weight, net.ops["conv2_1"].bias, padding=1)
        acts["conv2_1"] = x.clone()
        for name, expected in acts.items():
            assert torch.equal(stack.maps[name], expected[0])

    def test_differentiable_wrt_input(self, net):
        t = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        t.requires_grad_(True)
        stack = F.extract_features(t, ("conv2_1",), net)
        stack.maps["conv2_1"].sum().backward()
        assert t.grad is not None and torch.isfinite(t.grad).all()


class TestGram:
    def test_single_channel_constant(self):
        fmap = torch.full((1, 4, 4), 2.5)
        stack = F.FeatureStack(maps={"conv1_1": fmap}, layer_set=("conv1_1",))
        grams = F.gram_matrices(stack)
        assert grams.grams["conv1_1"].shape == (1, 1)
        assert float(grams.grams["conv1_1"]) == pytest.approx(2.5**2 * 16)

    def test_spatial_shuffle_invariance(self):
        gen = torch.Generator().manual_seed(1)
        fmap = torch.rand(3, 4, 4, generator=gen)
        flat = fmap.reshape(3, -1)
        perm = torch.randperm(16, generator=gen)
        shuffled = flat[:, perm].reshape(3, 4, 4)
        g1 = F.gram_matrices(F.FeatureStack({"l": fmap}, ("l",)))
        g2 = F.gram_matrices(F.FeatureStack({"l": shuffled}, ("l",)))
        assert torch.allclose(g1.grams["l"], g2.grams["l"], atol=1e-5)

    def test_brute_force_oracle(self):
        gen = torch.Generator().manual_seed(2)
        fmap = torch.rand(3, 4, 4, generator=gen).double()
        grams = F.gram_matrices(F.FeatureStack({"l": fmap}, ("l",)))
        flat = fmap.reshape(3, -1).numpy()
        expected = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(16):
                    expected[i, j] += flat[i, k] * flat[j, k]
        np.testing.assert_allclose(grams.grams["l"].numpy(), expected, rtol=1e-12)

    def test_psd_symmetric(self, net):
        stack = F.extract_features(random_patch(32, seed=2), ("conv1_1",), net)
        g = F.gram_matrices(stack).grams["conv1_1"].double().numpy()
        assert np.allclose(g, g.T, atol=1e-6)
        eigvals = np.linalg.eigvalsh(g)
        assert eigvals.min() > -1e-6 * max(eigvals.max(), 1.0)


def _random_gramset(seed, layers=("a", "b"), n=3, m=7):
    gen = torch.Generator().manual_seed(seed)
    grams, dims = {}, {}
    for name in layers:
        f = torch.rand(n, m, generator=gen).double()
        grams[name] = f @ f.T
        dims[name] = (n, m)
    return F.GramSet(grams=grams, dims=dims, layer_set=tuple(layers))


class TestGramLoss:
    def test_zero_on_equal(self):
        a = _random_gramset(0)
        assert float(F.gram_loss(a, a)) == 0.0

    def test_one_by_one_formula(self):
        # Grams differing by d with N = M = 1 and w = 1 give d^2 / 4
        a = F.GramSet({"l": torch.tensor([[2.0]])}, {"l": (1, 1)}, ("l",))
        b = F.GramSet({"l": torch.tensor([[2.0 + 3.0]])}, {"l": (1, 1)}, ("l",))
        assert float(F.gram_loss(a, b)) == pytest.approx(9.0 / 4.0)

    def test_scalar_oracle(self):
        a = _random_gramset(3)
        b = _random_gramset(4)
        got = float(F.gram_loss(a, b))
        expected = 0.0
        for name in a.layer_set:
            n, m = a.dims[name]
            da = a.grams[name].numpy()
            db = b.grams[name].numpy()
            for i in range(n):
                for j in range(n):
                    expected += (da[i, j] - db[i, j]) ** 2 / (4.0 * n**2 * m**2)
        assert abs(got - expected) <= 1e-10 * abs(expected)

    def test_symmetry_and_nonnegativity(self):
        a = _random_gramset(5)
        b = _random_gramset(6)
        assert float(F.gram_loss(a, b)) == pytest.approx(float(F.gram_loss(b, a)))
        assert float(F.gram_loss(a, b)) >= 0

    def test_layer_mismatch_rejected(self):
        a = _random_gramset(1, layers=("a",))
        b = _random_gramset(1, layers=("b",))
        with pytest.raises(ValidationError):
            F.gram_loss(a, b)


class TestGramGradient:
    def test_matches_finite_differences(self):
        # float64 end to end so central differences resolve the gradient
        net = F.Backbone("seeded").double()
        layers = ("conv1_1", "conv2_1")
        gen = torch.Generator().manual_seed(3)
        base = torch.rand(1, 3, 16, 16, generator=gen).double()
        target = F.gram_matrices(F.extract_features(torch.rand(
            1, 3, 16, 16, generator=gen).double(), layers, net))

        def loss_of(t):
            return F.gram_loss(F.gram_matrices(F.extract_features(t, layers, net)), target)

        x = base.clone().requires_grad_(True)
        loss = loss_of(x)
        loss.backward()
        grad = x.grad

        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(10):
            c = int(rng.integers(0, 3))
            i = int(rng.integers(0, 16))
            j = int(rng.integers(0, 16))
            plus = base.clone()
            plus[0, c, i, j] += h
            minus = base.clone()
            minus[0, c, i, j] -= h
            fd = (float(loss_of(plus)) - float(loss_of(minus))) / (2 * h)
            an = float(grad[0, c, i, j])
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


class TestLayerDistances:
    def test_identical_images_zero(self, net):
        img = random_patch(32, seed=7)
        dists = F.layer_distances(img, img, ("relu1_2", "relu2_2"), net)
        for value in dists.values():
            assert float(value) == pytest.approx(0.0, abs=1e-10)

    def test_positive_for_different(self, net):
        a = random_patch(32, seed=8)
        b = random_patch(32, seed=9)
        dists = F.layer_distances(a, b, ("relu1_2",), net)
        assert float(dists["relu1_2"]) > 0

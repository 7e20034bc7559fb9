"""Pretrained 19-layer convolutional backbone, feature extraction, and
Gram-matrix statistics.

The backbone follows the published VGG-19 topology (16 convs in five
blocks, max pooling between blocks). Weights are resolved in this order:

1. an explicit file path (``FOVRECON_VGG19_WEIGHTS`` or the ``weights``
   argument), checksum-verified against the pinned hash prefix;
2. the torch hub checkpoint cache, if the published file is already there;
3. a deterministic seeded He initialization.

The seeded fallback keeps every mathematical property of the pipeline
(Gram statistics, synthesis gradients, metric distances) exercisable and
reproducible on machines without the weight file; ``fovrecon fetch-weights``
downloads the published weights when network access exists.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .imaging import ImagePatch

# Published VGG-19 configuration: conv output channels, 'M' = 2x2 max pool.
_VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]

# First 8 hex chars of the published checkpoint's sha256.
VGG19_SHA256_PREFIX = "dcbb9e9d"
VGG19_URL = "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth"

# Canonical channel statistics used to normalize inputs before the forward.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Classical style layers: the first conv of each block.
STYLE_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
# Feature-distance layers used by the perceptual (LPIPS-style) metric.
PERCEPTUAL_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3")

_DEFAULT_INIT_SEED = 1234


def _layer_names():
    names = []
    block, idx = 1, 1
    for item in _VGG19_CFG:
        if item == "M":
            names.append(f"pool{block}")
            block += 1
            idx = 1
        else:
            names.append(f"conv{block}_{idx}")
            names.append(f"relu{block}_{idx}")
            idx += 1
    return tuple(names)


LAYER_NAMES = _layer_names()
CONV_LAYERS = tuple(n for n in LAYER_NAMES if n.startswith("conv"))
POOL_LAYERS = tuple(n for n in LAYER_NAMES if n.startswith("pool"))
# All convolution and pooling layers; the calibrated metric reweights these.
CALIBRATION_LAYERS = tuple(n for n in LAYER_NAMES if not n.startswith("relu"))


class Backbone(nn.Module):
    """VGG-19 feature extractor with named layers and frozen weights."""

    def __init__(self, weights: str | Path = "auto", init_seed: int = _DEFAULT_INIT_SEED):
        super().__init__()
        ops = nn.ModuleDict()
        in_ch = 3
        for name in LAYER_NAMES:
            if name.startswith("pool"):
                ops[name] = nn.MaxPool2d(2, 2)
            elif name.startswith("conv"):
                out_ch = _conv_channels()[name]
                ops[name] = nn.Conv2d(in_ch, out_ch, 3, padding=1)
                in_ch = out_ch
            else:
                ops[name] = nn.ReLU(inplace=False)
        self.ops = ops
        self.weight_source = self._load_weights(weights, init_seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def _load_weights(self, weights, init_seed) -> str:
        path = None
        if weights not in ("auto", "seeded"):
            path = Path(weights)
            if not path.is_file():
                raise ValidationError(f"backbone weight file not found: {path}")
        elif weights == "auto":
            env = os.environ.get("FOVRECON_VGG19_WEIGHTS")
            if env:
                path = Path(env)
                if not path.is_file():
                    raise ValidationError(f"FOVRECON_VGG19_WEIGHTS points at missing file: {path}")
            else:
                cached = default_weight_path()
                if cached.is_file():
                    path = cached
        if path is not None:
            _verify_checksum(path)
            state = torch.load(path, map_location="cpu", weights_only=True)
            self._load_published_state(state)
            return str(path)
        self._seeded_init(init_seed)
        return f"seeded:{init_seed}"

    def _load_published_state(self, state) -> None:
        convs = [n for n in LAYER_NAMES if n.startswith("conv")]
        seq_idx = 0
        for name in convs:
            while f"features.{seq_idx}.weight" not in state:
                seq_idx += 1
            conv = self.ops[name]
            conv.weight.data.copy_(state[f"features.{seq_idx}.weight"])
            conv.bias.data.copy_(state[f"features.{seq_idx}.bias"])
            seq_idx += 1

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name in LAYER_NAMES:
            if not name.startswith("conv"):
                continue
            conv = self.ops[name]
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            conv.weight.data.normal_(0.0, std, generator=gen)
            conv.bias.data.zero_()

    def normalize(self, batch: torch.Tensor) -> torch.Tensor:
        return (batch - self.mean) / self.std

    def forward(self, batch: torch.Tensor, layer_set) -> dict:
        """Run up to the deepest requested layer; returns name -> activation."""
        unknown = [l for l in layer_set if l not in LAYER_NAMES]
        if unknown:
            raise ValidationError(f"unknown backbone layer(s): {unknown}")
        wanted = set(layer_set)
        deepest = max(LAYER_NAMES.index(l) for l in layer_set)
        out = {}
        x = self.normalize(batch)
        for i, name in enumerate(LAYER_NAMES[: deepest + 1]):
            x = self.ops[name](x)
            if name in wanted:
                out[name] = x
        return out


def _conv_channels() -> dict:
    chans = {}
    block, idx = 1, 1
    for item in _VGG19_CFG:
        if item == "M":
            block += 1
            idx = 1
        else:
            chans[f"conv{block}_{idx}"] = item
            idx += 1
    return chans


CONV_CHANNELS = _conv_channels()


def default_weight_path() -> Path:
    hub = Path(os.environ.get("TORCH_HOME", Path.home() / ".cache" / "torch"))
    return hub / "hub" / "checkpoints" / "vgg19-dcbb9e9d.pth"


def _verify_checksum(path: Path) -> None:
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if not digest.startswith(VGG19_SHA256_PREFIX):
        raise ValidationError(
            f"{path} sha256 {digest[:8]} does not match pinned prefix {VGG19_SHA256_PREFIX}"
        )


_backbone_cache: dict = {}


def backbone(weights: str | Path = "auto", init_seed: int = _DEFAULT_INIT_SEED) -> Backbone:
    """Shared immutable backbone instance (one weight load per process)."""
    key = (str(weights), init_seed)
    if key not in _backbone_cache:
        _backbone_cache[key] = Backbone(weights, init_seed)
    return _backbone_cache[key]


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer activation maps for one image: name -> (channels, H, W)."""

    maps: dict
    layer_set: tuple

    def channels(self, layer: str) -> int:
        return self.maps[layer].shape[0]

    def positions(self, layer: str) -> int:
        return self.maps[layer].shape[1] * self.maps[layer].shape[2]


@dataclass(frozen=True)
class GramSet:
    """Per-layer Gram matrices G_ij = sum_k F_ik F_jk with their dims."""

    grams: dict        # layer -> (N, N) tensor
    dims: dict         # layer -> (n_channels, n_positions)
    layer_set: tuple


def to_tensor(img) -> torch.Tensor:
    """ImagePatch or HxWx3 array -> float32 (1, 3, H, W) tensor."""
    if isinstance(img, ImagePatch):
        arr = img.to_unit().data
    else:
        arr = np.asarray(img, dtype=np.float64)
    t = torch.from_numpy(arr.transpose(2, 0, 1).copy())
    return t.to(torch.get_default_dtype()).unsqueeze(0)


def extract_features(img, layer_set=STYLE_LAYERS, net: Backbone | None = None) -> FeatureStack:
    """Deterministic activations of ``img`` at the requested layers.

    ``img`` may be an ImagePatch, an HxWx3 array in [0, 1], or a (1,3,H,W)
    tensor (kept attached to the autograd graph for synthesis gradients).
    """
    net = net or backbone()
    if isinstance(img, torch.Tensor):
        batch = img if img.ndim == 4 else img.unsqueeze(0)
    else:
        batch = to_tensor(img)
    acts = net(batch, tuple(layer_set))
    return FeatureStack(
        maps={k: v[0] for k, v in acts.items()}, layer_set=tuple(layer_set)
    )


def gram_matrices(feats: FeatureStack) -> GramSet:
    """Spatially-pooled channel covariance statistics (unnormalized)."""
    grams, dims = {}, {}
    for name in feats.layer_set:
        fmap = feats.maps[name]
        c = fmap.shape[0]
        flat = fmap.reshape(c, -1)
        grams[name] = flat @ flat.T
        dims[name] = (c, flat.shape[1])
    return GramSet(grams=grams, dims=dims, layer_set=feats.layer_set)


def gram_loss(a: GramSet, b: GramSet, layer_weights=None):
    """Sum over layers of w_l * sum_ij (G^a - G^b)^2 / (4 N_l^2 M_l^2).

    Zero iff the GramSets are equal; symmetric in its arguments. Returns a
    torch scalar (differentiable when the inputs carry gradients).
    """
    if tuple(a.layer_set) != tuple(b.layer_set):
        raise ValidationError(
            f"layer sets differ: {a.layer_set} vs {b.layer_set}"
        )
    if layer_weights is None:
        layer_weights = {name: 1.0 for name in a.layer_set}
    total = None
    for name in a.layer_set:
        n_a, m_a = a.dims[name]
        n_b, m_b = b.dims[name]
        if n_a != n_b or m_a != m_b:
            raise ValidationError(f"layer {name} dims differ: {a.dims[name]} vs {b.dims[name]}")
        diff = a.grams[name] - b.grams[name]
        term = layer_weights[name] * (diff**2).sum() / (4.0 * n_a**2 * m_a**2)
        total = term if total is None else total + term
    return total


def gram_loss_value(a: GramSet, b: GramSet, layer_weights=None) -> float:
    return float(gram_loss(a, b, layer_weights).detach())


def layer_distances(ref, test, layer_set=PERCEPTUAL_LAYERS, net: Backbone | None = None) -> dict:
    """Per-layer mean squared distance between unit-normalized features.

    Feature vectors are normalized to unit length across channels at every
    spatial position (the perceptual-metric convention), so each layer's
    distance is scale-free. Returns name -> torch scalar.
    """
    net = net or backbone()
    fa = extract_features(ref, layer_set, net)
    fb = extract_features(test, layer_set, net)
    out = {}
    for name in layer_set:
        da = _unit_normalize(fa.maps[name])
        db = _unit_normalize(fb.maps[name])
        out[name] = ((da - db) ** 2).sum(dim=0).mean()
    return out


def _unit_normalize(fmap: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((fmap**2).sum(dim=0, keepdim=True) + eps)
    return fmap / norm

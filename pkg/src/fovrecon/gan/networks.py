"""UNet-style generator and PatchGAN critic.

The generator is an encoder-decoder with skip connections: five residual
downsampling blocks (two 5x5 convs per block, a 1x1 conv on the main branch
to adjust dimensionality, average pooling), a bilinear upsampling layer
joining encoder and decoder, and a decoder mirroring the first four encoder
blocks with bilinear upsampling. LeakyReLU (slope 0.2) everywhere except
the final tanh. The critic applies the same downsampling stack to 64x64
patches and maps each to a scalar through a fully connected head; larger
inputs are tiled and the patch scores averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as TF

from ..errors import ValidationError


@dataclass(frozen=True)
class GeneratorSpec:
    encoder_filters: tuple = (16, 32, 64, 128, 128)
    conv_kernel: int = 5
    skip_kernel: int = 1
    leaky_slope: float = 0.2
    in_channels: int = 3
    out_channels: int = 3

    @property
    def decoder_filters(self) -> tuple:
        # mirror of the first four encoder blocks
        return tuple(reversed(self.encoder_filters[:4]))


@dataclass(frozen=True)
class CriticSpec:
    patch_size: int = 64
    block_filters: tuple = (16, 32, 64, 128, 128)
    conv_kernel: int = 5
    skip_kernel: int = 1
    leaky_slope: float = 0.2
    in_channels: int = 3


class ResidualBlock(nn.Module):
    """Two full convolutions plus a 1x1 main branch, LeakyReLU activations."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, skip_kernel: int, slope: float):
        super().__init__()
        pad = kernel // 2
        self.conv_a = nn.Conv2d(in_ch, out_ch, kernel, padding=pad)
        self.conv_b = nn.Conv2d(out_ch, out_ch, kernel, padding=pad)
        self.skip = nn.Conv2d(in_ch, out_ch, skip_kernel, padding=skip_kernel // 2)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        y = self.conv_b(self.act(self.conv_a(x)))
        return self.act(y + self.skip(x))


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        filters = spec.encoder_filters
        enc = []
        in_ch = spec.in_channels
        for out_ch in filters:
            enc.append(ResidualBlock(in_ch, out_ch, spec.conv_kernel, spec.skip_kernel, spec.leaky_slope))
            in_ch = out_ch
        self.encoder = nn.ModuleList(enc)
        self.pool = nn.AvgPool2d(2)

        dec = []
        prev_ch = filters[-1]
        # each decoder block consumes the upsampled features concatenated
        # with the matching encoder skip
        skip_chs = list(reversed(filters[:-1]))  # skips s4..s1 pair with dec blocks
        skip_chs = [filters[-1]] + skip_chs[:-1]  # s5 pairs with the bridge output
        for out_ch, skip_ch in zip(spec.decoder_filters, skip_chs):
            dec.append(ResidualBlock(prev_ch + skip_ch, out_ch, spec.conv_kernel,
                                     spec.skip_kernel, spec.leaky_slope))
            prev_ch = out_ch
        self.decoder = nn.ModuleList(dec)
        pad = spec.conv_kernel // 2
        self.head = nn.Conv2d(prev_ch + filters[0], spec.out_channels, spec.conv_kernel, padding=pad)

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.spec.encoder_filters)

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ValidationError(f"generator expects {self.spec.in_channels} input channels")
        factor = self.downsample_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValidationError(f"input spatial size must be a multiple of {factor}")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = _bilinear2x(x)  # the upsampling layer joining encoder and decoder
        for block, skip in zip(self.decoder, reversed(skips[1:])):
            x = block(torch.cat([x, skip], dim=1))
            x = _bilinear2x(x)
        x = self.head(torch.cat([x, skips[0]], dim=1))
        return torch.tanh(x)


def _bilinear2x(x):
    return TF.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class Critic(nn.Module):
    def __init__(self, spec: CriticSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_ch = spec.in_channels
        for out_ch in spec.block_filters:
            blocks.append(ResidualBlock(in_ch, out_ch, spec.conv_kernel, spec.skip_kernel, spec.leaky_slope))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AvgPool2d(2)
        side = spec.patch_size // 2 ** len(spec.block_filters)
        if side < 1:
            raise ValidationError("patch size too small for the block stack")
        self.fc = nn.Linear(spec.block_filters[-1] * side * side, 1)

    def score_patches(self, patches):
        x = patches
        for block in self.blocks:
            x = self.pool(block(x))
        return self.fc(x.flatten(1)).squeeze(1)

    def forward(self, x):
        """One scalar per sample: the mean of its 64x64 patch scores."""
        p = self.spec.patch_size
        b, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ValidationError(f"critic expects {self.spec.in_channels} input channels")
        if h % p or w % p:
            raise ValidationError(f"critic input must tile into {p}x{p} patches")
        if h == p and w == p:
            return self.score_patches(x)
        tiles = x.unfold(2, p, p).unfold(3, p, p)            # b,c,th,tw,p,p
        tiles = tiles.permute(0, 2, 3, 1, 4, 5).reshape(-1, c, p, p)
        scores = self.score_patches(tiles).reshape(b, -1)
        return scores.mean(dim=1)


def build_generator(spec: GeneratorSpec | None = None) -> Generator:
    """Construct the generator and shape-check a forward pass."""
    spec = spec or GeneratorSpec()
    net = Generator(spec)
    factor = net.downsample_factor
    with torch.no_grad():
        probe = torch.zeros(1, spec.in_channels, factor * 2, factor * 2)
        out = net(probe)
    if out.shape != (1, spec.out_channels, factor * 2, factor * 2):
        raise ValidationError(f"generator output shape {tuple(out.shape)} inconsistent with spec")
    return net


def build_critic(spec: CriticSpec | None = None) -> Critic:
    """Construct the critic and shape-check a forward pass."""
    spec = spec or CriticSpec()
    net = Critic(spec)
    with torch.no_grad():
        out = net(torch.zeros(2, spec.in_channels, spec.patch_size, spec.patch_size))
    if out.shape != (2,):
        raise ValidationError("critic must produce one scalar per sample")
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())

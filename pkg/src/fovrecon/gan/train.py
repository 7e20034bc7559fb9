"""WGAN-GP training loop and checkpointing.

One process owns the model state; all randomness flows through two seeded
sources (a NumPy generator for batch sampling, a torch generator for the
gradient-penalty interpolates) whose states are checkpointed, so a reload
continues bitwise-identically. All tensors are unit-range RGB; the
generator's signed tanh output is converted at its boundary.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import features as F
from ..errors import ConvergenceError, ValidationError
from ..imaging import ImagePatch, load_png
from . import losses as L
from .networks import Critic, CriticSpec, Generator, GeneratorSpec

LAPL_PEAK_LEVEL = {"H": 0, "M": 3}


@dataclass(frozen=True)
class TrainConfig:
    loss_variant: str = "l2_ours"
    lr: float = 2e-5
    adam_betas: tuple = (0.5, 0.999)
    adam_eps: float = 1e-8
    w_l2: float = 2000.0
    w_lpips: float = 100.0
    w_lapl: float = 100.0
    w_adv: float = 1.0
    gp_weight: float = 10.0
    n_critic: int = 5
    batch_size: int = 16
    max_epochs: int = 30
    max_generator_steps: int | None = None
    seed: int = 0
    plateau_window: int = 200
    plateau_rel_tol: float = 1e-3
    pristine_mix: float = 0.5      # fraction of pristine patches in the distorted manifold
    lapl_peak: str = "H"
    pyramid_levels: int = 5
    checkpoint_every_epochs: int = 1
    snapshot_every: int = 25       # rolling finite-state snapshot cadence (steps)

    def __post_init__(self):
        if self.loss_variant not in L.GENERATOR_VARIANTS:
            raise ValidationError(f"unknown loss variant {self.loss_variant!r}")
        if self.lapl_peak not in LAPL_PEAK_LEVEL:
            raise ValidationError("lapl_peak must be 'H' or 'M'")

    @property
    def loss_weights(self) -> dict:
        return {"l2": self.w_l2, "lpips": self.w_lpips, "lapl": self.w_lapl, "adv": self.w_adv}

    @property
    def uses_distorted_manifold(self) -> bool:
        return self.loss_variant.endswith("_ours")


@dataclass
class Checkpoint:
    generator_spec: GeneratorSpec
    critic_spec: CriticSpec
    generator_state: dict
    critic_state: dict
    gen_opt_state: dict
    critic_opt_state: dict
    config: dict
    epoch: int
    step: int
    loss_history: list = field(default_factory=list)
    numpy_rng_state: dict | None = None
    torch_gen_state: torch.Tensor | None = None
    diverged: bool = False
    consumed_kinds: tuple = ()

    def save(self, path) -> None:
        """Atomic write: temp file in the same directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        for name, state in (("generator", self.generator_state), ("critic", self.critic_state)):
            for key, value in state.items():
                if not torch.isfinite(value).all():
                    raise ConvergenceError(f"non-finite {name} weights at checkpoint ({key})")
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.__dict__, tmp)
        os.replace(tmp, path)

    def build_generator(self) -> Generator:
        net = Generator(self.generator_spec)
        net.load_state_dict(self.generator_state)
        net.eval()
        return net

    def build_critic(self) -> Critic:
        net = Critic(self.critic_spec)
        net.load_state_dict(self.critic_state)
        return net


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(**payload)


def _load_patch_tensor(path) -> torch.Tensor:
    img = load_png(path)
    return torch.from_numpy(img.data.transpose(2, 0, 1).copy()).float()


class _Pool:
    """In-memory tensor pool over manifest entries (desk-scale datasets)."""

    def __init__(self, manifest, entries):
        if not entries:
            raise ValidationError("empty manifest selection")
        self.entries = list(entries)
        self.tensors = torch.stack(
            [_load_patch_tensor(manifest.resolve(e)) for e in self.entries]
        )
        self.consumed_kinds: set = set()

    def sample(self, rng: np.random.Generator, count: int) -> torch.Tensor:
        idx = rng.integers(0, len(self.entries), size=count)
        for i in idx:
            self.consumed_kinds.add(self.entries[int(i)].kind)
        return self.tensors[torch.from_numpy(idx)]


def _paired_pools(gen_manifest, region):
    inputs = gen_manifest.filter(kind="densified_input")
    if region:
        inputs = [e for e in inputs if e.region == region]
    naturals = {(e.source_image, e.crop_offset): e for e in gen_manifest.filter(kind="natural")}
    pairs = []
    for e in inputs:
        partner = naturals.get((e.source_image, e.crop_offset))
        if partner is None:
            raise ValidationError(f"densified_input without ground truth: {e.patch_path}")
        pairs.append((e, partner))
    if not pairs:
        raise ValidationError("no input/target pairs for training")
    z = torch.stack([_load_patch_tensor(gen_manifest.resolve(e)) for e, _ in pairs])
    x = torch.stack([_load_patch_tensor(gen_manifest.resolve(p)) for _, p in pairs])
    return z, x


class _RealSampler:
    """Draws the critic's real batch: natural images in standard mode, the
    distorted manifold (optionally mixed with pristine patches) in ours mode."""

    def __init__(self, critic_manifest, cfg: TrainConfig, region):
        def select(kind):
            entries = critic_manifest.filter(kind=kind)
            if region:
                regional = [e for e in entries if e.region == region]
                entries = regional or entries
            return entries

        if cfg.uses_distorted_manifold:
            distorted = select("distorted")
            if not distorted:
                raise ValidationError("ours-mode training needs distorted manifest entries")
            self.primary = _Pool(critic_manifest, distorted)
            naturals = select("natural")
            self.secondary = (
                _Pool(critic_manifest, naturals) if (naturals and cfg.pristine_mix > 0) else None
            )
            self.mix = cfg.pristine_mix
        else:
            naturals = select("natural")
            if not naturals:
                raise ValidationError("standard-mode training needs natural manifest entries")
            self.primary = _Pool(critic_manifest, naturals)
            self.secondary = None
            self.mix = 0.0

    @property
    def consumed_kinds(self) -> set:
        kinds = set(self.primary.consumed_kinds)
        if self.secondary is not None:
            kinds |= self.secondary.consumed_kinds
        return kinds

    def sample(self, rng: np.random.Generator, count: int) -> torch.Tensor:
        if self.secondary is None:
            return self.primary.sample(rng, count)
        n_pristine = int(rng.binomial(count, self.mix))
        parts = []
        if count - n_pristine:
            parts.append(self.primary.sample(rng, count - n_pristine))
        if n_pristine:
            parts.append(self.secondary.sample(rng, n_pristine))
        return torch.cat(parts)


def train(gen_manifest, critic_manifest, cfg: TrainConfig, out_dir,
          region: str | None = None, resume: Checkpoint | None = None,
          net=None) -> Checkpoint:
    """Alternating WGAN-GP updates: ``n_critic`` critic steps per generator
    step; stops at the step budget or a loss plateau. Checkpoints are written
    each epoch; the loss history goes to ``loss_history.csv``.

    Divergence (non-finite loss) aborts with a ConvergenceError carrying a
    checkpoint of the last finite state.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z_all, x_all = _paired_pools(gen_manifest, region)
    reals = _RealSampler(critic_manifest, cfg, region)
    perceptual_net = net or (F.backbone() if cfg.loss_variant.startswith("lpips") else None)

    if resume is None:
        torch.manual_seed(cfg.seed)
        gen = Generator(GeneratorSpec())
        critic = Critic(CriticSpec())
        g_opt = _adam(gen, cfg)
        d_opt = _adam(critic, cfg)
        rng = np.random.default_rng(cfg.seed)
        tgen = torch.Generator().manual_seed(cfg.seed + 1)
        history: list = []
        start_step, start_epoch = 0, 0
    else:
        gen = resume.build_generator()
        gen.train()
        critic = resume.build_critic()
        g_opt = _adam(gen, cfg)
        g_opt.load_state_dict(resume.gen_opt_state)
        d_opt = _adam(critic, cfg)
        d_opt.load_state_dict(resume.critic_opt_state)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.numpy_rng_state
        tgen = torch.Generator()
        tgen.set_state(resume.torch_gen_state)
        history = list(resume.loss_history)
        start_step, start_epoch = resume.step, resume.epoch

    level_weights = L.gaussian_level_weights(
        LAPL_PEAK_LEVEL[cfg.lapl_peak], 1.0, cfg.pyramid_levels
    )
    steps_per_epoch = max(1, len(z_all) // cfg.batch_size)
    total_steps = cfg.max_generator_steps or steps_per_epoch * cfg.max_epochs

    def snapshot(step, epoch, diverged=False) -> Checkpoint:
        return Checkpoint(
            generator_spec=gen.spec, critic_spec=critic.spec,
            generator_state=copy.deepcopy(gen.state_dict()),
            critic_state=copy.deepcopy(critic.state_dict()),
            gen_opt_state=copy.deepcopy(g_opt.state_dict()),
            critic_opt_state=copy.deepcopy(d_opt.state_dict()),
            config=asdict(cfg), epoch=epoch, step=step,
            loss_history=list(history),
            numpy_rng_state=rng.bit_generator.state,
            torch_gen_state=tgen.get_state(),
            diverged=diverged,
        )

    plateau_hits = 0
    last_finite = snapshot(start_step, start_epoch)
    step = start_step
    while step < total_steps:
        for _ in range(cfg.n_critic):
            z = z_all[torch.from_numpy(rng.integers(0, len(z_all), cfg.batch_size))]
            with torch.no_grad():
                fake = _to_unit(gen(z))
            real = reals.sample(rng, cfg.batch_size)
            adv = L.critic_loss(critic, real, fake)
            gp = L.gradient_penalty(critic, real, fake, cfg.gp_weight, tgen)
            d_loss = -adv + gp
            if not torch.isfinite(d_loss):
                return _abort(snapshot(step, step // steps_per_epoch), last_finite,
                              out_dir, "critic loss diverged")
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

        idx = torch.from_numpy(rng.integers(0, len(z_all), cfg.batch_size))
        fake = _to_unit(gen(z_all[idx]))
        score = critic(fake).mean()
        g_total, recon_term = L.generator_loss(
            cfg.loss_variant, fake, x_all[idx], score,
            weights=cfg.loss_weights, level_weights=level_weights, net=perceptual_net,
        )
        if not torch.isfinite(g_total):
            return _abort(snapshot(step, step // steps_per_epoch), last_finite,
                          out_dir, "generator loss diverged")
        g_opt.zero_grad()
        g_total.backward()
        g_opt.step()

        step += 1
        history.append({
            "step": step,
            "critic_loss": float(adv.detach()),
            "gen_loss": float(g_total.detach()),
            "gp": float(gp.detach()),
            "recon_term": float(recon_term.detach()),
        })
        if step % cfg.snapshot_every == 0:
            last_finite = snapshot(step, step // steps_per_epoch)

        if step % steps_per_epoch == 0:
            epoch = step // steps_per_epoch
            if epoch % cfg.checkpoint_every_epochs == 0:
                snapshot(step, epoch).save(out_dir / "checkpoint_latest.pt")
        if len(history) % cfg.plateau_window == 0 and len(history) >= 2 * cfg.plateau_window:
            plateau_hits = plateau_hits + 1 if _plateaued(history, cfg) else 0
            if plateau_hits >= 2:
                break

    final = snapshot(step, step // steps_per_epoch)
    final.consumed_kinds = tuple(sorted(reals.consumed_kinds))
    final.save(out_dir / "checkpoint_latest.pt")
    _write_history_csv(history, out_dir / "loss_history.csv")
    return final


def _adam(net, cfg: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


def _to_unit(signed: torch.Tensor) -> torch.Tensor:
    return (signed + 1.0) / 2.0


def _plateaued(history, cfg: TrainConfig) -> bool:
    w = cfg.plateau_window
    n = len(history)
    if n < 2 * w or n % w:
        return False
    recent = np.mean([h["gen_loss"] for h in history[-w:]])
    prev = np.mean([h["gen_loss"] for h in history[-2 * w : -w]])
    return abs(prev - recent) / max(abs(prev), 1e-12) < cfg.plateau_rel_tol


def _abort(current: Checkpoint, last_finite: Checkpoint, out_dir: Path, reason: str) -> Checkpoint:
    """Save the freshest finite state: the current weights when they are
    still finite (the loss blew up first), else the rolling snapshot."""
    current.diverged = True
    last_finite.diverged = True
    try:
        current.save(Path(out_dir) / "checkpoint_diverged.pt")
        keep = current
    except ConvergenceError:
        last_finite.save(Path(out_dir) / "checkpoint_diverged.pt")
        keep = last_finite
    raise ConvergenceError(reason, best=keep)


def _write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "critic_loss", "gen_loss", "gp", "recon_term"])
        writer.writeheader()
        writer.writerows(history)


def reconstruct(checkpoint: Checkpoint, densified: ImagePatch) -> ImagePatch:
    """Run the trained generator on a densified (3-channel, unit-range)
    input; the sampling mask is never part of the input. Arbitrary sizes are
    handled by reflect-padding to the network's downsampling factor."""
    gen = checkpoint.build_generator() if isinstance(checkpoint, Checkpoint) else checkpoint
    arr = densified.to_unit().data
    t = torch.from_numpy(arr.transpose(2, 0, 1).copy()).float().unsqueeze(0)
    if t.shape[1] != gen.spec.in_channels:
        raise ValidationError(f"reconstruct expects {gen.spec.in_channels}-channel input")
    factor = gen.downsample_factor
    h, w = t.shape[2], t.shape[3]
    ph = (factor - h % factor) % factor
    pw = (factor - w % factor) % factor
    if ph or pw:
        t = torch.nn.functional.pad(t, (0, pw, 0, ph), mode="reflect")
    with torch.no_grad():
        out = _to_unit(gen(t))
    out = out[0, :, :h, :w].numpy().transpose(1, 2, 0).astype(np.float64)
    return ImagePatch(np.clip(out, 0.0, 1.0), "unit")

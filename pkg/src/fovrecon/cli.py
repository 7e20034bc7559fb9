"""Command-line entry point wiring the whole pipeline.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 convergence
failure, 1 anything else. Every subcommand honors --seed and is
reproducible given identical inputs and pinned weights.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import features as F
from . import gan, metrics
from .calibration import (
    CalVggModel,
    calibrate_vgg,
    fit_logistic,
    predict_full_image,
    sweep_far_boundary,
)
from .config import dump_config, load_config, parse_boundaries
from .datasets import COHORTS, build_critic_dataset, build_generator_dataset
from .demo import make_demo_images
from .errors import ConvergenceError, ValidationError
from .imaging import (
    FieldGeometry,
    RegionPartition,
    composite_foveated,
    load_png,
    partition_weights,
    save_png,
)
from .manifest import DatasetManifest
from .pipeline import PipelineError, run_end_to_end
from .plotting import plot_curves, write_sweep_csv
from .sampling import densify, save_mask_png, subsample, void_and_cluster_mask
from .synthesis import SynthesisConfig, batch_synthesize

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_CONVERGENCE = 4


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except ConvergenceError as exc:
            click.echo(f"convergence failure: {exc}", err=True)
            sys.exit(EXIT_CONVERGENCE)
        except PipelineError as exc:
            click.echo(f"pipeline halted at stage {exc.stage!r}: {exc.cause}", err=True)
            code = EXIT_VALIDATION if isinstance(exc.cause, ValidationError) else (
                EXIT_CONVERGENCE if isinstance(exc.cause, ConvergenceError) else EXIT_IO
            )
            sys.exit(code)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


@click.group()
def main():
    """Perception-aware foveated image reconstruction toolkit."""


@main.command("make-mask")
@click.option("--height", type=int, required=True)
@click.option("--width", type=int, required=True)
@click.option("--rate", type=float, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_handled
def make_mask_cmd(height, width, rate, seed, out):
    """Generate a blue-noise sampling mask and store it as 1-bit PNG."""
    mask = void_and_cluster_mask(height, width, rate, seed)
    save_mask_png(mask, out)
    click.echo(f"wrote {out}: {mask.n_samples} samples ({rate:.4f} rate, seed {seed})")


@main.command("build-dataset")
@click.argument("which", type=click.Choice(["generator", "critic"]))
@click.option("--images", "images_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--n", "n_patches", type=int, required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--patch", type=int, default=256, show_default=True)
@click.option("--cohort", type=click.Choice(list(COHORTS)), default="expert", show_default=True)
@click.option("--near-rate", type=float, default=0.12, show_default=True)
@click.option("--far-rate", type=float, default=0.007, show_default=True)
@click.option("--iters", type=int, default=1000, help="synthesis budget (critic dataset)")
@click.option("--seed", type=int, default=0)
@_handled
def build_dataset_cmd(which, images_dir, n_patches, out_dir, patch, cohort,
                      near_rate, far_rate, iters, seed):
    """Build the generator-input corpus or the critic's distorted manifold."""
    if which == "generator":
        manifest = build_generator_dataset(
            images_dir, out_dir, n_patches, patch=patch,
            rates={"near": near_rate, "far": far_rate}, seed=seed,
        )
    else:
        syn_cfg = SynthesisConfig(max_iters=iters, stage2_iters=iters // 2, seed=seed)
        manifest = build_critic_dataset(
            images_dir, out_dir, COHORTS[cohort], n_patches, patch=patch,
            seed=seed, synthesis_cfg=syn_cfg,
        )
    click.echo(f"{which} dataset: {len(manifest)} manifest entries at {manifest.path}")


@main.command("synthesize")
@click.option("--exemplars", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--percent", type=float, required=True)
@click.option("--strategy", type=click.Choice(["A", "B"]), default="A", show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--iters", type=int, default=1000, show_default=True)
@_handled
def synthesize_cmd(exemplars, percent, strategy, seed, out_dir, iters):
    """Synthesize near-threshold-distorted patches for a directory of exemplars."""
    paths = sorted(Path(exemplars).glob("*.png"))
    if not paths:
        raise ValidationError(f"no PNG exemplars in {exemplars}")
    cfg = SynthesisConfig(strategy=strategy, max_iters=iters, stage2_iters=iters // 2, seed=seed)
    entries, n_failed = batch_synthesize(paths, cfg, out_dir, {"near": percent})
    click.echo(f"synthesized {len(entries)} patches into {out_dir}")
    if n_failed:
        click.echo(f"{n_failed} exemplars failed", err=True)
        sys.exit(EXIT_IO)


@main.command("train")
@click.option("--variant", type=click.Choice(["l2", "lpips", "lapl"]), required=True)
@click.option("--adv", type=click.Choice(["standard", "ours"]), default="ours", show_default=True)
@click.option("--region", type=click.Choice(["near", "far"]), required=True)
@click.option("--gen-data", type=click.Path(exists=True), required=True,
              help="generator dataset manifest (jsonl)")
@click.option("--critic-data", type=click.Path(exists=True), required=True,
              help="critic dataset manifest (ours) or generator manifest (standard)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None, help="generator step budget")
@click.option("--seed", type=int, default=0)
@_handled
def train_cmd(variant, adv, region, gen_data, critic_data, out_dir, config_path, steps, seed):
    """Train one region's generator with the selected loss variant."""
    cfg = load_config(config_path)
    tr = cfg["train"]
    loss_variant = variant + ("_ours" if adv == "ours" else "")
    run_cfg = gan.TrainConfig(
        loss_variant=loss_variant, lr=tr["lr"], gp_weight=tr["gp_weight"],
        n_critic=tr["n_critic"], batch_size=tr["batch_size"],
        max_epochs=tr["max_epochs"],
        max_generator_steps=steps or tr["max_generator_steps"],
        pristine_mix=tr["pristine_mix"], lapl_peak=tr["lapl_peaks"][region],
        seed=seed,
    )
    ckpt = gan.train(
        DatasetManifest(gen_data), DatasetManifest(critic_data), run_cfg, out_dir,
        region=region,
    )
    click.echo(f"trained {loss_variant} / {region}: {ckpt.step} steps "
               f"-> {Path(out_dir) / 'checkpoint_latest.pt'}")


@main.command("reconstruct")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--rate", type=float, default=None,
              help="subsample+densify the image at this rate first")
@click.option("--seed", type=int, default=0)
@_handled
def reconstruct_cmd(ckpt_path, image_path, out, rate, seed):
    """Run a trained generator on an image (optionally subsampling first)."""
    img = load_png(image_path)
    if rate is not None:
        mask = void_and_cluster_mask(img.height, img.width, rate, seed)
        img = densify(subsample(img, mask))
    ckpt = gan.load_checkpoint(ckpt_path)
    recon = gan.reconstruct(ckpt, img)
    save_png(recon, out)
    click.echo(f"wrote {out}")


@main.command("composite")
@click.option("--full", "full_path", type=click.Path(exists=True), required=True)
@click.option("--near", "near_path", type=click.Path(exists=True), required=True)
@click.option("--far", "far_path", type=click.Path(exists=True), required=True)
@click.option("--gaze", type=str, required=True, help="X,Y pixel position")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--near-boundary", type=float, default=8.0, show_default=True)
@click.option("--far-boundary", type=float, default=14.0, show_default=True)
@click.option("--blend-band", type=float, default=1.0, show_default=True)
@click.option("--width-m", type=float, default=0.7, show_default=True)
@click.option("--distance-m", type=float, default=0.7, show_default=True)
@_handled
def composite_cmd(full_path, near_path, far_path, gaze, out, near_boundary,
                  far_boundary, blend_band, width_m, distance_m):
    """Blend full/near/far reconstructions into one foveated image."""
    full = load_png(full_path)
    near = load_png(near_path)
    far = load_png(far_path)
    gaze_px = tuple(float(v) for v in gaze.split(","))
    geom = FieldGeometry((full.width, full.height), width_m, distance_m)
    part = RegionPartition(gaze_px, near_boundary, far_boundary, blend_band)
    weights = partition_weights(geom, part, (full.height, full.width))
    save_png(composite_foveated(full, near, far, weights), out)
    click.echo(f"wrote {out}")


@main.command("calibrate")
@click.option("--metric", type=click.Choice(list(metrics.METRIC_IDS)), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True,
              help="CSV: ref,test,probability,eccentricity")
@click.option("--ecc", type=float, required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=0)
@_handled
def calibrate_cmd(metric, data_path, ecc, out, seed):
    """Fit the logistic (and, for calvgg, layer weights) at one eccentricity."""
    pairs, probs = [], []
    with open(data_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if abs(float(row["eccentricity"]) - ecc) > 1e-9:
                continue
            pairs.append((load_png(row["ref"]), load_png(row["test"])))
            probs.append(float(row["probability"]))
    if not pairs:
        raise ValidationError(f"no rows at eccentricity {ecc} in {data_path}")
    if metric == "calvgg":
        sl = calibrate_vgg(pairs, probs, ecc, seed=seed)
        payload = {"eccentricity": ecc, "layer_weights": sl.layer_weights,
                   "logistic": sl.logistic.to_dict(), "mse": sl.mse}
    else:
        scores = [metrics.metric_score(metric, r, t) for r, t in pairs]
        params = fit_logistic(scores, probs, seed=seed)
        payload = {"eccentricity": ecc, "metric": metric,
                   "logistic": params.to_dict(), "mse": params.mse}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out} (mse {payload['mse']:.6g})")
    else:
        click.echo(text)


@main.command("evaluate")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--ref", "ref_path", type=click.Path(exists=True), required=True)
@click.option("--test", "test_path", type=click.Path(exists=True), required=True)
@click.option("--gaze", type=str, required=True, help="X,Y pixel position")
@click.option("--width-m", type=float, default=0.7, show_default=True)
@click.option("--distance-m", type=float, default=0.7, show_default=True)
@_handled
def evaluate_cmd(model_path, ref_path, test_path, gaze, width_m, distance_m):
    """Predict the full-image detection probability for a reconstruction."""
    model = CalVggModel.load(model_path)
    ref = load_png(ref_path)
    test = load_png(test_path)
    gaze_px = tuple(float(v) for v in gaze.split(","))
    geom = FieldGeometry((ref.width, ref.height), width_m, distance_m)
    value = predict_full_image(model, ref, test, gaze_px, geom)
    click.echo(f"{value:.6f}")


@main.command("sweep")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--ref", "ref_path", type=click.Path(exists=True), required=True)
@click.option("--method", "methods", type=str, multiple=True, required=True,
              help="name=DIR with files named boundary_<deg>.png")
@click.option("--boundaries", type=str, default="9:22", show_default=True)
@click.option("--gaze", type=str, required=True)
@click.option("--out-csv", type=click.Path(dir_okay=False), required=True)
@click.option("--out-png", type=click.Path(dir_okay=False), default=None)
@click.option("--width-m", type=float, default=0.7, show_default=True)
@click.option("--distance-m", type=float, default=0.7, show_default=True)
@_handled
def sweep_cmd(model_path, ref_path, methods, boundaries, gaze, out_csv, out_png,
              width_m, distance_m):
    """Detection-rate curves over far-periphery boundary positions."""
    model = CalVggModel.load(model_path)
    ref = load_png(ref_path)
    gaze_px = tuple(float(v) for v in gaze.split(","))
    geom = FieldGeometry((ref.width, ref.height), width_m, distance_m)
    bounds = parse_boundaries(boundaries)
    method_outputs = {}
    for spec in methods:
        name, _, dir_part = spec.partition("=")
        if not dir_part:
            raise ValidationError(f"--method must look like name=DIR, got {spec!r}")
        per_boundary = {}
        for b in bounds:
            candidate = Path(dir_part) / f"boundary_{b:g}.png"
            if candidate.is_file():
                per_boundary[b] = [(ref, load_png(candidate))]
        method_outputs[name] = per_boundary
    rows, skipped = sweep_far_boundary(model, method_outputs, bounds, gaze_px, geom)
    write_sweep_csv(rows, out_csv)
    for method, boundary in skipped:
        click.echo(f"missing reconstruction: {method} at {boundary} degrees", err=True)
    if out_png:
        plot_curves(out_csv, out_png)
    click.echo(f"wrote {out_csv} ({len(rows)} rows)")


@main.command("plot")
@click.option("--csv", "csv_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_handled
def plot_cmd(csv_path, out):
    """Render sweep curves from a CSV produced by `sweep`."""
    plot_curves(csv_path, out)
    click.echo(f"wrote {out}")


@main.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--images", "images_dir", type=click.Path(file_okay=False), default=None)
@click.option("--work", "work_dir", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@_handled
def run_cmd(config_path, images_dir, work_dir, seed):
    """Execute the full pipeline end to end and write a report."""
    overrides = {}
    if images_dir is not None:
        overrides["images_dir"] = images_dir
    if work_dir is not None:
        overrides["work_dir"] = work_dir
    if seed is not None:
        overrides["seed"] = seed
    cfg = load_config(config_path, overrides)
    report = run_end_to_end(cfg)
    click.echo(json.dumps(
        {"stages": report["stages"], "report": str(Path(cfg["work_dir"]) / "report.json")},
        indent=2,
    ))


@main.group("config")
def config_group():
    """Configuration inspection."""


@config_group.command("show")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@_handled
def config_show_cmd(config_path):
    """Print the effective configuration (defaults plus the given file)."""
    click.echo(dump_config(load_config(config_path)))


@main.command("verify")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@_handled
def verify_cmd(manifest_path):
    """Check manifest referential integrity."""
    manifest = DatasetManifest(manifest_path)
    problems = manifest.verify()
    for problem in problems:
        click.echo(problem, err=True)
    if problems:
        sys.exit(EXIT_VALIDATION)
    click.echo(f"ok: {len(manifest)} entries")


@main.command("demo-images")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--n", type=int, default=10, show_default=True)
@click.option("--size", type=int, default=320, show_default=True)
@click.option("--seed", type=int, default=0)
@_handled
def demo_images_cmd(out_dir, n, size, seed):
    """Materialize the bundled procedural demo images."""
    paths = make_demo_images(out_dir, n=n, size=size, seed=seed)
    click.echo(f"wrote {len(paths)} images to {out_dir}")


@main.command("fetch-weights")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="defaults to the torch hub checkpoint cache")
@_handled
def fetch_weights_cmd(out):
    """Download the published backbone weights (needs network access)."""
    import urllib.request

    target = Path(out) if out else F.default_weight_path()
    target.parent.mkdir(parents=True, exist_ok=True)
    try:
        urllib.request.urlretrieve(F.VGG19_URL, target)
    except OSError as exc:
        raise OSError(f"download failed ({exc}); set FOVRECON_VGG19_WEIGHTS to a local copy")
    F._verify_checksum(target)
    click.echo(f"fetched backbone weights to {target}")


if __name__ == "__main__":
    main()

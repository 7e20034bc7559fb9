"""End-to-end orchestration: datasets -> distorted manifold -> training ->
reconstruction -> compositing -> calibration -> boundary sweep -> plots.

Stages run sequentially, each owning a subdirectory of the work dir; any
failure halts the run with the stage name while keeping partial artifacts.
The emitted report is fully deterministic (no timestamps), so identical
configs produce byte-identical reports.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

from . import features as F
from . import gan
from .calibration import CalVggModel, calibrate_vgg, predict_full_image, sweep_far_boundary
from .config import parse_boundaries
from .datasets import COHORTS, build_critic_dataset, build_generator_dataset
from .demo import make_demo_images
from .errors import ValidationError
from .imaging import (
    FieldGeometry,
    ImagePatch,
    RegionPartition,
    composite_foveated,
    gaussian_blur,
    load_png,
    partition_weights,
    save_png,
)
from .manifest import DatasetManifest
from .plotting import plot_curves, plot_loss_history, write_sweep_csv
from .sampling import densify, subsample, void_and_cluster_mask
from .synthesis import SynthesisConfig


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _geometry_for(img: ImagePatch, cfg: dict) -> FieldGeometry:
    return FieldGeometry(
        resolution_px=(img.width, img.height),
        physical_width_m=cfg["geometry"]["physical_width_m"],
        viewing_distance_m=cfg["geometry"]["viewing_distance_m"],
    )


def _synthetic_blur_probability(sigma: float, eccentricity: float) -> float:
    """Documented synthetic observer for calibration smoke data: blur
    becomes harder to detect at larger eccentricity."""
    if sigma <= 0:
        return 0.0
    sigma50 = 0.5 + 0.15 * eccentricity
    return float(np.clip(1.0 / (1.0 + math.exp(-(sigma - sigma50) / 0.5)), 0.0, 1.0))


def run_end_to_end(cfg: dict) -> dict:
    work = Path(cfg["work_dir"])
    work.mkdir(parents=True, exist_ok=True)
    lock = work / ".lock"
    if lock.exists():
        raise ValidationError(f"{work} is owned by another run (remove {lock})")
    lock.write_text(str(os.getpid()))
    report = {"config": cfg, "stages": [], "metrics": {}, "artifacts": {}}
    try:
        _run_stages(cfg, work, report)
        return report
    finally:
        lock.unlink(missing_ok=True)
        report_path = work / "report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))


def _stage(report, name, fn):
    try:
        detail = fn()
    except Exception as exc:
        report["stages"].append({"name": name, "status": "failed", "detail": str(exc)})
        raise PipelineError(name, exc) from exc
    report["stages"].append({"name": name, "status": "ok", "detail": detail})


def _run_stages(cfg: dict, work: Path, report: dict) -> None:
    seed = int(cfg["seed"])
    net = F.backbone(cfg["backbone"]["weights"], cfg["backbone"]["init_seed"])
    state: dict = {}

    def stage_inputs():
        if cfg["images_dir"]:
            images_dir = Path(cfg["images_dir"])
            if not images_dir.is_dir():
                raise ValidationError(f"images_dir does not exist: {images_dir}")
        else:
            images_dir = work / "images"
            n_needed = 10
            make_demo_images(images_dir, n=n_needed, size=cfg["datasets"]["patch"] * 2,
                             seed=seed)
        paths = sorted(p for p in images_dir.iterdir() if p.suffix.lower() == ".png")
        if not paths:
            raise ValidationError(f"no PNG images in {images_dir}")
        state["images_dir"] = images_dir
        state["image_paths"] = paths
        report["artifacts"]["images_dir"] = str(images_dir)
        return f"{len(paths)} images"

    def stage_generator_dataset():
        rates = dict(cfg["sampling"]["rates"])
        if cfg["sampling"]["use_threshold_rates"]:
            thresholds = COHORTS[cfg["cohort"]]
            rates = {r: p / 100.0 for r, p in thresholds.region_percents().items()}
        manifest = build_generator_dataset(
            state["images_dir"], work / "gen_data",
            n_patches=cfg["datasets"]["n_generator_patches"],
            patch=cfg["datasets"]["patch"], rates=rates, seed=seed,
        )
        state["gen_manifest"] = manifest
        state["rates"] = rates
        report["artifacts"]["generator_manifest"] = str(manifest.path)
        return f"{len(manifest)} entries"

    def stage_critic_dataset():
        thresholds = COHORTS[cfg["cohort"]]
        syn = cfg["synthesis"]
        syn_cfg = SynthesisConfig(
            strategy=syn["strategy"], max_iters=syn["max_iters"],
            stage2_iters=syn["stage2_iters"], step_size=syn["step_size"],
            blur_sigma=syn["blur_sigma"], seed=seed,
        )
        manifest = build_critic_dataset(
            state["images_dir"], work / "critic_data", thresholds,
            n_patches=cfg["datasets"]["n_critic_patches"],
            patch=cfg["datasets"]["patch"], seed=seed,
            synthesis_cfg=syn_cfg, net=net,
        )
        state["critic_manifest"] = manifest
        report["artifacts"]["critic_manifest"] = str(manifest.path)
        return f"{len(manifest)} entries"

    def stage_train():
        tr = cfg["train"]
        variant = tr["variant"] + ("_ours" if tr["adv"] == "ours" else "")
        checkpoints = {}
        finals = {}
        for region in tr["regions"]:
            run_cfg = gan.TrainConfig(
                loss_variant=variant, lr=tr["lr"], gp_weight=tr["gp_weight"],
                n_critic=tr["n_critic"], batch_size=tr["batch_size"],
                max_epochs=tr["max_epochs"],
                max_generator_steps=tr["max_generator_steps"],
                pristine_mix=tr["pristine_mix"],
                lapl_peak=tr["lapl_peaks"][region], seed=seed,
            )
            critic_manifest = (
                state["critic_manifest"] if tr["adv"] == "ours" else state["gen_manifest"]
            )
            out_dir = work / "train" / region
            ckpt = gan.train(state["gen_manifest"], critic_manifest, run_cfg,
                             out_dir, region=region, net=net)
            checkpoints[region] = ckpt
            finals[region] = ckpt.loss_history[-1]["gen_loss"] if ckpt.loss_history else None
            report["artifacts"][f"checkpoint_{region}"] = str(out_dir / "checkpoint_latest.pt")
        state["checkpoints"] = checkpoints
        report["metrics"]["final_gen_loss"] = finals
        return f"trained {', '.join(tr['regions'])} ({variant})"

    def stage_reconstruct():
        recon_dir = work / "recon"
        recon_dir.mkdir(parents=True, exist_ok=True)
        n_eval = min(cfg["evaluation"]["n_eval_images"], len(state["image_paths"]))
        originals, gan_recons, interp_recons = [], [], []
        for path in state["image_paths"][:n_eval]:
            full = load_png(path)
            per_region_gan, per_region_interp = {}, {}
            for region, rate in state["rates"].items():
                mask = void_and_cluster_mask(full.height, full.width, rate, seed=seed)
                dense = densify(subsample(full, mask))
                recon = gan.reconstruct(state["checkpoints"][region], dense)
                per_region_gan[region] = recon
                per_region_interp[region] = dense
                save_png(recon, recon_dir / f"{path.stem}__{region}_gan.png")
                save_png(dense, recon_dir / f"{path.stem}__{region}_interp.png")
            originals.append(full)
            gan_recons.append(per_region_gan)
            interp_recons.append(per_region_interp)
        state["originals"] = originals
        state["gan_recons"] = gan_recons
        state["interp_recons"] = interp_recons
        report["artifacts"]["recon_dir"] = str(recon_dir)
        return f"{n_eval} images x {len(state['rates'])} regions"

    def stage_composite():
        comp_dir = work / "composites"
        comp_dir.mkdir(parents=True, exist_ok=True)
        regions_cfg = cfg["regions"]
        for i, full in enumerate(state["originals"]):
            geom = _geometry_for(full, cfg)
            gaze = (full.width / 2, full.height / 2)
            part = RegionPartition(
                gaze_px=gaze,
                near_boundary_deg=regions_cfg["near_boundary_deg"],
                far_boundary_deg=regions_cfg["far_boundary_deg"],
                blend_band_deg=regions_cfg["blend_band_deg"],
            )
            weights = partition_weights(geom, part, (full.height, full.width))
            comp = composite_foveated(
                full, state["gan_recons"][i]["near"], state["gan_recons"][i]["far"], weights
            )
            save_png(comp, comp_dir / f"composite_{i:02d}.png")
        report["artifacts"]["composites_dir"] = str(comp_dir)
        return f"{len(state['originals'])} composites"

    def stage_calibrate():
        ev = cfg["evaluation"]
        patch = ev["metric_patch"]
        refs = []
        for full in state["originals"][:2]:
            if full.height >= patch and full.width >= patch:
                y0 = (full.height - patch) // 2
                x0 = (full.width - patch) // 2
                refs.append(ImagePatch(full.data[y0 : y0 + patch, x0 : x0 + patch]))
        if not refs:
            raise ValidationError("evaluation images smaller than the metric patch")
        slices = {}
        for ecc in ev["calibration_eccentricities"]:
            pairs, probs = [], []
            for ref in refs:
                pairs.append((ref, ref))
                probs.append(0.0)
                for sigma in ev["calibration_blur_levels"]:
                    pairs.append((ref, gaussian_blur(ref, sigma)))
                    probs.append(_synthetic_blur_probability(sigma, ecc))
            slices[float(ecc)] = calibrate_vgg(
                pairs, probs, ecc, net=net, seed=seed,
                n_restarts=ev["calibration_restarts"],
            )
        model = CalVggModel(slices=slices, patch_size=patch)
        model_path = work / "calvgg_model.json"
        model.save(model_path)
        state["model"] = model
        report["artifacts"]["calibrated_model"] = str(model_path)
        report["metrics"]["calibration_mse"] = {
            str(ecc): sl.mse for ecc, sl in slices.items()
        }
        return f"calibrated at {sorted(slices)} degrees"

    def stage_sweep():
        ev = cfg["evaluation"]
        boundaries = parse_boundaries(ev["sweep_boundaries"])
        blend = ev["sweep_blend_band_deg"]
        regions_cfg = cfg["regions"]
        full = state["originals"][0]
        geom = _geometry_for(full, cfg)
        gaze = (full.width / 2, full.height / 2)
        method_outputs = {"gan": {}, "interp": {}}
        for boundary in boundaries:
            part = RegionPartition(
                gaze_px=gaze, near_boundary_deg=regions_cfg["near_boundary_deg"],
                far_boundary_deg=boundary, blend_band_deg=blend,
            )
            for method, recons in (("gan", state["gan_recons"]), ("interp", state["interp_recons"])):
                pairs = []
                for i, orig in enumerate(state["originals"]):
                    w = partition_weights(geom, part, (orig.height, orig.width))
                    comp = composite_foveated(orig, recons[i]["near"], recons[i]["far"], w)
                    pairs.append((orig, comp))
                method_outputs[method][boundary] = pairs
        rows, skipped = sweep_far_boundary(state["model"], method_outputs, boundaries,
                                           gaze, geom, net=net)
        csv_path = work / "sweep.csv"
        write_sweep_csv(rows, csv_path)
        report["artifacts"]["sweep_csv"] = str(csv_path)
        report["metrics"]["sweep"] = rows
        report["metrics"]["sweep_skipped"] = [list(s) for s in skipped]
        return f"{len(rows)} (method, boundary) points"

    def stage_plot():
        sweep_png = work / "sweep.png"
        plot_curves(work / "sweep.csv", sweep_png)
        report["artifacts"]["sweep_plot"] = str(sweep_png)
        made = [str(sweep_png)]
        for region in cfg["train"]["regions"]:
            csv_path = work / "train" / region / "loss_history.csv"
            if csv_path.exists():
                png = work / f"loss_{region}.png"
                plot_loss_history(csv_path, png)
                made.append(str(png))
        return f"{len(made)} plots"

    _stage(report, "inputs", stage_inputs)
    _stage(report, "generator-dataset", stage_generator_dataset)
    _stage(report, "critic-dataset", stage_critic_dataset)
    _stage(report, "train", stage_train)
    _stage(report, "reconstruct", stage_reconstruct)
    _stage(report, "composite", stage_composite)
    _stage(report, "calibrate", stage_calibrate)
    _stage(report, "sweep", stage_sweep)
    _stage(report, "plot", stage_plot)

"""Corpus builders: the generator's sparse-then-densified training pairs and
the critic's near-threshold-distorted manifold, with JSONL manifests.

Per-eccentricity guiding-sample percentages measured for the two observer
cohorts are shipped as constants; they bridge the perception data to
dataset generation (near periphery uses the 8 degree threshold, far uses
the 14 degree one).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .imaging import ImagePatch, load_png, save_png
from .manifest import DatasetManifest, ManifestEntry
from .sampling import densify, subsample, void_and_cluster_mask
from .synthesis import SynthesisConfig, batch_synthesize

log = logging.getLogger(__name__)

# Sampling rates for the generator's input corpus.
DEFAULT_RATES = {"near": 0.12, "far": 0.007}

# Region -> calibration eccentricity (degrees) used to pick guiding percents.
REGION_ECCENTRICITY = {"near": 8.0, "far": 14.0}


@dataclass(frozen=True)
class DistortionThresholds:
    """Guiding-sample percentages at the 75% detection threshold."""

    cohort: str
    percents: dict           # eccentricity degrees -> guiding percent
    confidence_intervals: dict = field(default_factory=dict)

    def __post_init__(self):
        eccs = sorted(self.percents)
        values = [self.percents[e] for e in eccs]
        if any(a <= b for a, b in zip(values, values[1:])):
            raise ValidationError("guiding percents must strictly decrease with eccentricity")

    def __getitem__(self, ecc: float) -> float:
        return self.percents[ecc]

    def region_percents(self) -> dict:
        return {r: self.percents[e] for r, e in REGION_ECCENTRICITY.items()}


EXPERT_THRESHOLDS = DistortionThresholds(
    cohort="expert",
    percents={8.0: 9.09, 14.0: 6.89, 20.0: 4.71},
    confidence_intervals={8.0: (7.85, 10.48), 14.0: (5.78, 8.14), 20.0: (3.60, 5.94)},
)

NAIVE_THRESHOLDS = DistortionThresholds(
    cohort="naive",
    percents={8.0: 7.93, 14.0: 4.57, 20.0: 2.06},
    confidence_intervals={8.0: (7.47, 8.41), 14.0: (3.98, 5.29), 20.0: (1.30, 2.76)},
)

COHORTS = {"expert": EXPERT_THRESHOLDS, "naive": NAIVE_THRESHOLDS}


def _list_images(image_dir) -> list:
    paths = sorted(p for p in Path(image_dir).iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise ValidationError(f"no images found in {image_dir}")
    return paths


def _balanced_counts(n_patches: int, n_sources: int) -> list:
    base, extra = divmod(n_patches, n_sources)
    return [base + (1 if i < extra else 0) for i in range(n_sources)]


def _random_crops(image_dir, n_patches, patch, rng):
    """Yield (source_path, offset, ImagePatch) balanced across sources."""
    sources = _list_images(image_dir)
    counts = _balanced_counts(n_patches, len(sources))
    for path, count in zip(sources, counts):
        img = load_png(path)
        if img.height < patch or img.width < patch:
            log.warning("skipping %s: smaller than %dx%d", path.name, patch, patch)
            continue
        for _ in range(count):
            x = int(rng.integers(0, img.width - patch + 1))
            y = int(rng.integers(0, img.height - patch + 1))
            crop = ImagePatch(img.data[y : y + patch, x : x + patch])
            yield path, (x, y), crop


def build_generator_dataset(image_dir, out_dir, n_patches: int, patch: int = 256,
                            rates: dict = None, seed: int = 0) -> DatasetManifest:
    """Random crops, blue-noise subsampled per region rate and densified.

    Each crop yields one ground-truth file plus one densified input per
    region; the mask seed is shared across the dataset so a single rank
    matrix serves every rate.
    """
    rates = rates or DEFAULT_RATES
    out_dir = Path(out_dir)
    (out_dir / "natural").mkdir(parents=True, exist_ok=True)
    (out_dir / "inputs").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(out_dir / "manifest.jsonl")
    rng = np.random.default_rng(seed)
    masks = {region: void_and_cluster_mask(patch, patch, rate, seed=seed)
             for region, rate in rates.items()}

    for path, offset, crop in _random_crops(image_dir, n_patches, patch, rng):
        stem = f"{path.stem}__x{offset[0]}_y{offset[1]}"
        natural_path = out_dir / "natural" / f"{stem}.png"
        save_png(crop, natural_path)
        for region, rate in rates.items():
            if (path.name, offset, region, "natural") not in manifest:
                manifest.append(ManifestEntry(
                    patch_path=f"natural/{stem}.png", source_image=path.name,
                    crop_offset=offset, region=region, kind="natural",
                    rate_or_percent=1.0, strategy="", seed=seed,
                ))
            if (path.name, offset, region, "densified_input") in manifest:
                continue  # resumable: earlier run already produced this entry
            dense = densify(subsample(crop, masks[region]))
            save_png(dense, out_dir / "inputs" / f"{stem}__{region}.png")
            manifest.append(ManifestEntry(
                patch_path=f"inputs/{stem}__{region}.png", source_image=path.name,
                crop_offset=offset, region=region, kind="densified_input",
                rate_or_percent=rate, strategy="", seed=seed,
            ))
    return manifest


def build_critic_dataset(image_dir, out_dir, thresholds: DistortionThresholds,
                         n_patches: int, patch: int = 256, seed: int = 0,
                         synthesis_cfg: SynthesisConfig | None = None,
                         net=None) -> DatasetManifest:
    """The distorted manifold: per crop and region, one patch synthesized at
    the cohort's guiding percent, plus the pristine ground truth."""
    out_dir = Path(out_dir)
    crops_dir = out_dir / "pristine"
    crops_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(out_dir / "manifest.jsonl")
    rng = np.random.default_rng(seed)
    cfg = synthesis_cfg or SynthesisConfig(seed=seed)
    region_percents = thresholds.region_percents()

    crop_paths = []
    for path, offset, crop in _random_crops(image_dir, n_patches, patch, rng):
        stem = f"{path.stem}__x{offset[0]}_y{offset[1]}"
        crop_path = crops_dir / f"{stem}.png"
        save_png(crop, crop_path)
        crop_paths.append(crop_path)
        for region in region_percents:
            if (crop_path.name, (0, 0), region, "natural") not in manifest:
                manifest.append(ManifestEntry(
                    patch_path=f"pristine/{stem}.png", source_image=crop_path.name,
                    crop_offset=(0, 0), region=region, kind="natural",
                    rate_or_percent=1.0, strategy="", seed=seed,
                ))
    _, n_failed = batch_synthesize(
        crop_paths, cfg, out_dir / "distorted", region_percents,
        manifest=manifest, net=net, seed_base=seed,
    )
    if n_failed:
        raise ValidationError(f"{n_failed} exemplars failed during synthesis")
    return manifest

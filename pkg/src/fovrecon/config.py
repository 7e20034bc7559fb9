"""Layered pipeline configuration: built-in defaults < config file < CLI
flags. Every default is visible through ``fovrecon config show`` so the
choices not pinned by measurement are inspectable.

A run is reproducible from the effective config alone: all stage seeds
derive from ``seed`` and every artifact path from ``work_dir``.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ValidationError

DEFAULTS: dict = {
    "seed": 0,
    "images_dir": None,          # source corpus; demo images when null
    "work_dir": "runs/default",
    "cohort": "expert",          # which threshold set drives the distorted manifold
    "geometry": {
        # physical span assigned to evaluated images (square pixels)
        "physical_width_m": 0.7,
        "viewing_distance_m": 0.7,
    },
    "regions": {
        "near_boundary_deg": 8.0,
        "far_boundary_deg": 14.0,
        "blend_band_deg": 1.0,
    },
    "sampling": {
        # generator input rates; the threshold-matched alternative mirrors
        # the guiding-sample percentages instead (cohort-dependent)
        "rates": {"near": 0.12, "far": 0.007},
        "use_threshold_rates": False,
    },
    "datasets": {
        "patch": 256,
        "n_generator_patches": 1000,
        "n_critic_patches": 1000,
    },
    "synthesis": {
        "strategy": "A",
        "max_iters": 1000,
        "stage2_iters": 500,
        "step_size": 0.02,
        "blur_sigma": 1.0,
    },
    "train": {
        "variant": "l2",             # l2 | lpips | lapl
        "adv": "ours",               # ours | standard
        "regions": ["near", "far"],
        "lr": 2.0e-5,
        "gp_weight": 10.0,
        "n_critic": 5,
        "batch_size": 16,
        "max_epochs": 30,
        "max_generator_steps": None,
        "pristine_mix": 0.5,
        "lapl_peaks": {"near": "M", "far": "H"},
    },
    "evaluation": {
        "metric_patch": 256,
        "n_eval_images": 4,
        "sweep_boundaries": "9:22:1",
        "sweep_blend_band_deg": 0.5,
        "calibration_eccentricities": [8.0, 20.0],
        "calibration_blur_levels": [0.25, 1.25, 2.25, 3.25, 4.25],
        "calibration_restarts": 8,
    },
    "backbone": {
        "weights": "auto",           # auto | seeded | path to checkpoint
        "init_seed": 1234,
    },
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key not in ("rates", "lapl_peaks"):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Effective configuration: defaults, then file, then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        cfg = _merge(cfg, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def parse_boundaries(spec: str) -> list:
    """'9:22' or '9:22:2' -> inclusive list of boundary degrees."""
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        raise ValidationError(f"boundary spec must be lo:hi[:step], got {spec!r}")
    lo, hi = float(parts[0]), float(parts[1])
    step = float(parts[2]) if len(parts) == 3 else 1.0
    if step <= 0 or hi < lo:
        raise ValidationError(f"bad boundary spec {spec!r}")
    out = []
    b = lo
    while b <= hi + 1e-9:
        out.append(round(b, 6))
        b += step
    return out

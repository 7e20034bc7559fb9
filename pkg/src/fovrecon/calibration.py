"""Psychometric data analysis and objective-metric calibration.

Covers the cubic threshold fits with bootstrap confidence intervals, the
six-parameter generalized logistic mapping metric scores to detection
probabilities, layer-reweighted backbone calibration with nonnegative
weights, stratified cross-validation, and the full-image patchwise
predictor with eccentricity interpolation and mean pooling.

Raw per-trial human data is not shipped; the published aggregate threshold
constants live in :mod:`fovrecon.datasets` and a synthetic-record generator
here exercises the full fitting pipeline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, least_squares

from . import features as F
from . import metrics
from .errors import ConvergenceError, ValidationError
from .imaging import FieldGeometry, ImagePatch, pixel_eccentricity

# ---------------------------------------------------------------------------
# psychometric records and cubic threshold fits


@dataclass(frozen=True)
class PsychometricRecord:
    eccentricity: float
    stimulus_level: float     # guiding percent p, or blur sigma
    detections: int
    trials: int

    def __post_init__(self):
        if self.trials <= 0 or not 0 <= self.detections <= self.trials:
            raise ValidationError("need 0 <= detections <= trials, trials > 0")

    @property
    def probability(self) -> float:
        return self.detections / self.trials


@dataclass(frozen=True)
class CubicFit:
    coefficients: tuple       # c0..c3, ascending powers
    eccentricity: float
    residual_mse: float
    level_range: tuple        # (min, max) of the fitted stimulus levels

    def __call__(self, level):
        c0, c1, c2, c3 = self.coefficients
        level = np.asarray(level, dtype=np.float64)
        return c0 + c1 * level + c2 * level**2 + c3 * level**3


def fit_cubic(records) -> CubicFit:
    """Least-squares cubic of detection probability vs stimulus level."""
    records = list(records)
    levels = np.array([r.stimulus_level for r in records], dtype=np.float64)
    if len(set(levels.tolist())) < 4:
        raise ValidationError("cubic fit needs at least 4 distinct stimulus levels")
    eccs = {r.eccentricity for r in records}
    if len(eccs) != 1:
        raise ValidationError("fit one eccentricity at a time")
    probs = np.array([r.probability for r in records], dtype=np.float64)
    coeffs = np.polyfit(levels, probs, 3)[::-1]  # ascending order
    fit = CubicFit(
        coefficients=tuple(coeffs), eccentricity=eccs.pop(),
        residual_mse=0.0, level_range=(float(levels.min()), float(levels.max())),
    )
    mse = float(((fit(levels) - probs) ** 2).mean())
    return CubicFit(fit.coefficients, fit.eccentricity, mse, fit.level_range)


def threshold_at(fit: CubicFit, prob: float = 0.75):
    """Smallest stimulus level in the measured range where the fit crosses
    ``prob``; None when there is no crossing (never a guess)."""
    lo, hi = fit.level_range
    grid = np.linspace(lo, hi, 2001)
    values = fit(grid) - prob
    exact = np.where(values == 0.0)[0]
    signs = np.sign(values)
    for i in range(len(grid) - 1):
        if exact.size and exact[0] == i:
            return float(grid[i])
        if signs[i] * signs[i + 1] < 0:
            return float(brentq(lambda x: float(fit(x) - prob), grid[i], grid[i + 1]))
    if exact.size:
        return float(grid[exact[0]])
    return None


def bootstrap_ci(records, fitter=None, level: float = 0.95, n_boot: int = 1000,
                 seed: int = 0, max_failure_frac: float = 0.2):
    """Percentile bootstrap interval for a threshold statistic.

    Trial outcomes are resampled per record (binomial with the observed
    rate); ``fitter`` maps a resampled record list to a scalar (default:
    cubic fit + 75% threshold). Degenerate resamples are dropped and
    counted; more than ``max_failure_frac`` failures is an error.
    """
    records = list(records)
    if fitter is None:
        def fitter(rs):
            return threshold_at(fit_cubic(rs), 0.75)

    rng = np.random.default_rng(seed)
    stats, failures = [], 0
    for _ in range(n_boot):
        resampled = []
        for r in records:
            hits = int(rng.binomial(r.trials, r.probability))
            resampled.append(PsychometricRecord(r.eccentricity, r.stimulus_level, hits, r.trials))
        try:
            value = fitter(resampled)
        except (ValidationError, np.linalg.LinAlgError):
            value = None
        if value is None or not math.isfinite(value):
            failures += 1
        else:
            stats.append(value)
    if failures > max_failure_frac * n_boot:
        raise ConvergenceError(f"{failures}/{n_boot} bootstrap resamples failed to fit")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# generalized logistic (six free parameters)


@dataclass(frozen=True)
class LogisticParams:
    a: float
    b: float
    c: float
    k: float
    q: float
    v: float
    mse: float | None = None

    def __post_init__(self):
        if self.c <= 0 or self.q < 0 or self.v <= 0:
            raise ValidationError("logistic denominator must stay positive (c > 0, q >= 0, v > 0)")

    def __call__(self, t):
        return logistic_eval(self, t)

    def envelope(self) -> tuple:
        return (min(self.a, self.k), max(self.a, self.k))

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in ("a", "b", "c", "k", "q", "v", "mse")}


def logistic_eval(p: LogisticParams, t):
    """y(t) = a + (k - a) / (c + q * exp(-b t))^(1/v), exponent-clamped."""
    t = np.asarray(t, dtype=np.float64)
    expo = np.clip(-p.b * t, -500.0, 500.0)
    den = (p.c + p.q * np.exp(expo)) ** (1.0 / p.v)
    out = p.a + (p.k - p.a) / den
    return out if out.ndim else float(out)


def sigmoid_baseline(t):
    """The uncalibrated reference curve y(t) = 1 / (1 + e^-t)."""
    t = np.asarray(t, dtype=np.float64)
    out = 1.0 / (1.0 + np.exp(np.clip(-t, -500, 500)))
    return out if out.ndim else float(out)


_LOGISTIC_BOUNDS = (
    np.array([-2.0, -1e4, 1e-6, -2.0, 0.0, 1e-3]),
    np.array([3.0, 1e4, 1e6, 3.0, 1e6, 1e3]),
)


def _logistic_residual(x, t, p):
    params = LogisticParams(*x)
    return logistic_eval(params, t) - p


def fit_logistic(scores, probs, n_restarts: int = 32, seed: int = 0) -> LogisticParams:
    """Damped least-squares fit of the six-parameter logistic, best of
    ``n_restarts`` random initializations (log-uniform b and v, data-range
    informed a and k). Raises ConvergenceError with the best attempt when
    every restart fails."""
    t = np.asarray(scores, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if t.size != p.size or t.size < 6:
        raise ValidationError("need at least 6 (score, probability) points")
    rng = np.random.default_rng(seed)
    t_span = max(float(t.max() - t.min()), 1e-9)
    best = None
    best_cost = math.inf
    failures = 0
    for i in range(n_restarts):
        a0 = float(p.min() + 0.05 * rng.normal())
        k0 = float(p.max() + 0.05 * rng.normal())
        b0 = float(rng.choice([-1.0, 1.0]) * 10.0 ** rng.uniform(-0.7, 1.3) / t_span)
        if i == 0:
            b0 = abs(b0)  # most detection curves increase with the score
        v0 = float(10.0 ** rng.uniform(-0.5, 0.5))
        x0 = np.array([a0, b0, 1.0, k0, 1.0, v0])
        x0 = np.clip(x0, _LOGISTIC_BOUNDS[0] + 1e-9, _LOGISTIC_BOUNDS[1] - 1e-9)
        try:
            res = least_squares(
                _logistic_residual, x0, args=(t, p), bounds=_LOGISTIC_BOUNDS,
                method="trf", max_nfev=2000,
            )
        except Exception:
            failures += 1
            continue
        if not np.isfinite(res.cost):
            failures += 1
            continue
        if res.cost < best_cost:
            best_cost = res.cost
            best = res.x
    if best is None:
        raise ConvergenceError("all logistic restarts diverged", best=None)
    mse = float(2.0 * best_cost / t.size)  # least_squares cost = 0.5 * sum(res^2)
    return LogisticParams(*best, mse=mse)


def pearson_r(x, y) -> float:
    """Textbook covariance formula: cov(x, y) / (std x * std y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = x - x.mean()
    ym = y - y.mean()
    denom = math.sqrt(float((xm**2).sum()) * float((ym**2).sum()))
    if denom == 0:
        return 0.0
    return float((xm * ym).sum() / denom)


# ---------------------------------------------------------------------------
# calibrated backbone metric


@dataclass(frozen=True)
class CalVggSlice:
    layer_weights: dict       # layer name -> nonnegative weight
    logistic: LogisticParams
    mse: float


@dataclass(frozen=True)
class CalVggModel:
    """Per-eccentricity nonnegative layer reweighting plus fitted logistics;
    predictions at intermediate eccentricities interpolate the 8 and 20
    degree calibrations, and full images pool patch predictions by mean."""

    slices: dict              # eccentricity -> CalVggSlice
    layers: tuple = field(default_factory=lambda: tuple(F.CALIBRATION_LAYERS))
    patch_size: int = 256

    def __post_init__(self):
        for ecc, sl in self.slices.items():
            if any(w < 0 for w in sl.layer_weights.values()):
                raise ValidationError(f"negative layer weight in {ecc} degree slice")

    def save(self, path) -> None:
        payload = {
            "layers": list(self.layers),
            "patch_size": self.patch_size,
            "slices": {
                str(ecc): {
                    "layer_weights": sl.layer_weights,
                    "logistic": sl.logistic.to_dict(),
                    "mse": sl.mse,
                }
                for ecc, sl in self.slices.items()
            },
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CalVggModel":
        payload = json.loads(Path(path).read_text())
        slices = {}
        for ecc, raw in payload["slices"].items():
            logi = raw["logistic"]
            slices[float(ecc)] = CalVggSlice(
                layer_weights=dict(raw["layer_weights"]),
                logistic=LogisticParams(**logi),
                mse=raw["mse"],
            )
        return cls(slices=slices, layers=tuple(payload["layers"]),
                   patch_size=int(payload["patch_size"]))


def distance_matrix(patch_pairs, layers=None, net=None) -> np.ndarray:
    """Rows of per-layer feature distances for (ref, test) pairs."""
    layers = tuple(layers or F.CALIBRATION_LAYERS)
    net = net or F.backbone()
    rows = []
    for ref, test in patch_pairs:
        dists = F.layer_distances(ref, test, layers, net)
        rows.append([float(dists[n].detach()) for n in layers])
    return np.asarray(rows, dtype=np.float64)


def _joint_residual(x, D, probs, n_layers):
    w = x[:n_layers]
    params = LogisticParams(*x[n_layers:])
    return logistic_eval(params, D @ w) - probs


def calibrate_vgg(patch_pairs, probs, eccentricity: float, layers=None, net=None,
                  n_restarts: int = 16, seed: int = 0,
                  distances: np.ndarray | None = None) -> CalVggSlice:
    """Jointly fit nonnegative layer weights and the logistic for one
    eccentricity by minimizing squared probability-prediction error.

    ``distances`` short-circuits feature extraction when the per-pair layer
    distances are already available (rows match ``patch_pairs`` order).
    """
    layers = tuple(layers or F.CALIBRATION_LAYERS)
    D = distance_matrix(patch_pairs, layers, net) if distances is None else np.asarray(distances)
    p = np.asarray(probs, dtype=np.float64)
    if D.shape[0] != p.size:
        raise ValidationError("distances and probabilities differ in length")
    if D.shape[0] < 6 + 1:
        raise ValidationError("too few pairs to identify the joint fit")
    n_layers = D.shape[1]
    mean_d = max(float(D.mean()), 1e-12)
    rng = np.random.default_rng(seed)

    lower = np.concatenate([np.zeros(n_layers), _LOGISTIC_BOUNDS[0]])
    upper = np.concatenate([np.full(n_layers, np.inf), _LOGISTIC_BOUNDS[1]])
    best, best_cost = None, math.inf
    for i in range(n_restarts):
        w0 = rng.uniform(0.2, 1.8, size=n_layers) / (n_layers * mean_d)
        b0 = 10.0 ** rng.uniform(-0.5, 1.0)
        x0 = np.concatenate([w0, [float(p.min()), b0, 1.0, float(p.max()), 1.0, 1.0]])
        x0 = np.clip(x0, lower + 1e-9, np.minimum(upper - 1e-9, 1e9))
        try:
            res = least_squares(
                _joint_residual, x0, args=(D, p, n_layers),
                bounds=(lower, upper), method="trf", max_nfev=4000,
            )
        except Exception:
            continue
        if np.isfinite(res.cost) and res.cost < best_cost:
            best, best_cost = res.x, res.cost
    if best is None:
        raise ConvergenceError("calibration failed in every restart", best=None)
    weights = {name: float(v) for name, v in zip(layers, best[:n_layers])}
    mse = float(2.0 * best_cost / p.size)
    logistic = LogisticParams(*best[n_layers:], mse=mse)
    return CalVggSlice(layer_weights=weights, logistic=logistic, mse=mse)


def _slice_predict(sl: CalVggSlice, distance_row: np.ndarray, layers) -> float:
    t = float(sum(sl.layer_weights[n] * d for n, d in zip(layers, distance_row)))
    y = float(logistic_eval(sl.logistic, t))
    lo, hi = sl.logistic.envelope()
    return float(np.clip(np.clip(y, lo, hi), 0.0, 1.0))


def predict_patch(model: CalVggModel, ref, test, eccentricity: float, net=None,
                  distance_row: np.ndarray | None = None) -> float:
    """Detection probability for one patch at one eccentricity.

    Predictions from the 8 and 20 degree calibrations are blended linearly
    in eccentricity over 8-20 degrees and clamped to the endpoint models
    outside that band.
    """
    if eccentricity < 0:
        raise ValidationError("eccentricity must be >= 0")
    if distance_row is None:
        net = net or F.backbone()
        dists = F.layer_distances(ref, test, model.layers, net)
        distance_row = np.array([float(dists[n].detach()) for n in model.layers])
    eccs = sorted(model.slices)
    lo_ecc, hi_ecc = eccs[0], eccs[-1]
    y_lo = _slice_predict(model.slices[lo_ecc], distance_row, model.layers)
    y_hi = _slice_predict(model.slices[hi_ecc], distance_row, model.layers)
    if eccentricity <= lo_ecc:
        return y_lo
    if eccentricity >= hi_ecc:
        return y_hi
    frac = (eccentricity - lo_ecc) / (hi_ecc - lo_ecc)
    return float((1.0 - frac) * y_lo + frac * y_hi)


def _pad_to_grid(arr: np.ndarray, patch: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph = (patch - h % patch) % patch
    pw = (patch - w % patch) % patch
    if ph or pw:
        arr = np.pad(arr, [(0, ph), (0, pw), (0, 0)], mode="reflect")
    return arr


def predict_full_image(model: CalVggModel, ref_image: ImagePatch, test_image: ImagePatch,
                       gaze, geom: FieldGeometry, net=None) -> float:
    """Patchwise prediction over non-overlapping tiles (reflect-padded at
    borders), each at its center eccentricity, pooled by arithmetic mean."""
    if (ref_image.height, ref_image.width) != (test_image.height, test_image.width):
        raise ValidationError("reference and test image dimensions differ")
    patch = model.patch_size
    if ref_image.height < patch and ref_image.width < patch:
        raise ValidationError("image smaller than one metric patch")
    ref = _pad_to_grid(ref_image.data, patch)
    test = _pad_to_grid(test_image.data, patch)
    net = net or F.backbone()
    preds = []
    for y0 in range(0, ref.shape[0], patch):
        for x0 in range(0, ref.shape[1], patch):
            ecc = pixel_eccentricity(geom, gaze, (x0 + patch / 2, y0 + patch / 2))
            rp = ImagePatch(ref[y0 : y0 + patch, x0 : x0 + patch])
            tp = ImagePatch(test[y0 : y0 + patch, x0 : x0 + patch])
            preds.append(predict_patch(model, rp, tp, ecc, net=net))
    return float(np.mean(preds))


def sweep_far_boundary(model: CalVggModel, method_outputs: dict, boundaries,
                       gaze, geom: FieldGeometry, net=None):
    """Mean predicted detection rate per (method, boundary).

    ``method_outputs`` maps method -> {boundary -> list of (ref, test)
    image pairs}. Missing reconstructions are reported and skipped.
    Returns (rows, skipped) where rows are dicts with method, boundary_deg,
    detection_rate.
    """
    rows, skipped = [], []
    net = net or F.backbone()
    for method in sorted(method_outputs):
        per_boundary = method_outputs[method]
        for boundary in boundaries:
            pairs = per_boundary.get(boundary)
            if not pairs:
                skipped.append((method, boundary))
                continue
            rates = [
                predict_full_image(model, ref, test, gaze, geom, net=net)
                for ref, test in pairs
            ]
            rows.append({
                "method": method,
                "boundary_deg": float(boundary),
                "detection_rate": float(np.mean(rates)),
            })
    return rows, skipped


# ---------------------------------------------------------------------------
# cross-validation and synthetic data


def stratified_folds(eccentricities, k: int, seed: int = 0):
    """Fold indices stratified by eccentricity, deterministic per seed."""
    eccs = np.asarray(eccentricities)
    if eccs.size < k:
        raise ValidationError(f"dataset of {eccs.size} items is too small for {k} folds")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0
    for value in sorted(set(eccs.tolist())):
        idx = np.where(eccs == value)[0]
        rng.shuffle(idx)
        for i in idx:
            folds[cursor % k].append(int(i))
            cursor += 1
    return [sorted(f) for f in folds]


def cross_validate(dataset, fitter, k: int = 5, seed: int = 0):
    """K-fold CV stratified by eccentricity.

    ``dataset`` is a list of (features, probability, eccentricity) items;
    ``fitter(train_items)`` returns a callable mapping an item list to
    predicted probabilities. Returns (per-fold Pearson r list, mean r).
    """
    dataset = list(dataset)
    folds = stratified_folds([item[2] for item in dataset], k, seed)
    if any(not fold for fold in folds):
        raise ValidationError("a fold came out empty; reduce k")
    rs = []
    for i, fold in enumerate(folds):
        hold = set(fold)
        train = [item for j, item in enumerate(dataset) if j not in hold]
        test = [dataset[j] for j in fold]
        predictor = fitter(train)
        preds = np.asarray(predictor(test), dtype=np.float64)
        truth = np.asarray([item[1] for item in test], dtype=np.float64)
        rs.append(pearson_r(preds, truth))
    return rs, float(np.mean(rs))


def synthetic_records(true_threshold: float, eccentricity: float, levels, trials: int,
                      slope: float = 0.35, seed: int = 0) -> list:
    """Binomial records from a smooth decreasing psychometric curve whose
    75% point sits at ``true_threshold``; exercises fit + bootstrap."""
    rng = np.random.default_rng(seed)
    records = []
    for level in levels:
        p = 0.5 + 0.5 / (1.0 + math.exp(slope * (level - true_threshold) / 1.0))
        # p(threshold) = 0.75 by construction; clamp for binomial sanity
        p = min(max(p, 1e-3), 1 - 1e-3)
        hits = int(rng.binomial(trials, p))
        records.append(PsychometricRecord(eccentricity, float(level), hits, trials))
    return records

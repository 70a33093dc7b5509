"""Oscillogram assembly, Gaussian envelope fit and blood-pressure decoding.

Two decoders share the fitted envelope: the fixed-ratio rule (SBP and DBP
where the envelope falls to fixed fractions of its peak) and a linear
regression over envelope features whose coefficients come from a model file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    FitDiverged,
    FlatOscillogram,
    InsufficientData,
    InsufficientLevels,
    InvalidRatio,
    ModelFeatureMismatch,
    SingularDesign,
)
from .ppg import QUALITY_GOOD, QUALITY_POOR

MIN_GOOD_LEVELS = 4
MERGE_WITHIN_MMHG = 5.0
DEFAULT_SYSTOLIC_RATIO = 0.55
DEFAULT_DIASTOLIC_RATIO = 0.70
RESIDUAL_FLAG_THRESHOLD = 0.05
SYSTOLIC_RANGE = (70.0, 180.0)
DIASTOLIC_RANGE = (40.0, 110.0)
RIDGE_LAMBDA = 1e-3
MODEL_SCHEMA_VERSION = 1

FEATURES = ("map", "sigma", "a_max", "heart_rate", "weighted_pressure",
            "amp_minus20", "amp_0", "amp_plus20")
_OFFSETS = {"amp_minus20": -20.0, "amp_0": 0.0, "amp_plus20": 20.0}


@dataclass(frozen=True)
class OscPoint:
    pressure: float
    amplitude: float
    n_beats: int = 0
    quality: str = QUALITY_GOOD
    heart_rate: float = float("nan")
    noise: float = float("nan")  # amplitude that noise alone would give


@dataclass(frozen=True)
class Oscillogram:
    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        ps = [p.pressure for p in self.points]
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ValueError("oscillogram pressures must be strictly increasing")
        if any(p.amplitude < 0 for p in self.points):
            raise ValueError("oscillogram amplitudes must be >= 0")
        if self.n_good < MIN_GOOD_LEVELS:
            raise InsufficientLevels(
                f"{self.n_good} good levels, need at least {MIN_GOOD_LEVELS}")

    @property
    def pressures(self) -> np.ndarray:
        return np.array([p.pressure for p in self.points])

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([p.amplitude for p in self.points])

    @property
    def n_good(self) -> int:
        return sum(p.quality == QUALITY_GOOD for p in self.points)

    @property
    def heart_rate(self) -> float:
        rates = [p.heart_rate for p in self.points
                 if p.quality == QUALITY_GOOD and math.isfinite(p.heart_rate)]
        return float(np.median(rates)) if rates else float("nan")

    @property
    def noise_floor(self) -> float:
        """Median per-level noise amplitude; the smallest amplitude when unknown."""
        noise = [p.noise for p in self.points if math.isfinite(p.noise)]
        if noise:
            return float(np.median(noise))
        return float(self.amplitudes.min())

    def scaled(self, gain: float) -> "Oscillogram":
        return Oscillogram(tuple(replace(p, amplitude=p.amplitude * gain, noise=p.noise * gain)
                                 for p in self.points))

    def shifted(self, delta: float) -> "Oscillogram":
        return Oscillogram(tuple(replace(p, pressure=p.pressure + delta) for p in self.points))


def _median_finite(values) -> float:
    vals = [v for v in values if math.isfinite(v)]
    return float(np.median(vals)) if vals else float("nan")


def build_oscillogram(levels, merge_within: float = MERGE_WITHIN_MMHG) -> Oscillogram:
    """Sort per-level PulseMetrics by pressure, merging levels that nearly coincide."""
    levels = sorted(levels, key=lambda m: m.mean_pressure)
    n_good = sum(m.quality == QUALITY_GOOD for m in levels)
    if n_good < MIN_GOOD_LEVELS:
        raise InsufficientLevels(f"{n_good} good levels, need at least {MIN_GOOD_LEVELS}")
    clusters = []
    for m in levels:
        if clusters and m.mean_pressure - clusters[-1][0].mean_pressure <= merge_within:
            clusters[-1].append(m)
        else:
            clusters.append([m])
    points = []
    for ms in clusters:
        good = [m for m in ms if m.quality == QUALITY_GOOD]
        rates = [m.heart_rate_bpm for m in (good or ms) if math.isfinite(m.heart_rate_bpm)]
        points.append(OscPoint(
            pressure=float(np.median([m.mean_pressure for m in ms])),
            amplitude=float(np.median([m.pulse_amplitude for m in ms])),
            n_beats=sum(m.n_beats for m in ms),
            quality=QUALITY_GOOD if 2 * len(good) >= len(ms) else QUALITY_POOR,
            heart_rate=float(np.median(rates)) if rates else float("nan"),
            noise=_median_finite(getattr(m, "noise_amplitude", float("nan")) for m in ms),
        ))
    return Oscillogram(tuple(points))


@dataclass(frozen=True)
class EnvelopeFit:
    a_max: float
    map: float
    sigma: float
    rms_residual: float
    n_iter: int = 0
    converged: bool = True

    @property
    def relative_residual(self) -> float:
        return self.rms_residual / self.a_max

    def elevated_residual(self, threshold: float = RESIDUAL_FLAG_THRESHOLD) -> bool:
        return self.relative_residual > threshold

    def amplitude(self, pressure):
        return gaussian_envelope(np.asarray(pressure, dtype=float), self.a_max, self.map,
                                 self.sigma)

    def to_dict(self) -> dict:
        return {"a_max": self.a_max, "map": self.map, "sigma": self.sigma,
                "rms_residual": self.rms_residual,
                "relative_residual": self.relative_residual,
                "n_iter": self.n_iter, "converged": self.converged}


def gaussian_envelope(p, a_max, center, sigma):
    return a_max * np.exp(-((p - center) ** 2) / (2.0 * sigma * sigma))


def _levenberg_marquardt(p, y, theta, max_iter, tol):
    """Damped Gauss-Newton from ``theta``; returns (best, cost, iterations, converged)."""

    def residual(th):
        return y - gaussian_envelope(p, *th)

    r = residual(theta)
    cost = float(r @ r)
    best, best_cost = theta.copy(), cost
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        a, m, s = theta
        e = np.exp(-((p - m) ** 2) / (2 * s * s))
        jac = np.column_stack([e, a * e * (p - m) / s ** 2, a * e * (p - m) ** 2 / s ** 3])
        jtj = jac.T @ jac
        g = jac.T @ r
        step = None
        while lam < 1e12:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = theta + step
            r_trial = residual(trial)
            c_trial = float(r_trial @ r_trial)
            if np.isfinite(c_trial) and c_trial <= cost:
                theta, r, cost = trial, r_trial, c_trial
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 3.0
        else:
            break
        if not np.all(np.isfinite(theta)):
            raise FitDiverged("envelope parameters became non-finite")
        if cost < best_cost:
            best, best_cost = theta.copy(), cost
        if np.max(np.abs(step) / np.maximum(np.abs(theta), 1e-12)) < tol or cost == 0.0:
            converged = True
            break
    return best, best_cost, it, converged


def fit_envelope(osc: Oscillogram, max_iter: int = 200, tol: float = 1e-8,
                 include_poor: bool = True) -> EnvelopeFit:
    """Levenberg-Marquardt fit of ``A * exp(-(P - MAP)^2 / (2 sigma^2))``.

    The primary start is A = max amplitude, MAP = its pressure and sigma =
    half the pressure span. A peak much narrower than the level spacing can
    lead that start into a far-off broad tail, so the fit is also run from a
    quarter and an eighth of the span, and the lowest-cost valid result wins.

    An oscillogram whose peak is under three times its noise floor (see
    :attr:`Oscillogram.noise_floor`) carries no usable envelope.
    """
    pts = [p for p in osc.points if include_poor or p.quality == QUALITY_GOOD]
    p = np.array([q.pressure for q in pts])
    y = np.array([q.amplitude for q in pts])
    floor = osc.noise_floor
    if y.max() <= 3.0 * floor or y.max() <= 0:
        raise FlatOscillogram(f"peak amplitude {y.max():.4g} is within 3x the floor {floor:.4g}")

    span = p.max() - p.min()
    a0, m0 = y.max(), p[np.argmax(y)]
    found, error = None, None
    for s0 in (0.5 * span, 0.25 * span, 0.125 * span):
        try:
            best, cost, it, converged = _levenberg_marquardt(
                p, y, np.array([a0, m0, s0]), max_iter, tol)
        except FitDiverged as exc:
            error = exc
            continue
        a, m, s = best
        s = abs(s)
        if not (np.all(np.isfinite(best)) and a > 0 and s > 0):
            error = FitDiverged(f"fit ended at non-physical parameters {best}")
        elif not (p.min() - s <= m <= p.max() + s):
            error = FitDiverged(f"envelope peak {m:.1f} mmHg is not bracketed by the levels")
        elif found is None or cost < found[1]:
            found = ((a, m, s), cost, it, converged)
    if found is None:
        raise error
    (a, m, s), cost, it, converged = found
    rms = float(np.sqrt(cost / y.size))
    return EnvelopeFit(float(a), float(m), float(s), rms, it, converged)


@dataclass(frozen=True)
class BpEstimate:
    systolic: float
    diastolic: float
    map: float
    heart_rate_bpm: float
    method: str
    confidence: float
    in_validity_range: bool
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {"systolic": self.systolic, "diastolic": self.diastolic, "map": self.map,
                "heart_rate_bpm": None if math.isnan(self.heart_rate_bpm) else self.heart_rate_bpm,
                "method": self.method, "confidence": self.confidence,
                "in_validity_range": self.in_validity_range, "flags": list(self.flags)}


def in_validity_range(systolic: float, diastolic: float) -> bool:
    return (SYSTOLIC_RANGE[0] <= systolic <= SYSTOLIC_RANGE[1]
            and DIASTOLIC_RANGE[0] <= diastolic <= DIASTOLIC_RANGE[1])


def _fit_confidence(fit: EnvelopeFit, threshold: float) -> tuple[float, list]:
    flags = []
    rel = fit.relative_residual
    if rel > threshold:
        flags.append("elevated_residual")
    if not fit.converged:
        flags.append("not_converged")
    # falls to zero at four times the flag threshold
    confidence = max(0.0, 1.0 - rel / (4.0 * threshold))
    if not fit.converged:
        confidence *= 0.5
    return confidence, flags


def ratio_offset(ratio: float) -> float:
    """Distance from the peak, in sigmas, where the envelope equals ``ratio`` of it."""
    return math.sqrt(2.0 * math.log(1.0 / ratio))


def estimate_fixed_ratio(fit: EnvelopeFit, r_s: float = DEFAULT_SYSTOLIC_RATIO,
                         r_d: float = DEFAULT_DIASTOLIC_RATIO,
                         heart_rate: float = float("nan"),
                         residual_threshold: float = RESIDUAL_FLAG_THRESHOLD) -> BpEstimate:
    """SBP above and DBP below MAP where the envelope drops to r_s and r_d of its peak."""
    for name, r in (("r_s", r_s), ("r_d", r_d)):
        if not 0.0 < r <= 1.0:
            raise InvalidRatio(f"{name} must lie in (0, 1], got {r}")
    sbp = fit.map + fit.sigma * ratio_offset(r_s)
    dbp = fit.map - fit.sigma * ratio_offset(r_d)
    confidence, flags = _fit_confidence(fit, residual_threshold)
    if r_s == 1.0 or r_d == 1.0:
        flags.append("degenerate_ratio")
        confidence = 0.0
    return BpEstimate(sbp, dbp, fit.map, float(heart_rate), "fixed_ratio", confidence,
                      in_validity_range(sbp, dbp), tuple(flags))


# regression ---------------------------------------------------------------

def compute_features(osc: Oscillogram, fit: EnvelopeFit) -> dict:
    p, a = osc.pressures, osc.amplitudes
    feats = {
        "map": fit.map,
        "sigma": fit.sigma,
        "a_max": fit.a_max,
        "heart_rate": osc.heart_rate,
        "weighted_pressure": float(np.sum(a * p) / np.sum(a)),
    }
    for name, off in _OFFSETS.items():
        feats[name] = float(np.interp(fit.map + off, p, a) / fit.a_max)
    return feats


@dataclass
class RegressionHead:
    coefficients: tuple
    intercept: float


@dataclass
class RegressionModel:
    """Two linear heads over z-scored named features."""

    features: tuple
    means: tuple
    scales: tuple
    systolic: RegressionHead
    diastolic: RegressionHead
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = tuple(self.features)
        n = len(self.features)
        for name in ("means", "scales"):
            if len(getattr(self, name)) != n:
                raise ModelFeatureMismatch(f"{name} has {len(getattr(self, name))} entries "
                                           f"for {n} features")
        for head in (self.systolic, self.diastolic):
            if len(head.coefficients) != n:
                raise ModelFeatureMismatch(
                    f"head has {len(head.coefficients)} coefficients for {n} features")
        if any(s <= 0 for s in self.scales):
            raise ModelFeatureMismatch("feature scales must be positive")

    def _vector(self, feats: dict) -> np.ndarray:
        missing = [f for f in self.features if f not in feats]
        if missing:
            raise ModelFeatureMismatch(f"features not available: {missing}")
        x = np.array([feats[f] for f in self.features], dtype=float)
        if not np.all(np.isfinite(x)):
            bad = [f for f, v in zip(self.features, x) if not np.isfinite(v)]
            raise ModelFeatureMismatch(f"features not computable: {bad}")
        return (x - np.array(self.means)) / np.array(self.scales)

    def predict(self, feats: dict) -> tuple[float, float]:
        z = self._vector(feats)
        sbp = float(z @ np.array(self.systolic.coefficients) + self.systolic.intercept)
        dbp = float(z @ np.array(self.diastolic.coefficients) + self.diastolic.intercept)
        return sbp, dbp

    @classmethod
    def fixed_ratio_equivalent(cls, r_s=DEFAULT_SYSTOLIC_RATIO, r_d=DEFAULT_DIASTOLIC_RATIO):
        """Model reproducing the fixed-ratio decode from MAP and sigma alone."""
        return cls(("map", "sigma"), (0.0, 0.0), (1.0, 1.0),
                   RegressionHead((1.0, ratio_offset(r_s)), 0.0),
                   RegressionHead((1.0, -ratio_offset(r_d)), 0.0),
                   {"source": "fixed_ratio_equivalent", "r_s": r_s, "r_d": r_d})

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "features": list(self.features),
            "means": list(self.means),
            "scales": list(self.scales),
            "heads": {
                "systolic": {"coefficients": list(self.systolic.coefficients),
                             "intercept": self.systolic.intercept},
                "diastolic": {"coefficients": list(self.diastolic.coefficients),
                              "intercept": self.diastolic.intercept},
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionModel":
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ModelFeatureMismatch(f"unsupported model schema_version {d.get('schema_version')}")
        heads = d["heads"]
        return cls(tuple(d["features"]), tuple(d["means"]), tuple(d["scales"]),
                   RegressionHead(tuple(heads["systolic"]["coefficients"]),
                                  float(heads["systolic"]["intercept"])),
                   RegressionHead(tuple(heads["diastolic"]["coefficients"]),
                                  float(heads["diastolic"]["intercept"])),
                   dict(d.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RegressionModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def estimate_regression(osc: Oscillogram, fit: EnvelopeFit, model: RegressionModel,
                        residual_threshold: float = RESIDUAL_FLAG_THRESHOLD) -> BpEstimate:
    feats = compute_features(osc, fit)
    sbp, dbp = model.predict(feats)
    confidence, flags = _fit_confidence(fit, residual_threshold)
    if not dbp < fit.map < sbp:
        flags.append("order_violation")
        confidence = 0.0
    return BpEstimate(sbp, dbp, fit.map, osc.heart_rate, "regression", confidence,
                      in_validity_range(sbp, dbp), tuple(flags))


@dataclass(frozen=True)
class LabeledExample:
    features: dict
    systolic: float
    diastolic: float

    @classmethod
    def from_fit(cls, osc: Oscillogram, fit: EnvelopeFit, systolic, diastolic):
        return cls(compute_features(osc, fit), float(systolic), float(diastolic))


def train_regression(examples, features=FEATURES, ridge: float = RIDGE_LAMBDA,
                     metadata: dict | None = None) -> RegressionModel:
    """Ridge least squares on z-scored features, intercepts unpenalized.

    Deterministic for a fixed example order. Training MAE per head is stored
    in ``metadata["train_mae"]``.
    """
    examples = list(examples)
    features = tuple(features)
    need = 10 * len(features)
    if len(examples) < need:
        raise InsufficientData(f"{len(examples)} labeled sessions, need at least {need}")
    try:
        x = np.array([[ex.features[f] for f in features] for ex in examples], dtype=float)
    except KeyError as exc:
        raise ModelFeatureMismatch(f"feature {exc} missing from a training example") from None
    if not np.all(np.isfinite(x)):
        raise ModelFeatureMismatch("non-finite training features")
    ys = np.array([ex.systolic for ex in examples])
    yd = np.array([ex.diastolic for ex in examples])

    means = x.mean(axis=0)
    scales = x.std(axis=0)
    scales[scales == 0] = 1.0
    z = (x - means) / scales
    gram = z.T @ z + ridge * np.eye(len(features))
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > 1e14:
        raise SingularDesign("design matrix is numerically singular")
    heads, mae = {}, {}
    for name, y in (("systolic", ys), ("diastolic", yd)):
        intercept = float(y.mean())
        coef = np.linalg.solve(gram, z.T @ (y - intercept))
        heads[name] = RegressionHead(tuple(float(c) for c in coef), intercept)
        mae[name] = float(np.mean(np.abs(z @ coef + intercept - y)))
    meta = {"n_train": len(examples), "ridge": ridge, "train_mae": mae}
    meta.update(metadata or {})
    return RegressionModel(features, tuple(float(m) for m in means),
                           tuple(float(s) for s in scales), heads["systolic"],
                           heads["diastolic"], meta)

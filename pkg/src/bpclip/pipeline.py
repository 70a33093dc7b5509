"""End-to-end composition: samples or frames -> protocol -> oscillogram -> estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .device import DeviceProfile
from .errors import (
    EXIT_ABORTED,
    EXIT_OK,
    EXIT_QUALITY,
    EmptyOutput,
    InvalidRatio,
    OscillometryError,
)
from .frames import DetectionParams, ExtractionResult, check_drop_rate, iter_samples
from .oscillometry import (
    DEFAULT_DIASTOLIC_RATIO,
    DEFAULT_SYSTOLIC_RATIO,
    RESIDUAL_FLAG_THRESHOLD,
    BpEstimate,
    EnvelopeFit,
    Oscillogram,
    RegressionModel,
    build_oscillogram,
    estimate_fixed_ratio,
    estimate_regression,
    fit_envelope,
)
from .protocol import ABORTED, COMPLETE, MeasurementSession, SessionConfig, finalize

RESULT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DecodeOptions:
    r_s: float = DEFAULT_SYSTOLIC_RATIO
    r_d: float = DEFAULT_DIASTOLIC_RATIO
    model: RegressionModel | None = None
    residual_threshold: float = RESIDUAL_FLAG_THRESHOLD
    include_poor_levels: bool = True

    def __post_init__(self):
        for name in ("r_s", "r_d"):
            r = getattr(self, name)
            if not 0.0 < r <= 1.0:
                raise InvalidRatio(f"{name} must lie in (0, 1], got {r}")


@dataclass
class AnalysisResult:
    status: str  # ok | aborted | quality_failure
    reason: str | None = None
    estimate: BpEstimate | None = None
    fit: EnvelopeFit | None = None
    oscillogram: Oscillogram | None = None
    levels: list = field(default_factory=list)
    session: MeasurementSession | None = None
    extraction: ExtractionResult | None = None

    @property
    def exit_code(self) -> int:
        return {"ok": EXIT_OK, "aborted": EXIT_ABORTED}.get(self.status, EXIT_QUALITY)

    def to_dict(self) -> dict:
        doc = {"schema_version": RESULT_SCHEMA_VERSION, "status": self.status}
        if self.reason is not None:
            doc["reason"] = self.reason
        if self.estimate is not None:
            doc["estimate"] = self.estimate.to_dict()
        if self.fit is not None:
            doc["envelope"] = self.fit.to_dict()
        doc["levels"] = [_finite(m.to_dict()) for m in self.levels]
        if self.oscillogram is not None:
            doc["oscillogram"] = [
                {"pressure_mmHg": p.pressure, "amplitude": p.amplitude, "n_beats": p.n_beats,
                 "quality": p.quality} for p in self.oscillogram.points]
        if self.extraction is not None:
            doc["frames"] = {"total": self.extraction.n_frames,
                             "dropped": self.extraction.n_dropped,
                             "drops": dict(sorted(self.extraction.drops.items()))}
        if self.session is not None:
            st = self.session.state
            doc["protocol"] = {"phase": st.phase, "level": st.level,
                               "attempts": list(st.attempts), "captures": len(st.captures)}
        return doc


def _finite(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for k, v in d.items()}


def _estimate(osc, fit, options: DecodeOptions) -> BpEstimate:
    if options.model is not None:
        return estimate_regression(osc, fit, options.model, options.residual_threshold)
    return estimate_fixed_ratio(fit, options.r_s, options.r_d, osc.heart_rate,
                                options.residual_threshold)


def decode(levels, options: DecodeOptions | None = None):
    """Per-level metrics -> (oscillogram, fit, estimate). Raises OscillometryError."""
    options = options or DecodeOptions()
    osc = build_oscillogram(levels)
    fit = fit_envelope(osc, include_poor=options.include_poor_levels)
    return osc, fit, _estimate(osc, fit, options)


def analyze_samples(samples, config: SessionConfig | None = None,
                    options: DecodeOptions | None = None,
                    extraction: ExtractionResult | None = None) -> AnalysisResult:
    """Replay samples through the protocol and decode the completed session."""
    session = MeasurementSession(config)
    session.run(samples)
    result = AnalysisResult("ok", session=session, extraction=extraction)
    state = session.state
    if extraction is not None:
        try:
            check_drop_rate(extraction)
        except EmptyOutput as exc:
            result.status, result.reason = "quality_failure", f"empty_output: {exc}"
            return result
    if state.phase == ABORTED:
        result.status, result.reason = "aborted", state.abort_reason
        return result
    if state.phase != COMPLETE:
        result.status, result.reason = "aborted", "trace_ended"
        return result
    options = options or DecodeOptions()
    result.levels = finalize(state)
    try:
        result.oscillogram = build_oscillogram(result.levels)
        result.fit = fit_envelope(result.oscillogram, include_poor=options.include_poor_levels)
        result.estimate = _estimate(result.oscillogram, result.fit, options)
    except OscillometryError as exc:
        # bad ratios or a mismatched model are usage errors, not signal quality
        if exc.exit_code != EXIT_QUALITY:
            raise
        result.status = "quality_failure"
        result.reason = f"{type(exc).__name__}: {exc}"
    return result


def analyze_frames(frames, profile: DeviceProfile, config: SessionConfig | None = None,
                   options: DecodeOptions | None = None,
                   detection: DetectionParams | None = None) -> AnalysisResult:
    """Stream frames through detection and the protocol.

    Frames after the session terminates are neither read nor detected.
    """
    extraction = ExtractionResult([])
    samples = iter_samples(frames, profile, detection, extraction)
    return analyze_samples(samples, config, options, extraction)


def mean_absolute_errors(pairs) -> tuple[float, float]:
    """MAE of (systolic, diastolic) over ``(subject, result)`` pairs; failures count as NaN."""
    es, ed = [], []
    for subject, result in pairs:
        if result.estimate is None:
            es.append(np.nan)
            ed.append(np.nan)
            continue
        es.append(abs(result.estimate.systolic - subject.true_systolic))
        ed.append(abs(result.estimate.diastolic - subject.true_diastolic))
    return float(np.mean(es)), float(np.mean(ed))

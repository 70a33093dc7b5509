"""Digital twin: synthetic subjects, pressing traces, brightness series and frames.

A subject's pulse amplitude follows a Gaussian envelope over applied
pressure, peaking at MAP = DBP + (SBP - DBP) / 3. The envelope width is tied
to pulse pressure (``sigma = sigma_per_pp * PP``) so that one pair of ratios
decodes every subject exactly; see :func:`matched_ratios`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .device import (
    DeviceProfile,
    PressureSample,
    distance_to_projection,
    light_transmission,
    pressure_to_distance,
)
from .errors import DiscExceedsFrame, InconsistentConfig, NonPhysicalDistance
from .frames import Frame, dequantize16, quantize16
from .ppg import MIN_RATE_HZ
from .protocol import SessionConfig

BACKGROUND_LEVEL = 10.0
DEFAULT_SIGMA_PER_PP = 0.8
# fraction of the beat period spent on the upstroke
BEAT_RISE_FRACTION = 0.2


@dataclass(frozen=True)
class SyntheticSubject:
    true_systolic: float
    true_diastolic: float
    heart_rate_bpm: float = 72.0
    envelope_sigma: float | None = None  # mmHg; sigma_per_pp * PP when omitted
    baseline_brightness: float = 120.0
    pulse_gain: float = 15.0
    noise_sd: float = 0.0
    # > 0 widens the high-pressure side and narrows the low side
    envelope_skew: float = 0.0
    sigma_per_pp: float = DEFAULT_SIGMA_PER_PP

    def __post_init__(self):
        if not self.true_diastolic < self.true_systolic:
            raise InconsistentConfig("diastolic pressure must be below systolic")
        if self.true_diastolic <= 0:
            raise InconsistentConfig("diastolic pressure must be positive")
        if not 20 <= self.heart_rate_bpm <= 240:
            raise InconsistentConfig("heart rate must lie in 20-240 bpm")
        if not -1 < self.envelope_skew < 1:
            raise InconsistentConfig("envelope_skew must lie in (-1, 1)")
        if self.noise_sd < 0 or self.pulse_gain < 0:
            raise InconsistentConfig("noise_sd and pulse_gain must be >= 0")
        if not 0 <= self.baseline_brightness <= 255:
            raise InconsistentConfig("baseline brightness must lie in 0-255")
        if self.envelope_sigma is None:
            object.__setattr__(self, "envelope_sigma",
                               self.sigma_per_pp * (self.true_systolic - self.true_diastolic))
        if self.envelope_sigma <= 0:
            raise InconsistentConfig("envelope sigma must be positive")

    @property
    def true_map(self) -> float:
        return self.true_diastolic + (self.true_systolic - self.true_diastolic) / 3.0


def matched_ratios(sigma_per_pp: float = DEFAULT_SIGMA_PER_PP) -> tuple[float, float]:
    """(r_s, r_d) that invert the twin envelope exactly.

    SBP - MAP = 2PP/3 and MAP - DBP = PP/3; with sigma = k*PP the envelope
    ratios at those offsets are exp(-(2/(3k))^2 / 2) and exp(-(1/(3k))^2 / 2).
    """
    k = sigma_per_pp
    return math.exp(-0.5 * (2.0 / (3.0 * k)) ** 2), math.exp(-0.5 * (1.0 / (3.0 * k)) ** 2)


def envelope_model(pressure, subject: SyntheticSubject):
    """Pulse amplitude (brightness units) at applied pressure ``pressure``."""
    p = np.asarray(pressure, dtype=float)
    sigma = np.where(p >= subject.true_map,
                     subject.envelope_sigma * (1 + subject.envelope_skew),
                     subject.envelope_sigma * (1 - subject.envelope_skew))
    out = subject.pulse_gain * np.exp(-((p - subject.true_map) ** 2) / (2 * sigma ** 2))
    return float(out) if out.ndim == 0 else out


def pulse_wave(t, heart_rate_bpm: float, phase: float = 0.0) -> np.ndarray:
    """Unit peak-to-trough beat train: raised-cosine upstroke over the first
    20% of each beat, raised-cosine decay over the rest."""
    u = np.mod(np.asarray(t, dtype=float) * heart_rate_bpm / 60.0 + phase, 1.0)
    r = BEAT_RISE_FRACTION
    rise = 0.5 * (1 - np.cos(np.pi * u / r))
    fall = 0.5 * (1 + np.cos(np.pi * (u - r) / (1 - r)))
    return np.where(u < r, rise, fall)


@dataclass(frozen=True)
class TwinParams:
    frame_rate: float = 30.0
    rest_seconds: float = 1.0
    ramp_seconds: float = 1.0
    # hold time beyond readings_per_level * dwell
    hold_margin_seconds: float = 0.75
    release_seconds: float = 1.0
    jitter_sd: float = 0.0  # mmHg, smooth tremor during holds
    jitter_tau: float = 0.4  # s, tremor correlation time
    hold_offset_max: float = 0.0  # mmHg, per-hold aim error bound
    max_deviation_fraction: float = 0.7  # of hold_tolerance
    light_budget: bool = False
    frame_margin_px: int = 8


@dataclass(frozen=True, eq=False)
class SyntheticSession:
    subject: SyntheticSubject
    profile: DeviceProfile
    config: SessionConfig
    params: TwinParams
    seed: int
    t: np.ndarray
    pressure: np.ndarray
    brightness: np.ndarray
    center: tuple
    image_size: tuple

    @property
    def samples(self) -> list:
        d = self.profile.projection_constant / self.distances
        return [PressureSample(float(t), float(p), float(b), float(dd))
                for t, p, b, dd in zip(self.t, self.pressure, self.brightness, d)]

    @property
    def distances(self) -> np.ndarray:
        return np.array([pressure_to_distance(p, self.profile) for p in self.pressure])

    def iter_frames(self, bit_depth: int | None = 16):
        """Render frames lazily; identical on every call.

        ``bit_depth`` 16 matches what reading back a 16-bit PGM export gives.
        """
        for t, z, b in zip(self.t, self.distances, self.brightness):
            yield render_frame(z, b, self.profile, self.image_size, center=self.center,
                               timestamp=float(t), bit_depth=bit_depth)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10 - 15 * u + 6 * u * u)


def pressure_trace(config: SessionConfig, params: TwinParams, rng: np.random.Generator):
    """Open-loop press schedule: rest, then ramp-and-hold at each target, then release."""
    fs = params.frame_rate
    hold = config.readings_per_level * config.dwell_seconds + params.hold_margin_seconds
    level_len = params.ramp_seconds + hold
    total = params.rest_seconds + config.n_levels * level_len + params.release_seconds
    t = np.arange(int(round(total * fs))) / fs
    p = np.zeros_like(t)
    dev_cap = params.max_deviation_fraction * config.hold_tolerance
    offsets = rng.uniform(-1, 1, config.n_levels) * min(params.hold_offset_max, dev_cap)

    # smooth tremor: first-order low-pass of white noise, scaled to jitter_sd
    alpha = math.exp(-1.0 / (fs * params.jitter_tau))
    white = rng.standard_normal(t.size)
    tremor = np.empty_like(t)
    acc = 0.0
    for i, w in enumerate(white):
        acc = alpha * acc + math.sqrt(1 - alpha * alpha) * w
        tremor[i] = acc
    tremor *= params.jitter_sd

    prev = 0.0
    for k, target in enumerate(config.pressure_targets):
        aim = target + offsets[k]
        start = params.rest_seconds + k * level_len
        u = (t - start) / params.ramp_seconds
        seg = (t >= start) & (t < start + level_len)
        ramp = _smoothstep(u[seg])
        # total deviation from the target stays inside dev_cap
        dev = np.clip(offsets[k] + tremor[seg], -dev_cap, dev_cap) - offsets[k]
        p[seg] = prev + (aim - prev) * ramp + dev * ramp
        prev = float(p[seg][-1]) if seg.any() else aim
    end = params.rest_seconds + config.n_levels * level_len
    tail = t >= end
    p[tail] = prev * (1 - _smoothstep((t[tail] - end) / params.release_seconds))
    return t, np.maximum(p, 0.0)


def auto_image_size(profile: DeviceProfile, config: SessionConfig, params: TwinParams):
    top = config.pressure_targets[-1] + config.hold_tolerance
    d = distance_to_projection(pressure_to_distance(top, profile), profile)
    side = int(math.ceil((d + 2 * params.frame_margin_px) / 8.0)) * 8
    return side, side


def simulate_session(subject: SyntheticSubject, profile: DeviceProfile | None = None,
                     config: SessionConfig | None = None, seed: int = 0,
                     params: TwinParams | None = None) -> SyntheticSession:
    """Ground-truth pressing session for one subject; bit-identical per seed."""
    profile = profile or DeviceProfile()
    config = config or SessionConfig()
    params = params or TwinParams()
    top = config.pressure_targets[-1] + config.hold_tolerance
    try:
        z_top = pressure_to_distance(top, profile)
    except NonPhysicalDistance:
        raise InconsistentConfig(f"{top} mmHg is beyond the spring travel") from None
    if z_top < config.min_distance_mm:
        raise InconsistentConfig(
            f"target {top:.0f} mmHg needs z={z_top:.2f} mm, below the "
            f"{config.min_distance_mm} mm end stop")
    if profile.rest_distance_z0 <= config.min_distance_mm:
        raise InconsistentConfig("rest distance must exceed the minimum travel distance")
    if params.frame_rate < MIN_RATE_HZ:
        raise InconsistentConfig(f"frame rate must be at least {MIN_RATE_HZ} Hz")

    rng = np.random.default_rng(seed)
    t, pressure = pressure_trace(config, params, rng)
    phase = float(rng.uniform())
    noise = rng.standard_normal(t.size) * subject.noise_sd
    center_jitter = rng.uniform(-0.5, 0.5, 2)

    gain = light_transmission(profile) if params.light_budget else 1.0
    clean = subject.baseline_brightness + envelope_model(pressure, subject) * pulse_wave(
        t, subject.heart_rate_bpm, phase)
    brightness = np.clip(gain * clean + noise, 0.0, 255.0)

    size = auto_image_size(profile, config, params)
    center = ((size[0] - 1) / 2 + float(center_jitter[0]), (size[1] - 1) / 2 + float(center_jitter[1]))
    return SyntheticSession(subject, profile, config, params, seed, t, pressure, brightness,
                            center, size)


@lru_cache(maxsize=8)
def _distance_grid(width, height, cx, cy):
    yy, xx = np.mgrid[0:height, 0:width]
    grid = np.hypot(xx - cx, yy - cy).astype(np.float32)
    grid.setflags(write=False)
    return grid


def render_frame(z: float, brightness: float, profile: DeviceProfile, image_size=(168, 168),
                 center=None, timestamp: float = 0.0, background: float = BACKGROUND_LEVEL,
                 bit_depth: int | None = 8) -> Frame:
    """Anti-aliased disc of diameter f*a/z with a 1-px linear soft edge.

    ``bit_depth`` 8 gives uint8 pixels. 16 gives intensities on the 0-255
    scale quantized to 1/257 steps, exactly as a 16-bit PGM reads back.
    None leaves the float32 intensities unquantized.
    """
    if not 0 < z <= profile.rest_distance_z0 + 1e-9:
        raise NonPhysicalDistance(f"z={z} mm is outside (0, z0]")
    width, height = image_size
    if center is None:
        center = ((width - 1) / 2, (height - 1) / 2)
    cx, cy = center
    radius = 0.5 * distance_to_projection(z, profile)
    if cx - radius - 1 < 0 or cy - radius - 1 < 0 or cx + radius + 1 > width - 1 \
            or cy + radius + 1 > height - 1:
        raise DiscExceedsFrame(f"disc of radius {radius:.1f} px does not fit {width}x{height}")
    # coverage = clip(radius + 0.5 - distance, 0, 1), built in place
    pixels = np.subtract(np.float32(radius + 0.5), _distance_grid(width, height, float(cx), float(cy)))
    np.clip(pixels, 0.0, 1.0, out=pixels)
    pixels *= np.float32(brightness - background)
    pixels += np.float32(background)
    if bit_depth == 8:
        pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    elif bit_depth == 16:
        pixels = dequantize16(quantize16(pixels))
    elif bit_depth is not None:
        raise ValueError("bit_depth must be 8, 16 or None")
    return Frame(pixels, timestamp)


def make_cohort(n: int, seed: int = 0, noise_sd: float = 0.0, pp_range=(25.0, 70.0),
                sbp_range=(88.0, 157.0), dbp_range=(57.0, 97.0), envelope_skew: float = 0.0,
                sigma_per_pp: float = DEFAULT_SIGMA_PER_PP,
                gain_range=(20.0, 35.0)) -> list[SyntheticSubject]:
    """Subjects with SBP and DBP uniform over the given ranges.

    Draws whose pulse pressure falls outside ``pp_range`` are rejected.
    """
    rng = np.random.default_rng(seed)
    subjects = []
    while len(subjects) < n:
        sbp = rng.uniform(*sbp_range)
        dbp = rng.uniform(*dbp_range)
        hr = rng.uniform(55.0, 95.0)
        baseline = rng.uniform(100.0, 140.0)
        gain = rng.uniform(*gain_range)
        if not pp_range[0] <= sbp - dbp <= pp_range[1]:
            continue
        subjects.append(SyntheticSubject(sbp, dbp, hr, None, baseline, gain, noise_sd,
                                         envelope_skew, sigma_per_pp))
    return subjects

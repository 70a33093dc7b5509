"""Guided stepwise-pressing session.

The user is prompted through strictly increasing pressure targets, holding
each one inside a tolerance band for a dwell period, possibly several times
per level. The lowest level is the hardest to hold, so the session starts
there and gives up quickly if it cannot be held.

``advance`` is a pure transition function: the same sample trace always
produces the same sequence of states and prompts.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .device import PressureSample
from .errors import InvalidConfig, NotComplete, ProtocolError, SessionTerminated, SignalError
from .ppg import DEFAULT_PASSBAND, QUALITY_GOOD, QUALITY_POOR, PulseMetrics, analyze_window

IDLE = "idle"
PROMPTING = "prompting"
HOLDING = "holding"
CAPTURED = "captured"
COMPLETE = "complete"
ABORTED = "aborted"

PRESS_HARDER = "press_harder"
PRESS_SOFTER = "press_softer"
HOLD_STEADY = "hold_steady"
RELEASE = "release"
DONE = "done"
ABORT = "abort"

FIRST_LEVEL_FAILURE = "first_level_failure"
LEVEL_FAILURE = "level_failure"


def default_targets(n_levels: int = 6, low: float = 40.0, high: float = 190.0) -> tuple:
    return tuple(float(v) for v in np.linspace(low, high, n_levels))


@dataclass(frozen=True)
class SessionConfig:
    n_levels: int = 6
    pressure_targets: tuple = None  # mmHg; evenly spaced over 40-190 when omitted
    hold_tolerance: float = 8.0  # +/- mmHg
    dwell_seconds: float = 5.0
    readings_per_level: int = 2
    max_attempts_first_level: int = 2
    max_attempts_other: int = 3
    # an attempt also fails when the band is not reached within this time
    prompt_timeout_seconds: float = 15.0
    # pressures above this draw a release prompt
    max_safe_pressure: float = 250.0
    require_good_ppg: bool = False
    min_distance_mm: float = 4.0  # mechanical end stop of the pinhole travel
    passband: tuple = DEFAULT_PASSBAND

    def __post_init__(self):
        if self.pressure_targets is None:
            object.__setattr__(self, "pressure_targets", default_targets(self.n_levels))
        else:
            object.__setattr__(self, "pressure_targets",
                               tuple(float(v) for v in self.pressure_targets))
        object.__setattr__(self, "passband", tuple(float(v) for v in self.passband))
        targets = self.pressure_targets
        if self.n_levels < 4:
            raise InvalidConfig("at least 4 force levels are required")
        if len(targets) != self.n_levels:
            raise InvalidConfig(f"{len(targets)} targets given for {self.n_levels} levels")
        if any(b <= a for a, b in zip(targets, targets[1:])):
            raise InvalidConfig("pressure targets must be strictly increasing")
        if targets[0] <= 0:
            raise InvalidConfig("pressure targets must be positive")
        if self.dwell_seconds < 3.0:
            raise InvalidConfig("dwell must be at least 3 s for pulse extraction")
        if self.hold_tolerance <= 0:
            raise InvalidConfig("hold tolerance must be positive")
        if self.readings_per_level < 1:
            raise InvalidConfig("readings_per_level must be >= 1")
        if self.max_attempts_first_level < 1 or self.max_attempts_other < 1:
            raise InvalidConfig("attempt caps must be >= 1")
        if self.prompt_timeout_seconds <= 0:
            raise InvalidConfig("prompt timeout must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pressure_targets"] = list(self.pressure_targets)
        d["passband"] = list(self.passband)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        d = dict(d)
        if "pressure_targets" in d and "n_levels" not in d and d["pressure_targets"] is not None:
            d["n_levels"] = len(d["pressure_targets"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def max_attempts(self, level: int) -> int:
        return self.max_attempts_first_level if level == 0 else self.max_attempts_other


@dataclass(frozen=True)
class Prompt:
    kind: str
    level: int | None = None
    target: float | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class Capture:
    level: int
    reading: int
    t_start: float
    t_end: float
    metrics: PulseMetrics


@dataclass(frozen=True)
class SessionState:
    config: SessionConfig = field(default_factory=SessionConfig)
    phase: str = IDLE
    level: int = 0
    reading: int = 0  # captures completed at the current level
    phase_start: float = 0.0
    attempts: tuple = ()
    captures: tuple = ()
    window: tuple = ()
    abort_reason: str | None = None
    last_t: float | None = None

    @property
    def terminal(self) -> bool:
        return self.phase in (COMPLETE, ABORTED)

    @property
    def target(self) -> float:
        return self.config.pressure_targets[self.level]

    def attempts_at(self, level: int) -> int:
        return self.attempts[level] if level < len(self.attempts) else 0


def new_session(config: SessionConfig | None = None) -> SessionState:
    config = config or SessionConfig()
    return SessionState(config=config, attempts=(0,) * config.n_levels)


def check_fail_fast(state: SessionState) -> str | None:
    """Abort reason once the current level has used up its attempts, else None."""
    if state.attempts_at(state.level) >= state.config.max_attempts(state.level):
        return FIRST_LEVEL_FAILURE if state.level == 0 else LEVEL_FAILURE
    return None


def _direction(state: SessionState, pressure: float) -> Prompt:
    cfg = state.config
    if pressure > cfg.max_safe_pressure:
        return Prompt(RELEASE, state.level, state.target)
    if pressure < state.target:
        return Prompt(PRESS_HARDER, state.level, state.target)
    return Prompt(PRESS_SOFTER, state.level, state.target)


def _in_band(state: SessionState, pressure: float) -> bool:
    return abs(pressure - state.target) <= state.config.hold_tolerance


def _fail_attempt(state: SessionState, sample: PressureSample):
    attempts = list(state.attempts)
    attempts[state.level] += 1
    state = replace(state, attempts=tuple(attempts), window=())
    reason = check_fail_fast(state)
    if reason is not None:
        state = replace(state, phase=ABORTED, abort_reason=reason)
        return state, Prompt(ABORT, state.level, state.target, reason)
    state = replace(state, phase=PROMPTING, phase_start=sample.t)
    return state, _direction(state, sample.pressure)


def _prompting(state: SessionState, sample: PressureSample):
    if _in_band(state, sample.pressure):
        state = replace(state, phase=HOLDING, phase_start=sample.t, window=(sample,))
        return state, Prompt(HOLD_STEADY, state.level, state.target)
    if sample.t - state.phase_start >= state.config.prompt_timeout_seconds:
        return _fail_attempt(state, sample)
    return state, _direction(state, sample.pressure)


def _capture(state: SessionState):
    cfg = state.config
    w = state.window
    t = np.array([s.t for s in w])
    try:
        metrics, _ = analyze_window(t, [s.brightness for s in w], [s.pressure for s in w],
                                    cfg.passband)
    except SignalError:
        return None
    if cfg.require_good_ppg and metrics.quality != QUALITY_GOOD:
        return None
    return Capture(state.level, state.reading, float(t[0]), float(t[-1]), metrics)


def _holding(state: SessionState, sample: PressureSample):
    cfg = state.config
    if not _in_band(state, sample.pressure):
        return _fail_attempt(state, sample)
    state = replace(state, window=state.window + (sample,))
    if sample.t - state.phase_start < cfg.dwell_seconds - 1e-9:
        return state, Prompt(HOLD_STEADY, state.level, state.target)
    capture = _capture(state)
    if capture is None:
        return _fail_attempt(state, sample)
    reading = state.reading + 1
    state = replace(state, phase=CAPTURED, reading=reading, window=(),
                    captures=state.captures + (capture,), phase_start=sample.t)
    if reading < cfg.readings_per_level:
        return state, Prompt(HOLD_STEADY, state.level, state.target)
    if state.level == cfg.n_levels - 1:
        return replace(state, phase=COMPLETE), Prompt(DONE)
    nxt = state.level + 1
    return state, Prompt(PRESS_HARDER, nxt, cfg.pressure_targets[nxt])


def advance(state: SessionState, sample: PressureSample):
    """Feed one sample; returns ``(new_state, prompt)``."""
    if state.terminal:
        raise SessionTerminated(f"session is already {state.phase}")
    if state.last_t is not None and sample.t < state.last_t:
        raise ProtocolError(f"sample time {sample.t} precedes {state.last_t}")
    state = replace(state, last_t=sample.t)

    if state.phase == IDLE:
        state = replace(state, phase=PROMPTING, level=0, phase_start=sample.t)
    elif state.phase == CAPTURED:
        if state.reading >= state.config.readings_per_level:
            state = replace(state, phase=PROMPTING, level=state.level + 1, reading=0,
                            phase_start=sample.t)
        else:
            state = replace(state, phase=PROMPTING, phase_start=sample.t)

    if state.phase == PROMPTING:
        return _prompting(state, sample)
    return _holding(state, sample)


def finalize(state: SessionState) -> list[PulseMetrics]:
    """One PulseMetrics per level: medians over that level's readings."""
    if state.phase != COMPLETE:
        raise NotComplete(f"session is {state.phase}"
                          + (f" ({state.abort_reason})" if state.abort_reason else ""))
    out = []
    for level in range(state.config.n_levels):
        ms = [c.metrics for c in state.captures if c.level == level]
        good = [m for m in ms if m.quality == QUALITY_GOOD]
        rates = [m.heart_rate_bpm for m in (good or ms) if np.isfinite(m.heart_rate_bpm)]
        cvs = [m.ibi_cv for m in ms if np.isfinite(m.ibi_cv)]
        noise = [m.noise_amplitude for m in ms if np.isfinite(m.noise_amplitude)]
        out.append(PulseMetrics(
            pulse_amplitude=float(statistics.median(m.pulse_amplitude for m in ms)),
            heart_rate_bpm=float(statistics.median(rates)) if rates else float("nan"),
            n_beats=sum(m.n_beats for m in ms),
            quality=QUALITY_GOOD if 2 * len(good) >= len(ms) else QUALITY_POOR,
            mean_pressure=float(statistics.median(m.mean_pressure for m in ms)),
            ibi_cv=float(statistics.median(cvs)) if cvs else float("nan"),
            noise_amplitude=float(statistics.median(noise)) if noise else float("nan"),
        ))
    return sorted(out, key=lambda m: m.mean_pressure)


class MeasurementSession:
    """Owner-side wrapper that keeps the current state and a transition log.

    An event is logged whenever the phase, level or prompt changes.
    """

    def __init__(self, config: SessionConfig | None = None):
        self.state = new_session(config)
        self.events: list[dict] = []
        self._last_key = None

    def advance(self, sample: PressureSample) -> Prompt:
        self.state, prompt = advance(self.state, sample)
        key = (self.state.phase, self.state.level, self.state.reading, prompt)
        if key != self._last_key:
            self._last_key = key
            self.events.append({"t": sample.t, "phase": self.state.phase,
                                "level": self.state.level, "reading": self.state.reading,
                                "prompt": prompt.to_dict()})
        return prompt

    def run(self, samples) -> SessionState:
        """Feed samples until the session terminates; later samples are ignored."""
        for sample in samples:
            if self.state.terminal:
                break
            self.advance(sample)
        return self.state


def replay(samples, config: SessionConfig | None = None) -> MeasurementSession:
    session = MeasurementSession(config)
    session.run(samples)
    return session


def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for event in events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_events(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

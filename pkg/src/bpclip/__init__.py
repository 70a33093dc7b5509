"""Cuff-less blood pressure from a spring-loaded phone clip.

The clip converts fingertip force into the diameter of a pinhole projection
seen by the phone camera, while the projection's brightness carries the
fingertip pulse. Stepping through increasing pressures and fitting the pulse
amplitude envelope gives an oscillometric estimate.
"""

__version__ = "0.1.0"

from .device import DeviceProfile, PressureSample, check_phone_compatibility  # noqa: E402
from .oscillometry import BpEstimate, RegressionModel  # noqa: E402
from .pipeline import AnalysisResult, DecodeOptions, analyze_frames, analyze_samples  # noqa: E402
from .protocol import SessionConfig  # noqa: E402
from .twin import SyntheticSubject, make_cohort, simulate_session  # noqa: E402

__all__ = [
    "AnalysisResult", "BpEstimate", "DecodeOptions", "DeviceProfile", "PressureSample",
    "RegressionModel", "SessionConfig", "SyntheticSubject", "analyze_frames",
    "analyze_samples", "check_phone_compatibility", "make_cohort", "simulate_session",
]

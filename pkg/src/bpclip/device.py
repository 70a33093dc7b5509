"""Clip transduction model: disc diameter -> distance -> spring force -> pressure.

The pinhole sits on a linear spring above the camera. Pressing moves it
closer, and the projected disc grows as ``d = f * a / z``. Spring compression
``z0 - z`` gives force by Hooke's law and force over the fingertip contact
area gives the applied pressure.

Units: millimetres, newtons, pixels and mmHg throughout.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateCalibration,
    DistanceExceedsRest,
    DistanceOutOfTravel,
    InvalidProfile,
    NegativeDistance,
    NonPhysicalDistance,
    NonPositiveDiameter,
    UnknownPhoneModel,
)

PA_PER_MMHG = 133.322
MAX_FLASH_CAM_DISTANCE_MM = 16.0
# measured discs slightly smaller than the rest size are clamped to rest
REST_TOLERANCE_MM = 0.05
PROFILE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DeviceProfile:
    """Physical constants of one clip + phone pairing.

    Defaults are bench stand-ins, not measured values.
    """

    spring_constant_k: float = 0.5  # N/mm
    rest_distance_z0: float = 12.0  # mm
    pinhole_diameter_a: float = 1.0  # mm
    focal_length_f: float = 1000.0  # px
    contact_area_A: float = 100.0  # mm^2
    flash_cam_distance: float = 10.0  # mm
    attenuation_coeff: float = 0.02  # 1/mm of guide length
    preload_force: float = 0.0  # N at rest

    def __post_init__(self):
        for name in ("spring_constant_k", "rest_distance_z0", "pinhole_diameter_a",
                     "focal_length_f", "contact_area_A", "attenuation_coeff"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InvalidProfile(f"{name} must be a positive finite number, got {value!r}")
        if not (math.isfinite(self.flash_cam_distance) and self.flash_cam_distance >= 0):
            raise InvalidProfile("flash_cam_distance must be >= 0")
        if not (math.isfinite(self.preload_force) and self.preload_force >= 0):
            raise InvalidProfile("preload_force must be >= 0")

    @property
    def projection_constant(self) -> float:
        """The product f*a; the only optical quantity the model depends on."""
        return self.focal_length_f * self.pinhole_diameter_a

    @property
    def rest_diameter(self) -> float:
        return self.projection_constant / self.rest_distance_z0

    def to_dict(self) -> dict:
        return {"schema_version": PROFILE_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceProfile":
        data = dict(data)
        version = data.pop("schema_version", PROFILE_SCHEMA_VERSION)
        if version != PROFILE_SCHEMA_VERSION:
            raise InvalidProfile(f"unsupported profile schema_version {version}")
        data.pop("phone_model", None)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidProfile(f"unknown profile fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def save(self, path, phone_model: str | None = None) -> None:
        doc = self.to_dict()
        if phone_model is not None:
            doc["phone_model"] = phone_model
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DeviceProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PressureSample:
    t: float  # s since session start
    pressure: float  # mmHg
    brightness: float  # 0-255
    diameter_px: float


def distance_to_projection(z: float, profile: DeviceProfile) -> float:
    if z <= 0:
        raise NonPhysicalDistance(f"distance must be positive, got {z}")
    return profile.projection_constant / z


def projection_to_distance(diameter_px: float, profile: DeviceProfile,
                           tolerance: float = REST_TOLERANCE_MM) -> float:
    """Pinhole-to-camera distance (mm) for an observed disc diameter."""
    if not diameter_px > 0:
        raise NonPositiveDiameter(f"diameter must be positive, got {diameter_px}")
    z = profile.projection_constant / diameter_px
    if z > profile.rest_distance_z0 + tolerance:
        raise DistanceOutOfTravel(
            f"disc of {diameter_px:.3f} px implies z={z:.4f} mm beyond rest "
            f"distance {profile.rest_distance_z0} mm")
    return z


def distance_to_force(z: float, profile: DeviceProfile,
                      tolerance: float = REST_TOLERANCE_MM) -> float:
    """Spring force (N); distances within ``tolerance`` above rest count as rest."""
    if z <= 0:
        raise NonPhysicalDistance(f"distance must be positive, got {z}")
    if z > profile.rest_distance_z0 + tolerance:
        raise DistanceExceedsRest(f"z={z} mm exceeds rest distance {profile.rest_distance_z0} mm")
    compression = max(profile.rest_distance_z0 - z, 0.0)
    return profile.spring_constant_k * compression + profile.preload_force


def force_to_pressure(force: float, profile: DeviceProfile) -> float:
    if force < 0:
        raise NonPhysicalDistance(f"force must be >= 0, got {force}")
    # N/mm^2 -> Pa is a factor 1e6
    return force / profile.contact_area_A * 1e6 / PA_PER_MMHG


def pressure_to_force(pressure: float, profile: DeviceProfile) -> float:
    return pressure * PA_PER_MMHG * profile.contact_area_A / 1e6


def pressure_from_diameter(diameter_px: float, profile: DeviceProfile,
                           tolerance: float = REST_TOLERANCE_MM) -> float:
    z = projection_to_distance(diameter_px, profile, tolerance)
    return force_to_pressure(distance_to_force(z, profile, tolerance), profile)


def pressure_to_distance(pressure: float, profile: DeviceProfile) -> float:
    """Inverse of the force chain; used to script synthetic presses."""
    force = pressure_to_force(pressure, profile) - profile.preload_force
    z = profile.rest_distance_z0 - max(force, 0.0) / profile.spring_constant_k
    if z <= 0:
        raise NonPhysicalDistance(f"pressure {pressure} mmHg requires z={z} mm")
    return z


def check_phone_compatibility(flash_cam_distance: float) -> str:
    """'compatible' when the flashlight-to-camera gap is at most 16 mm (inclusive)."""
    if flash_cam_distance < 0:
        raise NegativeDistance(f"distance must be >= 0, got {flash_cam_distance}")
    return "compatible" if flash_cam_distance <= MAX_FLASH_CAM_DISTANCE_MM else "incompatible"


def light_transmission(profile: DeviceProfile) -> float:
    """Fraction of flash light reaching the camera channel through the guide."""
    return math.exp(-profile.attenuation_coeff * profile.flash_cam_distance)


def calibrate_profile(observations) -> tuple[float, float]:
    """Fit ``d = C / z`` to bench (z, d) pairs.

    Returns the fitted projection constant ``C`` (= f*a) and the RMS residual
    in pixels.
    """
    obs = np.asarray(list(observations), dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] != 2:
        raise DegenerateCalibration("need at least two (z, d) observations")
    z, d = obs[:, 0], obs[:, 1]
    if np.any(z <= 0):
        raise DegenerateCalibration("calibration distances must be positive")
    if np.ptp(z) == 0:
        raise DegenerateCalibration("calibration distances are all equal")
    inv = 1.0 / z
    c = float(np.dot(d, inv) / np.dot(inv, inv))
    rms = float(np.sqrt(np.mean((d - c * inv) ** 2)))
    return c, rms


def apply_calibration(profile: DeviceProfile, projection_constant: float) -> DeviceProfile:
    """Profile whose focal length reproduces a fitted f*a, keeping the aperture."""
    return replace(profile, focal_length_f=projection_constant / profile.pinhole_diameter_a)


class ProfileRegistry:
    """Directory of profile JSON files keyed by phone model.

    A file's key is its ``phone_model`` field if present, else the file stem.
    """

    def __init__(self, directory=None):
        if directory is None:
            directory = Path(__file__).with_name("profiles")
        self.directory = Path(directory)
        self._entries = {}
        if self.directory.is_dir():
            for path in sorted(self.directory.glob("*.json")):
                doc = json.loads(path.read_text())
                self._entries[doc.get("phone_model", path.stem)] = DeviceProfile.from_dict(doc)

    def __contains__(self, model):
        return model in self._entries

    def __len__(self):
        return len(self._entries)

    def models(self):
        return sorted(self._entries)

    def get(self, model: str) -> DeviceProfile:
        try:
            return self._entries[model]
        except KeyError:
            raise UnknownPhoneModel(f"no profile registered for phone model {model!r}") from None

    def add(self, model: str, profile: DeviceProfile) -> Path:
        os.makedirs(self.directory, exist_ok=True)
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in model)
        path = self.directory / f"{safe}.json"
        profile.save(path, phone_model=model)
        self._entries[model] = profile
        return path

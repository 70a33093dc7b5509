"""Pinhole-projection disc detection in grayscale frames, plus PGM (P5) I/O."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np

from .device import DeviceProfile, PressureSample, pressure_from_diameter
from .errors import (
    DeviceError,
    DiscClipped,
    EmptyOutput,
    FrameError,
    ManifestError,
    NoProjection,
    Saturated,
)

QUALITY_OK = "ok"
QUALITY_SATURATED = "saturated"
QUALITY_LOW_CONTRAST = "low_contrast"
QUALITY_MULTI_BLOB = "multi_blob"

FRAME_NAME = "frame_{:06d}.pgm"
_FRAME_RE = re.compile(r"frame_(\d{6})\.pgm$")


@dataclass(frozen=True, eq=False)
class Frame:
    pixels: np.ndarray  # (height, width), intensities on a 0-255 scale
    timestamp: float = 0.0

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("frame pixels must be a 2-D grayscale array")
        if self.height < 16 or self.width < 16:
            raise ValueError("frames must be at least 16x16 pixels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_list(cls, width, height, pixels, timestamp=0.0) -> "Frame":
        """Build from a row-major flat pixel list."""
        arr = np.asarray(pixels)
        if arr.size != width * height:
            raise ValueError(f"expected {width * height} pixels, got {arr.size}")
        return cls(arr.reshape(height, width), float(timestamp))


@dataclass(frozen=True)
class CircleObservation:
    center_x: float
    center_y: float
    diameter_px: float
    mean_brightness: float
    quality: str = QUALITY_OK


@dataclass(frozen=True)
class DetectionParams:
    contrast_fraction: float = 0.5
    n_rays: int = 32
    # below this contrast there is nothing to detect
    min_detectable_contrast: float = 2.0
    low_contrast: float = 15.0
    saturation_fraction: float = 0.05
    multi_blob_fraction: float = 0.25
    interior_fraction: float = 0.8
    ray_window: float = 3.0
    ray_step: float = 0.25

    def __post_init__(self):
        if self.n_rays < 16:
            raise ValueError("at least 16 rays are required for edge refinement")


_DEFAULT_PARAMS = DetectionParams()


def _lowest_decile_median(img: np.ndarray) -> float:
    flat = img.ravel()
    k = max(1, flat.size // 10)
    lo, hi = (k - 1) // 2, k // 2
    # a flat dark surround is the common case and makes partition slow on ties
    floor = flat.min()
    if np.count_nonzero(flat == floor) > hi:
        return float(floor)
    part = np.partition(flat, (lo, hi))
    return 0.5 * (float(part[lo]) + float(part[hi]))


@lru_cache(maxsize=16)
def _ray_offsets(n_rays, n_steps, step):
    """Per-ray x and y offsets of the sample points, relative to the ray start."""
    cos, sin = _ray_directions(n_rays)
    s = np.arange(n_steps) * step
    return np.multiply.outer(cos, s), np.multiply.outer(sin, s), s


def _edge_radii(img, cx, cy, cos, sin, r_lo, r_hi, step, level):
    """First outward crossing of ``level`` along each ray, by bilinear sampling.

    NaN marks rays that start below the level or never cross it.
    """
    h, w = img.shape
    n_steps = int(np.floor((r_hi - r_lo) / step + 0.5)) + 1
    dx, dy, s = _ray_offsets(cos.size, n_steps, step)
    xs = np.clip(dx + (cx + cos * r_lo)[:, None], 0.0, w - 1.000001)
    ys = np.clip(dy + (cy + sin * r_lo)[:, None], 0.0, h - 1.000001)
    x0 = xs.astype(np.intp)
    y0 = ys.astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    flat = img.ravel()
    i00 = y0 * w + x0
    v00 = flat[i00]
    v01 = flat[i00 + 1]
    v10 = flat[i00 + w]
    v11 = flat[i00 + w + 1]
    top = v00 + (v01 - v00) * fx
    prof = top + (v10 + (v11 - v10) * fx - top) * fy

    below = prof < level
    first = np.argmax(below, axis=1)
    rows = np.arange(first.size)
    valid = below[rows, first] & (first > 0)
    radii = np.full(first.size, np.nan)
    idx = rows[valid]
    i = first[valid]
    v_in = prof[idx, i - 1]
    radii[idx] = r_lo + s[i - 1] + (v_in - level) / (v_in - prof[idx, i]) * step
    return radii


def _fit_circle(x, y):
    """Algebraic (Kasa) circle fit on centred coordinates."""
    mx, my = x.mean(), y.mean()
    u, v = x - mx, y - my
    uu, vv, uv = u @ u, v @ v, u @ v
    rr = u * u + v * v
    bu, bv = u @ rr, v @ rr
    det = uu * vv - uv * uv
    cu = 0.5 * (bu * vv - bv * uv) / det
    cv = 0.5 * (bv * uu - bu * uv) / det
    r = np.sqrt(cu * cu + cv * cv + rr.mean())
    return cu + mx, cv + my, r


def _disc_mean(img, cx, cy, r):
    """Mean of the pixels whose centres lie strictly inside radius ``r``."""
    h, w = img.shape
    y_lo, y_hi = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
    x_lo, x_hi = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
    inside = np.add.outer((np.arange(y_lo, y_hi) - cy) ** 2,
                          (np.arange(x_lo, x_hi) - cx) ** 2) < r * r
    if not inside.any():
        return float(img[min(max(int(round(cy)), 0), h - 1), min(max(int(round(cx)), 0), w - 1)])
    return float(img[y_lo:y_hi, x_lo:x_hi][inside].mean(dtype=np.float64))


@lru_cache(maxsize=4)
def _ray_directions(n):
    theta = np.arange(n) * (2 * np.pi / n)
    return np.cos(theta), np.sin(theta)


def detect_circle(frame: Frame, params: DetectionParams | None = None) -> CircleObservation:
    """Locate the bright projection disc and measure its diameter and brightness.

    Raises NoProjection, Saturated or DiscClipped when no trustworthy
    measurement exists; a second large blob or weak contrast are reported
    through ``quality`` instead.
    """
    p = params or _DEFAULT_PARAMS
    raw = frame.pixels
    h, w = raw.shape
    background = _lowest_decile_median(raw)
    peak = float(raw.max())
    contrast = peak - background
    if contrast < p.min_detectable_contrast:
        if peak >= 255:
            raise Saturated("frame is uniformly saturated")
        raise NoProjection("frame has no bright projection above background")

    level = background + p.contrast_fraction * contrast
    mask = (raw > level).view(np.uint8)
    # outer contours with 8-connectivity: one per blob, holes ignored
    contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    # pixel count from the boundary polygon (Pick: N = A + B/2 + 1)
    areas = np.array([cv2.contourArea(c) + 0.5 * len(c) + 1.0
                      for c in contours])
    order = np.argsort(areas)[::-1]
    blob = contours[order[0]]
    area = float(areas[order[0]])
    multi_blob = len(contours) > 1 and areas[order[1]] > p.multi_blob_fraction * area

    left, top, bw, bh = cv2.boundingRect(blob)
    right, bottom = left + bw - 1, top + bh - 1
    on_border = left == 0 or top == 0 or right == w - 1 or bottom == h - 1
    saturated = False
    if peak >= 255:
        patch = raw[top:bottom + 1, left:right + 1]
        inside = mask[top:bottom + 1, left:right + 1].view(bool)
        sat = np.count_nonzero(patch[inside] >= 255)
        saturated = sat >= p.saturation_fraction * area
    if on_border:
        if saturated:
            raise Saturated("saturated projection fills the frame edge")
        raise DiscClipped("projection touches the frame border")

    mom = cv2.moments(blob)
    if mom["m00"] > 0:
        cx, cy = mom["m10"] / mom["m00"], mom["m01"] / mom["m00"]
    else:
        cx, cy = left + 0.5 * (bw - 1), top + 0.5 * (bh - 1)
    radius = np.sqrt(area / np.pi)
    quality = QUALITY_OK

    cos, sin = _ray_directions(p.n_rays)
    img = raw.astype(np.float32)
    radii = _edge_radii(img, cx, cy, cos, sin, max(radius - p.ray_window, 0.0),
                        radius + p.ray_window, p.ray_step, level)
    if np.count_nonzero(np.isfinite(radii)) < 16:
        radii = _edge_radii(img, cx, cy, cos, sin, 0.0, 1.5 * radius + 3, p.ray_step, level)
    ok = np.isfinite(radii)
    if np.count_nonzero(ok) >= 16:
        cx, cy, radius = _fit_circle(cx + cos[ok] * radii[ok], cy + sin[ok] * radii[ok])
    else:
        quality = QUALITY_LOW_CONTRAST

    if cx - radius < 0 or cy - radius < 0 or cx + radius > w - 1 or cy + radius > h - 1:
        raise DiscClipped("refined disc extends past the frame border")

    inner = p.interior_fraction * radius
    mean_brightness = _disc_mean(img, cx, cy, inner)

    if saturated:
        quality = QUALITY_SATURATED
    elif multi_blob:
        quality = QUALITY_MULTI_BLOB
    elif contrast < p.low_contrast:
        quality = QUALITY_LOW_CONTRAST
    return CircleObservation(float(cx), float(cy), float(2 * radius), mean_brightness, quality)


@dataclass
class ExtractionResult:
    samples: list
    n_frames: int = 0
    drops: Counter = field(default_factory=Counter)

    @property
    def n_dropped(self) -> int:
        return sum(self.drops.values())


def iter_samples(frames, profile: DeviceProfile, params: DetectionParams | None = None,
                 result: ExtractionResult | None = None):
    """Lazily convert frames to samples, tallying drops into ``result``."""
    result = result if result is not None else ExtractionResult([])
    for frame in frames:
        result.n_frames += 1
        try:
            obs = detect_circle(frame, params)
        except FrameError as exc:
            result.drops[exc.reason] += 1
            continue
        if obs.quality != QUALITY_OK:
            result.drops[obs.quality] += 1
            continue
        try:
            pressure = pressure_from_diameter(obs.diameter_px, profile)
        except DeviceError:
            result.drops["out_of_travel"] += 1
            continue
        yield PressureSample(frame.timestamp, pressure, obs.mean_brightness, obs.diameter_px)


def check_drop_rate(result: ExtractionResult, max_drop_fraction: float = 0.5) -> None:
    if result.n_frames == 0 or result.n_dropped > max_drop_fraction * result.n_frames:
        raise EmptyOutput(
            f"{result.n_dropped} of {result.n_frames} frames dropped ({dict(result.drops)})")


def frames_to_samples(frames, profile: DeviceProfile, params: DetectionParams | None = None,
                      max_drop_fraction: float = 0.5) -> ExtractionResult:
    """Detect every frame and convert the disc to (pressure, brightness) samples.

    Frames without an ``ok`` observation are dropped and counted by reason;
    more than ``max_drop_fraction`` dropped raises EmptyOutput.
    """
    result = ExtractionResult([])
    result.samples.extend(iter_samples(frames, profile, params, result))
    check_drop_rate(result, max_drop_fraction)
    return result


# PGM (P5) ---------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


_TO_16 = np.float32(65535 / 255.0)
_FROM_16 = np.float32(255.0 / 65535)


def quantize16(pixels) -> np.ndarray:
    """0-255 intensities to 16-bit levels (uint16)."""
    scaled = np.asarray(pixels, dtype=np.float32) * _TO_16
    return np.clip(np.rint(scaled, out=scaled), 0, 65535).astype(np.uint16)


def dequantize16(levels) -> np.ndarray:
    """16-bit levels back onto the 0-255 scale (float32)."""
    return np.asarray(levels).astype(np.float32) * _FROM_16


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM. 16-bit images are rescaled onto 0-255 as float."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval < 256:
        arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)
        if maxval != 255:
            return arr * (255.0 / maxval)
        return arr.copy()
    arr = np.frombuffer(data, dtype=">u2", count=w * h, offset=offset).reshape(h, w)
    if maxval == 65535:
        return dequantize16(arr)
    return arr.astype(np.float32) * np.float32(255.0 / maxval)


def write_pgm(path, pixels: np.ndarray, bit_depth: int = 8) -> None:
    """Write a 0-255 intensity image as P5, quantizing to 8 or 16 bits."""
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    if bit_depth == 8:
        body = np.clip(np.rint(pixels), 0, 255).astype(np.uint8).tobytes()
        maxval = 255
    elif bit_depth == 16:
        body = quantize16(pixels).astype(">u2").tobytes()
        maxval = 65535
    else:
        raise ValueError("bit_depth must be 8 or 16")
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + body)


def frame_paths(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ManifestError(f"frame directory {directory} does not exist")
    paths = sorted(p for p in directory.iterdir() if _FRAME_RE.search(p.name))
    if not paths:
        raise ManifestError(f"no frame_%06d.pgm files in {directory}")
    return paths


def iter_frames(directory, frame_rate: float):
    """Yield frames from a directory; frame i is stamped at i / frame_rate."""
    for path in frame_paths(directory):
        index = int(_FRAME_RE.search(path.name).group(1))
        try:
            pixels = read_pgm(path)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"cannot read {path}: {exc}") from exc
        yield Frame(pixels, index / frame_rate)

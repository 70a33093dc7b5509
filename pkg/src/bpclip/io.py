"""On-disk formats: session manifests, sample series, oscillogram CSV and SVG plots.

A session directory holds ``manifest.json`` plus either a ``frames/``
directory of ``frame_NNNNNN.pgm`` files or a ``series.csv`` of pre-extracted
samples. Relative paths in a manifest resolve against the manifest's folder.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import DeviceProfile, PressureSample
from .errors import BPClipError, InvalidManifest, ManifestError
from .frames import FRAME_NAME, frame_paths, iter_frames, write_pgm
from .oscillometry import EnvelopeFit, Oscillogram, OscPoint
from .ppg import QUALITY_GOOD
from .protocol import SessionConfig
from .twin import matched_ratios

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SERIES_COLUMNS = ("t", "pressure_mmHg", "brightness", "diameter_px")
OSCILLOGRAM_COLUMNS = ("pressure_mmHg", "amplitude", "n_beats", "quality", "heart_rate_bpm",
                       "noise_amplitude")
CAPTURE_MODES = ("frames", "series")


def _read_json(path: Path, what: str):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read {what} {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidManifest(f"{what} {path} is not valid JSON: {exc}") from None


@dataclass
class SessionManifest:
    path: Path
    profile: DeviceProfile
    capture_mode: str
    source: Path  # frame directory or series file
    frame_rate: float | None
    config: SessionConfig
    metadata: dict = field(default_factory=dict)
    # default decode settings (r_s, r_d) recorded with the session
    decode: dict = field(default_factory=dict)

    @property
    def reference_bp(self):
        """(systolic, diastolic) if the metadata carries a reference reading."""
        ref = self.metadata.get("reference_bp")
        if not ref:
            return None
        return float(ref["systolic"]), float(ref["diastolic"])

    def iter_frames(self):
        return iter_frames(self.source, self.frame_rate)

    def read_series(self) -> list:
        return read_series(self.source)


def load_manifest(path) -> SessionManifest:
    """Parse and check a manifest; referenced files must exist."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    doc = _read_json(path, "manifest")
    if not isinstance(doc, dict):
        raise InvalidManifest(f"{path}: manifest must be a JSON object")
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise InvalidManifest(f"{path}: unsupported schema_version {version!r}")
    base = path.parent

    try:
        if "profile" in doc:
            profile = DeviceProfile.from_dict(doc["profile"])
        elif "profile_path" in doc:
            profile = DeviceProfile.from_dict(_read_json(base / doc["profile_path"], "profile"))
        else:
            raise InvalidManifest(f"{path}: needs 'profile' or 'profile_path'")
        config = SessionConfig.from_dict(doc.get("protocol", {}))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, BPClipError):
            raise
        raise InvalidManifest(f"{path}: {exc}") from None

    mode = doc.get("capture_mode")
    if mode not in CAPTURE_MODES:
        raise InvalidManifest(f"{path}: capture_mode must be one of {CAPTURE_MODES}")
    frame_rate = doc.get("frame_rate")
    if mode == "frames":
        if not isinstance(frame_rate, (int, float)) or frame_rate <= 0:
            raise InvalidManifest(f"{path}: frames mode needs a positive frame_rate")
        source = base / doc.get("frames_dir", "frames")
        frame_paths(source)  # raises ManifestError when missing or empty
    else:
        source = base / doc.get("series_file", "series.csv")
        if not source.is_file():
            raise ManifestError(f"series file {source} does not exist")
    decode = doc.get("decode", {})
    if not isinstance(decode, dict) or set(decode) - {"r_s", "r_d"}:
        raise InvalidManifest(f"{path}: decode may only set r_s and r_d")
    return SessionManifest(path, profile, mode, source,
                           float(frame_rate) if frame_rate is not None else None,
                           config, dict(doc.get("metadata", {})), dict(decode))


def write_manifest(path, profile: DeviceProfile, capture_mode: str, config: SessionConfig,
                   frame_rate: float | None = None, metadata: dict | None = None,
                   frames_dir: str = "frames", series_file: str = "series.csv",
                   decode: dict | None = None) -> Path:
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "capture_mode": capture_mode,
        "profile": profile.to_dict(),
        "protocol": config.to_dict(),
        "metadata": metadata or {},
    }
    if decode:
        doc["decode"] = dict(decode)
    if capture_mode == "frames":
        doc["frames_dir"] = frames_dir
        doc["frame_rate"] = frame_rate
    else:
        doc["series_file"] = series_file
        if frame_rate is not None:
            doc["frame_rate"] = frame_rate
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# sample series ----------------------------------------------------------

def write_series(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SERIES_COLUMNS)
        for s in samples:
            writer.writerow([repr(float(s.t)), repr(float(s.pressure)),
                             repr(float(s.brightness)), repr(float(s.diameter_px))])


def read_series(path) -> list:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"cannot read series {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = set(SERIES_COLUMNS[:3]) - set(reader.fieldnames or ())
        if missing:
            raise InvalidManifest(f"{path}: missing columns {sorted(missing)}")
        out = []
        for row in reader:
            try:
                out.append(PressureSample(float(row["t"]), float(row["pressure_mmHg"]),
                                          float(row["brightness"]),
                                          float(row.get("diameter_px") or "nan")))
            except ValueError as exc:
                raise InvalidManifest(f"{path}, line {reader.line_num}: {exc}") from None
    return out


def export_session(session, out_dir, capture_mode: str = "frames", bit_depth: int = 16,
                   metadata: dict | None = None) -> Path:
    """Write a twin session as manifest + frames or manifest + series CSV.

    The manifest's decode section carries the ratios matched to the twin's
    envelope width, so a plain ``bpclip analyze`` inverts it exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subject = session.subject
    meta = {
        "generator": "digital_twin",
        "seed": session.seed,
        "reference_bp": {"systolic": subject.true_systolic, "diastolic": subject.true_diastolic},
        "subject": {
            "heart_rate_bpm": subject.heart_rate_bpm,
            "envelope_sigma": subject.envelope_sigma,
            "baseline_brightness": subject.baseline_brightness,
            "pulse_gain": subject.pulse_gain,
            "noise_sd": subject.noise_sd,
            "envelope_skew": subject.envelope_skew,
        },
    }
    meta.update(metadata or {})
    if capture_mode == "frames":
        frame_dir = out_dir / "frames"
        frame_dir.mkdir(exist_ok=True)
        for i, frame in enumerate(session.iter_frames(bit_depth=None)):
            write_pgm(frame_dir / FRAME_NAME.format(i), frame.pixels, bit_depth)
        frame_rate = session.params.frame_rate
    elif capture_mode == "series":
        write_series(out_dir / "series.csv", session.samples)
        frame_rate = session.params.frame_rate
    else:
        raise ValueError(f"capture_mode must be one of {CAPTURE_MODES}")
    pulse_pressure = subject.true_systolic - subject.true_diastolic
    r_s, r_d = matched_ratios(subject.envelope_sigma / pulse_pressure)
    return write_manifest(out_dir / MANIFEST_NAME, session.profile, capture_mode,
                          session.config, frame_rate, meta, decode={"r_s": r_s, "r_d": r_d})


# oscillogram artifacts --------------------------------------------------

def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_oscillogram_csv(path, osc: Oscillogram) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OSCILLOGRAM_COLUMNS)
        for p in osc.points:
            writer.writerow([_num(p.pressure), _num(p.amplitude), p.n_beats, p.quality,
                             _num(p.heart_rate), _num(p.noise)])


def read_oscillogram_csv(path) -> Oscillogram:
    """Inverse of :func:`write_oscillogram_csv`; only the first three columns are required."""
    def opt(row, key):
        return float(row[key]) if row.get(key) else float("nan")

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return Oscillogram(tuple(
        OscPoint(float(r["pressure_mmHg"]), float(r["amplitude"]), int(r["n_beats"]),
                 r.get("quality") or QUALITY_GOOD, opt(r, "heart_rate_bpm"),
                 opt(r, "noise_amplitude"))
        for r in rows))


def oscillogram_svg(osc: Oscillogram, fit: EnvelopeFit | None = None, width: int = 480,
                    height: int = 320) -> str:
    """Scatter of the oscillogram with the fitted envelope as a polyline."""
    margin = 48
    p, a = osc.pressures, osc.amplitudes
    p_lo, p_hi = float(p.min()) - 10.0, float(p.max()) + 10.0
    a_hi = float(a.max())
    if fit is not None:
        a_hi = max(a_hi, fit.a_max)
    a_hi = a_hi * 1.1 if a_hi > 0 else 1.0

    def sx(x):
        return margin + (x - p_lo) / (p_hi - p_lo) * (width - 2 * margin)

    def sy(y):
        return height - margin - y / a_hi * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12">applied pressure (mmHg)</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">pulse amplitude</text>',
    ]
    if fit is not None:
        grid = np.linspace(p_lo, p_hi, 121)
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(grid, fit.amplitude(grid)))
        parts.append(f'<polyline class="fit" points="{pts}" fill="none" stroke="#c0392b" '
                     f'stroke-width="1.5"/>')
    for pt in osc.points:
        fill = "#2c3e50" if pt.quality == QUALITY_GOOD else "none"
        parts.append(f'<circle class="level" cx="{sx(pt.pressure):.2f}" cy="{sy(pt.amplitude):.2f}" '
                     f'r="4" fill="{fill}" stroke="#2c3e50"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_ppg_csv(path, captures, samples, passband=None) -> None:
    """Debug dump of every captured hold window: (t, raw, filtered) per sample."""
    from .ppg import DEFAULT_PASSBAND, detrend_bandpass

    passband = passband or DEFAULT_PASSBAND
    t_all = np.array([s.t for s in samples])
    b_all = np.array([s.brightness for s in samples])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("level", "reading", "t", "raw", "filtered"))
        for cap in captures:
            sel = (t_all >= cap.t_start) & (t_all <= cap.t_end)
            series = detrend_bandpass(t_all[sel], b_all[sel], passband)
            for t, raw, filt in zip(series.t, series.raw, series.filtered):
                writer.writerow([cap.level, cap.reading, repr(float(t)), repr(float(raw)),
                                 repr(float(filt))])


def write_levels_csv(path, levels) -> None:
    """Per-level pulse metrics table."""
    cols = ("mean_pressure", "pulse_amplitude", "heart_rate_bpm", "n_beats", "quality", "ibi_cv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for m in levels:
            d = m.to_dict()
            writer.writerow([_num(d[c]) if isinstance(d[c], float) else d[c] for c in cols])

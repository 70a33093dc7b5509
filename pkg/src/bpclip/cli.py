"""``bpclip`` command line: analyze | simulate | envelope | compat | train.

Exit codes: 0 ok, 2 protocol abort, 3 signal quality, 4 I/O, 5 usage or data.
Every command accepts ``--config FILE``; its JSON sections override flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .device import (
    MAX_FLASH_CAM_DISTANCE_MM,
    DeviceProfile,
    ProfileRegistry,
    check_phone_compatibility,
)
from .errors import EXIT_DATA, EXIT_IO, EXIT_OK, BPClipError, InvalidManifest, IOFailure
from .frames import DetectionParams, ExtractionResult, iter_samples
from .io import (
    export_session,
    load_manifest,
    oscillogram_svg,
    write_levels_csv,
    write_oscillogram_csv,
    write_ppg_csv,
)
from .oscillometry import FEATURES, LabeledExample, RegressionModel, train_regression
from .pipeline import AnalysisResult, DecodeOptions, analyze_samples
from .protocol import SessionConfig, write_events
from .twin import SyntheticSubject, TwinParams, simulate_session

log = logging.getLogger("bpclip")


class UsageError(BPClipError):
    exit_code = EXIT_DATA


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 means protocol abort here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_DATA, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidManifest(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InvalidManifest(f"config {path} must be a JSON object")
    return doc


def _merge(base: dict, override: dict | None) -> dict:
    out = dict(base)
    out.update(override or {})
    return out


def _build(cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _emit(doc, out_path=None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _decode_options(args, cfg: dict, manifest_decode: dict | None = None) -> DecodeOptions:
    """Built-in defaults < manifest decode section < flags < config file."""
    values = dict(manifest_decode or {})
    values.update({k: v for k, v in (("r_s", args.r_s), ("r_d", args.r_d)) if v is not None})
    values = _merge(values, cfg.get("decode"))
    model_path = values.pop("model", None) or args.model
    if model_path:
        try:
            values["model"] = RegressionModel.load(model_path)
        except OSError as exc:
            raise IOFailure(f"cannot read model {model_path}: {exc}") from None
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InvalidManifest(f"model {model_path} is malformed: {exc}") from None
    return _build(DecodeOptions, values)


def run_analysis(manifest_path, cfg: dict | None = None, options=None,
                 keep_samples: list | None = None) -> AnalysisResult:
    """Everything ``bpclip analyze`` computes, without the printing.

    ``options`` is a DecodeOptions, or a callable mapping the manifest's
    decode section to one. Samples fed to the protocol are appended to
    ``keep_samples`` when it is given.
    """
    cfg = cfg or {}
    manifest = load_manifest(manifest_path)
    if callable(options):
        options = options(manifest.decode)
    config = manifest.config
    if cfg.get("protocol"):
        config = SessionConfig.from_dict(_merge(config.to_dict(), cfg["protocol"]))
    detection = _build(DetectionParams, cfg.get("detection", {}))

    def kept(samples):
        for s in samples:
            keep_samples.append(s)
            yield s

    if manifest.capture_mode == "frames":
        extraction = ExtractionResult([])
        samples = iter_samples(manifest.iter_frames(), manifest.profile, detection, extraction)
    else:
        extraction, samples = None, manifest.read_series()
    if keep_samples is not None:
        samples = kept(samples)
    return analyze_samples(samples, config, options, extraction)


# commands ---------------------------------------------------------------

def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    result = run_analysis(args.manifest, cfg, lambda dec: _decode_options(args, cfg, dec))
    if args.events:
        write_events(args.events, result.session.events)
    _emit(result.to_dict(), args.output)
    if result.status != "ok":
        print(f"bpclip: {result.status}: {result.reason}", file=sys.stderr)
    return result.exit_code


def cmd_envelope(args) -> int:
    cfg = _load_config(args.config)
    samples = [] if args.ppg_csv else None
    result = run_analysis(args.manifest, cfg, lambda dec: _decode_options(args, cfg, dec),
                          keep_samples=samples)
    if args.ppg_csv and result.session is not None:
        state = result.session.state
        write_ppg_csv(args.ppg_csv, state.captures, samples, state.config.passband)
    if result.oscillogram is not None and args.csv:
        write_oscillogram_csv(args.csv, result.oscillogram)
    if args.levels_csv and result.levels:
        write_levels_csv(args.levels_csv, result.levels)
    if result.fit is not None and args.svg:
        Path(args.svg).write_text(oscillogram_svg(result.oscillogram, result.fit))
    if result.status != "ok":
        print(f"bpclip: {result.status}: {result.reason}", file=sys.stderr)
    return result.exit_code


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    subject = _build(SyntheticSubject, _merge({
        "true_systolic": args.systolic, "true_diastolic": args.diastolic,
        "heart_rate_bpm": args.heart_rate, "noise_sd": args.noise_sd,
        "pulse_gain": args.pulse_gain, "baseline_brightness": args.baseline,
        "envelope_skew": args.skew,
    }, cfg.get("subject")))
    params = _build(TwinParams, _merge({
        "frame_rate": args.frame_rate, "jitter_sd": args.jitter_sd,
        "hold_offset_max": args.hold_offset,
    }, cfg.get("twin")))
    profile = DeviceProfile.from_dict(cfg["profile"]) if "profile" in cfg else DeviceProfile()
    config = SessionConfig.from_dict(cfg.get("protocol", {}))
    seed = int(cfg.get("seed", args.seed))
    # everything is validated by now; nothing touches the disk before this
    session = simulate_session(subject, profile, config, seed, params)
    try:
        path = export_session(session, args.out, args.mode, args.bit_depth)
    except OSError as exc:
        raise IOFailure(f"cannot write session to {args.out}: {exc}") from None
    print(str(path))
    return EXIT_OK


def cmd_compat(args) -> int:
    if args.distance is not None:
        distance = args.distance
    elif args.phone_model is not None:
        registry = ProfileRegistry(args.registry)
        distance = registry.get(args.phone_model).flash_cam_distance
    else:
        raise UsageError("give --distance or a phone model")
    verdict = check_phone_compatibility(distance)
    doc = {"verdict": verdict, "flash_cam_distance_mm": distance,
           "limit_mm": MAX_FLASH_CAM_DISTANCE_MM}
    if args.phone_model is not None:
        doc["phone_model"] = args.phone_model
    if args.json:
        _emit(doc)
    else:
        print(f"{verdict}: flash-to-camera distance {distance:g} mm "
              f"(limit {MAX_FLASH_CAM_DISTANCE_MM:g} mm)")
    return EXIT_OK


def _manifest_list(paths, list_file):
    out = [Path(p) for p in paths or ()]
    if list_file:
        base = Path(list_file).parent
        try:
            lines = Path(list_file).read_text().splitlines()
        except OSError as exc:
            raise IOFailure(f"cannot read {list_file}: {exc}") from None
        out += [base / line.strip() for line in lines
                if line.strip() and not line.lstrip().startswith("#")]
    return out


def _labeled(paths, cfg, options):
    examples, skipped = [], []
    for path in paths:
        manifest = load_manifest(path)
        ref = manifest.reference_bp
        if ref is None:
            raise InvalidManifest(f"{path}: metadata.reference_bp is required for training")
        result = run_analysis(path, cfg, options)
        if result.fit is None:
            skipped.append({"manifest": str(path), "status": result.status,
                            "reason": result.reason})
            continue
        examples.append((path, LabeledExample.from_fit(result.oscillogram, result.fit, *ref),
                         result))
    return examples, skipped


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    options = lambda dec: _decode_options(args, cfg, dec)  # noqa: E731
    features = tuple(args.features.split(",")) if args.features else FEATURES
    train_paths = _manifest_list(args.manifests, args.list)
    if not train_paths:
        raise UsageError("no training manifests given")
    train, skipped = _labeled(train_paths, cfg, options)
    model = train_regression([ex for _, ex, _ in train], features, args.ridge,
                             {"n_skipped": len(skipped)})
    report = {"n_train": len(train), "skipped": skipped, "features": list(features),
              "train_mae": model.metadata["train_mae"],
              "heads": model.to_dict()["heads"]}

    holdout_paths = _manifest_list(args.holdout, args.holdout_list)
    if holdout_paths:
        test, test_skipped = _labeled(holdout_paths, cfg, options)
        err_s, err_d = [], []
        for _, ex, _ in test:
            sbp, dbp = model.predict(ex.features)
            err_s.append(abs(sbp - ex.systolic))
            err_d.append(abs(dbp - ex.diastolic))
        report["heldout"] = {
            "n": len(test), "skipped": test_skipped,
            "mae": {"systolic": float(np.mean(err_s)) if err_s else None,
                    "diastolic": float(np.mean(err_d)) if err_d else None},
        }
        model.metadata["heldout_mae"] = report["heldout"]["mae"]
    try:
        model.save(args.out)
    except OSError as exc:
        raise IOFailure(f"cannot write model {args.out}: {exc}") from None
    _emit(report)
    return EXIT_OK


# parser -----------------------------------------------------------------

def _add_decode_flags(p):
    p.add_argument("--model", help="regression model JSON; fixed-ratio decode when omitted")
    p.add_argument("--r-s", dest="r_s", type=float,
                   help=f"systolic amplitude ratio (manifest value, else {DecodeOptions.r_s})")
    p.add_argument("--r-d", dest="r_d", type=float,
                   help=f"diastolic amplitude ratio (manifest value, else {DecodeOptions.r_d})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpclip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="estimate blood pressure from a recorded session")
    p.add_argument("manifest", help="manifest.json or its directory")
    _add_decode_flags(p)
    p.add_argument("--config", help="JSON overrides: protocol, detection, decode sections")
    p.add_argument("-o", "--output", help="write the JSON here instead of stdout")
    p.add_argument("--events", help="write the protocol event log (JSON lines)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="write a synthetic session to disk")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--systolic", type=float, default=120.0)
    p.add_argument("--diastolic", type=float, default=80.0)
    p.add_argument("--heart-rate", type=float, default=72.0)
    p.add_argument("--noise-sd", type=float, default=0.0, help="brightness noise SD")
    p.add_argument("--pulse-gain", type=float, default=15.0)
    p.add_argument("--baseline", type=float, default=120.0, help="baseline brightness")
    p.add_argument("--skew", type=float, default=0.0, help="envelope asymmetry in (-1, 1)")
    p.add_argument("--jitter-sd", type=float, default=0.0, help="in-band pressure tremor SD")
    p.add_argument("--hold-offset", type=float, default=0.0, help="max per-hold aim error")
    p.add_argument("--frame-rate", type=float, default=30.0)
    p.add_argument("--mode", choices=("frames", "series"), default="frames")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", help="JSON overrides: subject, twin, protocol, profile, seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("envelope", help="write the oscillogram as CSV and SVG")
    p.add_argument("manifest")
    p.add_argument("--csv", help="oscillogram CSV path")
    p.add_argument("--svg", help="SVG plot path")
    p.add_argument("--levels-csv", help="per-level pulse metrics CSV path")
    p.add_argument("--ppg-csv", help="debug dump of each hold window (t, raw, filtered)")
    _add_decode_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_envelope)

    p = sub.add_parser("compat", help="check a phone's flash-to-camera distance")
    p.add_argument("phone_model", nargs="?")
    p.add_argument("--distance", type=float, help="flash-to-camera distance in mm")
    p.add_argument("--registry", help="profile directory (default: bundled registry)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compat)

    p = sub.add_parser("train", help="fit a regression decoder on labeled sessions")
    p.add_argument("manifests", nargs="*")
    p.add_argument("--list", help="text file with one manifest path per line")
    p.add_argument("--holdout", nargs="*", help="held-out manifests to evaluate")
    p.add_argument("--holdout-list")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--features", help="comma-separated feature names")
    p.add_argument("--ridge", type=float, default=1e-3)
    _add_decode_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BPClipError as exc:
        print(f"bpclip: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"bpclip: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

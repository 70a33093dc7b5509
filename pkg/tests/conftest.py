"""Shared cohort runs; the expensive ones are computed once per test session."""

import numpy as np
import pytest

from bpclip.device import DeviceProfile
from bpclip.oscillometry import LabeledExample, train_regression
from bpclip.pipeline import DecodeOptions, analyze_samples
from bpclip.protocol import SessionConfig
from bpclip.twin import TwinParams, make_cohort, matched_ratios, simulate_session

PROFILE = DeviceProfile()
CONFIG = SessionConfig()
NOISY_TWIN = TwinParams(jitter_sd=2.0, hold_offset_max=3.0)
NOISE_SD = 2.0


def run_cohort(subjects, seed0, options, params=None, from_frames=False):
    """(subject, AnalysisResult) per subject; session seed is seed0 + index."""
    from bpclip.pipeline import analyze_frames

    out = []
    for i, subject in enumerate(subjects):
        session = simulate_session(subject, PROFILE, CONFIG, seed=seed0 + i, params=params)
        if from_frames:
            result = analyze_frames(session.iter_frames(), PROFILE, CONFIG, options)
        else:
            result = analyze_samples(session.samples, CONFIG, options)
        out.append((subject, result))
    return out


@pytest.fixture(scope="session")
def noisy_cohort():
    """200 training and 50 test subjects with noise_sd 2 and in-band jitter.

    Training sessions go through the ground-truth sample stream; the test
    cohort runs from rendered frames. The test cohort is the noisy version of
    the oracle-closure cohort (same seed).
    """
    options = DecodeOptions()
    train = run_cohort(make_cohort(200, seed=2, noise_sd=NOISE_SD), 10_000, options,
                       NOISY_TWIN)
    test = run_cohort(make_cohort(50, seed=1, noise_sd=NOISE_SD), 100, options, NOISY_TWIN,
                      from_frames=True)
    examples = [LabeledExample.from_fit(r.oscillogram, r.fit, s.true_systolic, s.true_diastolic)
                for s, r in train if r.fit is not None]
    model = train_regression(examples)
    return {"train": train, "test": test, "model": model, "n_examples": len(examples)}


def matched_options():
    r_s, r_d = matched_ratios()
    return DecodeOptions(r_s=r_s, r_d=r_d)


def abs_errors(pairs, estimate_of):
    es, ed = [], []
    for subject, result in pairs:
        est = estimate_of(result)
        if est is None:
            es.append(np.nan)
            ed.append(np.nan)
            continue
        es.append(abs(est.systolic - subject.true_systolic))
        ed.append(abs(est.diastolic - subject.true_diastolic))
    return np.array(es), np.array(ed)

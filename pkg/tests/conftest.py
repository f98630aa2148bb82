"""Shared helpers for the test suite."""

import numpy as np
import pytest

from ecgrhythm.conduction import BeatObservation, Wave


def make_beats(rr_ms, p_flags=None, tags=None, fs=300, start_ms=400.0, amp=1.0):
    """Synthetic BeatObservation list from an RR schedule (no signal needed)."""
    n = len(rr_ms) + 1
    peaks_ms = start_ms + np.concatenate([[0.0], np.cumsum(rr_ms)])
    p_flags = [True] * n if p_flags is None else list(p_flags)
    tags = ["NORMAL"] * n if tags is None else list(tags)
    beats = []
    for k in range(n):
        peak = int(round(peaks_ms[k] * fs / 1000.0))
        p = None
        if p_flags[k]:
            p = Wave(onset=peak - 60, peak=peak - 48, offset=peak - 36, amp=0.15)
        t = Wave(onset=peak + 40, peak=peak + 70, offset=peak + 100, amp=0.3)
        beats.append(BeatObservation(
            qrs_onset=peak - 12, qrs_peak=peak, qrs_offset=peak + 12,
            qrs_amp=amp, qrs_polarity=1, p=p, t=t, tag=tags[k]))
    return beats


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

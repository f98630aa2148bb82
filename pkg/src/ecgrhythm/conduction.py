"""QRS detection and P/QRS/T delineation: the initial per-beat evidence.

The detector is a Pan-Tompkins-style energy chain (difference, moving
average, squaring, 150 ms integration) with an adaptive threshold at 0.4
times the running median of the last 8 accepted peak heights. All decision
thresholds are relative to signal statistics, so detections, fiducials and
tags are invariant to amplitude scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConductionConfig
from .errors import EvidenceError
from .signal_io import Record, ms_to_samples

NORMAL = "NORMAL"
VENTRICULAR = "VENTRICULAR"
FUSION = "FUSION"
SPURIOUS = "SPURIOUS"

TAGS = (NORMAL, VENTRICULAR, FUSION, SPURIOUS)

DEFAULT_CONDUCTION = ConductionConfig()


@dataclass
class Wave:
    """One delineated wave: sample indices and signed peak amplitude (mV)."""

    onset: int
    peak: int
    offset: int
    amp: float

    def __post_init__(self):
        if not self.onset < self.peak < self.offset:
            raise EvidenceError(
                f"wave fiducials not ordered: {self.onset}, {self.peak}, {self.offset}")


@dataclass
class BeatObservation:
    qrs_onset: int
    qrs_peak: int
    qrs_offset: int
    qrs_amp: float
    qrs_polarity: int
    p: Wave | None = None
    t: Wave | None = None
    tag: str = NORMAL
    morph_dist: float = 0.0

    def __post_init__(self):
        if not self.qrs_onset < self.qrs_peak < self.qrs_offset:
            raise EvidenceError(
                f"QRS fiducials not ordered: {self.qrs_onset}, {self.qrs_peak}, {self.qrs_offset}")
        if self.p is not None and self.p.offset > self.qrs_onset:
            raise EvidenceError("P wave overlaps QRS onset")
        if self.t is not None and self.t.onset < self.qrs_offset:
            raise EvidenceError("T wave overlaps QRS offset")
        if self.tag not in TAGS:
            raise EvidenceError(f"unknown beat tag {self.tag!r}")
        if not np.isfinite(self.morph_dist):
            raise EvidenceError("non-finite morphology distance")

    def qrs_duration_ms(self, fs: float) -> float:
        return 1000.0 * (self.qrs_offset - self.qrs_onset) / fs


@dataclass
class QrsTemplate:
    """Unit-energy dominant QRS shape over a fixed 120 ms window."""

    waveform: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.waveform = np.asarray(self.waveform, dtype=np.float64)
        energy = float(np.sum(self.waveform**2))
        if abs(energy - 1.0) > 1e-9:
            raise EvidenceError(f"template energy {energy} != 1")


def _moving_average(x: np.ndarray, w: int) -> np.ndarray:
    if w <= 1:
        return x.copy()
    return np.convolve(x, np.ones(w) / w, mode="same")


def detect_qrs(r: Record, cfg: ConductionConfig = DEFAULT_CONDUCTION) -> np.ndarray:
    """R-peak sample indices, strictly increasing, gaps >= the refractory period."""
    if r.duration_s < 2.0:
        raise EvidenceError(f"record {r.id}: too short for QRS detection ({r.duration_s:.2f} s)")
    x = r.samples
    fs = r.fs
    n = x.size

    w_smooth = max(1, int(round(fs / cfg.band_high_hz)))
    bp = np.diff(x)
    bp = _moving_average(bp, w_smooth)
    bp = _moving_average(bp, w_smooth)
    sq = np.square(bp)
    w_int = max(1, ms_to_samples(cfg.integrate_ms, fs))
    integ = _moving_average(sq, w_int)

    # local maxima (first sample of a plateau)
    rising = integ[1:-1] > integ[:-2]
    falling = integ[1:-1] >= integ[2:]
    maxima = np.flatnonzero(rising & falling) + 1
    if maxima.size == 0:
        return np.zeros(0, dtype=np.int64)

    refractory = ms_to_samples(cfg.refractory_ms, fs)
    # bootstrap the accepted-peak history from a 2 s learning window
    history = [float(np.max(integ[: 2 * fs]))]
    if history[0] <= 0.0:
        history = [float(np.max(integ))]
        if history[0] <= 0.0:
            return np.zeros(0, dtype=np.int64)
    accepted = []
    last = -refractory
    for i in maxima:
        if i - last < refractory:
            continue
        if integ[i] > cfg.threshold_factor * float(np.median(history)):
            accepted.append(i)
            last = i
            history.append(float(integ[i]))
            if len(history) > cfg.peak_history:
                history.pop(0)

    # refine: strongest squared slope inside the (centred) integration window,
    # then the apex = largest |deflection| nearby (the caller has removed the
    # baseline, so the isoelectric line sits at zero)
    half = ms_to_samples(70.0, fs)
    w_half = w_int // 2 + 1
    refined = []
    for i in accepted:
        lo = max(0, i - w_half)
        j = lo + int(np.argmax(sq[lo: min(sq.size, i + w_half)]))
        a = max(0, j - half)
        b = min(n, j + half + 1)
        apex = a + int(np.argmax(np.abs(x[a:b])))
        refined.append(apex)

    # enforce the refractory period on refined apices, keeping the stronger
    out: list[int] = []
    for idx in refined:
        if out and idx - out[-1] < refractory:
            if abs(x[idx]) > abs(x[out[-1]]):
                out[-1] = idx
            continue
        if out and idx == out[-1]:
            continue
        out.append(idx)
    return np.asarray(out, dtype=np.int64)


def _ten_ms_slope(x: np.ndarray, fs: float) -> np.ndarray:
    span = max(1, ms_to_samples(10.0, fs))
    sl = np.zeros_like(x)
    sl[: x.size - span] = x[span:] - x[: x.size - span]
    return sl


def _qrs_bounds(x: np.ndarray, peak: int, fs: float, cfg: ConductionConfig) -> tuple[int, int]:
    n = x.size
    cap = ms_to_samples(cfg.qrs_halfwidth_cap_ms, fs)
    sl = np.abs(_ten_ms_slope(x, fs))
    lo = max(0, peak - cap)
    hi = min(n - 1, peak + cap)
    left = sl[lo:peak] if peak > lo else sl[peak:peak + 1]
    right = sl[peak:hi + 1]
    thresh = cfg.slope_fraction * max(float(left.max(initial=0.0)), float(right.max(initial=0.0)))

    onset = lo
    if peak > lo:
        m_l = lo + int(np.argmax(left))
        onset = lo
        for i in range(m_l, lo - 1, -1):
            if sl[i] < thresh:
                onset = i
                break
    offset = hi
    if hi > peak:
        m_r = peak + int(np.argmax(right))
        offset = hi
        for i in range(m_r, hi + 1):
            if sl[i] < thresh:
                offset = i
                break
    onset = min(onset, peak - 1)
    offset = max(offset, peak + 1)
    return max(onset, 0), min(offset, n - 1) if offset < n else n - 1


def _wave_in_window(
    x: np.ndarray,
    w_lo: int,
    w_hi: int,
    presence_thresh: float,
    extent_frac: float,
) -> Wave | None:
    """Largest |deflection| in [w_lo, w_hi); None if absent or on the boundary."""
    if w_hi - w_lo < 3:
        return None
    seg = x[w_lo:w_hi]
    peak = w_lo + int(np.argmax(np.abs(seg)))
    amp = float(x[peak])
    if abs(amp) <= presence_thresh or peak in (w_lo, w_hi - 1):
        return None
    level = extent_frac * abs(amp)
    onset = w_lo
    for i in range(peak - 1, w_lo - 1, -1):
        if abs(x[i]) <= level:
            onset = i
            break
    offset = w_hi - 1
    for i in range(peak + 1, w_hi):
        if abs(x[i]) <= level:
            offset = i
            break
    onset = min(onset, peak - 1)
    offset = max(offset, peak + 1)
    return Wave(onset=onset, peak=peak, offset=offset, amp=amp)


def delineate_beat(
    r: Record,
    qrs_peak: int,
    prev_offset: int,
    next_onset: int,
    cfg: ConductionConfig = DEFAULT_CONDUCTION,
) -> BeatObservation:
    """Delineate one beat. ``prev_offset``/``next_onset`` bound the search

    (use -1 and len(samples) at the record edges). The caller is expected to
    have removed baseline wander; amplitudes are read against zero.
    """
    x = r.samples
    fs = r.fs
    n = x.size
    if not -1 <= prev_offset < qrs_peak < next_onset <= n:
        raise EvidenceError(
            f"beat window inverted: prev_offset={prev_offset}, peak={qrs_peak}, next_onset={next_onset}")
    if qrs_peak <= 0 or qrs_peak >= n - 1:
        raise EvidenceError(f"QRS peak {qrs_peak} at record boundary")

    onset, offset = _qrs_bounds(x, qrs_peak, fs, cfg)
    onset = max(onset, prev_offset + 1, 0)
    offset = min(offset, next_onset - 1, n - 1)
    onset = min(onset, qrs_peak - 1)
    offset = max(offset, qrs_peak + 1)
    amp = float(x[qrs_peak])
    presence = cfg.wave_presence_fraction * abs(amp)

    t_lo = offset + ms_to_samples(cfg.t_search_start_ms, fs)
    t_hi = min(offset + ms_to_samples(cfg.t_search_end_ms, fs), next_onset, n)
    t_wave = _wave_in_window(x, t_lo, t_hi, presence, cfg.wave_extent_fraction) if t_lo < t_hi else None
    if t_wave is not None and t_wave.onset < offset:
        t_wave = None

    p_lo = max(onset - ms_to_samples(cfg.p_window_ms, fs), prev_offset + 1, 0)
    p_hi = onset
    p_wave = _wave_in_window(x, p_lo, p_hi, presence, cfg.wave_extent_fraction) if p_lo < p_hi else None
    if p_wave is not None:
        dur_ms = 1000.0 * (p_wave.offset - p_wave.onset) / fs
        if not cfg.p_duration_min_ms <= dur_ms <= cfg.p_duration_max_ms:
            p_wave = None
        elif p_wave.offset > onset:
            p_wave = None

    return BeatObservation(
        qrs_onset=onset,
        qrs_peak=qrs_peak,
        qrs_offset=offset,
        qrs_amp=amp,
        qrs_polarity=1 if amp >= 0 else -1,
        p=p_wave,
        t=t_wave,
    )


def delineate_record(
    r: Record,
    peaks: np.ndarray,
    cfg: ConductionConfig = DEFAULT_CONDUCTION,
) -> list[BeatObservation]:
    """Delineate every detected beat in temporal order."""
    n = r.samples.size
    peaks = [int(p) for p in peaks if 0 < p < n - 1]
    onsets = {}
    for p in peaks:
        onsets[p] = _qrs_bounds(r.samples, p, r.fs, cfg)[0]
    beats: list[BeatObservation] = []
    prev_bound = -1
    for i, p in enumerate(peaks):
        next_onset = onsets[peaks[i + 1]] if i + 1 < len(peaks) else n
        next_onset = max(next_onset, p + 2)
        prev_bound = min(prev_bound, p - 2)
        beat = delineate_beat(r, p, prev_bound, next_onset, cfg)
        beats.append(beat)
        prev_bound = beat.t.offset if beat.t is not None else beat.qrs_offset
    return beats


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.dot(a, b) / denom)


def _snippet(x: np.ndarray, peak: int, half: int) -> np.ndarray:
    lo = peak - half
    hi = peak + half
    pad_lo = max(0, -lo)
    pad_hi = max(0, hi - x.size)
    seg = x[max(0, lo): min(x.size, hi)]
    if pad_lo or pad_hi:
        seg = np.pad(seg, (pad_lo, pad_hi), mode="edge")
    return seg


def dominant_template(
    r: Record,
    beats: list[BeatObservation],
    cfg: ConductionConfig = DEFAULT_CONDUCTION,
) -> tuple[QrsTemplate, np.ndarray, list[str]]:
    """Dominant QRS template, per-beat morphology distance, and beat tags.

    Beats are greedily agglomerated by centroid correlation; the largest
    cluster's unit-energy mean is the template. Tags follow the distance and
    duration rules; the input beats are not modified.
    """
    if len(beats) < 3:
        raise EvidenceError(f"need >= 3 beats for a template, got {len(beats)}")
    half = ms_to_samples(cfg.template_ms, r.fs) // 2
    snippets = [_snippet(r.samples, b.qrs_peak, half) for b in beats]

    clusters: list[dict] = []
    for i, s in enumerate(snippets):
        for c in clusters:
            if _corr(s, c["mean"]) >= cfg.cluster_correlation:
                c["mean"] = (c["mean"] * c["n"] + s) / (c["n"] + 1)
                c["n"] += 1
                c["members"].append(i)
                break
        else:
            clusters.append({"mean": s.copy(), "n": 1, "members": [i]})
    best = max(clusters, key=lambda c: c["n"])
    mean = np.mean([snippets[i] for i in best["members"]], axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise EvidenceError("degenerate all-zero dominant template")
    template = QrsTemplate(waveform=mean / norm)

    dists = np.array([np.clip(1.0 - _corr(s, template.waveform), 0.0, 2.0) for s in snippets])
    durs = np.array([b.qrs_duration_ms(r.fs) for b in beats])
    med_dur = float(np.median(durs))
    tags = []
    for dist, dur in zip(dists, durs):
        if dist > cfg.ventricular_dist and dur > cfg.wide_qrs_ms and dur > cfg.ventricular_duration_ratio * med_dur:
            tags.append(VENTRICULAR)
        elif cfg.fusion_dist < dist <= cfg.ventricular_dist and dur > med_dur:
            tags.append(FUSION)
        else:
            tags.append(NORMAL)
    return template, dists, tags


def tag_beats(
    r: Record,
    beats: list[BeatObservation],
    cfg: ConductionConfig = DEFAULT_CONDUCTION,
) -> QrsTemplate | None:
    """Annotate beats in place with morphology distance and tags."""
    if len(beats) < 3:
        return None
    template, dists, tags = dominant_template(r, beats, cfg)
    for b, d, tag in zip(beats, dists, tags):
        b.morph_dist = float(d)
        b.tag = tag
    return template


def export_annotations(beats: list[BeatObservation]) -> str:
    """Tab-separated rows: qrs_onset qrs_peak qrs_offset tag p_peak|- t_peak|-"""
    rows = []
    for b in beats:
        p = str(b.p.peak) if b.p is not None else "-"
        t = str(b.t.peak) if b.t is not None else "-"
        rows.append(f"{b.qrs_onset}\t{b.qrs_peak}\t{b.qrs_offset}\t{b.tag}\t{p}\t{t}")
    return "\n".join(rows) + ("\n" if rows else "")

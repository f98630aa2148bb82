"""Record-level and per-beat features computed from an interpretation.

The canonical 70-entry global vector is 22 rhythm entries (r01-r22), 26
morphological (m01-m26), 14 signal-quality (q01-q14) and 8 anomaly flags
(a01-a08); names and order are frozen in ``GLOBAL_FEATURE_NAMES`` and
documented in docs/features.md together with each entry's behaviour under
amplitude scaling. Records whose interpretation carries fewer than 3 beats
get the documented fallback vector (zeros plus the quality entries that are
still defined, with q14 set).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .config import FeatureConfig
from .conduction import BeatObservation, FUSION, NORMAL, VENTRICULAR
from .errors import EvidenceError
from .signal_io import Record, ms_to_samples

DEFAULT_FEATURES = FeatureConfig()

GLOBAL_FEATURE_NAMES = (
    # rhythm
    "r01_rr_min_ms", "r02_rr_max_ms", "r03_rr_median_ms", "r04_rr_mean_ms",
    "r05_rr_std_ms", "r06_rr_mad_ms", "r07_rr_mad_over_median",
    "r08_pnn5", "r09_pnn10", "r10_pnn50", "r11_pnn100", "r12_rmssd_ms",
    "r13_drr_median_ms", "r14_drr_max_ms", "r15_rr_iqr_ms", "r16_hr_bpm",
    "r17_episode_count", "r18_episode_dur_median_s", "r19_episode_dur_max_s",
    "r20_afib_time_frac", "r21_sinus_time_frac", "r22_dominant_pattern_time_frac",
    # morphology
    "m01_p_presence_frac", "m02_p_dur_median_ms", "m03_p_amp_median_mv",
    "m04_pr_median_ms", "m05_qrs_dur_median_ms", "m06_qrs_amp_median_mv",
    "m07_qrs_positive_frac", "m08_morph_dist_median", "m09_morph_dist_max",
    "m10_vent_tag_frac", "m11_fusion_tag_frac", "m12_wide_qrs_frac",
    "m13_t_presence_frac", "m14_t_dur_median_ms", "m15_t_amp_median_mv",
    "m16_qt_median_ms", "m17_qtc_median", "m18_p_to_qrs_amp_ratio",
    "m19_t_to_qrs_amp_ratio", "m20_qrs_amp_iqr_mv", "m21_qrs_dur_iqr_ms",
    "m22_tp_dur_median_ms", "m23_tp_range_median_mv", "m24_tp_dom_freq_hz",
    "m25_tp_spec_prominence", "m26_tp_flutter_band_frac",
    # quality
    "q01_duration_s", "q02_profile_per_s", "q03_beat_profile_median",
    "q04_beat_profile_rel_mad", "q05_p_window_profile_median",
    "q06_deleted_beat_frac", "q07_inserted_beat_frac", "q08_unexplained_time_frac",
    "q09_unexplained_beat_frac", "q10_tp_profile_per_s_median",
    "q11_hf_noise_frac", "q12_flat_frac", "q13_beat_count",
    "q14_insufficient_evidence",
    # anomaly flags
    "a01_tachycardia", "a02_bradycardia", "a03_wide_qrs", "a04_vent_or_fusion",
    "a05_extrasystole", "a06_long_pr", "a07_vent_tachy", "a08_flutter",
)

# entries multiplied by c when the record is scaled by c > 0; all others unchanged
AMPLITUDE_SCALED = frozenset({
    "m03_p_amp_median_mv", "m06_qrs_amp_median_mv", "m15_t_amp_median_mv",
    "m20_qrs_amp_iqr_mv", "m23_tp_range_median_mv",
    "q02_profile_per_s", "q03_beat_profile_median", "q05_p_window_profile_median",
    "q10_tp_profile_per_s_median",
})

BEAT_FEATURE_NAMES = (
    "b01_rr_prev_ms", "b02_rr_next_ms", "b03_drr_prev_ms", "b04_drr_next_ms",
    "b05_rr_prev_rel", "b06_p_present", "b07_p_dur_ms", "b08_p_amp_mv",
    "b09_pr_ms", "b10_qrs_dur_ms", "b11_qrs_amp_mv", "b12_qrs_polarity",
    "b13_morph_dist", "b14_qt_ms", "b15_t_dur_ms", "b16_t_amp_mv",
    "b17_t_polarity", "b18_p_window_profile", "b19_tp_profile",
    "b20_tag_normal", "b21_tag_ventricular", "b22_tag_fusion",
)

N_GLOBAL = len(GLOBAL_FEATURE_NAMES)
N_BEAT = len(BEAT_FEATURE_NAMES)


@dataclass
class GlobalFeatures:
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.v.shape != (N_GLOBAL,):
            raise EvidenceError(f"global feature vector must have {N_GLOBAL} entries")
        if not np.all(np.isfinite(self.v)):
            raise EvidenceError("non-finite global features")
        flags = self.v[-8:]
        if not np.all((flags == 0.0) | (flags == 1.0)):
            raise EvidenceError("anomaly flags must be 0/1")

    def __getitem__(self, name: str) -> float:
        return float(self.v[GLOBAL_FEATURE_NAMES.index(name)])


@dataclass
class BeatFeatureSequence:
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[1] != N_BEAT:
            raise EvidenceError(f"beat feature rows must have {N_BEAT} columns")
        if not np.all(np.isfinite(self.rows)):
            raise EvidenceError("non-finite beat features")


@dataclass
class AnomalyFlags:
    tachycardia: bool = False
    bradycardia: bool = False
    wide_qrs: bool = False
    vent_or_fusion: bool = False
    extrasystole: bool = False
    long_pr: bool = False
    vent_tachy: bool = False
    flutter: bool = False

    def to_array(self) -> np.ndarray:
        return np.array([
            self.tachycardia, self.bradycardia, self.wide_qrs, self.vent_or_fusion,
            self.extrasystole, self.long_pr, self.vent_tachy, self.flutter,
        ], dtype=np.float64)


def profile(samples: np.ndarray) -> float:
    """Sum of absolute first differences of a segment (mV)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise EvidenceError("profile needs a segment of at least 2 samples")
    return float(np.sum(np.abs(np.diff(samples))))


def heart_rate_bpm(rr_ms: np.ndarray) -> float:
    """Rate derived from the median RR interval."""
    return 60000.0 / float(np.median(rr_ms))


def rr_intervals_ms(beats: list[BeatObservation], fs: float) -> np.ndarray:
    peaks = np.array([b.qrs_peak for b in beats], dtype=np.float64)
    return np.diff(peaks) * 1000.0 / fs


def rr_statistics(beats: list[BeatObservation], fs: float = 300.0) -> np.ndarray:
    """Entries r01-r16 of the global vector."""
    if len(beats) < 3:
        raise EvidenceError(f"RR statistics need >= 3 beats, got {len(beats)}")
    rr = rr_intervals_ms(beats, fs)
    drr = np.diff(rr)
    med = float(np.median(rr))
    mad = float(np.median(np.abs(rr - med)))
    return np.array([
        float(rr.min()),
        float(rr.max()),
        med,
        float(rr.mean()),
        float(rr.std()),
        mad,
        mad / med,
        float(np.mean(np.abs(drr) > 5.0)),
        float(np.mean(np.abs(drr) > 10.0)),
        float(np.mean(np.abs(drr) > 50.0)),
        float(np.mean(np.abs(drr) > 100.0)),
        float(np.sqrt(np.mean(drr**2))),
        float(np.median(np.abs(drr))),
        float(np.max(np.abs(drr))) if drr.size else 0.0,
        float(np.percentile(rr, 75) - np.percentile(rr, 25)),
        heart_rate_bpm(rr),
    ])


def episode_time_spans(episodes, beats, fs: float, n_samples: int):
    """Episode time attribution: spans tile [0, duration] with boundaries at
    the midpoints between adjacent episodes' edge beats."""
    peaks_s = [b.qrs_peak / fs for b in beats]
    duration = n_samples / fs
    spans = []
    for k, ep in enumerate(episodes):
        start = 0.0 if k == 0 else (peaks_s[episodes[k - 1].last] + peaks_s[ep.first]) / 2.0
        end = duration if k == len(episodes) - 1 else (
            peaks_s[ep.last] + peaks_s[episodes[k + 1].first]) / 2.0
        spans.append((start, end))
    return spans


def tp_gap_spectra(
    beats: list[BeatObservation],
    samples: np.ndarray,
    fs: float,
    nfft: int = 1024,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-gap Hann periodogram magnitudes over 0.5-30 Hz.

    Row k describes the baseline gap preceding beat k (row 0 is empty);
    ``counts[k]`` is 1 when the gap was long enough to transform.
    """
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
    keep = (freqs >= 0.5) & (freqs <= 30.0)
    rows = np.zeros((len(beats), int(keep.sum())))
    counts = np.zeros(len(beats))
    for k in range(1, len(beats)):
        prev = beats[k - 1]
        start = prev.t.offset if prev.t is not None else prev.qrs_offset
        stop = beats[k].p.onset if beats[k].p is not None else beats[k].qrs_onset
        seg = samples[start:stop]
        if seg.size < 8:
            continue
        seg = (seg - seg.mean()) * np.hanning(seg.size)
        rows[k] = np.abs(np.fft.rfft(seg, nfft))[keep]
        counts[k] = 1.0
    return freqs[keep], rows, counts


def _median_or(values, default: float = 0.0) -> float:
    vals = [v for v in values if np.isfinite(v)]
    return float(np.median(vals)) if vals else default


def _iqr_or(values, default: float = 0.0) -> float:
    if not values:
        return default
    return float(np.percentile(values, 75) - np.percentile(values, 25))


def _local_rr_median(rr: np.ndarray, k: int, window: int) -> float:
    lo = max(0, k - window)
    return float(np.median(rr[lo: k + window + 1]))


def _extrasystole_present(rr: np.ndarray, cfg: FeatureConfig) -> bool:
    # beat k (1..n-2) is premature with a compensatory pause
    for k in range(1, rr.size):
        local = _local_rr_median(rr, k - 1, cfg.extrasystole_window)
        if rr[k - 1] < cfg.extrasystole_short * local and rr[k] > cfg.extrasystole_long * local:
            return True
    return False


def detect_anomalies(itp, fs: float = 300.0, cfg: FeatureConfig = DEFAULT_FEATURES) -> AnomalyFlags:
    """The eight rule-based anomaly flags of the global vector."""
    beats = itp.beats
    flags = AnomalyFlags()
    flags.vent_or_fusion = any(b.tag in (VENTRICULAR, FUSION) for b in beats)
    flags.vent_tachy = any(ep.pattern == "VENT_TACHY" for ep in itp.episodes)
    flags.flutter = any(ep.pattern == "FLUTTER" for ep in itp.episodes)
    durs = [b.qrs_duration_ms(fs) for b in beats]
    if durs:
        flags.wide_qrs = bool(np.median(durs) > cfg.wide_qrs_ms)
    prs = [1000.0 * (b.qrs_onset - b.p.onset) / fs for b in beats if b.p is not None]
    if prs:
        flags.long_pr = bool(np.median(prs) > cfg.long_pr_ms)
    if len(beats) >= 2:
        rr = rr_intervals_ms(beats, fs)
        hr = heart_rate_bpm(rr)
        flags.tachycardia = bool(hr > cfg.tachy_hr)
        flags.bradycardia = bool(hr < cfg.brady_hr)
        flags.extrasystole = _extrasystole_present(rr, cfg)
    return flags


def _hf_noise_fraction(x: np.ndarray, fs: float, cfg: FeatureConfig) -> float:
    nperseg = min(cfg.spectral_nfft, x.size)
    freqs, pxx = scipy.signal.welch(x, fs=fs, nperseg=nperseg)
    total = float(np.sum(pxx[freqs >= 0.5]))
    if total <= 0:
        return 0.0
    return float(np.sum(pxx[freqs > cfg.noise_band_hz]) / total)


def _flat_fraction(x: np.ndarray, cfg: FeatureConfig) -> float:
    rng = float(x.max() - x.min())
    if rng <= 0:
        return 1.0
    return float(np.mean(np.abs(np.diff(x)) < cfg.flat_delta_fraction * rng))


def global_features(r: Record, itp, cfg: FeatureConfig = DEFAULT_FEATURES) -> GlobalFeatures:
    """The canonical 70-entry record-level vector."""
    x = r.samples
    fs = r.fs
    beats = itp.beats
    v = np.zeros(N_GLOBAL)
    idx = {name: i for i, name in enumerate(GLOBAL_FEATURE_NAMES)}

    def put(name, value):
        v[idx[name]] = value

    duration = x.size / fs
    put("q01_duration_s", duration)
    put("q02_profile_per_s", profile(x) / duration)
    put("q08_unexplained_time_frac", itp.unexplained_time_frac)
    put("q11_hf_noise_frac", _hf_noise_fraction(x, fs, cfg))
    put("q12_flat_frac", _flat_fraction(x, cfg))
    put("q13_beat_count", float(len(beats)))

    initial_beats = len(beats) + itp.deleted_count - itp.inserted_count
    if initial_beats > 0:
        put("q06_deleted_beat_frac", itp.deleted_count / initial_beats)
    if beats:
        put("q07_inserted_beat_frac", itp.inserted_count / len(beats))

    if len(beats) < 3:
        put("q14_insufficient_evidence", 1.0)
        put("q08_unexplained_time_frac", 1.0)
        return GlobalFeatures(v=v)

    rr = rr_intervals_ms(beats, fs)
    v[idx["r01_rr_min_ms"]: idx["r16_hr_bpm"] + 1] = rr_statistics(beats, fs)

    spans = episode_time_spans(itp.episodes, beats, fs, x.size)
    durations = np.array([e - s for s, e in spans])
    put("r17_episode_count", float(len(itp.episodes)))
    put("r18_episode_dur_median_s", float(np.median(durations)))
    put("r19_episode_dur_max_s", float(durations.max()))
    by_pattern: dict[str, float] = {}
    for ep, d in zip(itp.episodes, durations):
        by_pattern[ep.pattern] = by_pattern.get(ep.pattern, 0.0) + float(d)
    put("r20_afib_time_frac", by_pattern.get("AFIB", 0.0) / duration)
    put("r21_sinus_time_frac", by_pattern.get("SINUS", 0.0) / duration)
    put("r22_dominant_pattern_time_frac", max(by_pattern.values()) / duration)

    # morphology
    p_beats = [b for b in beats if b.p is not None]
    t_beats = [b for b in beats if b.t is not None]
    qrs_durs = [b.qrs_duration_ms(fs) for b in beats]
    qrs_amps = [abs(b.qrs_amp) for b in beats]
    put("m01_p_presence_frac", len(p_beats) / len(beats))
    put("m02_p_dur_median_ms", _median_or(
        [1000.0 * (b.p.offset - b.p.onset) / fs for b in p_beats]))
    put("m03_p_amp_median_mv", _median_or([abs(b.p.amp) for b in p_beats]))
    put("m04_pr_median_ms", _median_or(
        [1000.0 * (b.qrs_onset - b.p.onset) / fs for b in p_beats]))
    put("m05_qrs_dur_median_ms", _median_or(qrs_durs))
    put("m06_qrs_amp_median_mv", _median_or(qrs_amps))
    put("m07_qrs_positive_frac", float(np.mean([b.qrs_polarity > 0 for b in beats])))
    put("m08_morph_dist_median", _median_or([b.morph_dist for b in beats]))
    put("m09_morph_dist_max", float(max(b.morph_dist for b in beats)))
    put("m10_vent_tag_frac", float(np.mean([b.tag == VENTRICULAR for b in beats])))
    put("m11_fusion_tag_frac", float(np.mean([b.tag == FUSION for b in beats])))
    put("m12_wide_qrs_frac", float(np.mean([d > cfg.wide_qrs_ms for d in qrs_durs])))
    put("m13_t_presence_frac", len(t_beats) / len(beats))
    put("m14_t_dur_median_ms", _median_or(
        [1000.0 * (b.t.offset - b.t.onset) / fs for b in t_beats]))
    put("m15_t_amp_median_mv", _median_or([abs(b.t.amp) for b in t_beats]))
    qt = [1000.0 * (b.t.offset - b.qrs_onset) / fs for b in t_beats]
    put("m16_qt_median_ms", _median_or(qt))
    med_rr_s = float(np.median(rr)) / 1000.0
    put("m17_qtc_median", _median_or(qt) / np.sqrt(med_rr_s) if qt else 0.0)
    med_qrs_amp = _median_or(qrs_amps)
    if med_qrs_amp > 0:
        put("m18_p_to_qrs_amp_ratio", v[idx["m03_p_amp_median_mv"]] / med_qrs_amp)
        put("m19_t_to_qrs_amp_ratio", v[idx["m15_t_amp_median_mv"]] / med_qrs_amp)
    put("m20_qrs_amp_iqr_mv", _iqr_or(qrs_amps))
    put("m21_qrs_dur_iqr_ms", _iqr_or(qrs_durs))

    # TP segments
    tp_durs, tp_ranges, tp_profile_rates = [], [], []
    for k in range(1, len(beats)):
        prev = beats[k - 1]
        start = prev.t.offset if prev.t is not None else prev.qrs_offset
        stop = beats[k].p.onset if beats[k].p is not None else beats[k].qrs_onset
        seg = x[start:stop]
        if seg.size < 2:
            continue
        tp_durs.append(1000.0 * seg.size / fs)
        tp_ranges.append(float(seg.max() - seg.min()))
        tp_profile_rates.append(profile(seg) / (seg.size / fs))
    put("m22_tp_dur_median_ms", _median_or(tp_durs))
    put("m23_tp_range_median_mv", _median_or(tp_ranges))
    put("q10_tp_profile_per_s_median", _median_or(tp_profile_rates))

    freqs, rows, counts = tp_gap_spectra(beats, x, fs, cfg.spectral_nfft)
    if counts.sum() >= 1:
        spec = rows.sum(axis=0) / counts.sum()
        med_spec = float(np.median(spec))
        dom = int(np.argmax(spec))
        put("m24_tp_dom_freq_hz", float(freqs[dom]))
        put("m25_tp_spec_prominence", float(spec[dom] / med_spec) if med_spec > 0 else 0.0)
        total_mag = float(spec.sum())
        band = (freqs >= 4.0) & (freqs <= 6.0)
        if total_mag > 0:
            put("m26_tp_flutter_band_frac", float(spec[band].sum() / total_mag))

    # profiles around beats
    half = ms_to_samples(cfg.p_profile_window_ms / 2.0, fs)
    beat_profiles = []
    p_window_profiles = []
    for b in beats:
        lo = max(0, b.qrs_peak - half)
        hi = min(x.size, b.qrs_peak + half)
        if hi - lo >= 2:
            beat_profiles.append(profile(x[lo:hi]))
        lo = max(0, b.qrs_onset - ms_to_samples(cfg.p_profile_window_ms, fs))
        if b.qrs_onset - lo >= 2:
            p_window_profiles.append(profile(x[lo: b.qrs_onset]))
    med_bp = _median_or(beat_profiles)
    put("q03_beat_profile_median", med_bp)
    if med_bp > 0 and beat_profiles:
        put("q04_beat_profile_rel_mad",
            float(np.median(np.abs(np.asarray(beat_profiles) - med_bp))) / med_bp)
    put("q05_p_window_profile_median", _median_or(p_window_profiles))

    unexplained_beats = sum(
        ep.last - ep.first + 1 for ep in itp.episodes if ep.pattern == "UNEXPLAINED")
    put("q09_unexplained_beat_frac", unexplained_beats / len(beats))

    v[-8:] = detect_anomalies(itp, fs, cfg).to_array()
    return GlobalFeatures(v=v)


def beat_features(r: Record, itp, cfg: FeatureConfig = DEFAULT_FEATURES) -> BeatFeatureSequence:
    """Per-beat 22-entry rows in temporal order.

    Boundary beats substitute the record-median RR for missing neighbours.
    """
    beats = itp.beats
    if len(beats) < 3:
        raise EvidenceError(f"beat features need >= 3 beats, got {len(beats)}")
    x = r.samples
    fs = r.fs
    rr = rr_intervals_ms(beats, fs)
    med_rr = float(np.median(rr))
    n = len(beats)

    def rr_at(k: int) -> float:  # RR ending at beat k
        return float(rr[k - 1]) if 1 <= k <= n - 1 else med_rr

    rows = np.zeros((n, N_BEAT))
    for k, b in enumerate(beats):
        rr_prev = rr_at(k)
        rr_next = rr_at(k + 1)
        rows[k, 0] = rr_prev
        rows[k, 1] = rr_next
        rows[k, 2] = rr_prev - rr_at(k - 1)
        rows[k, 3] = rr_next - rr_prev
        rows[k, 4] = rr_prev / med_rr
        if b.p is not None:
            rows[k, 5] = 1.0
            rows[k, 6] = 1000.0 * (b.p.offset - b.p.onset) / fs
            rows[k, 7] = b.p.amp
            rows[k, 8] = 1000.0 * (b.qrs_onset - b.p.onset) / fs
        rows[k, 9] = b.qrs_duration_ms(fs)
        rows[k, 10] = b.qrs_amp
        rows[k, 11] = b.qrs_polarity
        rows[k, 12] = b.morph_dist
        if b.t is not None:
            rows[k, 13] = 1000.0 * (b.t.offset - b.qrs_onset) / fs
            rows[k, 14] = 1000.0 * (b.t.offset - b.t.onset) / fs
            rows[k, 15] = b.t.amp
            rows[k, 16] = 1.0 if b.t.amp >= 0 else -1.0
        lo = max(0, b.qrs_onset - ms_to_samples(cfg.p_profile_window_ms, fs))
        if b.qrs_onset - lo >= 2:
            rows[k, 17] = profile(x[lo: b.qrs_onset])
        if k >= 1:
            prev = beats[k - 1]
            start = prev.t.offset if prev.t is not None else prev.qrs_offset
            stop = b.p.onset if b.p is not None else b.qrs_onset
            if stop - start >= 2:
                rows[k, 18] = profile(x[start:stop])
        rows[k, 19] = 1.0 if b.tag == NORMAL else 0.0
        rows[k, 20] = 1.0 if b.tag == VENTRICULAR else 0.0
        rows[k, 21] = 1.0 if b.tag == FUSION else 0.0
    return BeatFeatureSequence(rows=rows)

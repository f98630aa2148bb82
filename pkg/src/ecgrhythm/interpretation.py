"""Rhythm interpretation: explain the beat sequence as a tiling of episodes.

Each rhythm pattern is a constraint set over a span of beats (hard
admissibility plus a soft penalty). A beam search over prefix positions finds
the cheapest complete tiling, where the state cost adds each episode penalty,
2.0 per UNEXPLAINED beat, and 1.0 per switch between episodes. Adjacent
episodes always carry different patterns (equal neighbours are merged by
construction), so keeping the best state per last-pattern and trimming to the
beam width is exact: any trimmed state's continuation is available to a
cheaper kept state at identical transition cost.

Evidence repair then deletes beats whose local signal profile cannot support
a heartbeat and inserts beats at pattern-predicted positions, whenever the
edit strictly lowers the optimal tiling cost; the loop runs to a fixpoint
with a hard pass cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConductionConfig, InterpretationConfig
from .conduction import (
    BeatObservation,
    FUSION,
    NORMAL,
    QrsTemplate,
    VENTRICULAR,
    _corr,
    _snippet,
    delineate_beat,
)
from .errors import EvidenceError
from .features import profile
from .signal_io import Record, ms_to_samples

SINUS = "SINUS"
AFIB = "AFIB"
TACHY = "TACHY"
BRADY = "BRADY"
FLUTTER = "FLUTTER"
BIGEMINY = "BIGEMINY"
TRIGEMINY = "TRIGEMINY"
VENT_TACHY = "VENT_TACHY"
UNEXPLAINED = "UNEXPLAINED"

# fixed tie-break order
PATTERNS = (SINUS, AFIB, TACHY, BRADY, FLUTTER, BIGEMINY, TRIGEMINY, VENT_TACHY, UNEXPLAINED)
_U = PATTERNS.index(UNEXPLAINED)

DEFAULT_INTERP = InterpretationConfig()
DEFAULT_CONDUCTION = ConductionConfig()


@dataclass
class RhythmEpisode:
    pattern: str
    first: int
    last: int  # inclusive beat index
    score: float

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise EvidenceError(f"unknown pattern {self.pattern!r}")
        if self.last < self.first:
            raise EvidenceError("empty episode span")


@dataclass
class Edit:
    op: str  # "del" | "ins"
    sample_index: int


@dataclass
class Interpretation:
    beats: list[BeatObservation]
    episodes: list[RhythmEpisode]
    deleted_count: int = 0
    inserted_count: int = 0
    unexplained_time_frac: float = 0.0
    edits: list[Edit] = field(default_factory=list)
    cost: float = 0.0

    def __post_init__(self):
        if self.deleted_count != sum(1 for e in self.edits if e.op == "del"):
            raise EvidenceError("deleted_count inconsistent with edit log")
        if self.inserted_count != sum(1 for e in self.edits if e.op == "ins"):
            raise EvidenceError("inserted_count inconsistent with edit log")
        _assert_exact_tiling(self.episodes, len(self.beats))


def _assert_exact_tiling(episodes: list[RhythmEpisode], n_beats: int) -> None:
    if n_beats == 0:
        if episodes:
            raise EvidenceError("episodes over an empty beat list")
        return
    cursor = 0
    for ep in episodes:
        if ep.first != cursor:
            raise EvidenceError(f"episode gap/overlap at beat {cursor}")
        cursor = ep.last + 1
    if cursor != n_beats:
        raise EvidenceError("episodes do not cover the full beat list")


class SpanPenalties:
    """Per-pattern penalty of every episode span, +inf where inadmissible.

    ``matrix(p)[i, j]`` is the penalty of pattern ``p`` explaining beats
    [i, j). Built vectorized per span length (window medians, prefix sums,
    averaged TP-gap periodograms for the flutter check).
    """

    def __init__(
        self,
        beats: list[BeatObservation],
        fs: float,
        samples: np.ndarray | None = None,
        cfg: InterpretationConfig = DEFAULT_INTERP,
        nfft: int = 1024,
    ):
        self.cfg = cfg
        self.n = len(beats)
        n = self.n
        peaks = np.array([b.qrs_peak for b in beats], dtype=np.float64)
        if np.any(np.diff(peaks) <= 0):
            raise EvidenceError("beats out of order")
        self.peaks_ms = peaks * 1000.0 / fs
        self.rr = np.diff(self.peaks_ms)
        p_flag = np.array([1.0 if b.p is not None else 0.0 for b in beats])
        v_flag = np.array([1.0 if b.tag == VENTRICULAR else 0.0 for b in beats])
        self._pref_p = np.concatenate([[0.0], np.cumsum(p_flag)])
        self._pref_v = np.concatenate([[0.0], np.cumsum(v_flag)])
        idx = np.arange(n)
        self._pref_v_mod = {}
        self._pref_1_mod = {}
        for m in (2, 3):
            for r in range(m):
                sel = (idx % m) == r
                self._pref_v_mod[(m, r)] = np.concatenate([[0.0], np.cumsum(v_flag * sel)])
                self._pref_1_mod[(m, r)] = np.concatenate([[0.0], np.cumsum(1.0 * sel)])
        self._flutter = self._tp_spectra(beats, fs, samples, nfft)
        self._matrices = self._build()

    def _tp_spectra(self, beats, fs, samples, nfft):
        if samples is None or self.n < 2:
            return None
        freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
        keep = (freqs >= 0.5) & (freqs <= 30.0)
        self._freqs = freqs[keep]
        rows = np.zeros((self.n, int(keep.sum())))
        counts = np.zeros(self.n)
        for k in range(1, self.n):
            prev = beats[k - 1]
            start = prev.t.offset if prev.t is not None else prev.qrs_offset
            stop = beats[k].p.onset if beats[k].p is not None else beats[k].qrs_onset
            seg = samples[start:stop]
            if seg.size < 8:
                continue
            seg = (seg - seg.mean()) * np.hanning(seg.size)
            rows[k] = np.abs(np.fft.rfft(seg, nfft))[keep]
            counts[k] = 1.0
        return {
            "pref": np.concatenate([np.zeros((1, rows.shape[1])), np.cumsum(rows, axis=0)]),
            "pref_n": np.concatenate([[0.0], np.cumsum(counts)]),
        }

    def _build(self):
        cfg = self.cfg
        n = self.n
        INF = np.inf
        mats = {p: np.full((n + 1, n + 1), INF) for p in PATTERNS}

        # UNEXPLAINED: any non-empty span
        i_idx, j_idx = np.triu_indices(n + 1, k=1)
        mats[UNEXPLAINED][i_idx, j_idx] = cfg.unexplained_beat_cost * (j_idx - i_idx)

        for L in range(cfg.min_episode_beats, n + 1):
            w = L - 1  # RR values per span
            win = np.lib.stride_tricks.sliding_window_view(self.rr, w)[: n - L + 1]
            med = np.median(win, axis=1)
            mad = np.median(np.abs(win - med[:, None]), axis=1)
            pauses = np.sum(win > cfg.pause_rr_ratio * med[:, None], axis=1)
            hr = 60000.0 / med
            i = np.arange(n - L + 1)
            j = i + L
            p_frac = (self._pref_p[j] - self._pref_p[i]) / L
            v_frac = (self._pref_v[j] - self._pref_v[i]) / L
            irregular = cfg.irregularity_weight * np.maximum(0.0, mad / med - cfg.irregularity_knee)
            regular_soft = irregular + cfg.pause_penalty * pauses

            ok = (hr >= cfg.sinus_hr_low) & (hr <= cfg.sinus_hr_high) & (p_frac >= cfg.sinus_p_presence)
            mats[SINUS][i[ok], j[ok]] = regular_soft[ok]
            ok = hr < cfg.sinus_hr_low
            mats[BRADY][i[ok], j[ok]] = regular_soft[ok]
            ok = hr > cfg.sinus_hr_high
            mats[TACHY][i[ok], j[ok]] = regular_soft[ok]

            ok = (mad / med >= cfg.afib_mad_ratio) & (p_frac <= cfg.afib_p_presence_max)
            mats[AFIB][i[ok], j[ok]] = cfg.afib_p_weight * p_frac[ok]

            if self._flutter is not None:
                # gap rows i+1 .. j-1 lie inside the span
                counts = self._flutter["pref_n"][j] - self._flutter["pref_n"][i + 1]
                spec = self._flutter["pref"][j] - self._flutter["pref"][i + 1]
                with np.errstate(invalid="ignore", divide="ignore"):
                    spec = spec / np.maximum(counts, 1.0)[:, None]
                band = (self._freqs >= cfg.flutter_band_low_hz) & (self._freqs <= cfg.flutter_band_high_hz)
                dom = np.argmax(spec, axis=1)
                dom_val = spec[np.arange(spec.shape[0]), dom]
                med_spec = np.median(spec, axis=1)
                ok = (
                    (counts >= 2)
                    & band[dom]
                    & (dom_val >= cfg.flutter_prominence * med_spec)
                    & (med_spec > 0)
                )
                mats[FLUTTER][i[ok], j[ok]] = irregular[ok]

            for pattern, m in ((BIGEMINY, 2), (TRIGEMINY, 3)):
                best_match = np.zeros(i.size)
                v_count = self._pref_v[j] - self._pref_v[i]
                for r in range(m):
                    v_r = self._pref_v_mod[(m, r)][j] - self._pref_v_mod[(m, r)][i]
                    n_r = self._pref_1_mod[(m, r)][j] - self._pref_1_mod[(m, r)][i]
                    # expected: VENTRICULAR on residue r, anything-but on the rest
                    match = v_r + ((L - n_r) - (v_count - v_r))
                    best_match = np.maximum(best_match, match)
                ok = (best_match >= cfg.ectopy_match_fraction * L) & (v_count >= 2)
                mats[pattern][i[ok], j[ok]] = (L - best_match)[ok]

            ok = (hr > cfg.vent_tachy_hr) & (v_frac >= cfg.vent_tachy_tag_fraction)
            mats[VENT_TACHY][i[ok], j[ok]] = 0.0
        return mats

    def matrix(self, pattern: str) -> np.ndarray:
        return self._matrices[pattern]

    def penalty(self, pattern: str, first: int, last: int) -> float:
        """Penalty of pattern over inclusive beat span [first, last]."""
        return float(self._matrices[pattern][first, last + 1])


def match_pattern(
    pattern: str,
    beats: list[BeatObservation],
    span: tuple[int, int],
    fs: float = 300.0,
    samples: np.ndarray | None = None,
    cfg: InterpretationConfig = DEFAULT_INTERP,
) -> tuple[bool, float]:
    """(admissible, penalty) of one pattern over an inclusive beat span."""
    if pattern not in PATTERNS:
        raise EvidenceError(f"unknown pattern {pattern!r}")
    first, last = span
    if not 0 <= first <= last < len(beats):
        raise EvidenceError(f"span {span} outside beat list")
    pen = SpanPenalties(beats, fs, samples, cfg).penalty(pattern, first, last)
    return bool(np.isfinite(pen)), (pen if np.isfinite(pen) else float("inf"))


def _beam_tiling(pen: SpanPenalties, cfg: InterpretationConfig) -> tuple[list[RhythmEpisode], float]:
    """Min-cost exact tiling via beam search over prefix positions."""
    n = pen.n
    npat = len(PATTERNS)
    INF = np.inf
    mats = [pen.matrix(p) for p in PATTERNS]
    cost = np.full((n + 1, npat), INF)
    bp_start = np.full((n + 1, npat), -1, dtype=np.int64)
    bp_prev = np.full((n + 1, npat), -1, dtype=np.int64)

    best1 = np.full(n + 1, INF)
    arg1 = np.full(n + 1, -1, dtype=np.int64)
    best2 = np.full(n + 1, INF)
    arg2 = np.full(n + 1, -1, dtype=np.int64)

    for j in range(1, n + 1):
        for p in range(npat):
            min_len = 1 if p == _U else cfg.min_episode_beats
            i_hi = j - min_len
            if i_hi < 0:
                continue
            ii = np.arange(i_hi + 1)
            base = np.where(arg1[ii] != p, best1[ii], best2[ii]) + cfg.switch_cost
            base[0] = 0.0
            cand = base + mats[p][ii, j]
            k = int(np.argmin(cand))
            if not np.isfinite(cand[k]):
                continue
            cost[j, p] = cand[k]
            bp_start[j, p] = k
            bp_prev[j, p] = -1 if k == 0 else (arg1[k] if arg1[k] != p else arg2[k])

        row = cost[j]
        finite = np.isfinite(row)
        if int(finite.sum()) > cfg.beam_width:
            worst = int(np.argmax(np.where(finite, row, -INF)))
            row = row.copy()
            row[worst] = INF
        order = np.argsort(row, kind="stable")
        best1[j] = row[order[0]]
        arg1[j] = order[0] if np.isfinite(row[order[0]]) else -1
        best2[j] = row[order[1]] if npat > 1 else INF
        arg2[j] = order[1] if np.isfinite(row[order[1]]) else -1

    p = int(np.argmin(cost[n]))
    total = float(cost[n, p])
    if not np.isfinite(total):
        raise EvidenceError("no complete tiling found")
    episodes = []
    j = n
    while j > 0:
        i = int(bp_start[j, p])
        episodes.append(RhythmEpisode(
            pattern=PATTERNS[p], first=i, last=j - 1, score=float(mats[p][i, j])))
        p_prev = int(bp_prev[j, p])
        j = i
        p = p_prev
    episodes.reverse()
    return episodes, total


def _tiling_cost(pen: SpanPenalties, episodes: list[RhythmEpisode], cfg: InterpretationConfig) -> float:
    total = 0.0
    for k, ep in enumerate(episodes):
        total += pen.penalty(ep.pattern, ep.first, ep.last)
        if k > 0:
            total += cfg.switch_cost
    return total


def _beat_profile(samples: np.ndarray, peak: int, fs: float, window_ms: float) -> float:
    half = ms_to_samples(window_ms / 2.0, fs)
    lo = max(0, peak - half)
    hi = min(samples.size, peak + half)
    if hi - lo < 2:
        return 0.0
    return profile(samples[lo:hi])


def _retag_inserted(beat: BeatObservation, beats: list[BeatObservation],
                    samples: np.ndarray, fs: float, template: QrsTemplate | None,
                    ccfg: ConductionConfig) -> None:
    if template is None:
        return
    half = ms_to_samples(ccfg.template_ms, fs) // 2
    snip = _snippet(samples, beat.qrs_peak, half)
    beat.morph_dist = float(np.clip(1.0 - _corr(snip, template.waveform), 0.0, 2.0))
    durs = [b.qrs_duration_ms(fs) for b in beats]
    med_dur = float(np.median(durs)) if durs else 0.0
    dur = beat.qrs_duration_ms(fs)
    if (beat.morph_dist > ccfg.ventricular_dist and dur > ccfg.wide_qrs_ms
            and dur > ccfg.ventricular_duration_ratio * med_dur):
        beat.tag = VENTRICULAR
    elif ccfg.fusion_dist < beat.morph_dist <= ccfg.ventricular_dist and dur > med_dur:
        beat.tag = FUSION
    else:
        beat.tag = NORMAL


def repair_evidence(
    r: Record,
    beats: list[BeatObservation],
    tiling: list[RhythmEpisode],
    cfg: InterpretationConfig = DEFAULT_INTERP,
    ccfg: ConductionConfig = DEFAULT_CONDUCTION,
    template: QrsTemplate | None = None,
) -> tuple[list[BeatObservation], list[Edit]]:
    """Delete unsupported beats / insert predicted beats until no edit helps.

    Each accepted edit strictly lowers the optimal tiling cost; the loop is
    capped at ``cfg.repair_max_passes`` passes. Compatible deletions (pairwise
    non-adjacent, each individually improving) are applied together when their
    joint result also improves, otherwise the single best edit is applied.
    """
    _assert_exact_tiling(tiling, len(beats))
    beats = list(beats)
    edits: list[Edit] = []
    if len(beats) < 2:
        return beats, edits
    x = r.samples
    fs = r.fs
    current_cost = _tiling_cost(SpanPenalties(beats, fs, x, cfg), tiling, cfg)
    current_episodes = list(tiling)

    def optimal(blist):
        return _beam_tiling(SpanPenalties(blist, fs, x, cfg), cfg)

    # only patterns that predict beat positions justify an insertion
    insertable = {SINUS, BRADY, TACHY, UNEXPLAINED}

    for _ in range(cfg.repair_max_passes):
        if len(beats) < 2:
            break
        profiles = np.array([_beat_profile(x, b.qrs_peak, fs, cfg.beat_window_ms) for b in beats])
        med_profile = float(np.median(profiles))
        peaks_ms = np.array([b.qrs_peak for b in beats]) * 1000.0 / fs
        rr = np.diff(peaks_ms)
        med_qrs_amp = float(np.median([abs(b.qrs_amp) for b in beats]))
        covering = np.empty(len(beats), dtype=object)
        for ep in current_episodes:
            covering[ep.first: ep.last + 1] = ep.pattern

        candidates = []  # (new_cost, order_key, kind, payload, episodes)
        for k in np.flatnonzero(profiles < cfg.delete_profile_fraction * med_profile):
            k = int(k)
            trial = beats[:k] + beats[k + 1:]
            if len(trial) < 1:
                continue
            eps, new_cost = optimal(trial)
            if new_cost < current_cost:
                candidates.append((new_cost, (0, k), "del", k, eps))

        tol = ms_to_samples(cfg.insert_tolerance_ms, fs)
        for k in range(rr.size):
            if covering[k] not in insertable or covering[k + 1] not in insertable:
                continue
            lo_k = max(0, k - 5)
            local_med = float(np.median(rr[lo_k: k + 6]))
            if not cfg.insert_gap_low * local_med <= rr[k] <= cfg.insert_gap_high * local_med:
                continue
            mid = int(round((beats[k].qrs_peak + beats[k + 1].qrs_peak) / 2))
            w_lo = max(mid - tol, beats[k].qrs_offset + 2)
            w_hi = min(mid + tol + 1, beats[k + 1].qrs_onset - 1)
            if w_hi - w_lo < 3:
                continue
            apex = w_lo + int(np.argmax(np.abs(x[w_lo:w_hi])))
            if abs(x[apex]) < cfg.insert_amp_fraction * med_qrs_amp:
                continue
            try:
                new_beat = delineate_beat(r, apex, beats[k].qrs_offset, beats[k + 1].qrs_onset, ccfg)
            except EvidenceError:
                continue
            _retag_inserted(new_beat, beats, x, fs, template, ccfg)
            trial = beats[: k + 1] + [new_beat] + beats[k + 1:]
            eps, new_cost = optimal(trial)
            if new_cost < current_cost:
                candidates.append((new_cost, (1, k), "ins", (k, new_beat), eps))

        if not candidates:
            break
        candidates.sort(key=lambda c: (c[0], c[1]))

        del_idx = sorted(c[3] for c in candidates if c[2] == "del")
        spaced = []
        for k in del_idx:
            if not spaced or k - spaced[-1] >= 2:
                spaced.append(k)
        applied = False
        if len(spaced) >= 2:
            trial = [b for i, b in enumerate(beats) if i not in set(spaced)]
            eps, joint = optimal(trial)
            if joint < current_cost:
                for k in spaced:
                    edits.append(Edit(op="del", sample_index=beats[k].qrs_peak))
                beats = trial
                current_cost = joint
                current_episodes = eps
                applied = True
        if not applied:
            new_cost, _, kind, payload, eps = candidates[0]
            if kind == "del":
                edits.append(Edit(op="del", sample_index=beats[payload].qrs_peak))
                beats = beats[:payload] + beats[payload + 1:]
            else:
                k, new_beat = payload
                edits.append(Edit(op="ins", sample_index=new_beat.qrs_peak))
                beats = beats[: k + 1] + [new_beat] + beats[k + 1:]
            current_cost = new_cost
            current_episodes = eps
    return beats, edits


def _episode_time_spans(episodes, beats, fs, n_samples) -> list[tuple[float, float]]:
    """Assign each episode a time span; spans tile [0, duration]."""
    peaks_s = [b.qrs_peak / fs for b in beats]
    duration = n_samples / fs
    spans = []
    for k, ep in enumerate(episodes):
        start = 0.0 if k == 0 else (peaks_s[episodes[k - 1].last] + peaks_s[ep.first]) / 2.0
        end = duration if k == len(episodes) - 1 else (
            peaks_s[ep.last] + peaks_s[episodes[k + 1].first]) / 2.0
        spans.append((start, end))
    return spans


def abstract_rhythms(
    r: Record,
    beats: list[BeatObservation],
    cfg: InterpretationConfig = DEFAULT_INTERP,
    ccfg: ConductionConfig = DEFAULT_CONDUCTION,
    template: QrsTemplate | None = None,
) -> Interpretation:
    """Best tiling of the beat list by rhythm episodes, after evidence repair."""
    beats = list(beats)
    if len(beats) < 2:
        episodes = []
        if len(beats) == 1:
            episodes = [RhythmEpisode(pattern=UNEXPLAINED, first=0, last=0,
                                      score=cfg.unexplained_beat_cost)]
        return Interpretation(
            beats=beats, episodes=episodes, unexplained_time_frac=1.0,
            cost=cfg.unexplained_beat_cost * len(beats))

    pen = SpanPenalties(beats, r.fs, r.samples, cfg)
    tiling, _ = _beam_tiling(pen, cfg)
    beats, edits = repair_evidence(r, beats, tiling, cfg, ccfg, template)

    if len(beats) < 2:
        episodes = [RhythmEpisode(pattern=UNEXPLAINED, first=0, last=0,
                                  score=cfg.unexplained_beat_cost)] if beats else []
        return Interpretation(
            beats=beats, episodes=episodes,
            deleted_count=sum(1 for e in edits if e.op == "del"),
            inserted_count=sum(1 for e in edits if e.op == "ins"),
            unexplained_time_frac=1.0, edits=edits,
            cost=cfg.unexplained_beat_cost * len(beats))

    pen = SpanPenalties(beats, r.fs, r.samples, cfg)
    episodes, total = _beam_tiling(pen, cfg)
    spans = _episode_time_spans(episodes, beats, r.fs, r.samples.size)
    unexplained = sum(e - s for (s, e), ep in zip(spans, episodes) if ep.pattern == UNEXPLAINED)
    return Interpretation(
        beats=beats,
        episodes=episodes,
        deleted_count=sum(1 for e in edits if e.op == "del"),
        inserted_count=sum(1 for e in edits if e.op == "ins"),
        unexplained_time_frac=float(unexplained / (r.samples.size / r.fs)),
        edits=edits,
        cost=total,
    )


def exhaustive_tiling_cost(
    beats: list[BeatObservation],
    fs: float = 300.0,
    samples: np.ndarray | None = None,
    cfg: InterpretationConfig = DEFAULT_INTERP,
) -> float:
    """Brute-force minimum tiling cost by enumerating every legal tiling.

    Test oracle only: exponential in the number of beats.
    """
    pen = SpanPenalties(beats, fs, samples, cfg)
    n = len(beats)
    best = [np.inf]

    def recurse(i, last_p, acc):
        if acc >= best[0]:
            return
        if i == n:
            best[0] = acc
            return
        for p, name in enumerate(PATTERNS):
            if p == last_p:
                continue
            min_len = 1 if p == _U else cfg.min_episode_beats
            for j in range(i + min_len, n + 1):
                c = pen.matrix(name)[i, j]
                if np.isfinite(c):
                    switch = cfg.switch_cost if last_p >= 0 else 0.0
                    recurse(j, p, acc + c + switch)

    recurse(0, -1, 0.0)
    return float(best[0])


def interpretation_to_dict(itp: Interpretation, fs: float) -> dict:
    """JSON-ready dict: beats, episodes, edits."""
    beats = []
    for b in itp.beats:
        beats.append({
            "qrs_onset": b.qrs_onset, "qrs_peak": b.qrs_peak, "qrs_offset": b.qrs_offset,
            "qrs_amp": b.qrs_amp, "polarity": b.qrs_polarity, "tag": b.tag,
            "morph_dist": b.morph_dist,
            "p": None if b.p is None else {"onset": b.p.onset, "peak": b.p.peak,
                                           "offset": b.p.offset, "amp": b.p.amp},
            "t": None if b.t is None else {"onset": b.t.onset, "peak": b.t.peak,
                                           "offset": b.t.offset, "amp": b.t.amp},
        })
    return {
        "fs": fs,
        "beats": beats,
        "episodes": [{"pattern": e.pattern, "first": e.first, "last": e.last,
                      "score": e.score} for e in itp.episodes],
        "edits": [{"op": e.op, "sample_index": e.sample_index} for e in itp.edits],
        "deleted_count": itp.deleted_count,
        "inserted_count": itp.inserted_count,
        "unexplained_time_frac": itp.unexplained_time_frac,
    }

"""Record loading, resampling, and synthetic ECG generation.

Signal file format (UTF-8, LF): line 1 is ``fs=<int>,gain=<real>,baseline=<real>``,
every following line one integer ADC value; millivolts = (adc - baseline) / gain.
Manifests are CSV rows ``record_id,path,label`` with an optional label in
{N, A, O, ~}; paths are resolved relative to the manifest file.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, SignalParseError

CANONICAL_FS = 300  # Hz

CLASSES = ("N", "A", "O", "~")

_HEADER_RE = re.compile(r"^fs=([^,]+),gain=([^,]+),baseline=([^,]+)$")


def ms_to_samples(ms: float, fs: float) -> int:
    return int(round(ms * fs / 1000.0))


def samples_to_ms(n: float, fs: float) -> float:
    return 1000.0 * n / fs


@dataclass
class Record:
    """A sampled single-lead ECG in millivolts."""

    id: str
    fs: int
    samples: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if int(self.fs) <= 0:
            raise FormatError(f"record {self.id}: fs must be positive, got {self.fs}")
        self.fs = int(self.fs)
        if self.samples.size == 0:
            raise FormatError(f"record {self.id}: empty sample sequence")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError(f"record {self.id}: non-finite samples")
        if self.label is not None and self.label not in CLASSES:
            raise FormatError(f"record {self.id}: unknown label {self.label!r}")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs

    def negated(self) -> "Record":
        return replace(self, samples=-self.samples)


@dataclass
class ManifestEntry:
    record_id: str
    path: Path
    label: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FormatError(f"duplicate record ids in manifest: {dupes}")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


def load_record(path, manifest_label: str | None = None) -> Record:
    """Read one signal file; the optional manifest label is attached as-is."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        m = _HEADER_RE.match(header)
        if m is None:
            raise FormatError(f"{path}: malformed header line {header!r}")
        try:
            fs = int(m.group(1))
            gain = float(m.group(2))
            baseline = float(m.group(3))
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric header field: {exc}") from exc
        if fs <= 0:
            raise FormatError(f"{path}: fs must be positive, got {fs}")
        if gain == 0 or not math.isfinite(gain) or not math.isfinite(baseline):
            raise FormatError(f"{path}: invalid gain/baseline ({gain}, {baseline})")
        adc = []
        for line_no, line in enumerate(fh, start=2):
            text = line.strip()
            if not text:
                continue
            try:
                adc.append(int(text))
            except ValueError:
                raise SignalParseError(
                    f"{path}: non-numeric sample {text!r} on line {line_no}",
                    line_no=line_no,
                ) from None
    if not adc:
        raise FormatError(f"{path}: no samples")
    samples = (np.asarray(adc, dtype=np.float64) - baseline) / gain
    return Record(id=path.stem, fs=fs, samples=samples, label=manifest_label)


def write_record(r: Record, path, gain: float = 1000.0, baseline: float = 0.0) -> None:
    path = Path(path)
    adc = np.rint(r.samples * gain + baseline).astype(np.int64)
    lines = [f"fs={r.fs},gain={gain!r},baseline={baseline!r}"]
    lines.extend(str(v) for v in adc)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) not in (2, 3):
                raise FormatError(f"{path}: row {row_no} has {len(row)} fields")
            record_id = row[0].strip()
            rel = Path(row[1].strip())
            label = row[2].strip() if len(row) == 3 and row[2].strip() else None
            if label is not None and label not in CLASSES:
                raise FormatError(f"{path}: row {row_no} has unknown label {label!r}")
            entries.append(ManifestEntry(record_id, rel if rel.is_absolute() else base / rel, label))
    return Manifest(entries)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for e in manifest.entries:
            p = e.path
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            writer.writerow([e.record_id, str(p), e.label or ""])


def resample(r: Record, target_fs: int) -> Record:
    """Linear-interpolation resampling; edge values held beyond the last sample."""
    if int(target_fs) <= 0:
        raise FormatError(f"target_fs must be positive, got {target_fs}")
    target_fs = int(target_fs)
    if target_fs == r.fs:
        return replace(r, samples=r.samples.copy())
    n = r.samples.size
    m = max(1, int(round(n * target_fs / r.fs)))
    t_old = np.arange(n) / r.fs
    t_new = np.arange(m) / target_fs
    samples = np.interp(t_new, t_old, r.samples)
    return replace(r, fs=target_fs, samples=samples)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

O_VARIANTS = ("tachy", "brady", "wide", "ectopic")


@dataclass
class SynthTruth:
    """Generator ground truth used by tests."""

    beat_times_s: np.ndarray  # scheduled R-peak times
    rr_ms: np.ndarray  # scheduled RR series
    qrs_width_ms: np.ndarray  # nominal per-beat QRS width
    p_present: np.ndarray  # bool per beat
    ectopic: np.ndarray  # bool per beat
    variant: str | None = None
    snr_db: float | None = None


def _gauss_bump(t: np.ndarray, center: float, sigma_s: float, amp: float) -> np.ndarray:
    return amp * np.exp(-0.5 * ((t - center) / sigma_s) ** 2)


def _schedule_afib_rr(rng: np.random.Generator, duration_s: float) -> np.ndarray:
    """RR draws resampled until the series is irregular enough (MAD/median >= 0.22)."""
    base = rng.uniform(600.0, 900.0)
    for _ in range(64):
        n = int(duration_s * 1000.0 / base) + 8
        rr = rng.uniform(base * 0.5, base * 1.5, size=n)
        rr = np.maximum(rr, 330.0)
        med = np.median(rr)
        mad = np.median(np.abs(rr - med))
        if mad / med >= 0.22:
            return rr
    raise AssertionError("atrial-fibrillation RR schedule did not converge")


def synth_record_with_truth(
    target: str,
    seed: int,
    duration_s: float,
    o_variant: str | None = None,
) -> tuple[Record, SynthTruth]:
    """Deterministic synthetic record for a target class, with ground truth."""
    if target not in CLASSES:
        raise FormatError(f"unknown class label {target!r}")
    if not 9.0 <= duration_s <= 61.0:
        raise FormatError(f"duration_s must be in [9, 61], got {duration_s}")
    fs = CANONICAL_FS
    class_code = CLASSES.index(target)
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, class_code, 0x5E_C0])

    variant = None
    if target == "O":
        variant = o_variant if o_variant is not None else O_VARIANTS[seed % 4]
        if variant not in O_VARIANTS:
            raise FormatError(f"unknown O variant {variant!r}")

    qrs_amp = rng.uniform(0.8, 1.4)
    qrs_width = rng.uniform(70.0, 88.0)
    p_amp = rng.uniform(0.12, 0.2) * qrs_amp
    t_amp = rng.uniform(0.25, 0.4) * qrs_amp
    drift_amp = rng.uniform(0.05, 0.25)
    drift_hz = rng.uniform(0.15, 0.4)
    drift_phase = rng.uniform(0.0, 2 * np.pi)

    # RR schedule
    if target == "A":
        rr = _schedule_afib_rr(rng, duration_s)
    else:
        if target == "O" and variant == "tachy":
            base = rng.uniform(450.0, 580.0)
        elif target == "O" and variant == "brady":
            base = rng.uniform(1300.0, 1700.0)
        else:
            base = 60000.0 / rng.uniform(60.0, 90.0)
        n = int(duration_s * 1000.0 / base) + 8
        rr = base * (1.0 + 0.01 * rng.standard_normal(n))

    widths = np.full(rr.size + 1, qrs_width)
    p_present = np.ones(rr.size + 1, dtype=bool)
    ectopic = np.zeros(rr.size + 1, dtype=bool)
    if target == "A":
        p_present[:] = False
    if target == "O" and variant == "wide":
        widths[:] = rng.uniform(135.0, 160.0)
    if target == "O" and variant == "ectopic":
        period = rng.integers(7, 11)
        k = int(period)
        while k + 1 < rr.size:
            # premature wide beat followed by a compensatory pause
            rr_full = rr[k]
            rr[k] = 0.55 * rr_full
            rr[k + 1] = 1.45 * rr_full
            ectopic[k + 1] = True  # beat index k+1 ends interval rr[k]
            p_present[k + 1] = False
            widths[k + 1] = rng.uniform(145.0, 165.0)
            k += int(period)

    # beat times, truncated to the record
    t0 = 0.45
    beat_times = t0 + np.concatenate([[0.0], np.cumsum(rr)]) / 1000.0
    keep = beat_times < duration_s - 0.45
    beat_times = beat_times[keep]
    widths = widths[keep]
    p_present = p_present[keep]
    ectopic = ectopic[keep]
    rr_kept = np.diff(beat_times) * 1000.0

    n_samples = int(round(duration_s * fs))
    t = np.arange(n_samples) / fs
    x = np.zeros(n_samples)
    for i, (bt, w, has_p, ect) in enumerate(zip(beat_times, widths, p_present, ectopic)):
        sigma_q = (w / 5.0) / 1000.0
        amp = -1.2 * qrs_amp if ect else qrs_amp
        lo = max(0, int((bt - 0.45) * fs))
        hi = min(n_samples, int((bt + 0.60) * fs))
        seg = t[lo:hi]
        x[lo:hi] += _gauss_bump(seg, bt, sigma_q, amp)
        if has_p:
            x[lo:hi] += _gauss_bump(seg, bt - 0.160, 0.022, p_amp)
        # T peak: ~35% into the following interval, but past the T-search
        # window start (QRS offset + 80 ms) and no later than 330 ms
        rr_after_s = rr_kept[i] / 1000.0 if i < rr_kept.size else (
            rr_kept[-1] / 1000.0 if rr_kept.size else 0.8)
        t_off = min(0.35 * rr_after_s, 0.330)
        t_off = max(t_off, 2.8 * sigma_q + 0.080 + 0.025)
        x[lo:hi] += _gauss_bump(seg, bt + t_off, 0.040, (-0.6 if ect else 1.0) * t_amp)

    x += drift_amp * np.sin(2 * np.pi * drift_hz * t + drift_phase)
    x += 0.01 * rng.standard_normal(n_samples)

    snr_db = None
    if target == "~":
        snr_db = rng.uniform(-6.0, -1.0)
        sig_rms = float(np.sqrt(np.mean(np.square(x))))
        noise = rng.standard_normal(n_samples)
        noise *= sig_rms * 10.0 ** (-snr_db / 20.0) / np.sqrt(np.mean(np.square(noise)))
        x += noise

    rec = Record(id=f"{target.replace('~', 'T')}{seed:05d}", fs=fs, samples=x, label=target)
    truth = SynthTruth(
        beat_times_s=beat_times,
        rr_ms=rr_kept,
        qrs_width_ms=widths,
        p_present=p_present,
        ectopic=ectopic,
        variant=variant,
        snr_db=snr_db,
    )
    return rec, truth


def synth_record(target: str, seed: int, duration_s: float, o_variant: str | None = None) -> Record:
    rec, _ = synth_record_with_truth(target, seed, duration_s, o_variant)
    return rec

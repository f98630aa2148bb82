"""Baseline-wander removal and lead-inversion detection.

Inversion is scored by a logistic regression over 14 polarity-sensitive
features of the signal and its tentative delineation. Under negation of the
record the feature vector transforms entry-wise as:

    f1, f2, f3, f12 -> 1 - value     (fractions of negative-polarity items)
    f4, f5, f6, f7, f13 -> -value    (signed medians, skewness, signed area)
    f8 -> 1 / value                  (max/|min| amplitude ratio)
    f9, f14 -> value                 (peak-to-peak range, template symmetry)
    f10 <-> -f11                     (median QRS maximum and minimum swap)

This table is what makes the classifier's job well-posed and is asserted by
the property tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

from .config import PreprocessConfig
from .conduction import BeatObservation, dominant_template
from .errors import DegenerateDataError, EvidenceError, FormatError
from .signal_io import Record, ms_to_samples

N_INVERSION_FEATURES = 14

DEFAULT_PREPROCESS = PreprocessConfig()


def _odd(w: int) -> int:
    return w + 1 if w % 2 == 0 else w


def baseline_filter(r: Record, cfg: PreprocessConfig = DEFAULT_PREPROCESS) -> Record:
    """Subtract a two-pass median-filtered baseline (200 ms then 600 ms)."""
    x = r.samples
    w1 = _odd(ms_to_samples(cfg.baseline_window_1_ms, r.fs))
    w2 = _odd(ms_to_samples(cfg.baseline_window_2_ms, r.fs))
    if x.size < max(3, w1):
        return Record(id=r.id, fs=r.fs, samples=x.copy(), label=r.label)
    w2 = min(w2, _odd(x.size) - 2)
    baseline = scipy.ndimage.median_filter(x, size=w1, mode="nearest")
    baseline = scipy.ndimage.median_filter(baseline, size=max(w2, 3), mode="nearest")
    return Record(id=r.id, fs=r.fs, samples=x - baseline, label=r.label)


def _median_or(values, default: float) -> float:
    values = [v for v in values if np.isfinite(v)]
    return float(np.median(values)) if values else default


def inversion_features(
    r: Record,
    beats: list[BeatObservation],
    cfg: PreprocessConfig = DEFAULT_PREPROCESS,
) -> np.ndarray:
    """The fixed 14-entry polarity feature vector (see module docstring)."""
    if not beats:
        raise EvidenceError("inversion features need at least one beat")
    x = r.samples
    fs = r.fs

    f1 = float(np.mean([b.qrs_amp < 0 for b in beats]))
    t_amps = [b.t.amp for b in beats if b.t is not None]
    p_amps = [b.p.amp for b in beats if b.p is not None]
    f2 = float(np.mean([a < 0 for a in t_amps])) if t_amps else 0.5
    f3 = float(np.mean([a < 0 for a in p_amps])) if p_amps else 0.5
    f4 = _median_or([b.qrs_amp for b in beats], 0.0)
    f5 = _median_or(t_amps, 0.0)
    f6 = _median_or(p_amps, 0.0)

    centered = x - x.mean()
    m2 = float(np.mean(centered**2))
    f7 = float(np.mean(centered**3) / m2**1.5) if m2 > 1e-18 else 0.0
    denom = abs(float(x.min()))
    f8 = float(x.max()) / max(denom, 1e-9)

    spans, maxima, minima, areas = [], [], [], []
    for b in beats:
        seg = x[b.qrs_onset: b.qrs_offset + 1]
        spans.append(float(seg.max() - seg.min()))
        maxima.append(float(seg.max()))
        minima.append(float(seg.min()))
        areas.append(float(seg.sum()) * 1000.0 / fs)
    f9 = _median_or(spans, 0.0)
    f10 = _median_or(maxima, 0.0)
    f11 = _median_or(minima, 0.0)
    f12 = float(np.mean(x > x.mean()))
    f13 = _median_or(areas, 0.0)

    f14 = 0.0
    if len(beats) >= 3:
        template, _, _ = dominant_template(r, beats)
        w = template.waveform
        wr = w[::-1]
        a = w - w.mean()
        b = wr - wr.mean()
        den = float(np.linalg.norm(a) * np.linalg.norm(b))
        f14 = float(np.dot(a, b) / den) if den > 1e-12 else 0.0

    v = np.array([f1, f2, f3, f4, f5, f6, f7, f8, f9, f10, f11, f12, f13, f14])
    if not np.all(np.isfinite(v)):
        raise EvidenceError("non-finite inversion features")
    return v


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (N_INVERSION_FEATURES,) or not np.all(np.isfinite(self.weights)):
            raise FormatError("logreg weights must be 14 finite reals")
        if not np.isfinite(self.bias):
            raise FormatError("logreg bias must be finite")

    def to_json(self) -> str:
        return json.dumps(
            {"weights": self.weights.tolist(), "bias": float(self.bias), "version": 1},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LogRegModel":
        d = json.loads(text)
        if d.get("version") != 1:
            raise FormatError(f"unsupported logreg model version {d.get('version')}")
        return cls(weights=np.asarray(d["weights"]), bias=float(d["bias"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LogRegModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_logreg(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = DEFAULT_PREPROCESS.logreg_l2,
    seed: int = 0,
    cfg: PreprocessConfig = DEFAULT_PREPROCESS,
) -> LogRegModel:
    """Full-batch gradient ascent on the L2-penalized log-likelihood.

    The bias is unpenalized. Iterates until the gradient max-norm drops below
    the tolerance or the iteration cap is hit; with zero initialization the
    result does not depend on the seed (kept for interface stability).
    """
    del seed
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[1] != N_INVERSION_FEATURES:
        raise FormatError(f"X must be n x {N_INVERSION_FEATURES}")
    if X.shape[0] < 2 or len(np.unique(y)) < 2:
        raise DegenerateDataError("logreg training needs both classes present")

    # Lipschitz bound for the step size: lambda_max(X^T X)/4 + l2,
    # lambda_max via deterministic power iteration
    v = np.ones(X.shape[1]) / np.sqrt(X.shape[1])
    for _ in range(50):
        v_new = X.T @ (X @ v)
        norm = np.linalg.norm(v_new)
        if norm < 1e-30:
            break
        v = v_new / norm
    lam_max = float(v @ (X.T @ (X @ v))) + float(X.shape[0])  # + n for the bias column
    step = 1.0 / (0.25 * lam_max + l2 + 1e-12)

    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(cfg.logreg_max_iter):
        p = _sigmoid(X @ w + b)
        resid = y - p
        grad_w = X.T @ resid - l2 * w
        grad_b = float(resid.sum())
        if max(float(np.max(np.abs(grad_w))), abs(grad_b)) < cfg.logreg_tol:
            break
        w += step * grad_w
        b += step * grad_b
    return LogRegModel(weights=w, bias=b)


def detect_inversion(
    m: LogRegModel,
    f: np.ndarray,
    cfg: PreprocessConfig = DEFAULT_PREPROCESS,
) -> tuple[float, bool]:
    """Inversion probability and the strict > 0.5 decision."""
    f = np.asarray(f, dtype=np.float64)
    z = float(m.weights @ f + m.bias)
    prob = float(_sigmoid(np.array([z]))[0])
    return prob, prob > cfg.inversion_threshold

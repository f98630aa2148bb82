"""Challenge scoring (mean F1 over N, A, O) and stratified cross-validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EvidenceError, FormatError
from .signal_io import CLASSES

METHODS = ("gbt", "rnn", "stacker")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = reference, columns = prediction

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (4, 4) or np.any(self.counts < 0):
            raise FormatError("confusion matrix must be 4x4 non-negative")

    @classmethod
    def from_labels(cls, reference, predicted) -> "ConfusionMatrix":
        ref = [CLASSES.index(c) for c in reference]
        pred = [CLASSES.index(c) for c in predicted]
        if len(ref) != len(pred):
            raise FormatError("reference and prediction lengths differ")
        counts = np.zeros((4, 4), dtype=np.int64)
        for a, b in zip(ref, pred):
            counts[a, b] += 1
        return cls(counts=counts)


def challenge_score(cm: ConfusionMatrix) -> tuple[float, float, float, float, float]:
    """(F1_N, F1_A, F1_O, F1_~, final); absent classes score 0."""
    f1 = []
    for c in range(4):
        denom = int(cm.counts[c].sum() + cm.counts[:, c].sum())
        f1.append(2.0 * cm.counts[c, c] / denom if denom > 0 else 0.0)
    final = (f1[0] + f1[1] + f1[2]) / 3.0
    return f1[0], f1[1], f1[2], f1[3], final


def stratified_folds(labels, k: int = 8, seed: int = 0) -> np.ndarray:
    """Per-class round-robin fold assignment after a seeded shuffle.

    Classes start at staggered folds so per-fold totals stay balanced; per
    class the fold sizes differ by at most one.
    """
    if k < 2:
        raise EvidenceError(f"need k >= 2 folds, got {k}")
    labels = list(labels)
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xF0_1D])
    assignment = np.full(len(labels), -1, dtype=np.int64)
    present = [c for c in CLASSES if c in labels]
    for ci, c in enumerate(present):
        members = np.flatnonzero(np.asarray(labels, dtype=object) == c)
        members = members[rng.permutation(members.size)]
        offset = (ci * k) // max(len(present), 1)
        for pos, m in enumerate(members):
            assignment[m] = (offset + pos) % k
    if np.any(assignment < 0):
        raise EvidenceError("unlabeled records cannot be folded")
    return assignment


@dataclass
class CvReport:
    fold_scores: dict[str, list[float]] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def mean(self, method: str) -> float:
        return float(np.mean(self.fold_scores[method]))

    def to_csv(self) -> str:
        k = len(next(iter(self.fold_scores.values())))
        header = "method," + ",".join(f"fold{j}" for j in range(k)) + ",mean"
        lines = [header]
        for method in METHODS:
            scores = self.fold_scores[method]
            lines.append(
                method + "," + ",".join(f"{s:.4f}" for s in scores) + f",{np.mean(scores):.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "folds": {m: self.fold_scores[m] for m in METHODS},
            "means": {m: self.mean(m) for m in METHODS},
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": 1,
        }, sort_keys=True, indent=2)


def run_cv(manifest, config=None, seed: int | None = None, jobs: int = 1) -> CvReport:
    """Full stratified cross-validation of the pipeline over a manifest.

    Convenience wrapper; the heavy lifting lives in ``pipeline.cross_validate``.
    """
    from .pipeline import cross_validate

    return cross_validate(manifest, config=config, seed=seed, jobs=jobs)

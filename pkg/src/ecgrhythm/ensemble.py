"""Model combination: average the RNNs, then stack with the GBT through LDA.

The stacker sees 6 inputs: the (N, A, O) probabilities of the GBT and of the
averaged RNNs; the noisy-class entry of each model is dropped since the four
probabilities sum to one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import DegenerateDataError, FormatError

N_CLASSES = 4
N_STACK = 6


def as_probs(p) -> np.ndarray:
    """Validate a probability 4-vector in class order (N, A, O, ~)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_CLASSES,):
        raise FormatError(f"expected 4 class probabilities, got shape {p.shape}")
    if np.any(p < -1e-12) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise FormatError(f"invalid probability vector {p}")
    return np.maximum(p, 0.0)


def average_probs(ps) -> np.ndarray:
    """Arithmetic mean of probability vectors (the RNN bagging step)."""
    arr = np.stack([as_probs(p) for p in ps])
    return arr.mean(axis=0)


def stack_features(p_gbt, p_rnn) -> np.ndarray:
    """(gbt_N, gbt_A, gbt_O, rnn_N, rnn_A, rnn_O)."""
    p_gbt = as_probs(p_gbt)
    p_rnn = as_probs(p_rnn)
    return np.concatenate([p_gbt[:3], p_rnn[:3]])


@dataclass
class LdaModel:
    means: np.ndarray  # (4, 6)
    covariance: np.ndarray  # (6, 6) shared, regularized
    priors: np.ndarray  # (4,)
    shrink: float = 0.05

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.means.shape != (N_CLASSES, N_STACK) or self.covariance.shape != (N_STACK, N_STACK):
            raise FormatError("bad LDA parameter shapes")
        if abs(float(self.priors.sum()) - 1.0) > 1e-9:
            raise FormatError("LDA priors must sum to 1")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise FormatError("LDA covariance must be symmetric")

    def posterior(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (N_STACK,):
            raise FormatError(f"expected a 6-vector, got shape {z.shape}")
        cho = scipy.linalg.cho_factor(self.covariance, lower=True)
        log_post = np.full(N_CLASSES, -np.inf)
        for c in range(N_CLASSES):
            if self.priors[c] <= 0.0:
                continue
            d = z - self.means[c]
            maha = float(d @ scipy.linalg.cho_solve(cho, d))
            log_post[c] = np.log(self.priors[c]) - 0.5 * maha
        log_post -= log_post.max()
        post = np.exp(log_post)
        return post / post.sum()

    def to_json(self) -> str:
        return json.dumps({
            "means": self.means.tolist(),
            "covariance": self.covariance.tolist(),
            "priors": self.priors.tolist(),
            "shrink": self.shrink,
            "version": 1,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LdaModel":
        d = json.loads(text)
        if d.get("version") != 1:
            raise FormatError("unsupported LDA model version")
        return cls(means=np.asarray(d["means"]), covariance=np.asarray(d["covariance"]),
                   priors=np.asarray(d["priors"]), shrink=float(d["shrink"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LdaModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_lda(Z: np.ndarray, y: np.ndarray, shrink: float = 0.05) -> LdaModel:
    """Gaussian LDA; pooled covariance shrunk toward the scaled identity."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if Z.ndim != 2 or Z.shape[1] != N_STACK:
        raise FormatError(f"stacking matrix must be n x {N_STACK}")
    if Z.shape[0] < 10:
        raise DegenerateDataError(f"need >= 10 stacking rows, got {Z.shape[0]}")
    present = np.unique(y)
    if present.size < 2:
        raise DegenerateDataError("LDA needs at least 2 classes")

    overall = Z.mean(axis=0)
    means = np.tile(overall, (N_CLASSES, 1))
    priors = np.zeros(N_CLASSES)
    pooled = np.zeros((N_STACK, N_STACK))
    for c in present:
        rows = Z[y == c]
        means[c] = rows.mean(axis=0)
        priors[c] = rows.shape[0] / Z.shape[0]
        d = rows - means[c]
        pooled += d.T @ d
    pooled /= max(Z.shape[0] - present.size, 1)
    # shrink toward the scaled identity: keeps the covariance positive
    # definite even when a stacking column degenerates (e.g. a base model
    # that could not fit), and leaves such columns class-neutral
    target = (np.trace(pooled) / N_STACK + 1e-12) * np.eye(N_STACK)
    reg = (1.0 - shrink) * pooled + shrink * target
    reg = (reg + reg.T) / 2.0
    try:
        scipy.linalg.cho_factor(reg, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise DegenerateDataError(
            f"singular pooled covariance even after shrink={shrink}; raise shrink") from exc
    return LdaModel(means=means, covariance=reg, priors=priors, shrink=shrink)


def predict_stacked(
    gbt_probs,
    rnn_probs_list,
    lda: LdaModel,
) -> tuple[np.ndarray, int]:
    """LDA posterior over (GBT, averaged-RNN) probabilities and the argmax class.

    Ties resolve to the earliest class in (N, A, O, ~) order.
    """
    avg = average_probs(rnn_probs_list)
    z = stack_features(gbt_probs, avg)
    post = lda.posterior(z)
    return post, int(np.argmax(post))

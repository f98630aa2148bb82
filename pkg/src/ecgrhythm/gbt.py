"""Multiclass gradient-boosted trees with second-order (gradient/hessian) splits.

Greedy exact split search over presorted feature columns; one tree per class
per round under a softmax objective. Trees are stored as plain dicts so the
JSON dump is portable and diffable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, FormatError

N_CLASSES = 4


@dataclass
class GbtHyperparams:
    max_depth: int = 6
    eta: float = 0.2
    gamma: float = 1.0
    colsample_bytree: float = 0.9
    min_child_weight: float = 20.0
    subsample: float = 0.8
    rounds: int = 60
    reg_lambda: float = 1.0  # L2 on leaf weights ("lambda" is reserved in Python)

    def __post_init__(self):
        for name in ("max_depth", "eta", "gamma", "colsample_bytree",
                     "min_child_weight", "subsample", "rounds", "reg_lambda"):
            if getattr(self, name) <= 0:
                raise FormatError(f"hyperparameter {name} must be positive")


def leaf_weight(g_sum: float, h_sum: float, reg_lambda: float) -> float:
    """Optimal second-order leaf value -G/(H + lambda)."""
    return -g_sum / (h_sum + reg_lambda)


def split_gain(gl: float, hl: float, gr: float, hr: float,
               reg_lambda: float, gamma: float) -> float:
    """Loss reduction of a candidate split, minus the per-split penalty."""
    def score(g, h):
        return g * g / (h + reg_lambda)
    return 0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _build_tree(X, g, h, rows, features, depth, hp):
    g_sum = float(g[rows].sum())
    h_sum = float(h[rows].sum())
    if depth >= hp.max_depth or rows.size < 2:
        return {"weight": hp.eta * leaf_weight(g_sum, h_sum, hp.reg_lambda), "h_sum": h_sum}

    # exact greedy split, vectorized over all candidate features at once
    sub = X[np.ix_(rows, features)]
    order = np.argsort(sub, axis=0, kind="stable")
    sv = np.take_along_axis(sub, order, axis=0)
    gl = np.cumsum(g[rows][order], axis=0)[:-1]
    hl = np.cumsum(h[rows][order], axis=0)[:-1]
    gr = g_sum - gl
    hr = h_sum - hl
    ok = (sv[1:] > sv[:-1]) & (hl >= hp.min_child_weight) & (hr >= hp.min_child_weight)
    if not np.any(ok):
        return {"weight": hp.eta * leaf_weight(g_sum, h_sum, hp.reg_lambda), "h_sum": h_sum}
    gains = 0.5 * (
        gl**2 / (hl + hp.reg_lambda)
        + gr**2 / (hr + hp.reg_lambda)
        - g_sum**2 / (h_sum + hp.reg_lambda)
    ) - hp.gamma
    gains[~ok] = -np.inf
    pos, fi = np.unravel_index(int(np.argmax(gains)), gains.shape)
    gain = float(gains[pos, fi])
    if gain <= 0.0:
        return {"weight": hp.eta * leaf_weight(g_sum, h_sum, hp.reg_lambda), "h_sum": h_sum}
    feature = int(features[fi])
    threshold = 0.5 * (sv[pos, fi] + sv[pos + 1, fi])
    mask = X[rows, feature] < threshold
    return {
        "feature": feature,
        "threshold": float(threshold),
        "default_left": True,
        "gain": gain,
        "h_sum": h_sum,
        "left": _build_tree(X, g, h, rows[mask], features, depth + 1, hp),
        "right": _build_tree(X, g, h, rows[~mask], features, depth + 1, hp),
    }


def _tree_scores(tree: dict, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(tree, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if "weight" in node:
            out[rows] = node["weight"]
            continue
        vals = X[rows, node["feature"]]
        left = vals < node["threshold"]
        missing = ~np.isfinite(vals)
        if node["default_left"]:
            left = left | missing
        else:
            left = left & ~missing
        stack.append((node["left"], rows[left]))
        stack.append((node["right"], rows[~left]))
    return out


@dataclass
class GbtModel:
    hp: GbtHyperparams
    trees: list = field(default_factory=list)  # trees[round][class] -> node dict
    n_features: int = 0
    loss_curve: list = field(default_factory=list)  # per-round training log-loss

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or (self.n_features and X.shape[1] != self.n_features):
            raise FormatError(f"expected n x {self.n_features} features, got {X.shape}")
        scores = np.zeros((X.shape[0], N_CLASSES))
        for round_trees in self.trees:
            for c, tree in enumerate(round_trees):
                scores[:, c] += _tree_scores(tree, X)
        return _softmax(scores)

    def to_json(self) -> str:
        return json.dumps(
            {
                "hp": {k: getattr(self.hp, k) for k in (
                    "max_depth", "eta", "gamma", "colsample_bytree",
                    "min_child_weight", "subsample", "rounds", "reg_lambda")},
                "classes": N_CLASSES,
                "n_features": self.n_features,
                "trees": self.trees,
                "version": 1,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GbtModel":
        d = json.loads(text)
        if d.get("version") != 1 or d.get("classes") != N_CLASSES:
            raise FormatError("unsupported GBT model file")
        return cls(hp=GbtHyperparams(**d["hp"]), trees=d["trees"],
                   n_features=int(d.get("n_features", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GbtModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def train_gbt(
    X: np.ndarray,
    y: np.ndarray,
    hp: GbtHyperparams | None = None,
    seed: int = 0,
) -> GbtModel:
    """Boost ``hp.rounds`` rounds of one tree per class; deterministic per seed."""
    hp = hp or GbtHyperparams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise DegenerateDataError("empty training data")
    if X.shape[0] != y.size:
        raise DegenerateDataError("X and y row counts differ")
    if not np.all(np.isfinite(X)):
        raise DegenerateDataError("non-finite features in training data")
    if X.shape[0] < 2 * hp.min_child_weight:
        raise DegenerateDataError(
            f"need at least {2 * hp.min_child_weight:.0f} rows, got {X.shape[0]}")
    if np.any((y < 0) | (y >= N_CLASSES)):
        raise DegenerateDataError("labels out of range")

    n, d = X.shape
    rng = np.random.default_rng(seed)
    onehot = np.eye(N_CLASSES)[y]
    scores = np.zeros((n, N_CLASSES))
    n_feat = max(1, int(round(hp.colsample_bytree * d)))
    model = GbtModel(hp=hp, n_features=d)

    for _ in range(hp.rounds):
        probs = _softmax(scores)
        round_trees = []
        for c in range(N_CLASSES):
            g = probs[:, c] - onehot[:, c]
            h = probs[:, c] * (1.0 - probs[:, c])
            if hp.subsample < 1.0:
                rows = np.flatnonzero(rng.random(n) < hp.subsample)
            else:
                rows = np.arange(n)
            if n_feat < d:
                features = np.sort(rng.choice(d, size=n_feat, replace=False))
            else:
                features = np.arange(d)
            if rows.size < 2:
                rows = np.arange(n)
            tree = _build_tree(X, g, h, rows, features, 0, hp)
            round_trees.append(tree)
        model.trees.append(round_trees)
        for c, tree in enumerate(round_trees):
            scores[:, c] += _tree_scores(tree, X)
        probs = _softmax(scores)
        ll = -np.mean(np.log(np.clip(probs[np.arange(n), y], 1e-300, None)))
        model.loss_curve.append(float(ll))
    return model


def predict_gbt(m: GbtModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities (N, A, O, ~) for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise FormatError(f"expected a feature vector, got shape {x.shape}")
    return m.predict_many(x[None, :])[0]


def validate_model(m: GbtModel) -> None:
    """Assert structural invariants: depth cap and child hessian floor."""
    def walk(node, depth, is_root):
        assert depth <= m.hp.max_depth, "tree deeper than max_depth"
        if not is_root:
            assert node["h_sum"] >= m.hp.min_child_weight - 1e-9, (
                f"child hessian {node['h_sum']} below min_child_weight")
        if "weight" not in node:
            walk(node["left"], depth + 1, False)
            walk(node["right"], depth + 1, False)

    for round_trees in m.trees:
        assert len(round_trees) == N_CLASSES
        for tree in round_trees:
            walk(tree, 0, True)

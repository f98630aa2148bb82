"""Sequence classifier over per-beat features.

Architecture: a time-distributed MLP (22 -> mlp_hidden -> mlp_out, ReLU),
one sequence-preprocessing LSTM, then three parallel LSTMs pooled by masked
temporal mean, final valid state, and masked temporal max; the concatenated
pools feed a second MLP and a softmax layer. Everything is float64 numpy with
hand-written backpropagation through time, so gradients can be checked
against finite differences tensor by tensor.

Padded timesteps are excluded everywhere by carrying the previous LSTM state
through masked positions, which makes outputs and gradients exactly invariant
to padding length.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.special

from .errors import DegenerateDataError, EvidenceError, FormatError

N_BEAT_FEATURES = 22


@dataclass
class RnnConfig:
    mlp_hidden: int = 256
    mlp_out: int = 128
    lstm_units: int = 128
    classes: int = 4
    l2: float = 1e-4
    dropout_rate: float = 0.2
    batch: int = 32
    lr0: float = 0.002
    lr_decay: float = 2.0**-0.5
    plateau_patience: int = 3
    early_stop: int = 15
    val_frac: float = 0.15
    max_epochs: int = 200
    bucket_width: int = 8
    input_dim: int = N_BEAT_FEATURES

    def __post_init__(self):
        for name in ("mlp_hidden", "mlp_out", "lstm_units", "classes", "l2",
                     "dropout_rate", "batch", "lr0", "lr_decay", "plateau_patience",
                     "early_stop", "val_frac", "max_epochs", "bucket_width", "input_dim"):
            if getattr(self, name) < 0:
                raise FormatError(f"rnn config field {name} must be non-negative")


# canonical tensor order for serialization and optimizer state
def tensor_names(cfg: RnnConfig) -> list[str]:
    names = ["mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b"]
    for k in range(4):
        names += [f"lstm{k}_w", f"lstm{k}_u", f"lstm{k}_b"]
    names += ["head1_w", "head1_b", "head2_w", "head2_b", "out_w", "out_b"]
    return names


def init_params(cfg: RnnConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform Glorot init; LSTM forget-gate biases start at 1."""
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xC311])
    u = cfg.lstm_units

    def glorot(shape):
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)

    params = {
        "mlp1_w": glorot((cfg.input_dim, cfg.mlp_hidden)),
        "mlp1_b": np.zeros(cfg.mlp_hidden),
        "mlp2_w": glorot((cfg.mlp_hidden, cfg.mlp_out)),
        "mlp2_b": np.zeros(cfg.mlp_out),
    }
    in_dims = [cfg.mlp_out, u, u, u]
    for k in range(4):
        params[f"lstm{k}_w"] = glorot((in_dims[k], 4 * u))
        params[f"lstm{k}_u"] = glorot((u, 4 * u))
        b = np.zeros(4 * u)
        b[u: 2 * u] = 1.0
        params[f"lstm{k}_b"] = b
    params["head1_w"] = glorot((3 * u, cfg.mlp_hidden))
    params["head1_b"] = np.zeros(cfg.mlp_hidden)
    params["head2_w"] = glorot((cfg.mlp_hidden, cfg.mlp_out))
    params["head2_b"] = np.zeros(cfg.mlp_out)
    params["out_w"] = glorot((cfg.mlp_out, cfg.classes))
    params["out_b"] = np.zeros(cfg.classes)
    return params


def _sigmoid(z):
    return scipy.special.expit(z)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def lstm_cell(x, h, c, weights):
    """One LSTM step. ``weights`` is (W, U, b); gate packing [i, f, o, g]."""
    W, U, b = weights
    u = h.shape[-1]
    if x.shape[-1] != W.shape[0] or h.shape[-1] != U.shape[0] or b.shape[-1] != 4 * u:
        raise FormatError("lstm_cell shape mismatch")
    pre = x @ W + h @ U + b
    gates = _sigmoid(pre[..., : 3 * u])
    i = gates[..., :u]
    f = gates[..., u: 2 * u]
    o = gates[..., 2 * u:]
    g = np.tanh(pre[..., 3 * u:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def _lstm_forward(x_seq, mask, W, U, b):
    """Run K LSTMs over (K, B, T, D) with state hold at masked steps.

    Single-LSTM callers pass (B, T, D) arrays and 2-D weights; branch LSTMs
    are stacked along the leading axis so each timestep is one kernel call.
    """
    squeeze = x_seq.ndim == 3
    if squeeze:
        x_seq = x_seq[None]
        W, U, b = W[None], U[None], b[None]
    K, B, T, _ = x_seq.shape
    u = U.shape[1]
    xw = np.matmul(x_seq, W[:, None]) + b[:, None, None]
    h = np.zeros((K, B, u))
    c = np.zeros((K, B, u))
    h_seq = np.empty((K, B, T, u))
    h_prev_seq = np.empty((K, B, T, u))
    valid = mask.all(axis=0)
    cache = {"steps": [], "x_seq": x_seq, "mask": mask, "W": W, "U": U,
             "h_prev_seq": h_prev_seq, "valid": valid, "squeeze": squeeze}
    m_col = mask[:, :, None]
    for t in range(T):
        pre = xw[:, :, t] + h @ U
        gates = _sigmoid(pre[..., : 3 * u])
        i = gates[..., :u]
        f = gates[..., u: 2 * u]
        o = gates[..., 2 * u:]
        g = np.tanh(pre[..., 3 * u:])
        c_raw = f * c + i * g
        tc = np.tanh(c_raw)
        h_raw = o * tc
        if valid[t]:
            h_next, c_next = h_raw, c_raw
        else:
            m = m_col[:, t]
            h_next = m * h_raw + (1.0 - m) * h
            c_next = m * c_raw + (1.0 - m) * c
        h_prev_seq[:, :, t] = h
        cache["steps"].append((c, i, f, o, g, tc))
        h, c = h_next, c_next
        h_seq[:, :, t] = h
    if squeeze:
        return h_seq[0], cache
    return h_seq, cache


def _lstm_backward(dh_seq, cache):
    """BPTT through ``_lstm_forward``; returns (dx_seq, dW, dU, db)."""
    x_seq, mask, W, U = cache["x_seq"], cache["mask"], cache["W"], cache["U"]
    if cache["squeeze"]:
        dh_seq = dh_seq[None]
    K, B, T, _ = x_seq.shape
    u = U.shape[1]
    valid = cache["valid"]
    m_col = mask[:, :, None]
    dpre_seq = np.zeros((K, B, T, 4 * u))
    dh = np.zeros((K, B, u))
    dc = np.zeros((K, B, u))
    Ut = np.ascontiguousarray(np.swapaxes(U, 1, 2))
    for t in range(T - 1, -1, -1):
        c_prev, i, f, o, g, tc = cache["steps"][t]
        dh = dh + dh_seq[:, :, t]
        if valid[t]:
            dh_raw, dc_raw = dh, dc
            dh_carry = None
        else:
            m = m_col[:, t]
            dh_raw = m * dh
            dc_raw = m * dc
            dh_carry = (1.0 - m) * dh
            dc = (1.0 - m) * dc
        do = dh_raw * tc
        dc_raw = dc_raw + dh_raw * o * (1.0 - tc * tc)
        dpre = dpre_seq[:, :, t]
        dpre[..., :u] = (dc_raw * g) * i * (1.0 - i)
        dpre[..., u: 2 * u] = (dc_raw * c_prev) * f * (1.0 - f)
        dpre[..., 2 * u: 3 * u] = do * o * (1.0 - o)
        dpre[..., 3 * u:] = (dc_raw * i) * (1.0 - g * g)
        dh = dpre @ Ut if dh_carry is None else dh_carry + dpre @ Ut
        dc = dc_raw * f if valid[t] else dc + dc_raw * f
    flat = dpre_seq.reshape(K, B * T, 4 * u)
    x_flat = x_seq.reshape(K, B * T, -1)
    h_flat = cache["h_prev_seq"].reshape(K, B * T, u)
    dW = np.matmul(np.swapaxes(x_flat, 1, 2), flat)
    dU = np.matmul(np.swapaxes(h_flat, 1, 2), flat)
    db = flat.sum(axis=1)
    dx_seq = np.matmul(flat, np.swapaxes(W, 1, 2)).reshape(x_seq.shape)
    if cache["squeeze"]:
        return dx_seq[0], dW[0], dU[0], db[0]
    return dx_seq, dW, dU, db


def _dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _apply_mask(x, m):
    return x if m is None else x * m


@dataclass
class RnnModel:
    cfg: RnnConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    # per-feature input standardization, fitted on the training split
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def normalize(self, X: np.ndarray) -> np.ndarray:
        if self.norm_mean is None:
            return X
        return (X - self.norm_mean) / self.norm_std

    def save(self, path) -> None:
        names = tensor_names(self.cfg)
        header = {
            "version": 1,
            "config": asdict(self.cfg),
            "tensors": [[n, list(self.params[n].shape)] for n in names],
            "norm_mean": None if self.norm_mean is None else self.norm_mean.tolist(),
            "norm_std": None if self.norm_std is None else self.norm_std.tolist(),
        }
        blob = b"".join(
            np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(blob)

    @classmethod
    def load(cls, path) -> "RnnModel":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("version") != 1:
            raise FormatError("unsupported RNN model version")
        cfg = RnnConfig(**header["config"])
        params = {}
        offset = nl + 1
        for name, shape in header["tensors"]:
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
            params[name] = arr.reshape(shape).astype(np.float64)
            offset += size * 8
        if offset != len(raw):
            raise FormatError("trailing bytes in RNN model file")
        mean = header.get("norm_mean")
        std = header.get("norm_std")
        return cls(cfg=cfg, params=params,
                   norm_mean=None if mean is None else np.asarray(mean),
                   norm_std=None if std is None else np.asarray(std))


def forward(
    m: RnnModel,
    seq: np.ndarray,
    mask: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Class probabilities for a batch (B, T, F) or a single sequence (T, F)."""
    single = seq.ndim == 2
    X = np.asarray(seq, dtype=np.float64)
    if single:
        X = X[None]
    B, T, F = X.shape
    if T < 1:
        raise EvidenceError("empty sequence")
    if F != m.cfg.input_dim:
        raise FormatError(f"expected {m.cfg.input_dim} features per beat, got {F}")
    if mask is None:
        mk = np.ones((B, T))
    else:
        mk = np.asarray(mask, dtype=np.float64)
        if single and mk.ndim == 1:
            mk = mk[None]
    if np.any(mk.sum(axis=1) < 1):
        raise EvidenceError("every sequence needs at least one valid timestep")
    X = m.normalize(X)
    p = m.params
    rate = m.cfg.dropout_rate
    cache = {"X": X, "mask": mk}

    # time-distributed MLP
    flat = X.reshape(B * T, F)
    z1 = flat @ p["mlp1_w"] + p["mlp1_b"]
    a1 = np.maximum(z1, 0.0)
    dm1 = _dropout_mask(dropout_rng, a1.shape, rate)
    a1d = _apply_mask(a1, dm1)
    z2 = a1d @ p["mlp2_w"] + p["mlp2_b"]
    a2 = np.maximum(z2, 0.0)
    seq_in = a2.reshape(B, T, m.cfg.mlp_out)
    dm_in = _dropout_mask(dropout_rng, seq_in.shape, rate)
    seq_in_d = _apply_mask(seq_in, dm_in)

    h0, cache0 = _lstm_forward(seq_in_d, mk, p["lstm0_w"], p["lstm0_u"], p["lstm0_b"])
    branch_masks = [_dropout_mask(dropout_rng, h0.shape, rate) for _ in range(3)]
    x_br = np.stack([_apply_mask(h0, dm) for dm in branch_masks])
    w_br = np.stack([p[f"lstm{k}_w"] for k in (1, 2, 3)])
    u_br = np.stack([p[f"lstm{k}_u"] for k in (1, 2, 3)])
    b_br = np.stack([p[f"lstm{k}_b"] for k in (1, 2, 3)])
    h_br, cache_br = _lstm_forward(x_br, mk, w_br, u_br, b_br)
    h1, h2, h3 = h_br[0], h_br[1], h_br[2]

    counts = mk.sum(axis=1, keepdims=True)
    pool_mean = (h1 * mk[:, :, None]).sum(axis=1) / counts
    pool_final = h2[:, -1]
    neg = np.where(mk[:, :, None] > 0, h3, -np.inf)
    argmax_t = np.argmax(neg, axis=1)
    pool_max = np.take_along_axis(h3, argmax_t[:, None, :], axis=1)[:, 0, :]

    concat = np.concatenate([pool_mean, pool_final, pool_max], axis=1)
    hz1 = concat @ p["head1_w"] + p["head1_b"]
    ha1 = np.maximum(hz1, 0.0)
    dmh = _dropout_mask(dropout_rng, ha1.shape, rate)
    ha1d = _apply_mask(ha1, dmh)
    hz2 = ha1d @ p["head2_w"] + p["head2_b"]
    ha2 = np.maximum(hz2, 0.0)
    logits = ha2 @ p["out_w"] + p["out_b"]
    probs = _softmax(logits)

    if want_cache:
        cache.update(
            a1=a1, dm1=dm1, a1d=a1d, a2=a2, seq_in_d=seq_in_d, dm_in=dm_in,
            cache0=cache0, h0=h0, branch_masks=branch_masks, cache_br=cache_br,
            counts=counts, argmax_t=argmax_t, concat=concat, ha1=ha1, dmh=dmh,
            ha1d=ha1d, ha2=ha2, probs=probs,
        )
        return probs, cache
    return probs[0] if single else probs


def loss_and_gradients(
    m: RnnModel,
    batch: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    l2: float | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy + l2 * sum(weights^2), with full BPTT gradients."""
    if batch.shape[0] == 0:
        raise DegenerateDataError("empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels >= m.cfg.classes)):
        raise DegenerateDataError("label out of range")
    l2 = m.cfg.l2 if l2 is None else l2
    p = m.params
    probs, cache = forward(m, batch, mask, dropout_rng=dropout_rng, want_cache=True)
    B, T, F = cache["X"].shape
    u = m.cfg.lstm_units

    ce = -np.mean(np.log(np.clip(probs[np.arange(B), labels], 1e-300, None)))
    penalty = sum(float(np.sum(p[n] ** 2)) for n in p if n.endswith(("_w", "_u")))
    loss = ce + l2 * penalty

    grads = {n: np.zeros_like(v) for n, v in p.items()}

    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B

    grads["out_w"] += cache["ha2"].T @ dlogits
    grads["out_b"] += dlogits.sum(axis=0)
    dha2 = dlogits @ p["out_w"].T
    dhz2 = dha2 * (cache["ha2"] > 0)
    grads["head2_w"] += cache["ha1d"].T @ dhz2
    grads["head2_b"] += dhz2.sum(axis=0)
    dha1d = dhz2 @ p["head2_w"].T
    dha1 = _apply_mask(dha1d, cache["dmh"])
    dhz1 = dha1 * (cache["ha1"] > 0)
    grads["head1_w"] += cache["concat"].T @ dhz1
    grads["head1_b"] += dhz1.sum(axis=0)
    dconcat = dhz1 @ p["head1_w"].T

    d_mean = dconcat[:, :u]
    d_final = dconcat[:, u: 2 * u]
    d_max = dconcat[:, 2 * u:]

    mk = cache["mask"]
    dh_br = np.zeros((3, B, T, u))
    dh_br[0] = (d_mean[:, None, :] / cache["counts"][:, :, None]) * mk[:, :, None]
    dh_br[1, :, -1] = d_final
    np.put_along_axis(dh_br[2], cache["argmax_t"][:, None, :], d_max[:, None, :], axis=1)
    dx_br, dW_br, dU_br, db_br = _lstm_backward(dh_br, cache["cache_br"])
    dh0_total = np.zeros((B, T, u))
    for bi, k in enumerate((1, 2, 3)):
        grads[f"lstm{k}_w"] += dW_br[bi]
        grads[f"lstm{k}_u"] += dU_br[bi]
        grads[f"lstm{k}_b"] += db_br[bi]
        dh0_total += _apply_mask(dx_br[bi], cache["branch_masks"][bi])

    dx0, dW, dU, db = _lstm_backward(dh0_total, cache["cache0"])
    grads["lstm0_w"] += dW
    grads["lstm0_u"] += dU
    grads["lstm0_b"] += db

    dseq_in = _apply_mask(dx0, cache["dm_in"])
    da2 = dseq_in.reshape(B * T, -1)
    dz2 = da2 * (cache["a2"] > 0)
    grads["mlp2_w"] += cache["a1d"].T @ dz2
    grads["mlp2_b"] += dz2.sum(axis=0)
    da1d = dz2 @ p["mlp2_w"].T
    da1 = _apply_mask(da1d, cache["dm1"])
    dz1 = da1 * (cache["a1"] > 0)
    grads["mlp1_w"] += cache["X"].reshape(B * T, -1).T @ dz1
    grads["mlp1_b"] += dz1.sum(axis=0)

    for n in p:
        if n.endswith(("_w", "_u")):
            grads[n] += 2.0 * l2 * p[n]
    return float(loss), grads


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], dict]:
    """One Adam update with bias-corrected moments; mutates params and state."""
    if t < 1:
        raise FormatError("Adam step index must be >= 1")
    if not state:
        state["m"] = {n: np.zeros_like(v) for n, v in params.items()}
        state["v"] = {n: np.zeros_like(v) for n, v in params.items()}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for n, g in grads.items():
        mom = state["m"][n]
        vel = state["v"][n]
        mom *= beta1
        mom += (1.0 - beta1) * g
        vel *= beta2
        vel += (1.0 - beta2) * g * g
        params[n] -= lr * (mom / bc1) / (np.sqrt(vel / bc2) + eps)
    return params, state


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    plateau_events: int = 0


def _stratified_split(labels, val_frac, rng):
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        n_val = int(round(val_frac * members.size))
        n_val = min(max(n_val, 1 if members.size > 1 else 0), members.size - 1)
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    return np.sort(np.asarray(train_idx)), np.sort(np.asarray(val_idx))


def _pad_batch(seqs):
    B = len(seqs)
    T = max(s.shape[0] for s in seqs)
    F = seqs[0].shape[1]
    X = np.zeros((B, T, F))
    mk = np.zeros((B, T))
    for i, s in enumerate(seqs):
        X[i, : s.shape[0]] = s
        mk[i, : s.shape[0]] = 1.0
    return X, mk


def _batched_eval(m, seqs, labels):
    total = 0.0
    correct = 0
    bs = max(1, m.cfg.batch)
    for start in range(0, len(seqs), bs):
        chunk = seqs[start: start + bs]
        lab = labels[start: start + bs]
        X, mk = _pad_batch(chunk)
        probs = forward(m, X, mk)
        total += float(-np.sum(np.log(np.clip(probs[np.arange(len(chunk)), lab], 1e-300, None))))
        correct += int(np.sum(np.argmax(probs, axis=1) == lab))
    return total / len(seqs), correct / len(seqs)


def predict_proba(m: RnnModel, seqs: list[np.ndarray]) -> np.ndarray:
    """Probabilities for a list of variable-length sequences, in order."""
    out = np.zeros((len(seqs), m.cfg.classes))
    bs = max(1, m.cfg.batch)
    for start in range(0, len(seqs), bs):
        chunk = seqs[start: start + bs]
        X, mk = _pad_batch(chunk)
        out[start: start + len(chunk)] = forward(m, X, mk)
    return out


def train_rnn(
    dataset: list[tuple[np.ndarray, int]],
    cfg: RnnConfig | None = None,
    seed: int = 0,
) -> tuple[RnnModel, TrainHistory]:
    """Train with Adam, plateau-halved learning rate, and early stopping.

    The learning rate after k plateau events is exactly lr0 * 2**(-k/2);
    parameters returned are those of the best-validation-loss epoch.
    """
    cfg = cfg or RnnConfig()
    seqs = [np.asarray(x, dtype=np.float64) for x, _ in dataset]
    labels = np.asarray([int(y) for _, y in dataset])
    if len(seqs) < 4:
        raise DegenerateDataError("dataset too small to split")
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xAD_A3])
    train_idx, val_idx = _stratified_split(labels, cfg.val_frac, rng)
    if val_idx.size == 0 or train_idx.size == 0:
        raise DegenerateDataError("degenerate train/validation split")
    for c in np.unique(labels):
        if np.sum(labels[train_idx] == c) < 2:
            raise DegenerateDataError(f"class {c} has fewer than 2 training examples")

    train_seqs = [seqs[i] for i in train_idx]
    train_labels = labels[train_idx]
    val_seqs = [seqs[i] for i in val_idx]
    val_labels = labels[val_idx]

    frames = np.concatenate(train_seqs, axis=0)
    norm_mean = frames.mean(axis=0)
    norm_std = frames.std(axis=0)
    norm_std[norm_std < 1e-9] = 1.0

    model = RnnModel(cfg=cfg, params=init_params(cfg, seed),
                     norm_mean=norm_mean, norm_std=norm_std)
    state: dict = {}
    history = TrainHistory()
    best_val = np.inf
    best_params = {n: v.copy() for n, v in model.params.items()}
    since_improve = 0
    plateau_wait = 0
    plateau_events = 0
    step_t = 0

    order_rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xB0_57])
    drop_rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xD0_B5])

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.lr0 * 2.0 ** (-plateau_events / 2)
        perm = order_rng.permutation(len(train_seqs))
        buckets = np.asarray([train_seqs[i].shape[0] // cfg.bucket_width for i in perm])
        perm = perm[np.argsort(buckets, kind="stable")]
        batches = [perm[i: i + cfg.batch] for i in range(0, perm.size, cfg.batch)]
        batch_order = order_rng.permutation(len(batches))

        epoch_loss = 0.0
        for bi in batch_order:
            idx = batches[bi]
            X, mk = _pad_batch([train_seqs[i] for i in idx])
            loss, grads = loss_and_gradients(
                model, X, mk, train_labels[idx],
                dropout_rng=drop_rng if cfg.dropout_rate > 0 else None)
            step_t += 1
            adam_step(model.params, grads, state, step_t, lr)
            epoch_loss += loss * idx.size
        epoch_loss /= len(train_seqs)

        val_loss, _ = _batched_eval(model, val_seqs, val_labels)
        history.train_loss.append(epoch_loss)
        history.val_loss.append(val_loss)
        history.lr.append(lr)

        if val_loss < best_val:
            best_val = val_loss
            best_params = {n: v.copy() for n, v in model.params.items()}
            history.best_epoch = epoch
            since_improve = 0
            plateau_wait = 0
        else:
            since_improve += 1
            plateau_wait += 1
            if plateau_wait >= cfg.plateau_patience:
                plateau_events += 1
                plateau_wait = 0
        if since_improve >= cfg.early_stop:
            break

    history.plateau_events = plateau_events
    model.params = best_params
    return model, history

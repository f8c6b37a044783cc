"""One-layer LSTM / GRU sequence classifier in float64 numpy.

The final hidden state feeds a linear layer and a sigmoid; training uses
binary cross-entropy, backpropagation through time and ADAM. Variable
length sequences are right-padded inside a batch and masked: a masked step
copies the previous state through unchanged.

Gate layout (rows of ``W``/``U``/``b``):
  lstm: input, forget, candidate, output   (4H)
  gru:  update, reset, candidate           (3H)
The GRU candidate applies the reset gate before the recurrent matrix:
``n = tanh(W_n x + U_n (r * h) + b_n)``, ``h' = (1 - z) h + z n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NumericError, SchemaError, ShapeError, TrainingError, ValidationError
from .features import MACHINE, SCHEMAS, FeatureSequence, NormStats, truncate_to_horizon

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GATES = {"lstm": 4, "gru": 3}
PARAM_NAMES = ("W", "U", "b", "w_out", "b_out")
PROB_EPS = 1e-12


def sigmoid(a):
    # tanh form: no overflow warnings, exact 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden_width: int = 64
    cell: str = "lstm"

    def validate(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("ADAM betas must lie in (0, 1)")
        if self.hidden_width < 1:
            raise ValidationError("hidden_width must be >= 1")
        if self.cell not in GATES:
            raise ValidationError(f"unknown cell {self.cell!r}")


@dataclass
class RnnModel:
    cell: str
    input_width: int
    hidden_width: int
    params: dict
    schema_id: str
    norm: Optional[NormStats] = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.cell not in GATES:
            raise SchemaError(f"unknown cell {self.cell!r}", field="cell")
        if self.schema_id in SCHEMAS and SCHEMAS[self.schema_id].width != self.input_width:
            raise ShapeError(f"schema {self.schema_id} has width {SCHEMAS[self.schema_id].width}, model input is {self.input_width}")
        check_param_shapes(self.params, self.cell, self.input_width, self.hidden_width)


def param_shapes(cell: str, d: int, h: int) -> dict:
    g = GATES[cell]
    return {"W": (g * h, d), "U": (g * h, h), "b": (g * h,), "w_out": (h,), "b_out": (1,)}


def check_param_shapes(params: dict, cell: str, d: int, h: int):
    for name, shape in param_shapes(cell, d, h).items():
        if name not in params:
            raise ShapeError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise NumericError(f"parameter {name} is not finite")


def init_params(cell: str, d: int, h: int, rng: np.random.Generator) -> dict:
    """Uniform in [-1/sqrt(h), 1/sqrt(h)], drawn in ``PARAM_NAMES`` order."""
    bound = 1.0 / np.sqrt(h)
    shapes = param_shapes(cell, d, h)
    return {name: rng.uniform(-bound, bound, size=shapes[name]) for name in PARAM_NAMES}


def zero_params(cell: str, d: int, h: int) -> dict:
    return {name: np.zeros(shape) for name, shape in param_shapes(cell, d, h).items()}


# --------------------------------------------------------------------------- cell steps


def _blas_mm(a, B):
    return a @ B.T


def _rowwise_mm(a, B):
    # einsum's plain loops give each row the same summation order whatever the
    # batch size, so a sequence scores bitwise-identically alone or batched.
    return np.einsum("bi,oi->bo", a, B)


def _lstm_cell(ax, h, c, U, mm=_blas_mm):
    """One LSTM step given the input projection ``ax = x W^T + b``."""
    H = h.shape[1]
    a = ax + mm(h, U)
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def _gru_cell(ax, h, U, mm=_blas_mm):
    H = h.shape[1]
    ah = mm(h, U[: 2 * H])
    z = sigmoid(ax[:, :H] + ah[:, :H])
    r = sigmoid(ax[:, H : 2 * H] + ah[:, H:])
    rh = r * h
    n = np.tanh(ax[:, 2 * H :] + mm(rh, U[2 * H :]))
    return (1.0 - z) * h + z * n, (z, r, n, rh)


def _as_row(v, width, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (width,):
        raise ShapeError(f"{what} has shape {v.shape}, expected ({width},)")
    return v[None, :]


def gru_forward(x, h_prev, params: dict) -> np.ndarray:
    """Single GRU step on unbatched vectors."""
    W, U, b = params["W"], params["U"], params["b"]
    H = U.shape[1]
    if W.shape[0] != 3 * H:
        raise ShapeError("parameters are not GRU-shaped")
    ax = _as_row(x, W.shape[1], "x") @ W.T + b
    h, _ = _gru_cell(ax, _as_row(h_prev, H, "h_prev"), U)
    return h[0]


def lstm_forward(x, h_prev, c_prev, params: dict) -> tuple:
    """Single LSTM step on unbatched vectors; returns ``(h, c)``."""
    W, U, b = params["W"], params["U"], params["b"]
    H = U.shape[1]
    if W.shape[0] != 4 * H:
        raise ShapeError("parameters are not LSTM-shaped")
    ax = _as_row(x, W.shape[1], "x") @ W.T + b
    h, c, _ = _lstm_cell(ax, _as_row(h_prev, H, "h_prev"), _as_row(c_prev, H, "c_prev"), U)
    return h[0], c[0]


# --------------------------------------------------------------------------- sequences


def pad_batch(arrays: Sequence[np.ndarray], width: int) -> tuple:
    """Right-pad ``(T_i, width)`` arrays to ``(B, T, width)`` with a ``(B, T)`` mask."""
    T = max((len(a) for a in arrays), default=0)
    X = np.zeros((len(arrays), T, width))
    mask = np.zeros((len(arrays), T))
    for k, a in enumerate(arrays):
        X[k, : len(a)] = a
        mask[k, : len(a)] = 1.0
    return X, mask


def forward_sequence(params: dict, cell: str, X: np.ndarray, mask: np.ndarray, keep_cache: bool = False):
    """Run the cell over a padded batch; returns ``(p, h_T, cache)``.

    ``h_T`` is the state after the last real step of each row. With
    ``keep_cache`` the cache also holds the state after every step, which
    :func:`backward_sequence` needs. Inference (no cache) uses row-wise
    products so results do not depend on batch composition; training uses
    BLAS for speed.
    """
    W, U, b = params["W"], params["U"], params["b"]
    B, T, D = X.shape
    mm = _blas_mm if keep_cache else _rowwise_mm
    XW = mm(X.reshape(B * T, D), W).reshape(B, T, -1) + b
    h = np.zeros((B, U.shape[1]))
    c = np.zeros_like(h)
    cache = {"h_prev": [], "gates": [], "c_prev": [], "h": []} if keep_cache else None
    for t in range(T):
        m = mask[:, t, None]
        ax = XW[:, t, :]
        if cell == "lstm":
            h_new, c_new, gates = _lstm_cell(ax, h, c, U, mm)
            if keep_cache:
                cache["c_prev"].append(c)
            c = m * c_new + (1.0 - m) * c
        else:
            h_new, gates = _gru_cell(ax, h, U, mm)
        if keep_cache:
            cache["h_prev"].append(h)
            cache["gates"].append(gates)
        h = m * h_new + (1.0 - m) * h
        if keep_cache:
            cache["h"].append(h)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite hidden state at step {t}", step=t)
    logit = np.einsum("bi,i->b", h, params["w_out"]) + params["b_out"][0]
    p = sigmoid(logit)
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite output probability", step=T)
    return p, h, cache


def final_step_weights(mask: np.ndarray) -> np.ndarray:
    """Supervise only the state after the last (padded) step."""
    w = np.zeros(mask.shape)
    w[:, -1] = 1.0
    return w


def backward_sequence(params: dict, cell: str, X, mask, y, cache, weights=None) -> tuple:
    """BPTT for a weighted BCE over per-step outputs; returns ``(loss_sum, grads)``.

    ``weights[b, t]`` scores the output read from the state after step ``t``;
    each row's weights should sum to 1, so the loss is a mean over rows. The
    default weights supervise only the final state.
    """
    W, U = params["W"], params["U"]
    B, T, D = X.shape
    H = U.shape[1]
    weights = final_step_weights(mask) if weights is None else weights
    w_out = params["w_out"]

    Hs = np.stack(cache["h"], axis=1)  # (B, T, H)
    P = sigmoid(Hs @ w_out + params["b_out"][0])
    loss = float((weights * bce_loss(P, y[:, None])).sum())
    dlogit = weights * (P - y[:, None]) / B  # (B, T)

    grads = {}
    grads["w_out"] = np.einsum("bt,bth->h", dlogit, Hs)
    grads["b_out"] = np.array([dlogit.sum()])
    inject = dlogit[:, :, None] * w_out  # (B, T, H)

    G = U.shape[0]
    DA = np.zeros((B, T, G))
    dU = np.zeros_like(U)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        m = mask[:, t, None]
        dh = dh + inject[:, t, :]
        dh_new = m * dh
        h_prev = cache["h_prev"][t]
        if cell == "lstm":
            i, f, g, o, tc = cache["gates"][t]
            c_prev = cache["c_prev"][t]
            do = dh_new * tc
            dct = m * dc + dh_new * o * (1.0 - tc * tc)
            da = DA[:, t, :]
            da[:, :H] = dct * g * i * (1.0 - i)
            da[:, H : 2 * H] = dct * c_prev * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dct * i * (1.0 - g * g)
            da[:, 3 * H :] = do * o * (1.0 - o)
            dc = dct * f + (1.0 - m) * dc
            dU += da.T @ h_prev
            dh = da @ U + (1.0 - m) * dh
        else:
            z, r, n, rh = cache["gates"][t]
            da = DA[:, t, :]
            dan = dh_new * z * (1.0 - n * n)
            da[:, 2 * H :] = dan
            da[:, :H] = dh_new * (n - h_prev) * z * (1.0 - z)
            drh = dan @ U[2 * H :]
            da[:, H : 2 * H] = drh * h_prev * r * (1.0 - r)
            dU[: 2 * H] += da[:, : 2 * H].T @ h_prev
            dU[2 * H :] += dan.T @ rh
            dh = dh_new * (1.0 - z) + drh * r + da[:, : 2 * H] @ U[: 2 * H] + (1.0 - m) * dh
    flat = DA.reshape(B * T, G)
    grads["W"] = flat.T @ X.reshape(B * T, D)
    grads["U"] = dU
    grads["b"] = flat.sum(axis=0)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, {name: grads[name] for name in PARAM_NAMES}


def bce_loss(p, y):
    """Binary cross-entropy with ``p`` clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


# --------------------------------------------------------------------------- model-level API


def _inputs(model: RnnModel, seq: FeatureSequence) -> np.ndarray:
    if seq.schema_id != model.schema_id:
        raise SchemaError(f"sequence schema {seq.schema_id} does not match model schema {model.schema_id}")
    if model.norm is not None:
        return model.norm.apply(seq.vectors)
    return seq.vectors


def predict(model: RnnModel, seq: FeatureSequence) -> float:
    if len(seq) == 0:
        raise ValueError("cannot score an empty sequence")
    X = _inputs(model, seq)[None, :, :]
    p, _, _ = forward_sequence(model.params, model.cell, X, np.ones(X.shape[:2]))
    return float(p[0])


def predict_many(model: RnnModel, seqs: Sequence[FeatureSequence], batch_size: int = 256) -> np.ndarray:
    """Batched :func:`predict` over non-empty sequences."""
    out = np.empty(len(seqs))
    order = sorted(range(len(seqs)), key=lambda k: len(seqs[k]))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        arrays = [_inputs(model, seqs[k]) for k in idx]
        if any(len(a) == 0 for a in arrays):
            raise ValueError("cannot score an empty sequence")
        X, mask = pad_batch(arrays, model.input_width)
        p, _, _ = forward_sequence(model.params, model.cell, X, mask)
        out[idx] = p
    return out


def classify(model: RnnModel, seq: FeatureSequence) -> str:
    return label_of(predict(model, seq))


def label_of(p: float) -> str:
    # strictly greater: an exact 0.5 is benign
    return "malicious" if p > 0.5 else "benign"


def backward(model: RnnModel, batch: Sequence[tuple]) -> dict:
    """Mean-over-batch gradients for ``[(seq, y), ...]``."""
    if not batch:
        raise ValueError("batch must be non-empty")
    arrays = [_inputs(model, s) for s, _ in batch]
    y = np.array([float(label) for _, label in batch])
    X, mask = pad_batch(arrays, model.input_width)
    _, _, cache = forward_sequence(model.params, model.cell, X, mask, keep_cache=True)
    return backward_sequence(model.params, model.cell, X, mask, y, cache)[1]


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, config: TrainConfig) -> dict:
    """One bias-corrected ADAM update; returns new params and advances ``state``."""
    if t < 1:
        raise ValueError("ADAM step index starts at 1")
    b1, b2 = config.beta1, config.beta2
    out = {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(theta)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(theta)) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    state.t = t
    return out


def _length_bucket(n: int) -> int:
    return int(np.ceil(np.log2(max(n, 1))))


def supervision_weights(seqs: Sequence[FeatureSequence], T: int, horizons: Optional[Sequence[int]]) -> np.ndarray:
    """Per-step loss weights for a padded batch.

    Without ``horizons`` only the final state is scored. With them, each
    sequence is scored at the last step observable at every horizon (empty
    prefixes skipped), which trains on all those prefixes in one pass.
    Rows sum to 1.
    """
    w = np.zeros((len(seqs), T))
    if not horizons:
        w[:, -1] = 1.0
        return w
    for k, s in enumerate(seqs):
        for t in horizons:
            n = len(truncate_to_horizon(s, t))
            if n:
                w[k, n - 1] += 1.0
        if not w[k].any():
            w[k, len(s) - 1] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def train(
    dataset: Sequence[FeatureSequence],
    config: TrainConfig,
    schema_id: Optional[str] = None,
    prefix_horizons: Optional[Sequence[int]] = None,
) -> tuple:
    """Fit a model; returns ``(model, per_epoch_mean_loss)``.

    ``prefix_horizons`` (seconds) adds supervision at each prefix, see
    :func:`supervision_weights`.
    """
    config.validate()
    if not dataset:
        raise TrainingError("empty training set")
    schema_id = schema_id or dataset[0].schema_id
    if any(s.schema_id != schema_id for s in dataset):
        raise TrainingError("training sequences mix schemas")
    if any(len(s) == 0 for s in dataset):
        raise TrainingError("training set contains empty sequences")
    y = np.array([s.y for s in dataset], dtype=np.float64)
    if y.min() == y.max():
        raise TrainingError("training set holds a single class")

    rng = np.random.default_rng(config.seed)
    d, hw = SCHEMAS[schema_id].width, config.hidden_width
    norm = NormStats.fit(dataset) if schema_id == MACHINE else None
    model = RnnModel(config.cell, d, hw, init_params(config.cell, d, hw, rng), schema_id, norm)
    arrays = [_inputs(model, s) for s in dataset]
    seqs = list(dataset)
    buckets = np.array([_length_bucket(len(a)) for a in arrays])

    state = AdamState()
    step = 0
    trace = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(arrays))
        perm = perm[np.argsort(buckets[perm], kind="stable")]
        batches = []
        for b in np.unique(buckets[perm]):
            members = perm[buckets[perm] == b]
            batches.extend(members[k : k + config.batch_size] for k in range(0, len(members), config.batch_size))
        total = 0.0
        for bi in rng.permutation(len(batches)):
            idx = batches[bi]
            X, mask = pad_batch([arrays[k] for k in idx], d)
            weights = supervision_weights([seqs[k] for k in idx], X.shape[1], prefix_horizons)
            try:
                _, _, cache = forward_sequence(model.params, model.cell, X, mask, keep_cache=True)
                loss, grads = backward_sequence(model.params, model.cell, X, mask, y[idx], cache, weights)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}", step=exc.step, epoch=epoch) from None
            total += loss
            step += 1
            model.params = adam_step(model.params, grads, state, step, config)
        loss = total / len(arrays)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged at epoch {epoch}", epoch=epoch)
        trace.append(loss)
        log.debug("epoch %d loss %.6f", epoch, loss)
    return model, trace

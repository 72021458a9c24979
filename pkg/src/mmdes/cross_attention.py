"""Joint cross-attention audio-visual fusion regressor in plain numpy.

Shapes, for one subsequence of L clips::

    X_a (d_a, L), X_v (d_v, L), J = [X_a; X_v] (d, L)
    C_a = tanh(X_a^T W_ja J / sqrt(d))        W_ja (d_a, d)   -> (L, L)
    C_v = tanh(X_v^T W_jv J / sqrt(d))        W_jv (d_v, d)
    H_a = relu(W_a X_a + W_ca C_a^T)          W_a (d_a, d_a), W_ca (d_a, L)
    H_v = relu(W_v X_v + W_cv C_v^T)
    X_att = [W_ha H_a + X_a; W_hv H_v + X_v]  (d, L)
    y = dense[:-1] . vec(X_att) + dense[-1]

Every function takes an optional leading batch axis on the inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data_model import TARGETS, Modality, PersonRecord

BLOCKS = ("W_ja", "W_jv", "W_a", "W_ca", "W_v", "W_cv", "W_ha", "W_hv", "dense")


@dataclass(frozen=True, eq=False)
class CrossAttentionParams:
    W_ja: np.ndarray
    W_jv: np.ndarray
    W_a: np.ndarray
    W_ca: np.ndarray
    W_v: np.ndarray
    W_cv: np.ndarray
    W_ha: np.ndarray
    W_hv: np.ndarray
    dense: np.ndarray  # ((d_a + d_v) * L + 1,), bias last

    @property
    def d_a(self) -> int:
        return self.W_a.shape[0]

    @property
    def d_v(self) -> int:
        return self.W_v.shape[0]

    @property
    def clips(self) -> int:
        return self.W_ca.shape[1]

    def __post_init__(self):
        d_a, d_v, L = self.W_a.shape[0], self.W_v.shape[0], self.W_ca.shape[1]
        expected = shapes(d_a, d_v, L)
        for name in BLOCKS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def replace(self, **blocks) -> "CrossAttentionParams":
        current = self.blocks()
        current.update(blocks)
        return CrossAttentionParams(**current)

    def to_dict(self) -> dict:
        return {name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
                for name, arr in self.blocks().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CrossAttentionParams":
        return cls(**{name: np.array(d[name]["data"], dtype=np.float64).reshape(d[name]["shape"])
                      for name in BLOCKS})


def shapes(d_a: int, d_v: int, L: int) -> dict[str, tuple[int, ...]]:
    d = d_a + d_v
    return {
        "W_ja": (d_a, d), "W_jv": (d_v, d),
        "W_a": (d_a, d_a), "W_ca": (d_a, L),
        "W_v": (d_v, d_v), "W_cv": (d_v, L),
        "W_ha": (d_a, d_a), "W_hv": (d_v, d_v),
        "dense": (d * L + 1,),
    }


def init_params(d_a: int, d_v: int, L: int, seed: int = 0) -> CrossAttentionParams:
    """Uniform(-s, s) with s = 1/sqrt(fan_in) for every block, dense bias included."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes(d_a, d_v, L).items():
        fan_in = shape[0] - 1 if name == "dense" else shape[1]
        s = 1.0 / np.sqrt(fan_in)
        out[name] = rng.uniform(-s, s, size=shape)
    return CrossAttentionParams(**out)


def zero_params(d_a: int, d_v: int, L: int, bias: float = 0.0) -> CrossAttentionParams:
    out = {name: np.zeros(shape) for name, shape in shapes(d_a, d_v, L).items()}
    out["dense"][-1] = bias
    return CrossAttentionParams(**out)


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def forward(params: CrossAttentionParams, X_a: np.ndarray, X_v: np.ndarray):
    """Return ``(prediction, cache)``; prediction is scalar or (B,)."""
    X_a = np.asarray(X_a, dtype=np.float64)
    X_v = np.asarray(X_v, dtype=np.float64)
    if X_a.shape[-2:] != (params.d_a, params.clips) or X_v.shape[-2:] != (params.d_v, params.clips):
        raise ValueError(
            f"inputs {X_a.shape[-2:]}, {X_v.shape[-2:]} do not match params "
            f"({params.d_a}, {params.clips}), ({params.d_v}, {params.clips})"
        )
    if X_a.shape[:-2] != X_v.shape[:-2]:
        raise ValueError("audio and video batch shapes differ")
    sqrt_d = np.sqrt(params.d_a + params.d_v)
    J = np.concatenate([X_a, X_v], axis=-2)
    C_a = np.tanh(_t(X_a) @ params.W_ja @ J / sqrt_d)
    C_v = np.tanh(_t(X_v) @ params.W_jv @ J / sqrt_d)
    P_a = params.W_a @ X_a + params.W_ca @ _t(C_a)
    P_v = params.W_v @ X_v + params.W_cv @ _t(C_v)
    H_a = np.maximum(P_a, 0.0)
    H_v = np.maximum(P_v, 0.0)
    X_att = np.concatenate([params.W_ha @ H_a + X_a, params.W_hv @ H_v + X_v], axis=-2)
    flat = X_att.reshape(X_att.shape[:-2] + (-1,))
    pred = flat @ params.dense[:-1] + params.dense[-1]
    cache = dict(X_a=X_a, X_v=X_v, J=J, C_a=C_a, C_v=C_v, P_a=P_a, P_v=P_v,
                 H_a=H_a, H_v=H_v, X_att=X_att, flat=flat, pred=pred)
    return (float(pred) if np.ndim(pred) == 0 else pred), cache


def backward(params: CrossAttentionParams, cache: dict, target) -> dict[str, np.ndarray]:
    """Gradients of the summed squared error sum_b (pred_b - target_b)^2."""
    pred = np.asarray(cache["pred"])
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction shape {pred.shape}")
    if cache["X_a"].shape[-2:] != (params.d_a, params.clips):
        raise ValueError("cache does not match parameter shapes")
    d_a, L = params.d_a, params.clips
    sqrt_d = np.sqrt(params.d_a + params.d_v)
    X_a, X_v, J = cache["X_a"], cache["X_v"], cache["J"]

    g = 2.0 * (pred - target)  # (...)
    grads = {}
    flat = cache["flat"]
    grads["dense"] = np.concatenate([g.reshape(-1) @ flat.reshape(-1, flat.shape[-1]), [np.sum(g)]])
    G = g[..., None, None] * params.dense[:-1].reshape(params.d_a + params.d_v, L)
    G_a, G_v = G[..., :d_a, :], G[..., d_a:, :]

    def branch(G_m, H, P, C, X, W_h, W_c, W_j):
        batch_axes = tuple(range(G_m.ndim - 2))
        dW_h = (G_m @ _t(H)).sum(axis=batch_axes)
        dP = (_t(W_h) @ G_m) * (P > 0)
        dW = (dP @ _t(X)).sum(axis=batch_axes)
        dW_c = (dP @ C).sum(axis=batch_axes)
        dC = _t(dP) @ W_c
        dZ = dC * (1.0 - C * C) / sqrt_d
        dW_j = (X @ dZ @ _t(J)).sum(axis=batch_axes)
        return dW_h, dW, dW_c, dW_j

    grads["W_ha"], grads["W_a"], grads["W_ca"], grads["W_ja"] = branch(
        G_a, cache["H_a"], cache["P_a"], cache["C_a"], X_a, params.W_ha, params.W_ca, params.W_ja)
    grads["W_hv"], grads["W_v"], grads["W_cv"], grads["W_jv"] = branch(
        G_v, cache["H_v"], cache["P_v"], cache["C_v"], X_v, params.W_hv, params.W_cv, params.W_jv)
    return {name: grads[name] for name in BLOCKS}


def loss(params: CrossAttentionParams, X_a, X_v, target) -> float:
    pred, _ = forward(params, X_a, X_v)
    return float(np.sum((np.asarray(pred) - np.asarray(target)) ** 2))


@dataclass(frozen=True)
class SubsequenceBatch:
    X_a: np.ndarray  # (B, d_a, L) or (d_a, L)
    X_v: np.ndarray
    target: np.ndarray  # (B,) or scalar


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 300
    seed: int = 0


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: CrossAttentionParams
    loss_trace: tuple[float, ...]


def train(data: SubsequenceBatch | Sequence[SubsequenceBatch], config: TrainConfig = TrainConfig(),
          init: Optional[CrossAttentionParams] = None) -> TrainResult:
    """Full-batch gradient descent on mean squared error.

    ``loss_trace[e]`` is the loss of the parameters entering epoch ``e``.
    """
    if not isinstance(data, SubsequenceBatch):
        data = list(data)
        if not data:
            raise ValueError("no training subsequences")
        data = SubsequenceBatch(np.stack([b.X_a for b in data]), np.stack([b.X_v for b in data]),
                                np.array([float(b.target) for b in data]))
    X_a = np.asarray(data.X_a, dtype=np.float64)
    X_v = np.asarray(data.X_v, dtype=np.float64)
    y = np.asarray(data.target, dtype=np.float64)
    if X_a.ndim == 2:
        X_a, X_v, y = X_a[None], X_v[None], y.reshape(1)
    if X_a.shape[0] == 0:
        raise ValueError("no training subsequences")
    n = X_a.shape[0]
    params = init or init_params(X_a.shape[1], X_v.shape[1], X_a.shape[2], config.seed)
    trace = []
    for epoch in range(config.epochs):
        pred, cache = forward(params, X_a, X_v)
        mse = float(np.mean((pred - y) ** 2))
        if not np.isfinite(mse):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        trace.append(mse)
        grads = backward(params, cache, y)
        params = CrossAttentionParams(**{
            name: arr - config.lr * grads[name] / n for name, arr in params.blocks().items()
        })
    return TrainResult(params, tuple(trace))


# --------------------------------------------------------------------------
# Sequences

def modality_matrix(record: PersonRecord, modality: Modality) -> np.ndarray:
    """(T, d_m) concatenation of all groups of one modality, in schema order."""
    mats = [g.values for g in record.groups if g.modality is modality]
    if not mats:
        raise ValueError(f"person {record.person_id!r} has no {modality.value} groups")
    return np.concatenate(mats, axis=1)


def clip_sequence(values: np.ndarray, clips: int, clip_len: int, stride: int = 1) -> np.ndarray:
    """(T, d) -> (B, d, clips): clip means of every subsequence of clips*clip_len frames."""
    span = clips * clip_len
    T, d = values.shape
    if T < span:
        raise ValueError(f"track of {T} frames is shorter than one subsequence ({span} frames)")
    win = sliding_window_view(values, span, axis=0)[::stride]  # (B, d, span)
    return win.reshape(win.shape[0], d, clips, clip_len).mean(axis=-1)


def subsequences(record: PersonRecord, target: str, clips: int, clip_len: int,
                 stride: int = 1) -> tuple[SubsequenceBatch, np.ndarray]:
    """Subsequence batch for one person plus the end frame index of each subsequence."""
    X_a = clip_sequence(modality_matrix(record, Modality.AUDIO), clips, clip_len, stride)
    X_v = clip_sequence(modality_matrix(record, Modality.VIDEO), clips, clip_len, stride)
    ends = np.arange(clips * clip_len - 1, record.n_frames)[::stride]
    y = record.labels[ends, TARGETS.index(target)]
    return SubsequenceBatch(X_a, X_v, y), ends


def evaluate_sequence(params: CrossAttentionParams, person: PersonRecord, clips: int, clip_len: int,
                      target: str = "arousal") -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 predictions aligned to subsequence end frames, and the gold labels there.

    Output length is T - clips*clip_len + 1.
    """
    batch, _ = subsequences(person, target, clips, clip_len)
    pred, _ = forward(params, batch.X_a, batch.X_v)
    return np.atleast_1d(pred), batch.target


# --------------------------------------------------------------------------
# Gradient verification

def numeric_gradients(params: CrossAttentionParams, X_a, X_v, target, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of :func:`loss` for every parameter entry."""
    out = {}
    for name, arr in params.blocks().items():
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for i in range(arr.size):
            bumped = arr.copy().reshape(-1)
            bumped[i] += eps
            up = loss(params.replace(**{name: bumped.reshape(arr.shape)}), X_a, X_v, target)
            bumped[i] -= 2 * eps
            down = loss(params.replace(**{name: bumped.reshape(arr.shape)}), X_a, X_v, target)
            flat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max over entries of |a - b| / max(|a| + |b|, floor).

    The floor keeps finite-difference roundoff (~1e-11) on exactly-zero
    gradient entries from dominating.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def gradient_check(d_a: int = 4, d_v: int = 3, L: int = 5, seed: int = 7, batch: int = 2,
                   eps: float = 1e-5, corrupt: Optional[str] = None) -> dict[str, float]:
    """Per-block max relative error between analytic and finite-difference gradients.

    ``corrupt`` names a block whose analytic gradient is perturbed (negative control).
    """
    rng = np.random.default_rng(seed)
    params = init_params(d_a, d_v, L, seed)
    X_a = rng.normal(size=(batch, d_a, L))
    X_v = rng.normal(size=(batch, d_v, L))
    target = rng.normal(size=batch)
    _, cache = forward(params, X_a, X_v)
    analytic = backward(params, cache, target)
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"unknown parameter block {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3
    numeric = numeric_gradients(params, X_a, X_v, target, eps)
    return {name: relative_error(analytic[name], numeric[name]) for name in BLOCKS}


def save_params(params: CrossAttentionParams, path) -> None:
    Path(path).write_text(json.dumps({"format": "mmdes-xattn/1", "params": params.to_dict()}) + "\n")


def load_params(path) -> CrossAttentionParams:
    return CrossAttentionParams.from_dict(json.loads(Path(path).read_text())["params"])


def write_loss_trace(trace: Sequence[float], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v!r}\n")

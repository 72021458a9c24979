"""Competence regions and the dynamic combination rules (DS, DW, DWS, Meta-DW, mean).

All rule functions work on a single frame (neighbors along axis -2, pool
members along axis -1) and broadcast over any leading frame axes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metrics import ccc
from .regressor_pool import ValidationErrorTable

log = logging.getLogger(__name__)

DIST_EPS = 1e-9
ERR_EPS = 1e-12

METHODS = ("Mean", "DS", "DW", "DWS", "Meta-DW")


def _row_distances(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((X - q) ** 2, axis=-1))


class NeighborIndex:
    """Exact Euclidean k-nearest-neighbor search over a fixed reference matrix.

    Candidates are shortlisted with the ``|q|^2 + |x|^2 - 2 q.x`` expansion
    and then re-ranked with directly computed distances, so the returned
    distances and (distance, index) ordering match an exhaustive sort.
    Rows whose shortlist cannot be certified fall back to a full scan.
    """

    def __init__(self, features: np.ndarray, metric: str = "euclidean", chunk: int = 256, margin: int = 16):
        if metric != "euclidean":
            raise ValueError(f"unsupported metric {metric!r}")
        X = np.ascontiguousarray(features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("index needs a non-empty (n, d) feature matrix")
        X.setflags(write=False)
        self.features = X
        self.metric = metric
        self._sq = np.einsum("ij,ij->i", X, X)
        self._sq_max = float(self._sq.max())
        self._chunk = chunk
        self._margin = margin

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def query(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)``, each (m, k'), k' = min(k, len(self))."""
        Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if Q.shape[1] != self.dim:
            raise ValueError(f"query dimension {Q.shape[1]} != index dimension {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self)
        k = min(k, n)
        out_idx = np.empty((Q.shape[0], k), dtype=np.int64)
        out_dist = np.empty((Q.shape[0], k))
        for start in range(0, Q.shape[0], self._chunk):
            stop = min(start + self._chunk, Q.shape[0])
            out_idx[start:stop], out_dist[start:stop] = self._query_chunk(Q[start:stop], k)
        return out_idx, out_dist

    def _exhaustive(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        d = _row_distances(self.features, q)
        order = np.lexsort((np.arange(d.size), d))[:k]
        return order, d[order]

    def _query_chunk(self, Q: np.ndarray, k: int):
        n = len(self)
        m = min(n, k + self._margin)
        qq = np.einsum("ij,ij->i", Q, Q)
        approx = qq[:, None] + self._sq[None, :] - 2.0 * (Q @ self.features.T)
        tol = 1e-9 * (qq + self._sq_max + 1.0)
        if m < n:
            part = np.argpartition(approx, m, axis=1)
            cand = part[:, :m]
            boundary = np.take_along_axis(approx, part[:, m:m + 1], axis=1)[:, 0]
        else:
            cand = np.broadcast_to(np.arange(n), (Q.shape[0], n))
            boundary = np.full(Q.shape[0], np.inf)
        exact = _row_distances(self.features[cand], Q[:, None, :])
        order = np.lexsort((cand, exact), axis=-1)[:, :k]
        idx = np.take_along_axis(cand, order, axis=1)
        dist = np.take_along_axis(exact, order, axis=1)
        # every excluded row has approx >= boundary; certify it lies beyond the k-th distance
        unsafe = ~(boundary - tol > dist[:, -1] ** 2 + tol)
        for r in np.nonzero(unsafe)[0]:
            idx[r], dist[r] = self._exhaustive(Q[r], k)
        return idx, dist


@dataclass(frozen=True, eq=False)
class CompetenceRegion:
    neighbor_indices: np.ndarray  # (..., K)
    distances: np.ndarray  # (..., K), ascending
    error_rows: np.ndarray  # (..., K, N)

    @property
    def k(self) -> int:
        return self.distances.shape[-1]


def competence_region(index: NeighborIndex, table: ValidationErrorTable, queries: np.ndarray,
                      k: int = 100) -> CompetenceRegion:
    """K nearest validation frames of each query, with their per-regressor errors."""
    squeeze = np.asarray(queries).ndim == 1
    idx, dist = index.query(queries, k)
    rows = table.errors[idx]
    if squeeze:
        return CompetenceRegion(idx[0], dist[0], rows[0])
    return CompetenceRegion(idx, dist, rows)


@dataclass(frozen=True, eq=False)
class SelectionWeights:
    alpha: np.ndarray  # (..., N)
    selected_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.selected_mask is None:
            object.__setattr__(self, "selected_mask", np.ones(self.alpha.shape, dtype=bool))


def neighbor_weights(distances) -> np.ndarray:
    """Inverse-distance neighbor weights normalized to sum to 1 along the last axis."""
    d = np.asarray(distances, dtype=np.float64)
    if d.shape[-1] < 1:
        raise ValueError("need at least one neighbor")
    if np.any(d < 0):
        raise ValueError("negative distance")
    inv = 1.0 / np.maximum(d, DIST_EPS)
    return inv / inv.sum(axis=-1, keepdims=True)


def _inverse_error_weights(d: np.ndarray, errors: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    acc = np.einsum("...k,...kn->...n", d, errors)
    inv = 1.0 / np.maximum(acc, ERR_EPS)
    if mask is not None:
        inv = np.where(mask, inv, 0.0)
    return inv / inv.sum(axis=-1, keepdims=True)


def regressor_weights(region: CompetenceRegion) -> SelectionWeights:
    """Dynamic-weighting alphas: inverse of each regressor's neighbor-weighted error, normalized."""
    d = neighbor_weights(region.distances)
    return SelectionWeights(_inverse_error_weights(d, region.error_rows))


def ds_select(region: CompetenceRegion) -> np.ndarray | int:
    """Index of the regressor with the smallest unweighted accumulated error (first on ties)."""
    sel = np.argmin(np.asarray(region.error_rows).sum(axis=-2), axis=-1)
    return int(sel) if np.ndim(sel) == 0 else sel


def dw_combine(predictions, weights: SelectionWeights | np.ndarray):
    p = np.asarray(predictions, dtype=np.float64)
    alpha = weights.alpha if isinstance(weights, SelectionWeights) else np.asarray(weights, dtype=np.float64)
    if p.shape[-1] != alpha.shape[-1]:
        raise ValueError(f"{p.shape[-1]} predictions vs {alpha.shape[-1]} weights")
    out = np.sum(alpha * p, axis=-1)
    return float(out) if out.ndim == 0 else out


def mean_combine(predictions):
    p = np.asarray(predictions, dtype=np.float64)
    if p.shape[-1] == 0:
        raise ValueError("empty pool")
    out = p.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def dws_filter(region: CompetenceRegion, threshold="pool-mean") -> SelectionWeights:
    """DW restricted to regressors whose mean error over the region is <= threshold.

    ``threshold`` is ``"pool-mean"`` (the mean of the per-regressor mean
    errors) or an absolute number; ``math.inf`` keeps everyone. Frames where
    nothing survives fall back to DW over the full pool.
    """
    errors = np.asarray(region.error_rows, dtype=np.float64)
    mean_err = errors.mean(axis=-2)
    if isinstance(threshold, str):
        if threshold != "pool-mean":
            raise ValueError(f"unknown threshold rule {threshold!r}")
        thr = mean_err.mean(axis=-1, keepdims=True)
    else:
        thr = float(threshold)
    keep = mean_err <= thr
    none_left = ~keep.any(axis=-1, keepdims=True)
    keep = np.where(none_left, True, keep)
    d = neighbor_weights(region.distances)
    return SelectionWeights(_inverse_error_weights(d, errors, keep), keep)


# --------------------------------------------------------------------------
# Meta-DW

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class MetaModel:
    """Multinomial logistic regression from standardized pool outputs to the best regressor."""

    weights: np.ndarray  # (N + 1, N), bias row last
    input_mean: np.ndarray
    input_scale: np.ndarray
    lr: float = 0.1
    epochs: int = 500
    seed: int = 0
    loss_trace: tuple[float, ...] = field(default=())
    window_labels: tuple[int, ...] = field(default=())
    fallback: bool = False

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    def probabilities(self, predictions) -> np.ndarray:
        p = np.asarray(predictions, dtype=np.float64)
        if p.shape[-1] != self.n_classes:
            raise ValueError(f"meta model expects {self.n_classes} predictions, got {p.shape[-1]}")
        z = (p - self.input_mean) / self.input_scale
        logits = z @ self.weights[:-1] + self.weights[-1]
        return _softmax(logits)


def window_best_labels(predictions: np.ndarray, labels: np.ndarray, window_len: int,
                       segments: Optional[Sequence[int]] = None) -> list[tuple[int, int, int]]:
    """Non-overlapping windows (start, stop, best regressor by CCC).

    Windows never cross segment boundaries; a trailing partial window is
    dropped, as are windows whose gold track or all prediction tracks are
    constant.
    """
    n = predictions.shape[0]
    segments = list(segments) if segments else [n]
    if sum(segments) != n:
        raise ValueError("segments must sum to the number of frames")
    out = []
    offset = 0
    for seg in segments:
        for s in range(offset, offset + seg - window_len + 1, window_len):
            e = s + window_len
            gold = labels[s:e]
            block = predictions[s:e]
            if np.ptp(gold) == 0 or np.all(np.ptp(block, axis=0) == 0):
                continue
            scores = [ccc(gold, block[:, i]) for i in range(block.shape[1])]
            out.append((s, e, int(np.argmax(scores))))
        offset += seg
    return out


def meta_train(val_predictions, val_labels, window_len: int = 150, seed: int = 0, lr: float = 0.1,
               epochs: int = 500, segments: Optional[Sequence[int]] = None) -> MetaModel:
    P = np.asarray(getattr(val_predictions, "values", val_predictions), dtype=np.float64)
    y = np.asarray(val_labels, dtype=np.float64).ravel()
    if P.ndim != 2 or P.shape[0] != y.size:
        raise ValueError("validation predictions must be (frames, N) aligned with labels")
    if window_len < 2 or P.shape[0] < window_len:
        raise ValueError(f"need frames >= window_len >= 2 (got {P.shape[0]} frames, window {window_len})")
    N = P.shape[1]
    mu = P.mean(axis=0)
    sd = P.std(axis=0)
    sd[sd == 0] = 1.0

    windows = window_best_labels(P, y, window_len, segments)
    if not windows:
        log.warning("meta_train: no usable windows; falling back to uniform weights")
        return MetaModel(np.zeros((N + 1, N)), mu, sd, lr, epochs, seed, (), (), True)
    classes = {c for _, _, c in windows}
    if len(classes) < 2:
        log.warning("meta_train: only one distinct best regressor (%s) in validation windows", classes)

    rows = np.concatenate([np.arange(s, e) for s, e, _ in windows])
    targets = np.concatenate([np.full(e - s, c) for s, e, c in windows])
    Xb = np.column_stack([(P[rows] - mu) / sd, np.ones(rows.size)])
    onehot = np.zeros((rows.size, N))
    onehot[np.arange(rows.size), targets] = 1.0

    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(N + 1, N))
    trace = []
    for _ in range(epochs):
        prob = _softmax(Xb @ W)
        trace.append(float(-np.mean(np.log(np.sum(prob * onehot, axis=1) + 1e-300))))
        W = W - lr * (Xb.T @ (prob - onehot)) / rows.size
    if not np.all(np.isfinite(W)):
        raise FloatingPointError("meta classifier diverged")
    return MetaModel(W, mu, sd, lr, epochs, seed, tuple(trace), tuple(c for _, _, c in windows))


def meta_weights(model: MetaModel, predictions_at_frame, hard: bool = False) -> SelectionWeights:
    """Softmax class probabilities as combination weights (one-hot argmax when ``hard``)."""
    prob = model.probabilities(predictions_at_frame)
    if hard:
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, np.argmax(prob, axis=-1)[..., None], 1.0, axis=-1)
        return SelectionWeights(onehot, onehot.astype(bool))
    return SelectionWeights(prob)


# --------------------------------------------------------------------------
# Frame-level driver

def combine(method: str, predictions: np.ndarray, region: Optional[CompetenceRegion] = None,
            meta: Optional[MetaModel] = None, threshold="pool-mean", meta_hard: bool = False):
    """Apply one combination rule to a (frames, N) prediction matrix.

    Returns ``(combined, alpha)``, alpha being the (frames, N) weights used
    (one-hot for DS).
    """
    P = np.asarray(predictions, dtype=np.float64)
    N = P.shape[-1]
    if method == "Mean":
        alpha = np.full(P.shape, 1.0 / N)
        return mean_combine(P), alpha
    if method == "Meta-DW":
        if meta is None:
            raise ValueError("Meta-DW needs a trained meta model")
        w = meta_weights(meta, P, hard=meta_hard)
        return dw_combine(P, w), w.alpha
    if region is None:
        raise ValueError(f"{method} needs competence regions")
    if method == "DS":
        sel = np.asarray(ds_select(region))
        alpha = np.zeros(P.shape)
        np.put_along_axis(alpha, sel[..., None], 1.0, axis=-1)
        return np.take_along_axis(P, sel[..., None], axis=-1)[..., 0], alpha
    if method == "DW":
        w = regressor_weights(region)
    elif method == "DWS":
        w = dws_filter(region, threshold)
    else:
        raise ValueError(f"unknown method {method!r}")
    return dw_combine(P, w), w.alpha


def parse_threshold(value):
    """Config value -> threshold rule accepted by :func:`dws_filter`."""
    if value is None or value == "pool-mean":
        return "pool-mean"
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    return float(value)

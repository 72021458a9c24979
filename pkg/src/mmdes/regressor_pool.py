"""Per-feature-group ridge regressors and their prediction / error tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data_model import TARGETS, FrameBatch, Modality
from .metrics import ccc


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class Regressor:
    group_name: str
    modality: Modality
    weights: np.ndarray  # slopes followed by bias
    lam: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 2 or not np.all(np.isfinite(w)):
            raise ValueError("regressor weights must be a finite vector of length >= 2")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "modality", Modality.parse(self.modality))

    @property
    def n_inputs(self) -> int:
        return self.weights.size - 1

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_inputs:
            raise ValueError(
                f"regressor {self.group_name!r} expects {self.n_inputs} inputs, got {x.shape[-1]}"
            )
        return x @ self.weights[:-1] + self.weights[-1]

    def to_dict(self) -> dict:
        return {
            "group": self.group_name,
            "modality": self.modality.value,
            "lambda": self.lam,
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Regressor":
        return cls(d["group"], d["modality"], np.array(d["weights"]), float(d["lambda"]))


def solve_ridge(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Solve (A^T A + lam P) w = A^T y for A = [X, 1], P = I with the bias entry zeroed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, p) with len(y) == n")
    if X.shape[0] < 2:
        raise ValueError("ridge regression needs at least 2 samples")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    A = np.column_stack([X, np.ones(X.shape[0])])
    penalty = np.full(A.shape[1], float(lam))
    penalty[-1] = 0.0
    lhs = A.T @ A + np.diag(penalty)
    rhs = A.T @ y
    if np.linalg.matrix_rank(lhs) < lhs.shape[0]:
        raise SingularSystemError(
            "ridge normal equations are singular (degenerate features with lambda=0?)"
        )
    return np.linalg.solve(lhs, rhs)


def train_ridge(samples: FrameBatch | np.ndarray, target, lam: float = 1.0,
                group: Optional[str] = None, modality=None) -> Regressor:
    """Fit one ridge regressor on a group's (standardized) windowed features.

    ``samples`` is either a FrameBatch together with ``group`` (its slice is
    used and ``target`` names a label column) or a plain feature matrix with
    ``target`` the label vector.
    """
    if isinstance(samples, FrameBatch):
        if group is None:
            raise ValueError("group name required when training from a FrameBatch")
        X = samples.group_slice(group)
        y = samples.target(target) if isinstance(target, str) else np.asarray(target)
        if modality is None:
            modality = next(g.modality for g in samples.layout.schema if g.name == group)
    else:
        X, y = np.asarray(samples), np.asarray(target)
        group = group or "group"
        modality = modality or Modality.AUDIO
    w = solve_ridge(X, y, lam)
    return Regressor(group, modality, w, float(lam))


def train_pool(batch: FrameBatch, target: str, lam: float = 1.0) -> list[Regressor]:
    """One regressor per feature group, in schema order."""
    return [train_ridge(batch, target, lam, group=g.name, modality=g.modality) for g in batch.layout.schema]


@dataclass(frozen=True, eq=False)
class PoolPredictions:
    values: np.ndarray  # (frames, N)
    names: tuple[str, ...]
    modalities: tuple[Modality, ...]
    target: str
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.names):
            raise ValueError("prediction matrix must be (frames, N) with one name per column")
        if len(self.modalities) != len(self.names):
            raise ValueError("one modality per prediction column required")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite predictions")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "modalities", tuple(Modality.parse(m) for m in self.modalities))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.float64).ravel()
            if labels.size != values.shape[0]:
                raise ValueError("labels must align with prediction rows")
            object.__setattr__(self, "labels", labels)

    @property
    def n_regressors(self) -> int:
        return self.values.shape[1]


def predict(pool: Sequence[Regressor], samples: FrameBatch, target: str) -> PoolPredictions:
    """Column i holds regressor i applied to its own group's slice only."""
    slices = samples.layout.slices
    cols = []
    for reg in pool:
        if reg.group_name not in slices:
            raise ValueError(f"samples lack group {reg.group_name!r}")
        cols.append(reg(samples.x[:, slices[reg.group_name]]))
    return PoolPredictions(
        np.column_stack(cols),
        tuple(r.group_name for r in pool),
        tuple(r.modality for r in pool),
        target,
        samples.target(target),
    )


@dataclass(frozen=True, eq=False)
class ValidationErrorTable:
    errors: np.ndarray  # (frames, N) squared errors
    features: np.ndarray  # (frames, D) standardized joint windowed features
    labels: np.ndarray  # (frames,)
    predictions: np.ndarray  # (frames, N)

    def __len__(self) -> int:
        return self.errors.shape[0]


def error_table(predictions: np.ndarray, labels: np.ndarray, features: np.ndarray) -> ValidationErrorTable:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if predictions.shape[0] == 0:
        raise ValueError("empty validation set")
    if labels.size != predictions.shape[0] or features.shape[0] != predictions.shape[0]:
        raise ValueError("validation predictions, labels and features must align")
    errors = (predictions - labels[:, None]) ** 2
    return ValidationErrorTable(errors, np.asarray(features, dtype=np.float64), labels, predictions)


def build_validation_table(pool: Sequence[Regressor], val_samples: FrameBatch, target: str) -> ValidationErrorTable:
    if len(val_samples) == 0:
        raise ValueError("empty validation set")
    preds = predict(pool, val_samples, target)
    return error_table(preds.values, preds.labels, val_samples.x)


def validation_ccc(preds: PoolPredictions) -> dict[str, float]:
    """CCC of each pool member against the prediction labels."""
    if preds.labels is None:
        raise ValueError("predictions carry no labels")
    return {n: ccc(preds.labels, preds.values[:, i]) for i, n in enumerate(preds.names)}


# --------------------------------------------------------------------------
# Serialization

def sidecar_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".json")


def write_predictions(preds: PoolPredictions, csv_path, label_column: str = "label") -> Path:
    """Write the prediction CSV plus its ``<file>.json`` column mapping."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(preds.names) + ([label_column] if preds.labels is not None else [])
        w.writerow(header)
        for i in range(preds.values.shape[0]):
            row = [repr(float(v)) for v in preds.values[i]]
            if preds.labels is not None:
                row.append(repr(float(preds.labels[i])))
            w.writerow(row)
    meta = {
        "target": preds.target,
        "label_column": label_column if preds.labels is not None else None,
        "columns": [{"name": n, "modality": m.value} for n, m in zip(preds.names, preds.modalities)],
    }
    sidecar_path(csv_path).write_text(json.dumps(meta, indent=2) + "\n")
    return csv_path


def load_predictions(csv_path, expected_rows: Optional[int] = None) -> PoolPredictions:
    """Load externally computed pool predictions.

    The sidecar ``<csv>.json`` declares ``target``, ``label_column`` and
    ``columns`` (list of {name, modality}, in pool order).
    """
    csv_path = Path(csv_path)
    side = sidecar_path(csv_path)
    if not side.is_file():
        raise ValueError(f"missing column mapping {side}")
    meta = json.loads(side.read_text())
    try:
        columns = meta["columns"]
        target = meta["target"]
    except KeyError as exc:
        raise ValueError(f"{side}: missing key {exc}") from None
    label_col = meta.get("label_column")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(c) for c in row] for row in reader if row]
    names = [c["name"] for c in columns]
    missing = [n for n in names if n not in header]
    if missing:
        raise ValueError(f"{csv_path}: mapping names columns {missing} absent from CSV header {header}")
    if label_col is not None and label_col not in header:
        raise ValueError(f"{csv_path}: label column {label_col!r} absent")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    if expected_rows is not None and data.shape[0] != expected_rows:
        raise ValueError(f"{csv_path}: {data.shape[0]} rows, dataset has {expected_rows} frames")
    values = data[:, [header.index(n) for n in names]]
    labels = data[:, header.index(label_col)] if label_col is not None else None
    return PoolPredictions(values, tuple(names), tuple(c["modality"] for c in columns), target, labels)


def save_pool(pool: Sequence[Regressor], path, schema=None, target: Optional[str] = None) -> None:
    doc = {"format": "mmdes-pool/1", "target": target, "regressors": [r.to_dict() for r in pool]}
    if schema is not None:
        doc["schema"] = [s.to_dict() for s in schema]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_pool(path) -> list[Regressor]:
    doc = json.loads(Path(path).read_text())
    return [Regressor.from_dict(d) for d in doc["regressors"]]

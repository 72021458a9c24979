"""Missing-modality simulation by zero or training-mean replacement."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data_model import FrameBatch, FrameSample, Modality, PersonRecord, WindowLayout


class ImputationKind(str, enum.Enum):
    NONE = "none"
    ZERO = "zero"
    MEAN = "mean"


@dataclass(frozen=True)
class ImputationMode:
    kind: ImputationKind = ImputationKind.NONE
    target_modality: Optional[Modality] = None

    def __post_init__(self):
        kind = ImputationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ImputationKind.NONE:
            if self.target_modality is not None:
                raise ValueError("imputation kind 'none' takes no target modality")
        else:
            if self.target_modality is None:
                raise ValueError(f"imputation kind {kind.value!r} needs a target modality")
            object.__setattr__(self, "target_modality", Modality.parse(self.target_modality))

    @classmethod
    def parse(cls, text: str) -> "ImputationMode":
        """Parse ``none``, ``zero:audio``, ``mean:video`` and so on."""
        text = text.strip().lower()
        if text == "none":
            return cls()
        kind, _, modality = text.partition(":")
        try:
            return cls(ImputationKind(kind), Modality(modality))
        except ValueError:
            raise ValueError(f"bad scenario {text!r}; expected none or <zero|mean>:<audio|video>") from None

    @property
    def key(self) -> str:
        if self.kind is ImputationKind.NONE:
            return "none"
        return f"{self.kind.value}:{self.target_modality.value}"

    def __str__(self) -> str:
        return self.key


NO_IMPUTATION = ImputationMode()

ModalityMeans = dict  # group name -> mean vector (raw feature space)


def compute_means(train_persons: Sequence[PersonRecord]) -> ModalityMeans:
    """Per-group mean feature vector pooled over every training frame."""
    if not train_persons or sum(p.n_frames for p in train_persons) == 0:
        raise ValueError("cannot compute means from an empty training set")
    means = {}
    for g in train_persons[0].groups:
        stacked = np.concatenate([p.group(g.name).values for p in train_persons], axis=0)
        m = stacked.mean(axis=0)
        m.setflags(write=False)
        means[g.name] = m
    return means


def _replacement(kind: ImputationKind, means: Optional[ModalityMeans], name: str, dim: int) -> np.ndarray:
    if kind is ImputationKind.ZERO:
        return np.zeros(dim)
    if means is None:
        raise ValueError("mean imputation requires training means")
    if name not in means:
        raise KeyError(f"group {name!r} missing from the means map")
    m = np.asarray(means[name], dtype=np.float64)
    if m.shape != (dim,):
        raise ValueError(f"mean vector for {name!r} has shape {m.shape}, expected ({dim},)")
    return m


def apply_imputation(obj, mode: ImputationMode, means: Optional[ModalityMeans] = None,
                     layout: Optional[WindowLayout] = None):
    """Overwrite every feature of ``mode.target_modality`` in ``obj``.

    ``obj`` may be a PersonRecord (raw frames), a FrameBatch, or a single
    FrameSample; windowed inputs need ``layout`` unless they carry one. The
    group mean is tiled across the context window. Labels and the other
    modality are left untouched. Returns a new object of the same type.
    """
    if mode.kind is ImputationKind.NONE:
        return obj

    if isinstance(obj, PersonRecord):
        new = {}
        for g in obj.groups:
            if g.modality is mode.target_modality:
                fill = _replacement(mode.kind, means, g.name, g.dim)
                new[g.name] = np.broadcast_to(fill, g.values.shape)
        return obj.replace_values(new)

    if isinstance(obj, FrameBatch):
        layout = obj.layout
    if layout is None:
        raise ValueError("windowed imputation needs a WindowLayout")
    x = np.array(obj.x, dtype=np.float64, copy=True)
    slices = layout.slices
    for g in layout.schema:
        if g.modality is mode.target_modality:
            fill = np.tile(_replacement(mode.kind, means, g.name, g.dim), layout.context_len)
            x[..., slices[g.name]] = fill
    if isinstance(obj, FrameBatch):
        return FrameBatch(obj.layout, obj.person_ids, obj.frame_index, x, obj.y, obj.segments)
    if isinstance(obj, FrameSample):
        return FrameSample(obj.person_id, obj.frame_index, x, obj.y)
    raise TypeError(f"cannot impute {type(obj).__name__}")

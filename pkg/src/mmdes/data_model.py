"""Multimodal dataset representation, loading, synthesis, splitting and windowing."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TARGETS = ("arousal", "valence")


class DatasetError(ValueError):
    """Raised for malformed manifests, CSV files or inconsistent records."""


class Modality(str, enum.Enum):
    AUDIO = "audio"
    VIDEO = "video"

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DatasetError(f"unknown modality {value!r} (expected audio or video)") from None


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GroupSpec:
    name: str
    modality: Modality
    dim: int

    def to_dict(self) -> dict:
        return {"name": self.name, "modality": self.modality.value, "dim": self.dim}


@dataclass(frozen=True, eq=False)
class FeatureGroup:
    name: str
    modality: Modality
    values: np.ndarray  # (T, dim)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] < 1:
            raise DatasetError(f"group {self.name!r}: values must be a (T, dim) matrix")
        if not np.all(np.isfinite(values)):
            raise DatasetError(f"group {self.name!r}: non-finite feature values")
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        object.__setattr__(self, "values", _frozen(values))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def spec(self) -> GroupSpec:
        return GroupSpec(self.name, self.modality, self.dim)


@dataclass(frozen=True, eq=False)
class PersonRecord:
    person_id: str
    groups: tuple[FeatureGroup, ...]
    labels: np.ndarray  # (T, 2): arousal, valence

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.float64)
        if labels.ndim != 2 or labels.shape[1] != 2:
            raise DatasetError(f"person {self.person_id!r}: labels must be (T, 2)")
        if not np.all(np.isfinite(labels)):
            raise DatasetError(f"person {self.person_id!r}: non-finite labels")
        groups = tuple(self.groups)
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise DatasetError(f"person {self.person_id!r}: duplicate group names {names}")
        for g in groups:
            if g.values.shape[0] != labels.shape[0]:
                raise DatasetError(
                    f"person {self.person_id!r}: group {g.name!r} has {g.values.shape[0]} frames, "
                    f"labels have {labels.shape[0]}"
                )
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]

    def group(self, name: str) -> FeatureGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def replace_values(self, new_values: dict[str, np.ndarray]) -> "PersonRecord":
        """Copy of this record with some groups' value matrices swapped out."""
        groups = tuple(
            FeatureGroup(g.name, g.modality, new_values[g.name]) if g.name in new_values else g
            for g in self.groups
        )
        return PersonRecord(self.person_id, groups, self.labels)


@dataclass(frozen=True, eq=False)
class MultimodalDataset:
    persons: tuple[PersonRecord, ...]
    frame_rate_hz: float
    group_schema: tuple[GroupSpec, ...]

    def __post_init__(self):
        persons = tuple(self.persons)
        schema = tuple(self.group_schema)
        if self.frame_rate_hz <= 0:
            raise DatasetError("frame_rate_hz must be positive")
        ids = [p.person_id for p in persons]
        if len(set(ids)) != len(ids):
            raise DatasetError("person ids must be unique")
        for p in persons:
            got = tuple(g.spec for g in p.groups)
            if got != schema:
                raise DatasetError(
                    f"person {p.person_id!r} does not match group schema: "
                    f"expected {[s.to_dict() for s in schema]}, got {[s.to_dict() for s in got]}"
                )
        object.__setattr__(self, "persons", persons)
        object.__setattr__(self, "group_schema", schema)

    @property
    def person_ids(self) -> list[str]:
        return [p.person_id for p in self.persons]

    def person(self, person_id: str) -> PersonRecord:
        for p in self.persons:
            if p.person_id == person_id:
                return p
        raise KeyError(person_id)

    def subset(self, ids: Iterable[str]) -> list[PersonRecord]:
        return [self.person(i) for i in ids]


# --------------------------------------------------------------------------
# File ingestion

def _read_matrix(path: Path, columns: Sequence[str], group: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file (group {group!r})") from None
        if header != list(columns):
            raise DatasetError(
                f"{path}: header {header} does not match expected {list(columns)} (group {group!r})"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DatasetError(
                    f"{path}: row {lineno} has {len(row)} values, expected {len(columns)} "
                    f"(group {group!r})"
                )
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DatasetError(f"{path}: row {lineno}: non-numeric cell (group {group!r})") from None
            if not all(np.isfinite(vals)):
                raise DatasetError(f"{path}: row {lineno}: non-finite cell (group {group!r})")
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: no data rows (group {group!r})")
    return np.array(rows, dtype=np.float64)


def feature_columns(dim: int) -> list[str]:
    return [f"f{i}" for i in range(dim)]


def load_dataset(manifest_path) -> MultimodalDataset:
    """Load a dataset from a JSON manifest referencing per-person CSV files.

    Relative CSV paths are resolved against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from None
    base = manifest_path.parent
    try:
        schema = tuple(
            GroupSpec(str(g["name"]), Modality.parse(g["modality"]), int(g["dim"]))
            for g in manifest["groups"]
        )
        frame_rate = float(manifest["frame_rate_hz"])
        person_entries = manifest["persons"]
    except KeyError as exc:
        raise DatasetError(f"{manifest_path}: missing key {exc}") from None
    if any(s.dim < 1 for s in schema):
        raise DatasetError(f"{manifest_path}: group dims must be positive")

    persons = []
    for entry in person_entries:
        pid = str(entry["id"])
        files = entry.get("files", {})
        expected = {s.name for s in schema}
        if set(files) != expected:
            missing = sorted(expected - set(files))
            extra = sorted(set(files) - expected)
            raise DatasetError(
                f"person {pid!r}: schema mismatch (missing groups {missing}, unexpected {extra})"
            )
        groups = []
        for spec in schema:
            values = _read_matrix(base / files[spec.name], feature_columns(spec.dim), spec.name)
            groups.append(FeatureGroup(spec.name, spec.modality, values))
        labels = _read_matrix(base / entry["labels"], list(TARGETS), "labels")
        for g in groups:
            if g.values.shape[0] != labels.shape[0]:
                raise DatasetError(
                    f"person {pid!r}: group {g.name!r} has {g.values.shape[0]} frames "
                    f"but labels have {labels.shape[0]}"
                )
        persons.append(PersonRecord(pid, tuple(groups), labels))
    return MultimodalDataset(tuple(persons), frame_rate, schema)


def _write_matrix(path: Path, columns: Sequence[str], values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in values:
            writer.writerow([repr(float(v)) for v in row])


def save_dataset(dataset: MultimodalDataset, out_dir) -> Path:
    """Write manifest.json plus one directory of CSVs per person. Returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in dataset.persons:
        pdir = out_dir / p.person_id
        pdir.mkdir(exist_ok=True)
        files = {}
        for g in p.groups:
            _write_matrix(pdir / f"{g.name}.csv", feature_columns(g.dim), g.values)
            files[g.name] = f"{p.person_id}/{g.name}.csv"
        _write_matrix(pdir / "labels.csv", TARGETS, p.labels)
        entries.append({"id": p.person_id, "files": files, "labels": f"{p.person_id}/labels.csv"})
    manifest = {
        "frame_rate_hz": dataset.frame_rate_hz,
        "groups": [s.to_dict() for s in dataset.group_schema],
        "persons": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# --------------------------------------------------------------------------
# Synthetic data

DEFAULT_GROUPS = (
    GroupSpec("acoustic", Modality.AUDIO, 6),
    GroupSpec("mfcc", Modality.AUDIO, 5),
    GroupSpec("mel", Modality.AUDIO, 4),
    GroupSpec("appearance", Modality.VIDEO, 4),
    GroupSpec("geometric", Modality.VIDEO, 3),
)


@dataclass(frozen=True)
class SyntheticConfig:
    persons: int = 18
    frames: int = 1500
    groups: tuple[GroupSpec, ...] = DEFAULT_GROUPS
    noise: float = 0.3
    cross_informativeness: float = 0.15
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        object.__setattr__(
            self,
            "groups",
            tuple(g if isinstance(g, GroupSpec) else GroupSpec(g["name"], Modality.parse(g["modality"]), int(g["dim"]))
                  for g in self.groups),
        )
        if self.persons < 1 or self.frames < 1:
            raise ValueError("persons and frames must be positive")
        if not self.groups or any(g.dim < 1 for g in self.groups):
            raise ValueError("group dims must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0.0 <= self.cross_informativeness <= 1.0:
            raise ValueError("cross_informativeness must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "persons": self.persons,
            "frames": self.frames,
            "groups": [g.to_dict() for g in self.groups],
            "noise": self.noise,
            "cross_informativeness": self.cross_informativeness,
            "frame_rate_hz": self.frame_rate_hz,
        }


def latent_signal(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Sum of three random-phase sinusoids scaled so that max |s| = 1."""
    t = np.arange(frames, dtype=np.float64)
    lo, hi = frames / 10.0, frames / 2.0
    periods = rng.uniform(lo, hi, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    weights = rng.uniform(0.5, 1.0, size=3)
    s = (weights[:, None] * np.sin(2.0 * np.pi * t[None, :] / periods[:, None] + phases[:, None])).sum(0)
    peak = np.max(np.abs(s))
    return s / peak if peak > 0 else s


def generate_synthetic(config: SyntheticConfig, seed: int) -> MultimodalDataset:
    """Deterministic synthetic stand-in for a multimodal arousal/valence corpus.

    Audio groups carry arousal (plus a cross_informativeness-scaled share of
    valence); video groups the reverse. Mixing matrices are shared by all
    persons, latent tracks and noise are per person.
    """
    ss = np.random.SeedSequence(int(seed))
    mix_ss, person_ss = ss.spawn(2)
    mix_rng = np.random.default_rng(mix_ss)
    mixing = {}
    for g in config.groups:
        primary = mix_rng.normal(size=g.dim)
        cross = mix_rng.normal(size=g.dim)
        mixing[g.name] = (primary, cross)

    persons = []
    for i, pss in enumerate(person_ss.spawn(config.persons)):
        rng = np.random.default_rng(pss)
        a = latent_signal(rng, config.frames)
        v = latent_signal(rng, config.frames)
        groups = []
        for g in config.groups:
            primary, cross = mixing[g.name]
            own, other = (a, v) if g.modality is Modality.AUDIO else (v, a)
            values = (
                np.outer(own, primary)
                + config.cross_informativeness * np.outer(other, cross)
                + config.noise * rng.normal(size=(config.frames, g.dim))
            )
            groups.append(FeatureGroup(g.name, g.modality, values))
        persons.append(PersonRecord(f"P{i:02d}", tuple(groups), np.column_stack([a, v])))
    return MultimodalDataset(tuple(persons), config.frame_rate_hz, config.groups)


# --------------------------------------------------------------------------
# Splits

@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"train": list(self.train_ids), "val": list(self.val_ids), "test": list(self.test_ids)}


@dataclass(frozen=True)
class SplitPlan:
    repetitions: tuple[Split, ...]
    seed: int


def make_split_plan(
    person_ids: Sequence[str],
    repetitions: int = 10,
    seed: int = 0,
    n_test: int = 3,
    n_val: int = 3,
) -> SplitPlan:
    """Person-disjoint train/val/test splits.

    Test sets rotate through successive random permutations of the persons, so
    every person is tested once before anyone is tested twice. Validation
    persons are drawn at random from the rest.
    """
    ids = list(person_ids)
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if len(set(ids)) != len(ids):
        raise ValueError("person ids must be unique")
    if n_test < 1 or n_val < 1 or len(ids) < n_test + n_val + 1:
        raise ValueError(
            f"{len(ids)} persons is too few for {n_test} test + {n_val} validation + >=1 training"
        )
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    queue: list[str] = []
    reps = []
    for _ in range(repetitions):
        test: list[str] = []
        while len(test) < n_test:
            if not queue:
                queue = [ids[i] for i in rng.permutation(len(ids)) if ids[i] not in test]
            test.append(queue.pop(0))
        rest = [pid for pid in ids if pid not in test]
        order = [rest[i] for i in rng.permutation(len(rest))]
        reps.append(Split(
            train_ids=tuple(order[n_val:]),
            val_ids=tuple(order[:n_val]),
            test_ids=tuple(test),
        ))
    return SplitPlan(tuple(reps), int(seed))


# --------------------------------------------------------------------------
# Standardization and context windows

@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-group, per-dimension z-score statistics over raw training frames."""

    mean: dict[str, np.ndarray]
    scale: dict[str, np.ndarray]

    @classmethod
    def fit(cls, persons: Sequence[PersonRecord]) -> "Standardizer":
        if not persons:
            raise ValueError("cannot fit standardization on an empty person list")
        mean, scale = {}, {}
        for g in persons[0].groups:
            stacked = np.concatenate([p.group(g.name).values for p in persons], axis=0)
            mu = stacked.mean(axis=0)
            sd = stacked.std(axis=0)
            sd[sd == 0] = 1.0
            mean[g.name], scale[g.name] = _frozen(mu), _frozen(sd)
        return cls(mean, scale)

    def transform(self, record: PersonRecord) -> PersonRecord:
        return record.replace_values(
            {g.name: (g.values - self.mean[g.name]) / self.scale[g.name] for g in record.groups}
        )


@dataclass(frozen=True)
class WindowLayout:
    """Column layout of windowed feature vectors: one contiguous block per group."""

    schema: tuple[GroupSpec, ...]
    context_len: int

    def __post_init__(self):
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        object.__setattr__(self, "schema", tuple(self.schema))

    @property
    def dim(self) -> int:
        return sum(g.dim for g in self.schema) * self.context_len

    @property
    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for g in self.schema:
            width = g.dim * self.context_len
            out[g.name] = slice(start, start + width)
            start += width
        return out

    def modality_columns(self, modality: Modality) -> np.ndarray:
        sl = self.slices
        cols = [np.arange(sl[g.name].start, sl[g.name].stop) for g in self.schema if g.modality is modality]
        return np.concatenate(cols) if cols else np.zeros(0, dtype=int)


@dataclass(frozen=True, eq=False)
class FrameSample:
    person_id: str
    frame_index: int
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True, eq=False)
class FrameBatch:
    """Row-stacked frame samples for one or more persons."""

    layout: WindowLayout
    person_ids: np.ndarray  # (n,) object
    frame_index: np.ndarray  # (n,)
    x: np.ndarray  # (n, layout.dim)
    y: np.ndarray  # (n, 2)
    segments: tuple[int, ...] = field(default=())  # per-person row counts

    def __len__(self) -> int:
        return self.x.shape[0]

    def group_slice(self, name: str) -> np.ndarray:
        return self.x[:, self.layout.slices[name]]

    def target(self, name: str) -> np.ndarray:
        return self.y[:, TARGETS.index(name)]

    def samples(self) -> list[FrameSample]:
        return [
            FrameSample(str(self.person_ids[i]), int(self.frame_index[i]), self.x[i], self.y[i])
            for i in range(len(self))
        ]

    @classmethod
    def concat(cls, batches: Sequence["FrameBatch"]) -> "FrameBatch":
        if not batches:
            raise ValueError("no batches to concatenate")
        return cls(
            batches[0].layout,
            np.concatenate([b.person_ids for b in batches]),
            np.concatenate([b.frame_index for b in batches]),
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.y for b in batches]),
            tuple(s for b in batches for s in b.segments),
        )


def window_values(values: np.ndarray, context_len: int) -> np.ndarray:
    """(T, dim) -> (T, context_len * dim); frame t holds frames t-c+1..t, oldest
    first, with frames before 0 replaced by frame 0."""
    T = values.shape[0]
    idx = np.arange(T)[:, None] + np.arange(-context_len + 1, 1)[None, :]
    np.maximum(idx, 0, out=idx)
    return values[idx].reshape(T, -1)


def window_batch(record: PersonRecord, context_len: int) -> FrameBatch:
    layout = WindowLayout(tuple(g.spec for g in record.groups), context_len)
    x = np.concatenate([window_values(g.values, context_len) for g in record.groups], axis=1)
    T = record.n_frames
    return FrameBatch(
        layout,
        np.full(T, record.person_id, dtype=object),
        np.arange(T),
        x,
        np.asarray(record.labels),
        (T,),
    )


def frame_samples(record: PersonRecord, context_len: int) -> list[FrameSample]:
    """One windowed FrameSample per frame of ``record``."""
    return window_batch(record, context_len).samples()


def window_persons(records: Sequence[PersonRecord], context_len: int) -> FrameBatch:
    return FrameBatch.concat([window_batch(r, context_len) for r in records])

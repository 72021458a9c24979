"""End-to-end missing-modality experiments and their reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cross_attention as xattn
from .data_model import (
    TARGETS,
    FrameBatch,
    MultimodalDataset,
    PersonRecord,
    Split,
    Standardizer,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    make_split_plan,
    window_persons,
)
from .dynamic_selection import (
    METHODS,
    CompetenceRegion,
    NeighborIndex,
    combine,
    meta_train,
    parse_threshold,
)
from .imputation import ImputationKind, ImputationMode, apply_imputation, compute_means
from .metrics import ccc
from .regressor_pool import error_table, load_predictions, predict, train_pool

log = logging.getLogger(__name__)

REPORT_FORMAT = "mmdes-report/1"
XATTN = "Cross-Attention"
DEFAULT_SCENARIOS = ("none", "zero:video", "zero:audio", "mean:video", "mean:audio")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Configuration

def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    return data


@dataclass(frozen=True)
class CrossAttentionConfig:
    enabled: bool = True
    clips: int = 8
    clip_len: int = 4
    lr: float = 0.003
    epochs: int = 150
    train_stride: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    source: dict = field(default_factory=lambda: {"synthetic": {}})
    repetitions: int = 10
    k: int = 100
    context_len: int = 8
    ridge_lambda: float = 1.0
    dws_threshold: object = "pool-mean"
    meta_window_len: int = 150
    meta_epochs: int = 500
    meta_lr: float = 0.1
    meta_hard: bool = False
    cross_attention: CrossAttentionConfig = field(default_factory=CrossAttentionConfig)
    scenarios: tuple[str, ...] = DEFAULT_SCENARIOS
    targets: tuple[str, ...] = TARGETS
    seed: int = 42
    n_test: int = 3
    n_val: int = 3
    impute_validation: bool = True

    def __post_init__(self):
        if not self.scenarios:
            raise ConfigError("scenarios: list must be non-empty")
        modes = [ImputationMode.parse(s) for s in self.scenarios]
        object.__setattr__(self, "scenarios", tuple(m.key for m in modes))
        if len(set(self.scenarios)) != len(self.scenarios):
            raise ConfigError("scenarios: duplicate entries")
        object.__setattr__(self, "targets", tuple(self.targets))
        bad = [t for t in self.targets if t not in TARGETS]
        if bad or not self.targets:
            raise ConfigError(f"targets: expected a non-empty subset of {TARGETS}, got {list(self.targets)}")
        if self.repetitions < 1:
            raise ConfigError("repetitions: must be >= 1")
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        if self.context_len < 1:
            raise ConfigError("context_len: must be >= 1")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda: must be >= 0")
        if self.meta_window_len < 2:
            raise ConfigError("meta_window_len: must be >= 2")
        try:
            parse_threshold(self.dws_threshold)
        except (TypeError, ValueError):
            raise ConfigError(f"dws_threshold: bad value {self.dws_threshold!r}") from None
        if not isinstance(self.source, dict) or len(self.source) != 1:
            raise ConfigError("source: expected exactly one of synthetic, manifest, predictions")
        kind = next(iter(self.source))
        if kind not in ("synthetic", "manifest", "predictions"):
            raise ConfigError(f"source: unknown key {kind!r}")

    @property
    def methods(self) -> tuple[str, ...]:
        return METHODS + ((XATTN,) if self.cross_attention.enabled else ())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(_strict(cls, data, "config"))
        if "cross_attention" in data:
            xa = _strict(CrossAttentionConfig, data["cross_attention"], "cross_attention")
            data["cross_attention"] = CrossAttentionConfig(**xa)
        for key in ("scenarios", "targets"):
            if key in data:
                if not isinstance(data[key], list):
                    raise ConfigError(f"{key}: expected a list")
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenarios"] = list(self.scenarios)
        d["targets"] = list(self.targets)
        return d


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON experiment config; relative source paths resolve against its directory.

    The ``MMDES_SEED`` environment variable, when set, replaces the seed.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    src = data.get("source")
    if isinstance(src, dict):
        for key in ("manifest", "predictions"):
            if isinstance(src.get(key), str) and not os.path.isabs(src[key]):
                data["source"] = {key: str((path.parent / src[key]).resolve())}
    env = os.environ.get("MMDES_SEED")
    if env is not None:
        try:
            data["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"MMDES_SEED: not an integer: {env!r}") from None
    if seed_override is not None:
        data["seed"] = seed_override
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# Data sources

class _ExternalPredictions:
    """Pool predictions read from per-person CSV files.

    Index JSON: {"manifest": path, "tracks": {person_id: {target: {scenario: csv}}}}.
    """

    def __init__(self, index_path):
        index_path = Path(index_path)
        doc = json.loads(index_path.read_text())
        base = index_path.parent
        self.manifest = base / doc["manifest"]
        self.tracks = doc["tracks"]
        self.base = base

    def load(self, person: PersonRecord, target: str, scenario: str):
        try:
            rel = self.tracks[person.person_id][target][scenario]
        except KeyError:
            raise ExperimentError(
                f"no external predictions for person {person.person_id!r}, target {target}, scenario {scenario}"
            ) from None
        return load_predictions(self.base / rel, expected_rows=person.n_frames)


def load_source(config: ExperimentConfig):
    """Return ``(dataset, external_predictions_or_None)``."""
    kind, spec = next(iter(config.source.items()))
    if kind == "synthetic":
        spec = dict(spec or {})
        seed = spec.pop("seed", config.seed)
        try:
            syn = SyntheticConfig(**spec)
        except TypeError as exc:
            raise ConfigError(f"source.synthetic: {exc}") from None
        return generate_synthetic(syn, seed), None
    if kind == "manifest":
        return load_dataset(spec), None
    ext = _ExternalPredictions(spec)
    return load_dataset(ext.manifest), ext


# --------------------------------------------------------------------------
# Report

@dataclass
class EvaluationReport:
    config: dict
    targets: list
    scenarios: list
    methods: list
    values: dict  # (target, scenario, method) -> per-repetition CCCs
    pool: dict = field(default_factory=dict)  # (target, regressor) -> per-repetition validation CCCs
    pool_modalities: dict = field(default_factory=dict)
    splits: list = field(default_factory=list)
    format: str = REPORT_FORMAT

    def mean(self, target, scenario, method) -> float:
        return float(np.mean(self.values[(target, scenario, method)]))

    def std(self, target, scenario, method) -> float:
        return float(np.std(self.values[(target, scenario, method)]))

    @property
    def repetitions(self) -> int:
        return len(next(iter(self.values.values()))) if self.values else 0

    def to_dict(self) -> dict:
        cells = []
        for t in self.targets:
            for s in self.scenarios:
                for m in self.methods:
                    vals = [float(v) for v in self.values[(t, s, m)]]
                    cells.append({"target": t, "scenario": s, "method": m,
                                  "mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals})
        pool = []
        for (t, name), vals in self.pool.items():
            vals = [float(v) for v in vals]
            pool.append({"target": t, "regressor": name, "modality": self.pool_modalities.get(name),
                         "mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals})
        return {
            "format": self.format,
            "config": self.config,
            "targets": list(self.targets),
            "scenarios": list(self.scenarios),
            "methods": list(self.methods),
            "splits": self.splits,
            "cells": cells,
            "pool": pool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported report format {d.get('format')!r}")
        values = {(c["target"], c["scenario"], c["method"]): list(c["values"]) for c in d["cells"]}
        pool = {(p["target"], p["regressor"]): list(p["values"]) for p in d.get("pool", [])}
        mods = {p["regressor"]: p["modality"] for p in d.get("pool", [])}
        return cls(d["config"], list(d["targets"]), list(d["scenarios"]), list(d["methods"]),
                   values, pool, mods, list(d.get("splits", [])), d["format"])

    def __eq__(self, other) -> bool:
        return isinstance(other, EvaluationReport) and self.to_dict() == other.to_dict()

    def validate(self) -> None:
        for t in self.targets:
            for s in self.scenarios:
                for m in self.methods:
                    vals = self.values.get((t, s, m))
                    if vals is None:
                        raise ValueError(f"missing report cell {(t, s, m)}")
                    if any(not -1.0 - 1e-12 <= v <= 1.0 + 1e-12 for v in vals):
                        raise ValueError(f"CCC outside [-1, 1] in cell {(t, s, m)}")


def scenario_label(key: str) -> str:
    mode = ImputationMode.parse(key)
    if mode.kind is ImputationKind.NONE:
        return "Audio and video available"
    return f"{mode.target_modality.value.capitalize()} disabled ({mode.kind.value})"


def _md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def render_report(report: EvaluationReport, fmt: str = "markdown") -> str:
    """Render as ``json`` (canonical), ``csv`` (one row per repetition) or ``markdown``."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "scenario", "method", "repetition", "ccc"])
        for t in report.targets:
            for s in report.scenarios:
                for m in report.methods:
                    for r, v in enumerate(report.values[(t, s, m)]):
                        w.writerow([t, s, m, r, repr(float(v))])
        return buf.getvalue()
    if fmt in ("markdown", "md"):
        out = []
        for t in report.targets:
            out.append(f"### {t.capitalize()} (CCC, mean±std over {report.repetitions} repetitions)")
            out.append("")
            rows = [[scenario_label(s)] + [f"{report.mean(t, s, m):.2f}±{report.std(t, s, m):.2f}"
                                           for m in report.methods] for s in report.scenarios]
            out += _md_table(["Modalities"] + list(report.methods), rows)
            out.append("")
        if report.pool:
            out.append("### Regressor pool (validation CCC)")
            out.append("")
            names = list(dict.fromkeys(name for _, name in report.pool))
            rows = []
            for name in names:
                cells = []
                for t in report.targets:
                    vals = report.pool.get((t, name))
                    cells.append("" if vals is None else f"{np.mean(vals):.2f}±{np.std(vals):.2f}")
                rows.append([name, str(report.pool_modalities.get(name, ""))] + cells)
            out += _md_table(["Features", "Modality"] + [t.capitalize() for t in report.targets], rows)
            out.append("")
        return "\n".join(out)
    raise ValueError(f"unknown report format {fmt!r}")


def percent_change(full: float, value: float) -> Optional[float]:
    """100 * (value - full) / |full|; None when |full| < 1e-6."""
    if abs(full) < 1e-6:
        return None
    return 100.0 * (value - full) / abs(full)


def sensitivity_summary(report: EvaluationReport, baseline: str = "none") -> dict:
    """Percent change of mean CCC versus the all-modalities scenario.

    Keys are (target, scenario, method) for every non-baseline scenario;
    undefined cells map to None.
    """
    if baseline not in report.scenarios:
        raise ValueError(f"report lacks the baseline scenario {baseline!r}")
    out = {}
    for t in report.targets:
        for s in report.scenarios:
            if s == baseline:
                continue
            for m in report.methods:
                out[(t, s, m)] = percent_change(report.mean(t, baseline, m), report.mean(t, s, m))
    return out


def render_sensitivity(report: EvaluationReport, baseline: str = "none") -> str:
    summary = sensitivity_summary(report, baseline)
    out = []
    for t in report.targets:
        out.append(f"### {t.capitalize()}: % CCC change vs. all modalities available")
        out.append("")
        rows = []
        for s in report.scenarios:
            if s == baseline:
                continue
            cells = []
            for m in report.methods:
                v = summary[(t, s, m)]
                cells.append("undefined" if v is None else f"{v:+.2f}%")
            rows.append([scenario_label(s)] + cells)
        out += _md_table(["Modalities"] + list(report.methods), rows)
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------
# Experiment

@dataclass
class _RepResult:
    values: dict
    pool: dict
    pool_modalities: dict
    weights: list


def _check_disjoint(split: Split) -> None:
    tr, va, te = set(split.train_ids), set(split.val_ids), set(split.test_ids)
    if tr & va or tr & te or va & te:
        raise ExperimentError(f"split is not person-disjoint: {split}")


def _xattn_train_set(records: Sequence[PersonRecord], target: str, cfg: CrossAttentionConfig):
    batches = [xattn.subsequences(r, target, cfg.clips, cfg.clip_len, cfg.train_stride)[0] for r in records]
    return xattn.SubsequenceBatch(
        np.concatenate([b.X_a for b in batches]),
        np.concatenate([b.X_v for b in batches]),
        np.concatenate([b.target for b in batches]),
    )


def run_repetition(config: ExperimentConfig, dataset: MultimodalDataset, split: Split, rep: int,
                   external=None, dump_weights: bool = False) -> _RepResult:
    _check_disjoint(split)
    meta_seed, xattn_seed = (int(s) for s in np.random.SeedSequence([config.seed, rep]).generate_state(2))
    threshold = parse_threshold(config.dws_threshold)
    c = config.context_len

    train = dataset.subset(split.train_ids)
    val = dataset.subset(split.val_ids)
    test = dataset.subset(split.test_ids)
    std = Standardizer.fit(train)
    means = compute_means(train)
    val_std = [std.transform(p) for p in val]
    val_b = window_persons(val_std, c)

    def pool_outputs(records_raw, batch: FrameBatch, target, scenario, pool):
        if external is not None:
            preds = [external.load(p, target, scenario) for p in records_raw]
            first = preds[0]
            return (np.concatenate([p.values for p in preds]), first.names, first.modalities)
        out = predict(pool, batch, target)
        return out.values, out.names, out.modalities

    pools, tables, metas, xmodels = {}, {}, {}, {}
    values, pool_ccc, pool_mods, weights = {}, {}, {}, []
    train_b = window_persons([std.transform(p) for p in train], c) if external is None else None
    for target in config.targets:
        pools[target] = train_pool(train_b, target, config.ridge_lambda) if external is None else None
        P_val, names, mods = pool_outputs(val, val_b, target, "none", pools[target])
        y_val = val_b.target(target)
        tables[target] = error_table(P_val, y_val, val_b.x)
        for i, name in enumerate(names):
            pool_ccc[(target, name)] = ccc(y_val, P_val[:, i])
            pool_mods[name] = mods[i].value
        metas[target] = meta_train(P_val, y_val, config.meta_window_len, seed=meta_seed,
                                   lr=config.meta_lr, epochs=config.meta_epochs, segments=val_b.segments)
        if config.cross_attention.enabled:
            xa = config.cross_attention
            data = _xattn_train_set([std.transform(p) for p in train], target, xa)
            xmodels[target] = xattn.train(data, xattn.TrainConfig(xa.lr, xa.epochs, xattn_seed)).params

    base_index = NeighborIndex(val_b.x)
    for scenario in config.scenarios:
        mode = ImputationMode.parse(scenario)
        test_std = [std.transform(apply_imputation(p, mode, means)) for p in test]
        test_b = window_persons(test_std, c)
        index, scen_tables = base_index, tables
        if config.impute_validation and mode.kind is not ImputationKind.NONE:
            val_imp = window_persons([std.transform(apply_imputation(p, mode, means)) for p in val], c)
            index = NeighborIndex(val_imp.x)
            scen_tables = {}
            for target in config.targets:
                P_vi, _, _ = pool_outputs(val, val_imp, target, scenario, pools[target])
                scen_tables[target] = error_table(P_vi, val_imp.target(target), val_imp.x)
        nn_idx, nn_dist = index.query(test_b.x, config.k)
        for target in config.targets:
            P, _, _ = pool_outputs(test, test_b, target, scenario, pools[target])
            y = test_b.target(target)
            region = CompetenceRegion(nn_idx, nn_dist, scen_tables[target].errors[nn_idx])
            for method in METHODS:
                try:
                    yhat, alpha = combine(method, P, region, metas[target], threshold, config.meta_hard)
                except Exception as exc:
                    raise ExperimentError(f"scenario {scenario}, target {target}, method {method}: {exc}") from exc
                values[(target, scenario, method)] = ccc(y, yhat)
                if dump_weights:
                    weights.append((rep, scenario, target, method, test_b.person_ids, test_b.frame_index, alpha))
            if config.cross_attention.enabled:
                xa = config.cross_attention
                preds, gold = zip(*(xattn.evaluate_sequence(xmodels[target], r, xa.clips, xa.clip_len, target)
                                    for r in test_std))
                values[(target, scenario, XATTN)] = ccc(np.concatenate(gold), np.concatenate(preds))
    return _RepResult(values, pool_ccc, pool_mods, weights)


def _run_rep_job(args):
    config, dataset, split, rep, external, dump = args
    try:
        return run_repetition(config, dataset, split, rep, external, dump)
    except Exception as exc:
        raise ExperimentError(f"repetition {rep}: {type(exc).__name__}: {exc}") from exc


def run_experiment(config: ExperimentConfig, jobs: int = 1, weights_path=None,
                   dataset: Optional[MultimodalDataset] = None) -> EvaluationReport:
    """Run every repetition and aggregate per-(target, scenario, method) CCCs."""
    external = None
    if dataset is None:
        dataset, external = load_source(config)
    plan = make_split_plan(dataset.person_ids, config.repetitions, config.seed, config.n_test, config.n_val)
    dump = weights_path is not None
    args = [(config, dataset, split, r, external, dump) for r, split in enumerate(plan.repetitions)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_rep_job, args))
    else:
        results = [_run_rep_job(a) for a in args]

    methods = list(config.methods)
    values = {(t, s, m): [res.values[(t, s, m)] for res in results]
              for t in config.targets for s in config.scenarios for m in methods}
    pool = {}
    for key in results[0].pool:
        pool[key] = [res.pool[key] for res in results]
    report = EvaluationReport(
        config=config.to_dict(),
        targets=list(config.targets),
        scenarios=list(config.scenarios),
        methods=methods,
        values=values,
        pool=pool,
        pool_modalities=dict(results[0].pool_modalities),
        splits=[s.to_dict() for s in plan.repetitions],
    )
    report.validate()
    if dump:
        write_weights(weights_path, [w for res in results for w in res.weights])
    return report


def write_weights(path, entries) -> None:
    """CSV of per-frame combination weights: one row per (repetition, scenario, target, method, frame)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = entries[0][-1].shape[1] if entries else 0
        w.writerow(["repetition", "scenario", "target", "method", "person_id", "frame"]
                   + [f"alpha_{i}" for i in range(n)])
        for rep, scenario, target, method, pids, frames, alpha in entries:
            for pid, f, row in zip(pids, frames, alpha):
                w.writerow([rep, scenario, target, method, pid, int(f)] + [f"{a:.6g}" for a in row])

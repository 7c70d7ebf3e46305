"""Recording ingestion, sliding-window train-test evaluation and scenario reports.

Signal CSV: header ``time,<channel>,...``, one row per sample, seconds in
the first column. Marker CSV: header ``onset_s,duration_s,label``. Lines
starting with ``#`` are comments (used for provenance headers).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .decomposer import DecomposerConfig, Decomposition, decompose
from .features import (
    FeatureMatrix,
    HdmFeatureSpec,
    LabelEvent,
    WindowSpec,
    window_hdm,
    window_raw,
    window_tfd,
)
from .ml import LABELS, ConfusionMatrix, ModelSpec, confusion, metrics, standard_models, train
from .signal_model import SampledSignal

logger = logging.getLogger(__name__)

MONTAGE = ("AF7", "AF8", "AFF5h", "AFF6h", "AFp3", "AFp4", "AFpz")
SCENARIO_A = ("AF7", "AF8", "AFF5h", "AFF6h", "AFp3", "AFp4")
SCENARIO_B = ("AFpz",)
SCHEMES = ("raw", "tfd", "hdm")
TIME_TOL = 1e-6


class ParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class InsufficientDataError(ValueError):
    pass


class LeakageError(AssertionError):
    pass


@dataclass
class Recording:
    channels: dict[str, SampledSignal]
    markers: list[LabelEvent]
    subject: str = "01"

    def __post_init__(self):
        if not self.channels:
            raise ValueError("recording has no channels")
        first = next(iter(self.channels.values()))
        for name, sig in self.channels.items():
            if len(sig) != len(first) or not math.isclose(sig.T_h, first.T_h, rel_tol=1e-9):
                raise ValueError(f"channel {name!r} is not aligned with the others")

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.channels.values())))

    def select(self, names: Sequence[str]) -> dict[str, SampledSignal]:
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise KeyError(f"recording {self.subject} lacks channel(s): {', '.join(missing)}")
        return {n: self.channels[n] for n in names}


def check_markers(markers: Sequence[LabelEvent], path="markers") -> None:
    ordered = sorted(markers, key=lambda e: e.onset)
    for a, b in zip(ordered, ordered[1:]):
        if b.onset < a.onset + a.duration - 1e-9:
            raise ParseError(path, None, f"events at {a.onset} s and {b.onset} s overlap")


def _data_lines(path):
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip() and not line.startswith("#"):
                yield lineno, line


def load_signals(path) -> dict[str, SampledSignal]:
    lines = list(_data_lines(path))
    if not lines:
        raise ParseError(path, None, "empty signal file")
    rows = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(rows)]
    if not header or header[0] != "time" or len(header) < 2:
        raise ParseError(path, lines[0][0], "header must be 'time,<channel>,...'")
    if len(set(header)) != len(header):
        raise ParseError(path, lines[0][0], "duplicate column names")
    data = []
    for (lineno, _), rec in zip(lines[1:], rows):
        if len(rec) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} fields, found {len(rec)}")
        try:
            vals = [float(v) for v in rec]
        except ValueError as err:
            raise ParseError(path, lineno, str(err)) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(path, lineno, "non-finite value")
        data.append(vals)
    if len(data) < 2:
        raise ParseError(path, None, "need at least two samples to infer the sampling period")
    arr = np.array(data)
    t = arr[:, 0]
    T_h = (t[-1] - t[0]) / (t.size - 1)
    if not T_h > 0:
        raise ParseError(path, None, "time column must increase")
    dev = np.abs(t - (t[0] + np.arange(t.size) * T_h))
    bad = np.flatnonzero(dev > TIME_TOL)
    if bad.size:
        raise ParseError(path, lines[1 + bad[0]][0], f"non-uniform sampling (deviation {dev[bad[0]]:.3g} s)")
    T_h = float(round(T_h, 12))
    return {name: SampledSignal(T_h, float(t[0]), arr[:, k + 1]) for k, name in enumerate(header[1:])}


def load_markers(path) -> list[LabelEvent]:
    lines = list(_data_lines(path))
    if not lines:
        raise ParseError(path, None, "empty marker file")
    rows = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(rows)]
    if header != ["onset_s", "duration_s", "label"]:
        raise ParseError(path, lines[0][0], "header must be 'onset_s,duration_s,label'")
    events = []
    for (lineno, _), rec in zip(lines[1:], rows):
        if len(rec) != 3:
            raise ParseError(path, lineno, f"expected 3 fields, found {len(rec)}")
        label = rec[2].strip()
        if label not in LABELS:
            raise ParseError(path, lineno, f"unknown label {label!r}")
        try:
            events.append(LabelEvent(float(rec[0]), float(rec[1]), label))
        except ValueError as err:
            raise ParseError(path, lineno, str(err)) from None
    check_markers(events, path)
    return events


def load_recording(signal_path, marker_path, subject: str | None = None) -> Recording:
    subject = subject or Path(signal_path).stem
    return Recording(load_signals(signal_path), load_markers(marker_path), subject)


def _comment(text: str | None) -> str:
    return "".join(f"# {ln}\n" for ln in text.splitlines()) if text else ""


def save_recording(rec: Recording, signal_path, marker_path, comment: str | None = None) -> None:
    names = list(rec.channels)
    first = rec.channels[names[0]]
    with open(signal_path, "w", newline="") as fh:
        fh.write(_comment(comment))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *names])
        cols = [rec.channels[n].samples for n in names]
        for k, t in enumerate(first.times):
            w.writerow([repr(float(t)), *(repr(float(c[k])) for c in cols)])
    with open(marker_path, "w", newline="") as fh:
        fh.write(_comment(comment))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["onset_s", "duration_s", "label"])
        for ev in rec.markers:
            w.writerow([repr(float(ev.onset)), repr(float(ev.duration)), ev.label])


@dataclass
class ScenarioConfig:
    channels: tuple[str, ...] = SCENARIO_B
    scheme: str = "hdm"
    model: ModelSpec = field(default_factory=lambda: ModelSpec("rf", n_trees=50, name="RF-50"))
    window: WindowSpec = field(default_factory=WindowSpec)
    seed: int = 0
    min_train_rows: int = 30
    trailing: int | None = None  # train on the last n eligible rows instead of all
    refit_every: int = 1
    fold_rows: int = 30
    decomposer: DecomposerConfig = field(default_factory=DecomposerConfig)
    hdm: HdmFeatureSpec = field(default_factory=HdmFeatureSpec)
    threads: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.min_train_rows < 1 or self.refit_every < 1 or self.fold_rows < 1:
            raise ValueError("min_train_rows, refit_every and fold_rows must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def decompose_channels(signals: Mapping[str, SampledSignal], config: DecomposerConfig, threads: int = 1) -> dict[str, Decomposition]:
    names = list(signals)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            decs = list(pool.map(lambda n: decompose(signals[n], config), names))
    else:
        decs = [decompose(signals[n], config) for n in names]
    return dict(zip(names, decs))


def build_features(recording: Recording, config: ScenarioConfig,
                   decompositions: Mapping[str, Decomposition] | None = None) -> FeatureMatrix:
    signals = recording.select(config.channels)
    if config.scheme == "raw":
        return window_raw(signals, config.window, recording.markers)
    if config.scheme == "tfd":
        return window_tfd(signals, config.window, markers=recording.markers)
    if decompositions is None:
        decompositions = decompose_channels(signals, config.decomposer, config.threads)
    return window_hdm(decompositions, signals, config.window, config.hdm, recording.markers)


@dataclass
class SwttResult:
    confusion: ConfusionMatrix
    fold_accuracy: list[float]
    test_rows: list[int]
    predictions: list[str]
    actual: list[str]
    # [first, last) training rows of the model that predicted each test row
    train_spans: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_test(self) -> int:
        return len(self.test_rows)


def minimum_length(config: ScenarioConfig) -> float:
    """Shortest record (seconds) that yields at least two test rows."""
    w = config.window
    gap_rows = math.ceil((w.history_samples + w.horizon_samples) / w.step_samples)
    return w.history + w.horizon + (config.min_train_rows + gap_rows + 1) * w.step


def swtt_evaluate(recording: Recording, config: ScenarioConfig, features: FeatureMatrix | None = None) -> SwttResult:
    """Walk-forward evaluation over the window sequence.

    Every test row is predicted by a model trained only on rows whose
    horizon ends no later than the test row's history begins.
    """
    fm = features if features is not None else build_features(recording, config)
    X = fm.rows
    labels = np.array(fm.labels, dtype=object)
    h_start_of = fm.starts
    h_end_of = fm.horizon_end
    model, fitted_at, span = None, None, (0, 0)
    tests, preds, spans = [], [], []
    for j in range(len(fm)):
        n_eligible = int(np.searchsorted(h_end_of, h_start_of[j], side="right"))
        # horizon ends increase with the row index, so eligible rows are a prefix
        lo = 0 if config.trailing is None else max(0, n_eligible - config.trailing)
        if n_eligible - lo < config.min_train_rows:
            continue
        if model is None or len(tests) - fitted_at >= config.refit_every:
            train_idx = np.arange(lo, n_eligible)
            if len(set(labels[train_idx])) < 2:
                continue
            if np.any(h_end_of[train_idx] > h_start_of[j]):
                raise LeakageError(f"training row overlaps test row {j}")
            model = train(config.model, X[train_idx], list(labels[train_idx]), n_jobs=config.threads)
            fitted_at, span = len(tests), (lo, n_eligible)
        if h_end_of[span[1] - 1] > h_start_of[j]:
            raise LeakageError(f"model trained on rows overlapping test row {j}")
        tests.append(j)
        spans.append(span)
        preds.append(model.predict(X[j:j + 1])[0])
    if len(tests) < 2:
        raise InsufficientDataError(
            f"record too short for sliding-window evaluation: need at least {minimum_length(config):.1f} s "
            f"with {config.min_train_rows} warm-up rows")
    actual = [fm.labels[j] for j in tests]
    hits = np.array([a == p for a, p in zip(actual, preds)], dtype=float)
    folds = [float(hits[k:k + config.fold_rows].mean()) for k in range(0, hits.size, config.fold_rows)]
    return SwttResult(confusion(actual, preds), folds, tests, preds, actual, spans)


@dataclass
class EvalConfig:
    """Scenario sweep: every scheme crossed with every model, per recording."""

    channels: tuple[str, ...] = SCENARIO_B
    schemes: tuple[str, ...] = SCHEMES
    models: list[ModelSpec] = field(default_factory=standard_models)
    window: WindowSpec = field(default_factory=WindowSpec)
    seed: int = 0
    min_train_rows: int = 30
    trailing: int | None = None
    refit_every: int = 1
    fold_rows: int = 30
    decomposer: DecomposerConfig = field(default_factory=DecomposerConfig)
    hdm: HdmFeatureSpec = field(default_factory=HdmFeatureSpec)
    threads: int = 1

    def scenario(self, scheme: str, model: ModelSpec) -> ScenarioConfig:
        return ScenarioConfig(
            channels=tuple(self.channels), scheme=scheme, model=model, window=self.window, seed=self.seed,
            min_train_rows=self.min_train_rows, trailing=self.trailing, refit_every=self.refit_every,
            fold_rows=self.fold_rows, decomposer=self.decomposer, hdm=self.hdm, threads=self.threads)

    def to_dict(self) -> dict:
        return asdict(self)


def _block(res: SwttResult) -> dict:
    m = metrics(res.confusion)
    return {
        "metrics": m.to_dict(),
        "confusion": res.confusion.counts.tolist(),
        "fold_accuracy": res.fold_accuracy,
        "n_test": res.n_test,
    }


def run_scenario(recordings: Sequence[Recording], config: EvalConfig) -> dict:
    """Per-subject results for every (scheme, model) pair plus summed confusions."""
    subjects = []
    totals: dict[tuple[str, str], ConfusionMatrix] = {}
    for rec in recordings:
        signals = rec.select(config.channels)
        entry = {"subject": rec.subject, "schemes": {}}
        decs = None
        for scheme in config.schemes:
            if scheme == "hdm" and decs is None:
                decs = decompose_channels(signals, config.decomposer, config.threads)
            fm = build_features(rec, config.scenario(scheme, config.models[0]), decs)
            results = {}
            for spec in config.models:
                res = swtt_evaluate(rec, config.scenario(scheme, spec), fm)
                results[spec.label] = _block(res)
                key = (scheme, spec.label)
                totals[key] = totals.get(key, ConfusionMatrix()) + res.confusion
            entry["schemes"][scheme] = results
        if decs is not None:
            entry["decompositions"] = {ch: {"n_atoms": len(d.atoms), "converged": d.converged,
                                            "theta_eps_hat": d.theta_eps_hat} for ch, d in decs.items()}
        subjects.append(entry)
    aggregate = {}
    for (scheme, label), cm in totals.items():
        aggregate.setdefault(scheme, {})[label] = {"metrics": metrics(cm).to_dict(), "confusion": cm.counts.tolist()}
    return {
        "format": "hdm-scenario-report",
        "version": __version__,
        "config": config.to_dict(),
        "labels": list(LABELS),
        "subjects": subjects,
        "aggregate": aggregate,
    }


def performance_table(report: dict, scope: str = "aggregate") -> str:
    """Text table shaped like the comparison table: model x activity rows, recall/precision per scheme."""
    block = report["aggregate"] if scope == "aggregate" else next(
        s["schemes"] for s in report["subjects"] if s["subject"] == scope)
    schemes = [s for s in SCHEMES if s in block]
    models = list(next(iter(block.values())).keys())
    head = f"{'Classifier':<15}{'Activity':<9}" + "".join(f"{s.upper() + ' SENS':>11}{'PREC':>7}" for s in schemes)
    lines = [head, "-" * len(head)]
    for m in models:
        for i, lab in enumerate(LABELS):
            cells = ""
            for s in schemes:
                met = block[s][m]["metrics"]
                cells += f"{met['recall'][lab]:>11.3f}{met['precision'][lab]:>7.3f}"
            lines.append(f"{(m if i == 0 else ''):<15}{lab:<9}{cells}")
        acc = "".join(f"{block[s][m]['metrics']['accuracy']:>11.3f}{'':>7}" for s in schemes)
        lines.append(f"{'':<15}{'ACC':<9}{acc}")
        lines.append("-" * len(head))
    return "\n".join(lines) + "\n"


def confusion_table(report: dict, scope: str = "aggregate") -> str:
    block = report["aggregate"] if scope == "aggregate" else next(
        s["schemes"] for s in report["subjects"] if s["subject"] == scope)
    lines = ["classifier,scheme,actual," + ",".join(LABELS)]
    for scheme, models in block.items():
        for m, res in models.items():
            for lab, row in zip(LABELS, res["confusion"]):
                lines.append(f"{m},{scheme},{lab}," + ",".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def fold_table(report: dict) -> str:
    lines = ["subject,scheme,classifier,fold,accuracy"]
    for s in report["subjects"]:
        for scheme, models in s["schemes"].items():
            for m, res in models.items():
                for k, acc in enumerate(res["fold_accuracy"]):
                    lines.append(f"{s['subject']},{scheme},{m},{k},{acc!r}")
    return "\n".join(lines) + "\n"


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2)

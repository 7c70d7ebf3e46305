"""Sliding-window feature rows under the raw, filter-bank and decomposition schemes.

Window ``j`` has a history of ``history`` seconds starting at sample
``j * step * fs`` followed by a prediction horizon of ``horizon`` seconds.
Rows are labelled by the task covering most of the horizon.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decomposer import Decomposition
from .filterbank import FirFilter, causal_band_powers, default_bank
from .kernel import sample_atom_on
from .ml import LABELS
from .signal_model import SampledSignal

HDM_SUMMARY = ("n_atoms", "sum_pos_a", "sum_neg_a", "max_abs_a", "mean_omega", "theta_eps", "residual_rms")


@dataclass(frozen=True)
class WindowSpec:
    history: float = 60.0
    horizon: float = 2.0
    step: float = 2.0
    fs: float = 10.0

    def __post_init__(self):
        if not (self.history > 0 and self.horizon > 0 and self.step > 0 and self.fs > 0):
            raise ValueError("history, horizon, step and fs must be positive")

    @property
    def history_samples(self) -> int:
        return int(round(self.history * self.fs))

    @property
    def horizon_samples(self) -> int:
        return int(round(self.horizon * self.fs))

    @property
    def step_samples(self) -> int:
        return max(1, int(round(self.step * self.fs)))


@dataclass(frozen=True)
class HdmFeatureSpec:
    K_max: int = 8
    # keep only atoms whose fit window closed before the horizon
    causal: bool = False

    @property
    def width(self) -> int:
        return 3 * self.K_max + len(HDM_SUMMARY)


@dataclass(frozen=True)
class LabelEvent:
    onset: float
    duration: float
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.duration < 0:
            raise ValueError("event duration must be non-negative")


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: list[str]
    columns: list[str]
    starts: np.ndarray  # history start, in samples from record start
    spec: WindowSpec = field(default_factory=WindowSpec)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float).reshape(len(self.labels), len(self.columns))
        self.starts = np.asarray(self.starts, dtype=np.int64)
        bad = set(self.labels) - set(LABELS)
        if bad:
            raise ValueError(f"unknown labels {sorted(bad)}")

    def __len__(self):
        return len(self.labels)

    @property
    def horizon_start(self) -> np.ndarray:
        return self.starts + self.spec.history_samples

    @property
    def horizon_end(self) -> np.ndarray:
        return self.horizon_start + self.spec.horizon_samples

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            for line in comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["start_sample", "label", *self.columns])
        for s, lab, row in zip(self.starts, self.labels, self.rows):
            w.writerow([int(s), lab, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, spec: WindowSpec | None = None) -> "FeatureMatrix":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        starts, labels, rows = [], [], []
        for rec in reader:
            starts.append(int(rec[0]))
            labels.append(rec[1])
            rows.append([float(v) for v in rec[2:]])
        return cls(np.array(rows).reshape(len(labels), len(header) - 2), labels, header[2:], np.array(starts),
                   spec or WindowSpec())


def _check_channels(signals: Mapping[str, SampledSignal], spec: WindowSpec) -> tuple[int, float]:
    if not signals:
        raise ValueError("no channels given")
    sigs = list(signals.values())
    n = len(sigs[0])
    for name, s in signals.items():
        if len(s) != n or not math.isclose(s.T_h, sigs[0].T_h, rel_tol=1e-9):
            raise ValueError(f"channel {name!r} is not aligned with the others")
    if not math.isclose(sigs[0].fs, spec.fs, rel_tol=1e-6):
        raise ValueError(f"signals sampled at {sigs[0].fs} Hz, window spec expects {spec.fs} Hz")
    return n, sigs[0].t0


def window_starts(n_samples: int, spec: WindowSpec) -> np.ndarray:
    last = n_samples - spec.history_samples - spec.horizon_samples
    if last < 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, last + 1, spec.step_samples, dtype=np.int64)


def align_labels(markers: Sequence[LabelEvent], spec: WindowSpec, n_samples: int, t0: float = 0.0) -> list[str]:
    """Label each window by the task covering most of its horizon; uncovered time is rest."""
    out = []
    T_h = 1.0 / spec.fs
    for s in window_starts(n_samples, spec):
        h0 = t0 + (s + spec.history_samples) * T_h
        h1 = h0 + spec.horizon_samples * T_h
        cover = dict.fromkeys(LABELS, 0.0)
        for ev in markers:
            ov = min(h1, ev.onset + ev.duration) - max(h0, ev.onset)
            if ov > 0:
                cover[ev.label] += ov
        cover["rest"] += max(0.0, (h1 - h0) - sum(cover[k] for k in LABELS if k != "rest"))
        # ties go to the earliest label in LABELS order
        out.append(max(LABELS, key=lambda k: (cover[k] - 1e-9 * LABELS.index(k))))
    return out


def _labels(markers, spec, n, t0):
    return align_labels(markers or [], spec, n, t0)


def window_raw(signals: Mapping[str, SampledSignal], spec: WindowSpec, markers: Sequence[LabelEvent] | None = None) -> FeatureMatrix:
    n, t0 = _check_channels(signals, spec)
    starts = window_starts(n, spec)
    H = spec.history_samples
    rows = np.zeros((starts.size, H * len(signals)))
    for j, s in enumerate(starts):
        rows[j] = np.concatenate([sig.samples[s:s + H] for sig in signals.values()])
    cols = [f"{ch}:x{k}" for ch in signals for k in range(H)]
    return FeatureMatrix(rows, _labels(markers, spec, n, t0), cols, starts, spec)


def window_tfd(
    signals: Mapping[str, SampledSignal],
    spec: WindowSpec,
    bank: Sequence[FirFilter] | None = None,
    markers: Sequence[LabelEvent] | None = None,
) -> FeatureMatrix:
    """Log band powers per channel, computed from history samples only."""
    n, t0 = _check_channels(signals, spec)
    bank = bank if bank is not None else default_bank(spec.fs)
    starts = window_starts(n, spec)
    H = spec.history_samples
    rows = np.zeros((starts.size, len(bank) * len(signals)))
    for j, s in enumerate(starts):
        rows[j] = np.concatenate([causal_band_powers(sig.samples[s:s + H], bank) for sig in signals.values()])
    cols = [f"{ch}:band_{f.band[0]:g}-{f.band[1]:g}Hz" for ch in signals for f in bank]
    return FeatureMatrix(rows, _labels(markers, spec, n, t0), cols, starts, spec)


def _select_atoms(dec: Decomposition, h_start: float, h_end: float, causal: bool):
    picked = []
    for k, atom in enumerate(dec.atoms):
        if not h_start <= atom.peak_time(dec.base) < h_end:
            continue
        if causal and dec.fit_windows and dec.fit_windows[k][1] >= h_end:
            continue
        picked.append(atom)
    return picked


def hdm_window_row(dec: Decomposition, signal: SampledSignal, start: int, spec: WindowSpec,
                   hspec: HdmFeatureSpec) -> np.ndarray:
    H = spec.history_samples
    times = signal.times[start:start + H]
    h_start = float(signal.t0 + start * signal.T_h)
    h_end = h_start + H * signal.T_h
    atoms = _select_atoms(dec, h_start, h_end, hspec.causal)
    atoms.sort(key=lambda a: -abs(a.a))
    row = np.zeros(hspec.width)
    for k, atom in enumerate(atoms[: hspec.K_max]):
        row[3 * k: 3 * k + 3] = (atom.a, atom.omega, atom.tau - h_start)
    model = np.full(times.size, dec.baseline)
    for atom in atoms:
        model += sample_atom_on(times, atom, dec.base)
    resid = signal.samples[start:start + H] - model
    amps = np.array([a.a for a in atoms])
    row[3 * hspec.K_max:] = (
        len(atoms),
        amps[amps > 0].sum() if amps.size else 0.0,
        amps[amps < 0].sum() if amps.size else 0.0,
        np.abs(amps).max() if amps.size else 0.0,
        np.mean([a.omega for a in atoms]) if atoms else 0.0,
        dec.theta_eps_hat,
        math.sqrt(float(np.mean(resid * resid))),
    )
    return row


def window_hdm(
    decompositions: Mapping[str, Decomposition],
    signals: Mapping[str, SampledSignal],
    spec: WindowSpec,
    hspec: HdmFeatureSpec | None = None,
    markers: Sequence[LabelEvent] | None = None,
) -> FeatureMatrix:
    """Atom slots and summaries per channel from whole-record decompositions.

    Atoms whose peak falls in the history window fill ``K_max`` slots of
    ``(a, omega, tau - window start)`` ordered by ``|a|``; unused slots are 0.
    """
    hspec = hspec or HdmFeatureSpec()
    n, t0 = _check_channels(signals, spec)
    missing = set(signals) - set(decompositions)
    if missing:
        raise ValueError(f"no decomposition for channels {sorted(missing)}")
    starts = window_starts(n, spec)
    rows = np.zeros((starts.size, hspec.width * len(signals)))
    for j, s in enumerate(starts):
        rows[j] = np.concatenate([
            hdm_window_row(decompositions[ch], sig, int(s), spec, hspec) for ch, sig in signals.items()
        ])
    slot_names = [f"{p}{k}" for k in range(hspec.K_max) for p in ("a", "omega", "tau")]
    cols = [f"{ch}:{c}" for ch in signals for c in (*slot_names, *HDM_SUMMARY)]
    return FeatureMatrix(rows, _labels(markers, spec, n, t0), cols, starts, spec)

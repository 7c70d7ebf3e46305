"""Hamming-windowed-sinc FIR band-pass bank used as the time-frequency baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signal_model import SampledSignal

ORDER = 100
POWER_FLOOR = 1e-12

# Contiguous 0-0.10 Hz bank; 0.04-0.06 Hz fills the gap between the listed ranges.
HEMODYNAMIC_BANDS = ((0.0, 0.02), (0.02, 0.04), (0.04, 0.06), (0.06, 0.08), (0.08, 0.10))


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    band: tuple[float, float]
    fs: float

    @property
    def order(self) -> int:
        return self.taps.size - 1

    @property
    def delay(self) -> int:
        return self.order // 2

    def response(self, f) -> np.ndarray:
        """Complex frequency response at ``f`` Hz by direct DTFT evaluation."""
        f = np.atleast_1d(np.asarray(f, dtype=float))
        n = np.arange(self.taps.size)
        return np.exp(-2j * np.pi * np.outer(f, n) / self.fs) @ self.taps

    def to_text(self) -> str:
        head = f"# band {self.band[0]!r} {self.band[1]!r} Hz, fs {self.fs!r} Hz, order {self.order}\n"
        return head + "\n".join(repr(float(v)) for v in self.taps) + "\n"


def _lowpass(fc: float, fs: float, n: np.ndarray) -> np.ndarray:
    return 2.0 * fc / fs * np.sinc(2.0 * fc * n / fs)


def design_bandpass(low: float, high: float, fs: float, order: int = ORDER) -> FirFilter:
    """Linear-phase band-pass (low-pass when ``low == 0``), unit gain at the band centre."""
    if not (0 <= low < high <= fs / 2):
        raise ValueError(f"invalid band ({low}, {high}) Hz for fs={fs} Hz")
    if order % 2:
        raise ValueError("order must be even for a type-I linear-phase filter")
    n = np.arange(order + 1) - order / 2
    h = _lowpass(high, fs, n)
    if low > 0:
        h = h - _lowpass(low, fs, n)
    h = h * np.hamming(order + 1)
    centre = 0.0 if low == 0 else 0.5 * (low + high)
    gain = abs(np.sum(h * np.exp(-2j * np.pi * centre * np.arange(order + 1) / fs)))
    h = h / gain
    # enforce exact symmetry against rounding in the window product
    h = 0.5 * (h + h[::-1])
    return FirFilter(h, (float(low), float(high)), float(fs))


def default_bank(fs: float, bands: Sequence[tuple[float, float]] = HEMODYNAMIC_BANDS) -> list[FirFilter]:
    return [design_bandpass(lo, hi, fs) for lo, hi in bands]


def filter_samples(taps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Delay-compensated FIR output; sample ``n`` sees inputs up to ``n + delay``."""
    delay = (taps.size - 1) // 2
    full = np.convolve(x, taps)
    return full[delay: delay + x.size]


def apply(filt: FirFilter, y: SampledSignal) -> tuple[SampledSignal, np.ndarray]:
    """Filter ``y``; also returns a mask flagging the ``delay``-sample edge regions."""
    if not math.isclose(filt.fs, y.fs, rel_tol=1e-9):
        raise ValueError(f"filter designed for {filt.fs} Hz, signal sampled at {y.fs} Hz")
    out = filter_samples(filt.taps, y.samples)
    edge = np.zeros(out.size, dtype=bool)
    edge[: filt.delay] = True
    edge[max(0, out.size - filt.delay):] = True
    return y.with_samples(out), edge


def band_powers(y: SampledSignal, bank: Sequence[FirFilter], window: slice | None = None) -> np.ndarray:
    """Log mean-square output of each filter over ``window`` (sample indices)."""
    window = window if window is not None else slice(0, len(y))
    idx = range(len(y))[window]
    if len(idx) == 0:
        raise ValueError("empty band-power window")
    out = []
    for filt in bank:
        filtered, _ = apply(filt, y)
        seg = filtered.samples[window]
        out.append(math.log(float(np.mean(seg * seg)) + POWER_FLOOR))
    return np.array(out)


def causal_band_powers(history: np.ndarray, bank: Sequence[FirFilter]) -> np.ndarray:
    """Band powers of a history segment using only full-overlap filter outputs.

    Each output sample depends on samples inside ``history`` alone, so the
    feature never sees data past the segment's end.
    """
    out = []
    for filt in bank:
        # np.convolve swaps its arguments when the signal is the shorter one
        if history.size < filt.taps.size:
            raise ValueError("history segment shorter than the filter")
        valid = np.convolve(history, filt.taps, "valid")
        out.append(math.log(float(np.mean(valid * valid)) + POWER_FLOOR))
    return np.array(out)

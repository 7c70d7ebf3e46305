"""Generative models (GLM + HRF and the atom-sum model) and their likelihood.

Gaussian draws come from numpy's ``default_rng`` (PCG64 bit generator)
seeded with the caller's integer seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .kernel import BaseKernel, KernelAtom, sample_atom_on


@dataclass
class SampledSignal:
    T_h: float
    t0: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.T_h > 0:
            raise ValueError(f"sampling period must be positive, got {self.T_h}")
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("a sampled signal needs a 1-D array with at least one sample")

    def __len__(self):
        return self.samples.size

    @property
    def fs(self) -> float:
        return 1.0 / self.T_h

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) * self.T_h

    def with_samples(self, samples) -> "SampledSignal":
        return SampledSignal(self.T_h, self.t0, samples)


@dataclass(frozen=True)
class StimulusEvent:
    onset: float
    duration: float
    height: float = 1.0


@dataclass
class StimulusTrain:
    events: list[StimulusEvent] = field(default_factory=list)

    def __post_init__(self):
        self.events = [e if isinstance(e, StimulusEvent) else StimulusEvent(*e) for e in self.events]
        onsets = [e.onset for e in self.events]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("stimulus onsets must be non-decreasing")
        if any(e.duration < 0 for e in self.events):
            raise ValueError("stimulus durations must be non-negative")


@dataclass(frozen=True)
class NoiseParams:
    """``rho`` drives the GLM's AR(1) noise, ``theta_eps`` the lagged-output term
    of the atom model; ``sigma2`` is the innovation variance of both."""

    sigma2: float = 0.0
    rho: float = 0.0
    theta_eps: float = 0.0

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("innovation variance must be non-negative")


def boxcar(train: StimulusTrain, T_h: float, n: int, t0: float = 0.0) -> SampledSignal:
    """Sum of event heights covering each sample, events half-open ``[onset, onset + duration)``."""
    times = t0 + np.arange(n) * T_h
    eps = 1e-9 * T_h
    u = np.zeros(n)
    for ev in train.events:
        u[(times >= ev.onset - eps) & (times < ev.onset + ev.duration - eps)] += ev.height
    return SampledSignal(T_h, t0, u)


def convolve(u: SampledSignal, h: SampledSignal) -> SampledSignal:
    """Causal convolution scaled by ``T_h``, truncated to the length of ``u``."""
    if not math.isclose(u.T_h, h.T_h, rel_tol=1e-12):
        raise ValueError(f"sampling periods differ: {u.T_h} vs {h.T_h}")
    out = np.convolve(u.samples, h.samples)[: len(u)] * u.T_h
    return u.with_samples(out)


def glm_forward(x: SampledSignal, beta: float, noise: NoiseParams, seed: int) -> SampledSignal:
    rng = np.random.default_rng(seed)
    eta = rng.normal(0.0, math.sqrt(noise.sigma2), len(x)) if noise.sigma2 > 0 else np.zeros(len(x))
    eps = lfilter([1.0], [1.0, -noise.rho], eta)
    return x.with_samples(beta * x.samples + eps)


def reconstruct(atoms: Sequence[KernelAtom], base: BaseKernel, grid: SampledSignal) -> SampledSignal:
    """Noise-free sum of atom waveforms on the grid of ``grid``."""
    times = grid.times
    out = np.zeros(times.size)
    for atom in atoms:
        out += sample_atom_on(times, atom, base)
    return grid.with_samples(out)


def hdm_forward(
    atoms: Sequence[KernelAtom],
    noise: NoiseParams,
    grid: SampledSignal,
    seed: int,
    base: BaseKernel | None = None,
) -> SampledSignal:
    """Simulate ``y(n) = sum_k h_k(n T_h) + theta * y(n-1) + e(n)`` with ``y(-1) = 0``."""
    base = base or BaseKernel()
    clean = reconstruct(atoms, base, grid).samples
    rng = np.random.default_rng(seed)
    if noise.sigma2 > 0:
        clean = clean + rng.normal(0.0, math.sqrt(noise.sigma2), clean.size)
    return grid.with_samples(lfilter([1.0], [1.0, -noise.theta_eps], clean))


def innovations(y: SampledSignal, atoms, theta_eps: float, base: BaseKernel) -> np.ndarray:
    """``S*_n`` for ``n = 1..N``: model residual minus the lagged-output term."""
    delta = y.samples - reconstruct(atoms, base, y).samples
    return delta[1:] - theta_eps * y.samples[:-1]


def log_likelihood(y: SampledSignal, atoms, theta_eps: float, sigma2: float, base: BaseKernel | None = None) -> float:
    base = base or BaseKernel()
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if len(y) < 2:
        raise ValueError("likelihood needs at least two samples")
    s = innovations(y, atoms, theta_eps, base)
    n = s.size
    return -0.5 * n * math.log(2 * math.pi) - 0.5 * n * math.log(sigma2) - float(s @ s) / (2 * sigma2)

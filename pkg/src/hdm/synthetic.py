"""Synthetic recordings for tests, the CLI ``simulate`` command and benchmarks."""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from .features import LabelEvent
from .kernel import BaseKernel, CanonicalHrfParams, KernelAtom, canonical_hrf
from .ml import LABELS
from .signal_model import (
    NoiseParams,
    SampledSignal,
    StimulusTrain,
    boxcar,
    convolve,
    glm_forward,
    hdm_forward,
    reconstruct,
)


def atom_with_peak(a: float, omega: float, peak: float, base: BaseKernel) -> KernelAtom:
    return KernelAtom(a, omega, peak - base.tau0 * (omega / base.omega0 - 1.0))


def random_atoms(
    rng: np.random.Generator,
    K: int,
    duration: float,
    base: BaseKernel | None = None,
    omega_range=(4.5, 7.5),
    amp_range=(0.5, 1.5),
    signed: bool = True,
    margin: float = 15.0,
    min_gap: float = 8.0,
) -> list[KernelAtom]:
    """``K`` atoms with peaks at least ``min_gap`` s apart inside ``[margin, duration - margin]``."""
    base = base or BaseKernel()
    if K == 0:
        return []
    if (K - 1) * min_gap > duration - 2 * margin:
        raise ValueError("cannot place that many atoms with the requested spacing")
    while True:
        peaks = np.sort(rng.uniform(margin, duration - margin, K))
        if K == 1 or np.min(np.diff(peaks)) >= min_gap:
            break
    atoms = []
    for p in peaks:
        w = rng.uniform(*omega_range)
        a = rng.uniform(*amp_range)
        if signed and rng.random() < 0.5:
            a = -a
        atoms.append(atom_with_peak(float(a), float(w), float(p), base))
    return atoms


def sigma2_for_snr(clean: np.ndarray, snr_db: float) -> float:
    return float(np.mean(clean * clean)) / 10 ** (snr_db / 10)


def simulate_hdm(
    seed: int,
    K: int = 5,
    duration: float = 120.0,
    fs: float = 10.0,
    snr_db: float | None = 15.0,
    theta_eps: float = 0.3,
    sigma2: float | None = None,
    base: BaseKernel | None = None,
) -> tuple[list[KernelAtom], SampledSignal, NoiseParams]:
    """Random atoms plus lagged-output noise; ``sigma2`` overrides ``snr_db``."""
    base = base or BaseKernel()
    rng = np.random.default_rng(seed)
    atoms = random_atoms(rng, K, duration, base)
    grid = SampledSignal(1.0 / fs, 0.0, np.zeros(int(round(duration * fs))))
    if sigma2 is None:
        clean = reconstruct(atoms, base, grid).samples
        sigma2 = sigma2_for_snr(clean, snr_db) if snr_db is not None and clean.any() else 0.0
    noise = NoiseParams(sigma2=sigma2, theta_eps=theta_eps)
    return atoms, hdm_forward(atoms, noise, grid, seed + 1, base), noise


def simulate_glm(
    seed: int,
    n_events: int = 6,
    duration: float = 120.0,
    fs: float = 10.0,
    beta: float = 1.0,
    rho: float = 0.5,
    sigma2: float = 0.01,
) -> tuple[StimulusTrain, SampledSignal]:
    rng = np.random.default_rng(seed)
    onsets = np.sort(rng.uniform(0, duration - 20.0, n_events))
    train = StimulusTrain([(float(o), float(rng.uniform(1.0, 10.0)), 1.0) for o in onsets])
    n = int(round(duration * fs))
    u = boxcar(train, 1.0 / fs, n)
    h = SampledSignal(1.0 / fs, 0.0, canonical_hrf(np.arange(int(32 * fs)) / fs, CanonicalHrfParams()))
    x = convolve(u, h)
    return train, glm_forward(x, beta, NoiseParams(sigma2=sigma2, rho=rho), seed + 1)


@dataclass
class AtomRateBenchmark:
    """Four task classes that differ only in how often responses occur.

    Blocks of ``block_s`` seconds cycle through the classes in a seeded
    order. Inside a block, response peaks follow a jittered regular grid at
    the class's rate; amplitudes (random sign by default) and widths share
    one distribution across classes.
    """

    rates_per_min: dict[str, float] = field(
        default_factory=lambda: {"rest": 1.0, "0-back": 3.0, "2-back": 5.0, "3-back": 7.0})
    block_s: float = 240.0
    n_rounds: int = 3
    fs: float = 10.0
    amp_range: tuple[float, float] = (0.4, 1.6)
    omega_range: tuple[float, float] = (4.5, 7.5)
    jitter: float = 0.25
    signed: bool = True
    # scale amplitudes by 1/sqrt(rate) so every class carries the same mean power
    equal_power: bool = False
    snr_db: float = 15.0
    theta_eps: float = 0.3

    def generate(self, seed: int, channels=("AFpz",), base: BaseKernel | None = None):
        base = base or BaseKernel()
        rng = np.random.default_rng(seed)
        order = []
        for _ in range(self.n_rounds):
            order.extend(rng.permutation(len(LABELS)).tolist())
        duration = len(order) * self.block_s
        n = int(round(duration * self.fs))
        grid = SampledSignal(1.0 / self.fs, 0.0, np.zeros(n))
        markers = [LabelEvent(i * self.block_s, self.block_s, LABELS[c]) for i, c in enumerate(order)]
        signals, truth = {}, {}
        ref_rate = float(np.mean(list(self.rates_per_min.values())))
        for ch_i, ch in enumerate(channels):
            atoms = []
            for ev in markers:
                interval = 60.0 / self.rates_per_min[ev.label]
                scale = math.sqrt(ref_rate / self.rates_per_min[ev.label]) if self.equal_power else 1.0
                t = ev.onset + rng.uniform(0, interval)
                while t < ev.onset + ev.duration:
                    peak = t + rng.uniform(-self.jitter, self.jitter) * interval
                    if 0 < peak < duration:
                        a = scale * rng.uniform(*self.amp_range)
                        if self.signed and rng.random() < 0.5:
                            a = -a
                        atoms.append(atom_with_peak(float(a),
                                                    float(rng.uniform(*self.omega_range)), float(peak), base))
                    t += interval
            clean = reconstruct(atoms, base, grid).samples
            noise = NoiseParams(sigma2=sigma2_for_snr(clean, self.snr_db), theta_eps=self.theta_eps)
            signals[ch] = hdm_forward(atoms, noise, grid, int(rng.integers(2**31)), base)
            truth[ch] = atoms
        return signals, markers, truth

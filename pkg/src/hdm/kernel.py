"""Gamma basis functions, the double-gamma HRF, and decomposition atoms.

All evaluators accept scalars or numpy arrays of times (seconds) and are
vectorised over ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

# Relative magnitude below which sampled atom tails are treated as zero.
TAIL_CUTOFF = 1e-9


@dataclass(frozen=True)
class GammaParams:
    """One gamma lobe: height ``a``, FWHM ``omega`` and time-to-peak ``tau``."""

    a: float
    omega: float
    tau: float

    def __post_init__(self):
        if not (self.omega > 0 and self.tau > 0):
            raise ValueError(
                f"gamma lobe needs omega > 0 and tau > 0, got omega={self.omega}, tau={self.tau}"
            )


@dataclass(frozen=True)
class CanonicalHrfParams:
    increase: GammaParams = field(default_factory=lambda: GammaParams(1.0, 5.2, 5.4))
    undershoot: GammaParams = field(default_factory=lambda: GammaParams(0.35, 10.8, 7.35))


@dataclass(frozen=True)
class BaseKernel:
    """The reference lobe g0 every atom is a rescaled, shifted copy of."""

    params: GammaParams = field(default_factory=lambda: GammaParams(1.0, 5.2, 5.4))

    @property
    def a0(self) -> float:
        return self.params.a

    @property
    def omega0(self) -> float:
        return self.params.omega

    @property
    def tau0(self) -> float:
        return self.params.tau

    def to_dict(self) -> dict:
        return {"a0": self.a0, "omega0": self.omega0, "tau0": self.tau0}

    @classmethod
    def from_dict(cls, d: dict) -> "BaseKernel":
        return cls(GammaParams(float(d["a0"]), float(d["omega0"]), float(d["tau0"])))


@dataclass(frozen=True)
class KernelAtom:
    """One decomposed component ``a * g0((t - tau + tau0) / (omega / omega0))``."""

    a: float
    omega: float
    tau: float

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"atom width must be positive, got {self.omega}")

    def scale(self, base: BaseKernel) -> float:
        return self.omega / base.omega0

    def onset(self, base: BaseKernel) -> float:
        """Time where the rescaled argument crosses zero."""
        return self.tau - base.tau0

    def peak_time(self, base: BaseKernel) -> float:
        return self.tau + base.tau0 * (self.omega / base.omega0 - 1.0)

    def peak_value(self, base: BaseKernel) -> float:
        return self.a * base.a0

    def support(self, base: BaseKernel) -> tuple[float, float]:
        """Interval outside which ``|waveform| < TAIL_CUTOFF * |a|``."""
        onset = self.onset(base)
        return onset, onset + self.scale(base) * _tail_end(base.params)

    def to_dict(self) -> dict:
        return {"a": self.a, "omega": self.omega, "tau": self.tau}


def kappa(params: GammaParams) -> float:
    """Shape exponent that makes ``omega`` the lobe's full width at half maximum."""
    return 8.0 * math.log(2.0) * (params.tau / params.omega) ** 2


def gamma_basis(t, params: GammaParams):
    t = np.asarray(t, dtype=float)
    k = kappa(params)
    out = np.zeros_like(t)
    pos = t > 0
    x = t[pos] / params.tau
    # log form avoids overflow of x**k for large shape exponents
    out[pos] = params.a * np.exp(k * (np.log(x) - (x - 1.0)))
    return out if out.ndim else float(out)


def gamma_basis_dt(t, params: GammaParams):
    """Time derivative of :func:`gamma_basis`."""
    t = np.asarray(t, dtype=float)
    k = kappa(params)
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos]
    g = params.a * np.exp(k * (np.log(tp / params.tau) - (tp / params.tau - 1.0)))
    out[pos] = g * k * (1.0 / tp - 1.0 / params.tau)
    return out if out.ndim else float(out)


def canonical_hrf(t, params: CanonicalHrfParams | None = None):
    params = params or CanonicalHrfParams()
    return gamma_basis(t, params.increase) - gamma_basis(t, params.undershoot)


def atom_argument(t, atom: KernelAtom, base: BaseKernel):
    return (np.asarray(t, dtype=float) - atom.tau + base.tau0) / atom.scale(base)


def atom_waveform(t, atom: KernelAtom, base: BaseKernel | None = None):
    base = base or BaseKernel()
    u = atom_argument(t, atom, base)
    return atom.a * gamma_basis(u, base.params)


def sample_atom_on(times: np.ndarray, atom: KernelAtom, base: BaseKernel) -> np.ndarray:
    """Evaluate an atom on an arbitrary grid, zero outside its support."""
    times = np.asarray(times, dtype=float)
    out = np.zeros_like(times)
    if atom.a == 0:
        return out
    lo, hi = atom.support(base)
    mask = (times > lo) & (times <= hi)
    out[mask] = atom_waveform(times[mask], atom, base)
    return out


def sample_atom(atom: KernelAtom, base: BaseKernel, T_h: float, horizon: float):
    """Sample an atom on ``{0, T_h, 2 T_h, ...}`` covering ``[0, horizon)``."""
    from .signal_model import SampledSignal

    if not (T_h > 0 and horizon > 0):
        raise ValueError("T_h and horizon must be positive")
    n = max(1, int(round(horizon / T_h)))
    times = np.arange(n) * T_h
    return SampledSignal(T_h, 0.0, sample_atom_on(times, atom, base))


@lru_cache(maxsize=32)
def _tail_end(params: GammaParams) -> float:
    # g/a = exp(k (ln x - x + 1)) with x = t / tau; solve for the decaying side
    k = kappa(params)
    target = math.log(TAIL_CUTOFF) / k
    f = lambda x: math.log(x) - x + 1.0 - target
    hi = 2.0
    while f(hi) > 0:
        hi *= 2.0
    return params.tau * brentq(f, 1.0, hi, xtol=1e-12)


def numeric_fwhm(f, t_peak: float, lo: float, hi: float, tol: float = 1e-6) -> float:
    """FWHM of a unimodal function by bisection on both flanks of ``t_peak``."""
    half = 0.5 * float(f(t_peak))

    def cross(inside, outside):
        while abs(outside - inside) > tol:
            m = 0.5 * (inside + outside)
            if float(f(m)) > half:
                inside = m
            else:
                outside = m
        return 0.5 * (inside + outside)

    return cross(t_peak, hi) - cross(t_peak, lo)

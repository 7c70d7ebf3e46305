"""Greedy atom-by-atom decomposition of a hemodynamic signal.

Each iteration seeds candidate atoms at local extrema of the current
residual, fits every seed inside a bounded search box with BFGS on a
sigmoid-reparameterised objective, commits the candidate with the largest
drop in global squared residual, and subtracts it. The new atom and its
nearest committed neighbours are then refitted jointly, which undoes the
bias a greedy fit picks up from overlapping responses. After the loop the
lagged-output coefficient and the innovation variance are estimated in
closed form.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from . import __version__
from .kernel import BaseKernel, KernelAtom, gamma_basis, gamma_basis_dt, sample_atom_on
from .signal_model import SampledSignal, innovations, reconstruct

logger = logging.getLogger(__name__)

SEED_ORDERS = ("amplitude", "chronological")
CENTERING = ("median", "mean", "none")


class DegenerateSeed(ValueError):
    """A seed that cannot define a search box (zero extremum value)."""


class FitError(RuntimeError):
    """The per-atom optimiser produced a non-finite objective."""


class DegenerateEstimateWarning(RuntimeWarning):
    pass


@dataclass
class DecomposerConfig:
    xi: float | None = None  # absolute radius; None means xi_rel * ||y||^2
    xi_rel: float = 0.02
    L: int = 50
    kappa_a0: float = 0.8
    kappa_tau0: float = 0.8
    kappa_tau1: float = 3.0
    omega_eps: float = 0.1
    omega_m: float = 8.0
    smoothing_halfwidth: int = 3
    seed_order: str = "amplitude"
    max_seeds: int = 5
    n_starts: int = 3
    center: str = "median"
    refine: bool = True
    refine_neighbors: int = 3
    n_jobs: int = 1

    def __post_init__(self):
        if self.xi is not None and not self.xi > 0:
            raise ValueError("xi must be positive")
        if not self.xi_rel > 0:
            raise ValueError("xi_rel must be positive")
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if not 0 < self.kappa_a0 < 1:
            raise ValueError("kappa_a0 must lie in (0, 1)")
        if not self.kappa_tau0 < self.kappa_tau1:
            raise ValueError("kappa_tau0 must be below kappa_tau1")
        if not 0 < self.omega_eps < self.omega_m:
            raise ValueError("need 0 < omega_eps < omega_m")
        if self.seed_order not in SEED_ORDERS:
            raise ValueError(f"seed_order must be one of {SEED_ORDERS}")
        if self.center not in CENTERING:
            raise ValueError(f"center must be one of {CENTERING}")
        if self.smoothing_halfwidth < 0 or self.max_seeds < 1 or self.n_starts < 1:
            raise ValueError("smoothing_halfwidth >= 0, max_seeds >= 1 and n_starts >= 1 required")
        if self.refine_neighbors < 0:
            raise ValueError("refine_neighbors must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Extremum(NamedTuple):
    index: int
    time: float
    value: float


@dataclass(frozen=True)
class SearchBox:
    a_range: tuple[float, float]
    omega_range: tuple[float, float]
    tau_range: tuple[float, float]
    t_i: float
    y_i: float
    window: tuple[float, float]

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.a_range[0], self.omega_range[0], self.tau_range[0]])

    @property
    def highs(self) -> np.ndarray:
        return np.array([self.a_range[1], self.omega_range[1], self.tau_range[1]])


@dataclass
class Decomposition:
    atoms: list[KernelAtom]
    theta_eps_hat: float
    sigma2_hat: float
    residual_curve: list[float]
    iterations: int
    base: BaseKernel
    converged: bool
    xi: float
    baseline: float = 0.0
    fit_windows: list[tuple[float, float]] = field(default_factory=list)
    config: DecomposerConfig = field(default_factory=DecomposerConfig)
    residual: np.ndarray | None = field(default=None, repr=False, compare=False)

    def reconstruction(self, grid: SampledSignal) -> SampledSignal:
        """Baseline plus the sum of all atoms on ``grid``."""
        rec = reconstruct(self.atoms, self.base, grid)
        return rec.with_samples(rec.samples + self.baseline)

    def to_dict(self) -> dict:
        return {
            "format": "hdm-decomposition",
            "version": __version__,
            "base_kernel": self.base.to_dict(),
            "config": self.config.to_dict(),
            "baseline": self.baseline,
            "xi": self.xi,
            "atoms": [a.to_dict() for a in self.atoms],
            "fit_windows": [list(w) for w in self.fit_windows],
            "theta_eps_hat": self.theta_eps_hat,
            "sigma2_hat": self.sigma2_hat,
            "residual_curve": list(self.residual_curve),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Decomposition":
        return cls(
            atoms=[KernelAtom(**a) for a in d["atoms"]],
            theta_eps_hat=d["theta_eps_hat"],
            sigma2_hat=d["sigma2_hat"],
            residual_curve=list(d["residual_curve"]),
            iterations=d["iterations"],
            base=BaseKernel.from_dict(d["base_kernel"]),
            converged=d["converged"],
            xi=d["xi"],
            baseline=d.get("baseline", 0.0),
            fit_windows=[tuple(w) for w in d.get("fit_windows", [])],
            config=DecomposerConfig(**d["config"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "Decomposition":
        return cls.from_dict(json.loads(text))


def _moving_average(x: np.ndarray, halfwidth: int) -> np.ndarray:
    if halfwidth == 0:
        return x
    k = np.ones(2 * halfwidth + 1)
    return np.convolve(x, k, "same") / np.convolve(np.ones_like(x), k, "same")


def find_extrema(y: SampledSignal, config: DecomposerConfig | None = None) -> list[Extremum]:
    """Interior local extrema of the smoothed signal, in chronological order.

    Plateaus count once, at their middle sample. The reported location is
    refined to the raw extremum within the smoothing half-width and the
    reported value is the raw sample there.
    """
    config = config or DecomposerConfig()
    x = y.samples
    if x.size < 3:
        raise ValueError("need at least three samples to locate extrema")
    hw = config.smoothing_halfwidth
    v = _moving_average(x, hw)
    change = np.flatnonzero(np.diff(v) != 0)
    starts = np.r_[0, change + 1]
    ends = np.r_[change, v.size - 1]
    if starts.size < 3:
        return []
    vals = v[starts]
    left, mid, right = vals[:-2], vals[1:-1], vals[2:]
    is_max = (mid > left) & (mid > right)
    is_min = (mid < left) & (mid < right)
    centers = (starts[1:-1] + ends[1:-1]) // 2

    out: list[Extremum] = []
    seen = set()
    times = y.times
    for c, mx, mn in zip(centers, is_max, is_min):
        if not (mx or mn):
            continue
        lo, hi = max(0, c - hw), min(x.size, c + hw + 1)
        seg = x[lo:hi]
        i = lo + int(np.argmax(seg) if mx else np.argmin(seg))
        if i in seen:
            continue
        seen.add(i)
        out.append(Extremum(i, float(times[i]), float(x[i])))
    return out


def order_seeds(extrema: Sequence[Extremum], config: DecomposerConfig) -> list[Extremum]:
    if config.seed_order == "chronological":
        return sorted(extrema, key=lambda e: e.time)
    return sorted(extrema, key=lambda e: (-abs(e.value), e.time))


def build_search_space(extremum: Extremum, config: DecomposerConfig, base: BaseKernel | None = None) -> SearchBox:
    """Parameter box for the atom explaining one extremum.

    The response onset (``tau - tau0``) is constrained to lie between
    ``kappa_tau0 * tau0`` and ``kappa_tau1 * tau0`` seconds before the
    extremum. The fit window spans ``2 * kappa_tau1 * tau0`` seconds starting
    at the earliest admissible onset.
    """
    base = base or BaseKernel()
    t_i, y_i = extremum.time, extremum.value
    if y_i == 0:
        raise DegenerateSeed(f"extremum at t={t_i} has zero amplitude")
    a_lo, a_hi = sorted((config.kappa_a0 * y_i, y_i))
    tau0 = base.tau0
    earliest_onset = t_i - config.kappa_tau1 * tau0
    latest_onset = t_i - config.kappa_tau0 * tau0
    return SearchBox(
        a_range=(a_lo, a_hi),
        omega_range=(config.omega_eps, config.omega_m),
        tau_range=(earliest_onset + tau0, latest_onset + tau0),
        t_i=t_i,
        y_i=y_i,
        window=(earliest_onset, earliest_onset + 2 * config.kappa_tau1 * tau0),
    )


def window_sse(params, t: np.ndarray, r: np.ndarray, base: BaseKernel):
    """Squared error between ``r`` and one atom on ``t`` and its gradient in (a, omega, tau)."""
    a, omega, tau = params
    s = omega / base.omega0
    u = (t - tau + base.tau0) / s
    g = gamma_basis(u, base.params)
    dg = gamma_basis_dt(u, base.params)
    e = r - a * g
    sse = float(e @ e)
    grad = -2.0 * np.array([e @ g, e @ (a * dg * (-u / omega)), e @ (a * dg * (-1.0 / s))])
    return sse, grad


def joint_sse(flat, t: np.ndarray, r: np.ndarray, base: BaseKernel):
    """:func:`window_sse` for several atoms at once; ``flat`` holds (a, omega, tau) triples."""
    P = np.asarray(flat, dtype=float).reshape(-1, 3)
    parts = []
    e = r.copy()
    for a, omega, tau in P:
        s = omega / base.omega0
        u = (t - tau + base.tau0) / s
        g = gamma_basis(u, base.params)
        e -= a * g
        parts.append((a, s, u, g, gamma_basis_dt(u, base.params), omega))
    grad = np.empty(P.shape)
    for k, (a, s, u, g, dg, omega) in enumerate(parts):
        grad[k] = -2.0 * np.array([e @ g, e @ (a * dg * (-u / omega)), e @ (a * dg * (-1.0 / s))])
    return float(e @ e), grad.ravel()


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logit(q):
    return np.log(q) - np.log1p(-q)


def _start_points(box: SearchBox, config_n: int, base: BaseKernel) -> list[np.ndarray]:
    lo, hi = box.lows, box.highs
    frac = min(abs(box.a_range[0]), abs(box.a_range[1])) / abs(box.y_i)
    a_start = box.y_i * (0.9 + 0.1 * frac)
    w_lo, w_hi = box.omega_range
    omegas = [base.omega0, 0.5 * (base.omega0 + w_hi), max(w_lo, 0.8 * base.omega0)]
    omegas += list(np.linspace(w_lo, w_hi, max(0, config_n - 3) + 2)[1:-1])
    starts = []
    for w in omegas[:config_n]:
        w = min(max(w, w_lo), w_hi)
        tau = box.t_i - base.tau0 * (w / base.omega0 - 1.0)
        p = np.array([a_start, w, tau])
        q = np.clip((p - lo) / (hi - lo), 0.02, 0.98)
        starts.append(_logit(q))
    return starts


def fit_atom(
    residual: SampledSignal,
    box: SearchBox,
    base: BaseKernel | None = None,
    n_starts: int = 3,
) -> tuple[KernelAtom, float]:
    """Best-of-``n_starts`` BFGS fit of one atom inside ``box``.

    Returns the atom and its squared error on the fit window.
    """
    base = base or BaseKernel()
    times = residual.times
    sel = (times >= box.window[0]) & (times <= box.window[1])
    t, r = times[sel], residual.samples[sel]
    if t.size == 0:
        raise FitError(f"fit window {box.window} lies outside the signal")
    lo, hi = box.lows, box.highs
    span = hi - lo
    norm = float(r @ r)
    norm = norm if norm > 0 else 1.0

    def objective(z):
        q = _sigmoid(z)
        sse, grad = window_sse(lo + span * q, t, r, base)
        return sse / norm, grad * span * q * (1.0 - q) / norm

    best = None
    for z0 in _start_points(box, n_starts, base):
        res = minimize(objective, z0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 400})
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError(f"non-finite objective for seed at t={box.t_i}")
    a, omega, tau = lo + span * _sigmoid(best.x)
    return KernelAtom(float(a), float(omega), float(tau)), float(best.fun * norm)


def estimate_ar(y: SampledSignal, atoms: Sequence[KernelAtom], base: BaseKernel | None = None) -> float:
    """Least-squares coefficient of ``y(n-1)`` in the model residual ``delta*_n``."""
    base = base or BaseKernel()
    if len(y) < 2:
        raise ValueError("need at least two samples")
    delta = y.samples - reconstruct(atoms, base, y).samples
    lag = y.samples[:-1]
    den = float(lag @ lag)
    if den == 0:
        warnings.warn("lagged signal is identically zero; returning 0", DegenerateEstimateWarning, stacklevel=2)
        return 0.0
    return float(delta[1:] @ lag) / den


def estimate_noise_var(y: SampledSignal, atoms: Sequence[KernelAtom], theta_eps_hat: float, base: BaseKernel | None = None) -> float:
    base = base or BaseKernel()
    s = innovations(y, atoms, theta_eps_hat, base)
    return float(s @ s) / s.size if s.size else 0.0


def _baseline(x: np.ndarray, mode: str) -> float:
    if mode == "median":
        return float(np.median(x))
    if mode == "mean":
        return float(np.mean(x))
    return 0.0


def _refine(R, times, atoms, boxes, windows, k_new, config, base):
    """Jointly refit atom ``k_new`` and its nearest neighbours; returns the new residual or None."""
    new = atoms[k_new]
    p_new = new.peak_time(base)
    near = sorted(
        (abs(a.peak_time(base) - p_new), j) for j, a in enumerate(atoms)
        if j != k_new and abs(a.peak_time(base) - p_new) < 3.0 * max(a.omega, new.omega)
    )
    group = [k_new] + [j for _, j in near[: config.refine_neighbors]]
    if len(group) == 1:
        return None
    spans = [atoms[j].support(base) for j in group]
    lo = int(np.searchsorted(times, min(s[0] for s in spans), side="right"))
    hi = int(np.searchsorted(times, max(s[1] for s in spans), side="right"))
    t = times[lo:hi]
    if t.size < 3:
        return None
    target = R[lo:hi] + sum(sample_atom_on(t, atoms[j], base) for j in group)
    bounds, x0 = [], []
    for j in group:
        a = atoms[j]
        bounds += [tuple(sorted((0.25 * a.a, 2.0 * a.a))), (config.omega_eps, config.omega_m), boxes[j].tau_range]
        x0 += [a.a, a.omega, a.tau]
    norm = float(target @ target) or 1.0
    res = minimize(lambda x: tuple(v / norm for v in joint_sse(x, t, target, base)), np.array(x0), jac=True,
                   method="L-BFGS-B", bounds=bounds, options={"maxiter": 200})
    if not np.isfinite(res.fun):
        return None
    fitted = [KernelAtom(*map(float, res.x[3 * i: 3 * i + 3])) for i in range(len(group))]
    # update on the full grid: refined atoms may reach past the fitted region
    R_new = R + sum(sample_atom_on(times, atoms[j], base) for j in group)
    R_new -= sum(sample_atom_on(times, a, base) for a in fitted)
    if not float(R_new @ R_new) < float(R @ R):
        return None
    for j, a in zip(group, fitted):
        atoms[j] = a
        windows[j] = (min(windows[j][0], float(t[0])), max(windows[j][1], float(t[-1])))
    return R_new


class _Candidate(NamedTuple):
    gain: float
    time: float
    atom: KernelAtom
    window: tuple[float, float]
    lo: int
    hi: int
    wave: np.ndarray
    box: SearchBox


def decompose(y: SampledSignal, config: DecomposerConfig | None = None, base: BaseKernel | None = None) -> Decomposition:
    config = config or DecomposerConfig()
    base = base or BaseKernel()
    baseline = _baseline(y.samples, config.center)
    times = y.times
    R = y.samples - baseline
    with np.errstate(over="ignore"):
        r = float(R @ R)
    if not math.isfinite(r):
        raise FitError("signal energy is not finite")
    xi = config.xi if config.xi is not None else config.xi_rel * r
    curve = [r]
    atoms: list[KernelAtom] = []
    windows: list[tuple[float, float]] = []
    boxes: list[SearchBox] = []
    cache: dict[tuple[int, bytes], tuple[KernelAtom, tuple[float, float]]] = {}
    pool = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 else None

    def evaluate(ex: Extremum):
        try:
            box = build_search_space(ex, config, base)
        except DegenerateSeed as err:
            logger.debug("skipping seed: %s", err)
            return None
        i0, i1 = np.searchsorted(times, box.window[0]), np.searchsorted(times, box.window[1], side="right")
        key = (ex.index, R[i0:i1].tobytes())
        if key in cache:
            atom, window = cache[key]
        else:
            try:
                atom, _ = fit_atom(y.with_samples(R), box, base, config.n_starts)
            except FitError as err:
                logger.warning("rejecting seed: %s", err)
                return None
            window = (float(times[i0]), float(times[max(i0, i1 - 1)]))
            cache[key] = (atom, window)
        s_lo, s_hi = atom.support(base)
        lo = int(np.searchsorted(times, s_lo, side="right"))
        hi = int(np.searchsorted(times, s_hi, side="right"))
        wave = sample_atom_on(times[lo:hi], atom, base)
        seg = R[lo:hi]
        gain = float(2.0 * (seg @ wave) - wave @ wave)
        return _Candidate(gain, ex.time, atom, window, lo, hi, wave, box)

    try:
        while len(atoms) < config.L and curve[-1] > xi:
            if R.size < 3:
                break
            seeds = order_seeds(find_extrema(y.with_samples(R), config), config)[: config.max_seeds]
            if not seeds:
                break
            results = list(pool.map(evaluate, seeds) if pool else map(evaluate, seeds))
            cands = [c for c in results if c is not None]
            if not cands:
                break
            best = min(cands, key=lambda c: (-c.gain, c.time))
            if not best.gain > 0:
                break
            R_new = R.copy()
            R_new[best.lo:best.hi] -= best.wave
            r_new = float(R_new @ R_new)
            if not r_new < curve[-1]:
                break
            atoms.append(best.atom)
            windows.append(best.window)
            boxes.append(best.box)
            if config.refine:
                refined = _refine(R_new, times, atoms, boxes, windows, len(atoms) - 1, config, base)
                if refined is not None:
                    R_new = refined
                    r_new = float(R_new @ R_new)
            R = R_new
            curve.append(r_new)
    finally:
        if pool:
            pool.shutdown()

    centered = y.with_samples(y.samples - baseline)
    theta = estimate_ar(centered, atoms, base) if len(y) >= 2 else 0.0
    sigma2 = estimate_noise_var(centered, atoms, theta, base) if len(y) >= 2 else 0.0
    return Decomposition(
        atoms=atoms,
        theta_eps_hat=theta,
        sigma2_hat=sigma2,
        residual_curve=curve,
        iterations=len(atoms),
        base=base,
        converged=curve[-1] <= xi,
        xi=xi,
        baseline=baseline,
        fit_windows=windows,
        config=config,
        residual=R,
    )

"""Active phase stabilisation of the variable-delay interferometer.

During each locking window a bright CW reference is sent through every
delay in turn while a phase modulator steps through ``N`` equally spaced
offsets. The interferometer phase for that delay is the least-squares fit
of the fringe fractions ``C1 / (C1 + C2)`` to ``(1 + cos(phi + phi_ext))/2``;
the result goes into a lookup table read by every key round.

Phases stand in for the modulator voltages of real hardware.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import DomainError, PreconditionError

__all__ = [
    "DriftModel",
    "PhaseDrift",
    "CalibrationTable",
    "InsufficientCounts",
    "applied_phases",
    "measure_fringe",
    "fringe_cost",
    "estimate_phase",
    "phase_uncertainty",
    "refine",
    "calibrate_all",
    "StabilityTrace",
    "simulate_stability",
    "wrap_phase",
    "LOCK_FLUX",
    "LOCK_EFFICIENCY",
]

TWO_PI = 2.0 * np.pi
LOCK_FLUX = 60e6
LOCK_EFFICIENCY = 0.1


class InsufficientCounts(PreconditionError):
    """A phase step recorded no photons on either detector."""


def wrap_phase(phi):
    out = np.mod(phi, TWO_PI)
    # tiny negatives round up to exactly 2*pi
    return np.where(out >= TWO_PI, 0.0, out)


@dataclass(frozen=True)
class DriftModel:
    """Interferometer phase drift driven by the laser wavelength.

    A common Wiener process with diffusion ``sigma`` (rad/sqrt(s)) plus a
    linear drift ``rate`` (rad/s) is scaled for each delay by
    ``d / reference_delay``: the phase picked up from a wavelength change is
    proportional to the arm-length difference.
    """

    sigma: float = 0.08
    rate: float = 0.01
    reference_delay: float = 128.0

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise DomainError(f"drift sigma must be >= 0, got {self.sigma!r}")
        if self.reference_delay <= 0:
            raise DomainError("reference delay must be > 0")

    @property
    def is_static(self) -> bool:
        return self.sigma == 0 and self.rate == 0


class PhaseDrift:
    """Ground-truth interferometer phase for every delay as simulated time advances.

    Times passed to :meth:`advance` must never go backwards.
    """

    def __init__(
        self,
        model: DriftModel,
        L: int,
        rng: np.random.Generator,
        static: Optional[np.ndarray] = None,
    ):
        self.model = model
        self.L = L
        self._rng = rng
        self.static = rng.uniform(0.0, TWO_PI, size=L) if static is None else np.asarray(static, float)
        self.scale = np.arange(L) / model.reference_delay
        self.t = 0.0
        self.w = 0.0

    def advance(self, times) -> np.ndarray:
        """Wiener-process values at the given non-decreasing times."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if times.size == 0:
            return times
        steps = np.diff(np.concatenate([[self.t], times]))
        if np.any(steps < 0):
            raise DomainError("drift time must not go backwards")
        if self.model.sigma > 0:
            w = self.w + np.cumsum(self.model.sigma * np.sqrt(steps) * self._rng.standard_normal(times.size))
        else:
            w = np.full(times.size, self.w)
        self.t = float(times[-1])
        self.w = float(w[-1])
        return w

    def phase(self, d, w, t):
        """True phase of delay ``d`` given Wiener value ``w`` at time ``t`` (broadcasts)."""
        d = np.asarray(d)
        return self.static[d] + self.scale[d] * (w + self.model.rate * np.asarray(t))


class CalibrationTable:
    """Compensation phase per delay, with fit uncertainty and time of last update.

    Entries never calibrated (or whose last calibration failed) are flagged
    stale and keep their previous phase.
    """

    def __init__(self, L: int = 128):
        if L < 2:
            raise DomainError(f"table needs at least 2 delays, got {L!r}")
        self.L = L
        self.phases = np.zeros(L)
        self.residuals = np.full(L, np.nan)
        self.timestamps = np.full(L, np.nan)
        self.stale = np.ones(L, dtype=bool)

    def lookup(self, d):
        return self.phases[d]

    def update(self, d: int, phase: float, residual: float, timestamp: float) -> None:
        self.phases[d] = float(wrap_phase(phase))
        self.residuals[d] = residual
        self.timestamps[d] = timestamp
        self.stale[d] = False

    def mark_stale(self, d: int) -> None:
        self.stale[d] = True

    def copy(self) -> "CalibrationTable":
        out = CalibrationTable(self.L)
        out.phases = self.phases.copy()
        out.residuals = self.residuals.copy()
        out.timestamps = self.timestamps.copy()
        out.stale = self.stale.copy()
        return out

    def to_text(self) -> str:
        lines = ["# d\tphase_rad\tresidual\ttimestamp"]
        for d in range(self.L):
            lines.append(
                f"{d}\t{float(self.phases[d])!r}\t{float(self.residuals[d])!r}\t{float(self.timestamps[d])!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CalibrationTable":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
        if not rows:
            raise ValueError("calibration table is empty")
        table = cls(max(r[0] for r in rows) + 1)
        for d, phase, residual, ts in rows:
            table.phases[d] = phase
            table.residuals[d] = residual
            table.timestamps[d] = ts
            table.stale[d] = math.isnan(ts)
        return table

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CalibrationTable":
        return cls.from_text(Path(path).read_text())


def applied_phases(N: int = 4) -> np.ndarray:
    if N < 3:
        raise DomainError(f"need at least 3 phase steps, got {N!r}")
    return TWO_PI * np.arange(N) / N


def measure_fringe(
    phi_true,
    phi_ext,
    bright_flux: float,
    window: float,
    rng: np.random.Generator,
    efficiency: float = LOCK_EFFICIENCY,
    visibility=1.0,
):
    """Poisson counts on the two detectors for one phase step (broadcasts)."""
    if np.any(np.asarray(bright_flux) <= 0) or window <= 0:
        raise DomainError("bright flux and window must be > 0")
    mean = np.asarray(bright_flux) * window * efficiency
    x = np.asarray(visibility) * np.cos(np.asarray(phi_true) + np.asarray(phi_ext))
    return rng.poisson(0.5 * mean * (1 + x)), rng.poisson(0.5 * mean * (1 - x))


def _fractions(c1, c2) -> np.ndarray:
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    total = c1 + c2
    if np.any(total <= 0):
        raise InsufficientCounts("a phase step recorded no counts")
    return c1 / total


def fringe_cost(phi, fractions, applied=None):
    """Sum of squared residuals between the ideal fringe and measured fractions."""
    fractions = np.asarray(fractions, dtype=float)
    if applied is None:
        applied = applied_phases(fractions.shape[-1])
    model = 0.5 * (1 + np.cos(np.asarray(phi)[..., None] + applied))
    return np.sum((model - fractions) ** 2, axis=-1)


def _least_squares_phase(f: np.ndarray, applied: np.ndarray, iters: int = 8) -> np.ndarray:
    cos_sum = np.sum(f * np.cos(applied), axis=-1)
    sin_sum = np.sum(f * np.sin(applied), axis=-1)
    phi = np.arctan2(-sin_sum, cos_sum)
    # Newton polish; exact already for equally spaced steps, needed otherwise
    cost = fringe_cost(phi, f, applied)
    for _ in range(iters):
        arg = phi[..., None] + applied
        r = 0.5 * (1 + np.cos(arg)) - f
        g1 = -0.5 * np.sin(arg)
        grad = 2 * np.sum(r * g1, axis=-1)
        hess = 2 * np.sum(g1**2 - 0.5 * r * np.cos(arg), axis=-1)
        step = np.where(hess > 0, -grad / np.where(hess > 0, hess, 1.0), -grad)
        trial = phi + step
        trial_cost = fringe_cost(trial, f, applied)
        better = trial_cost < cost
        if not np.any(better):
            break
        phi = np.where(better, trial, phi)
        cost = np.where(better, trial_cost, cost)
    return wrap_phase(phi)


def estimate_phase(c1, c2, applied=None):
    """Least-squares interferometer phase from fringe counts.

    Args:
        c1, c2: counts of the two detectors, shape ``(..., N)``.
        applied: the ``N`` modulator phases; defaults to ``2*pi*k/N``.

    Returns:
        Phase in ``[0, 2*pi)`` with the leading shape of the counts.

    Raises:
        InsufficientCounts: if any step saw no photons.
    """
    f = _fractions(c1, c2)
    N = f.shape[-1]
    if N < 3:
        raise DomainError(f"need at least 3 phase steps, got {N}")
    applied = applied_phases(N) if applied is None else np.asarray(applied, dtype=float)
    phi = _least_squares_phase(f, applied)
    return float(phi) if phi.ndim == 0 else phi


def phase_uncertainty(phi, c1, c2, applied=None):
    """Propagated Poisson standard error (rad) of a fitted phase."""
    f = _fractions(c1, c2)
    n = np.asarray(c1, dtype=float) + np.asarray(c2, dtype=float)
    if applied is None:
        applied = applied_phases(f.shape[-1])
    amp = np.hypot(np.sum(f * np.cos(applied), axis=-1), np.sum(f * np.sin(applied), axis=-1))
    sens = np.sin(np.asarray(phi)[..., None] + applied) ** 2
    var = np.sum(sens * f * (1 - f) / n, axis=-1) / np.maximum(amp, 1e-300) ** 2
    return np.sqrt(var)


def refine(phi, c1, c2, step: float = 0.02, n_steps: int = 5, applied=None):
    """Local grid search of the fit cost around ``phi``.

    Tries ``phi + k*step`` for ``|k| <= n_steps`` and keeps the cheapest,
    preferring the input on ties, so the cost never goes up.
    """
    if step <= 0:
        raise DomainError(f"refinement step must be > 0, got {step!r}")
    f = _fractions(c1, c2)
    if applied is None:
        applied = applied_phases(f.shape[-1])
    phi = np.asarray(phi, dtype=float)
    ks = np.arange(-n_steps, n_steps + 1)
    # centre first so argmin resolves ties to the input
    ks = ks[np.argsort(np.abs(ks), kind="stable")]
    grid = phi[..., None] + ks * step
    costs = fringe_cost(grid, f[..., None, :], applied)
    best = np.take_along_axis(grid, np.argmin(costs, axis=-1)[..., None], axis=-1)[..., 0]
    best = wrap_phase(best)
    return float(best) if best.ndim == 0 else best


def calibrate_all(
    table: CalibrationTable,
    drift: PhaseDrift,
    t_start: float,
    rng: np.random.Generator,
    window: float = 0.34,
    flux=LOCK_FLUX,
    efficiency: float = LOCK_EFFICIENCY,
    visibility=1.0,
    n_steps: int = 4,
    refine_step: float = 0.02,
    refine_n: int = 5,
    ideal: bool = False,
) -> CalibrationTable:
    """Refresh every entry of ``table`` during one locking window.

    The window is split evenly across all delays in order ``0..L-1``, and
    each delay's share evenly across the ``n_steps`` phase steps. Entries
    whose measurement has an empty step are marked stale and keep their old
    phase. With ``ideal=True`` the table is set to the true phase.
    """
    L = table.L
    if drift.L != L:
        raise DomainError("drift model and table disagree on the number of delays")
    slot = window / L
    times = t_start + (np.arange(L) + 0.5) * slot
    w = drift.advance(times)
    truth = drift.phase(np.arange(L), w, times)
    if ideal:
        for d in range(L):
            table.update(d, truth[d], 0.0, times[d])
        return table

    applied = applied_phases(n_steps)
    flux = np.broadcast_to(np.asarray(flux, dtype=float), (L,))
    vis = np.broadcast_to(np.asarray(visibility, dtype=float), (L,))
    c1, c2 = measure_fringe(
        truth[:, None], applied[None, :], np.maximum(flux, 1e-300)[:, None],
        slot / n_steps, rng, efficiency, vis[:, None],
    )
    ok = np.all((c1 + c2) > 0, axis=1)
    if np.any(ok):
        est = estimate_phase(c1[ok], c2[ok], applied)
        est = refine(est, c1[ok], c2[ok], refine_step, refine_n, applied)
        sig = phase_uncertainty(est, c1[ok], c2[ok], applied)
        for k, d in enumerate(np.flatnonzero(ok)):
            table.update(int(d), float(np.atleast_1d(est)[k]), float(np.atleast_1d(sig)[k]), float(times[d]))
    for d in np.flatnonzero(~ok):
        table.mark_stale(int(d))
    return table


@dataclass
class StabilityTrace:
    """Effective visibility of every delay sampled at the end of each key window."""

    times: np.ndarray
    visibility: np.ndarray  # (n_checkpoints, L); column 0 is the zero delay
    threshold: float = 0.96
    table: Optional[CalibrationTable] = None

    def fraction_above(self) -> np.ndarray:
        return np.mean(self.visibility >= self.threshold, axis=0)

    def maintained(self, min_fraction: float = 0.99) -> np.ndarray:
        """Delays 1..L-1 whose visibility met the threshold at ``min_fraction`` of checkpoints."""
        return self.fraction_above()[1:] >= min_fraction

    def fraction_maintained(self, min_fraction: float = 0.99) -> float:
        return float(np.mean(self.maintained(min_fraction)))


def simulate_stability(
    hours: float = 2.0,
    L: int = 128,
    drift_model: DriftModel = DriftModel(),
    visibility=0.985,
    seed: int = 0,
    locking_window: float = 0.34,
    flux=LOCK_FLUX,
    efficiency: float = LOCK_EFFICIENCY,
    n_steps: int = 4,
    threshold: float = 0.96,
) -> StabilityTrace:
    """Run the once-per-second lock/key cycle for ``hours`` and track visibility.

    Each checkpoint sits at the end of a key window, the point furthest from
    the last calibration.
    """
    ss = np.random.SeedSequence(seed)
    drift_rng, cal_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    drift = PhaseDrift(drift_model, L, drift_rng)
    table = CalibrationTable(L)
    vis = np.broadcast_to(np.asarray(visibility, dtype=float), (L,))
    seconds = int(round(hours * 3600))
    times = np.arange(1, seconds + 1, dtype=float)
    out = np.empty((seconds, L))
    d = np.arange(L)
    for k in range(seconds):
        calibrate_all(table, drift, float(k), cal_rng, locking_window, flux, efficiency, vis, n_steps)
        w = drift.advance(times[k])[0]
        err = drift.phase(d, w, times[k]) - table.phases
        out[k] = vis * np.cos(err)
    return StabilityTrace(times, out, threshold, table)

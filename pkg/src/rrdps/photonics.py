"""Photon-statistics model of the source, channel, delay interferometer and detectors.

Coherent pulses are tracked by their mean photon number and optical phase;
for Poissonian light and threshold detectors this is exact. Batched variants
(``*_batch``) process many rounds at once with rows padded to the longest
possible output timeline of ``2L - 1`` slots; the single-round functions are
thin wrappers over them so both paths share the same arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DomainError
from .protocol import PulseTrainRecord

__all__ = [
    "OpticalTrain",
    "ChannelModel",
    "ClickRecord",
    "build_train",
    "apply_loss",
    "db_to_transmittance",
    "interferometer_output",
    "interferometer_output_batch",
    "sample_clicks",
    "sample_click_matrix",
    "extract_valid",
    "first_valid_clicks",
    "per_delay_gain_and_error",
    "analytic_gain_and_error",
]

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class OpticalTrain:
    means: np.ndarray
    phases: np.ndarray

    def __post_init__(self) -> None:
        if self.means.shape != self.phases.shape or self.means.ndim != 1:
            raise DomainError("means and phases must be 1-D arrays of equal length")
        if np.any(self.means < 0):
            raise DomainError("mean photon numbers must be non-negative")

    @property
    def L(self) -> int:
        return self.means.size


def db_to_transmittance(loss_db: float) -> float:
    if loss_db < 0:
        raise DomainError(f"loss must be >= 0 dB, got {loss_db!r}")
    return 10.0 ** (-loss_db / 10.0)


def _per_delay(value: ArrayLike, L: int, name: str) -> np.ndarray:
    """Broadcast a scalar or a per-delay table to an array indexed by d (length L)."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(L, float(arr))
    if arr.size == L - 1:
        return np.concatenate([[arr[0]], arr])
    if arr.size == L:
        return arr.copy()
    raise DomainError(f"{name} table must have L-1={L - 1} or L={L} entries, got {arr.size}")


@dataclass(frozen=True)
class ChannelModel:
    """Everything between Alice's attenuator and Bob's detector outputs.

    ``total_loss_db`` already includes detector efficiency, so ``efficiency``
    stays at 1 unless the loss figure is given for the fibre alone.
    ``visibility`` and ``phase_offset`` are either scalars or tables indexed
    by delay (L-1 entries for d=1..L-1, or L entries for d=0..L-1).
    """

    total_loss_db: float = 18.0
    excess_loss_db: float = 0.0
    efficiency: float = 1.0
    visibility: ArrayLike = 1.0
    phase_offset: ArrayLike = 0.0
    dark_rate_cps: float = 0.0
    slot_duration: float = 2e-9
    gate_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.total_loss_db < 0 or self.excess_loss_db < 0:
            raise DomainError("losses must be >= 0 dB")
        if not 0 < self.efficiency <= 1:
            raise DomainError(f"efficiency must lie in (0, 1], got {self.efficiency!r}")
        v = np.asarray(self.visibility, dtype=float)
        if np.any((v < 0) | (v > 1)):
            raise DomainError("visibility must lie in [0, 1]")
        if self.dark_rate_cps < 0 or self.slot_duration <= 0:
            raise DomainError("dark rate must be >= 0 and slot duration > 0")
        if not 0 <= self.gate_fraction <= 1:
            raise DomainError("gate fraction must lie in [0, 1]")

    @property
    def transmittance(self) -> float:
        return db_to_transmittance(self.total_loss_db + self.excess_loss_db)

    @property
    def dark_mean(self) -> float:
        """Mean dark counts per detector per output slot."""
        return self.dark_rate_cps * self.slot_duration * self.gate_fraction

    def visibility_table(self, L: int) -> np.ndarray:
        return _per_delay(self.visibility, L, "visibility")

    def offset_table(self, L: int) -> np.ndarray:
        return _per_delay(self.phase_offset, L, "phase offset")


@dataclass(frozen=True)
class ClickRecord:
    round_id: int
    clicks: tuple[tuple[int, int], ...] = field(default_factory=tuple)


def build_train(record: PulseTrainRecord, mu: float) -> OpticalTrain:
    """Spread ``mu`` photons evenly over the train and set phase pi * s_i per pulse."""
    if not mu > 0:
        raise DomainError(f"train intensity must be > 0, got {mu!r}")
    L = record.L
    return OpticalTrain(
        means=np.full(L, mu / L),
        phases=np.pi * np.asarray(record.phase_bits, dtype=float),
    )


def apply_loss(train: OpticalTrain, transmittance: float) -> OpticalTrain:
    if not 0 < transmittance <= 1:
        raise DomainError(f"transmittance must lie in (0, 1], got {transmittance!r}")
    return OpticalTrain(train.means * transmittance, train.phases.copy())


def interferometer_output_batch(
    means: np.ndarray,
    phases: np.ndarray,
    d: np.ndarray,
    visibility: ArrayLike = 1.0,
    delta: ArrayLike = 0.0,
) -> np.ndarray:
    """Detector means for many rounds.

    Args:
        means, phases: ``(B, L)`` per-pulse means and phases.
        d: ``(B,)`` delays in slots.
        visibility, delta: scalars or ``(B,)`` arrays.

    Returns:
        ``(B, 2, 2L - 1)`` array; ``[:, 0]`` is detector 0 (constructive for
        equal phases). Slots at or beyond ``L + d`` are zero.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    phases = np.atleast_2d(np.asarray(phases, dtype=float))
    B, L = means.shape
    d = np.broadcast_to(np.asarray(d, dtype=np.int64), (B,))
    if np.any((d < 0) | (d > L - 1)):
        raise DomainError(f"delay must lie in [0, {L - 1}]")
    V = np.broadcast_to(np.asarray(visibility, dtype=float), (B,))[:, None]
    dl = np.broadcast_to(np.asarray(delta, dtype=float), (B,))[:, None]

    t = np.arange(2 * L - 1)
    a_ok = np.broadcast_to(t < L, (B, t.size))
    a_idx = np.minimum(t, L - 1)
    b = t[None, :] - d[:, None]
    b_ok = (b >= 0) & (b < L)
    b_idx = np.clip(b, 0, L - 1)
    rows = np.arange(B)[:, None]

    ma = np.where(a_ok, means[:, a_idx], 0.0)
    mb = np.where(b_ok, means[rows, b_idx], 0.0)
    overlap = a_ok & b_ok
    dphi = phases[:, a_idx] - phases[rows, b_idx] + dl
    cross = np.where(overlap, 0.5 * np.sqrt(ma * mb) * V * np.cos(dphi), 0.0)
    base = 0.25 * (ma + mb)
    out = np.empty((B, 2, t.size))
    out[:, 0] = np.maximum(base + cross, 0.0)
    out[:, 1] = np.maximum(base - cross, 0.0)
    return out


def interferometer_output(
    train: OpticalTrain, d: int, visibility: float = 1.0, delta: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Mean photon number reaching each detector in every output slot.

    Output slot ``t`` combines pulse ``t`` through the short arm with pulse
    ``t - d`` through the long arm; the timeline has ``L + d`` slots.
    ``d = 0`` is accepted for calibration.
    """
    L = train.L
    if not 0 <= d <= L - 1:
        raise DomainError(f"delay must lie in [0, {L - 1}], got {d!r}")
    if not 0 <= visibility <= 1:
        raise DomainError(f"visibility must lie in [0, 1], got {visibility!r}")
    out = interferometer_output_batch(train.means[None], train.phases[None], np.array([d]), visibility, delta)
    n = L + d
    return out[0, 0, :n].copy(), out[0, 1, :n].copy()


def sample_click_matrix(
    det_means: np.ndarray,
    d: np.ndarray,
    L: int,
    dark_mean: float,
    efficiency: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Threshold-detector clicks for a ``(B, 2, S)`` array of detector means.

    A detector clicks in a slot when a Poisson draw with mean
    ``efficiency * mean + dark_mean`` is non-zero. Slots outside each row's
    ``L + d`` timeline never click.
    """
    lam = efficiency * det_means + dark_mean
    t = np.arange(det_means.shape[-1])
    in_timeline = t[None, :] < (L + np.asarray(d)[:, None])
    p = -np.expm1(-lam)
    p = np.where(in_timeline[:, None, :], p, 0.0)
    return rng.random(det_means.shape) < p


def sample_clicks(
    d0: np.ndarray,
    d1: np.ndarray,
    dark_rate: float,
    detection_efficiency: float,
    slot_duration: float,
    rng: np.random.Generator,
    round_id: int = 0,
) -> ClickRecord:
    """Sample the clicks of one round from per-slot detector means."""
    d0 = np.asarray(d0, dtype=float)
    d1 = np.asarray(d1, dtype=float)
    if np.any(d0 < 0) or np.any(d1 < 0):
        raise DomainError("detector means must be non-negative")
    means = np.stack([d0, d1])[None]
    n = d0.size
    # with d == 0 and L == n the whole row lies inside the timeline
    hits = sample_click_matrix(means, np.array([0]), n, dark_rate * slot_duration, detection_efficiency, rng)[0]
    det, slot = np.nonzero(hits)
    order = np.lexsort((det, slot))
    return ClickRecord(round_id, tuple((int(slot[k]), int(det[k])) for k in order))


def first_valid_clicks(
    clicks: np.ndarray, d: np.ndarray, L: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Earliest overlap-slot click per round.

    Returns ``(valid, slot, detector)`` arrays. When both detectors fire in the
    chosen slot the detector is a fair coin. One tie bit is drawn per round
    regardless, so the random stream does not depend on the outcome.
    """
    B, _, S = clicks.shape
    d = np.asarray(d)
    t = np.arange(S)
    overlap = (t[None, :] >= d[:, None]) & (t[None, :] <= L - 1)
    c0 = clicks[:, 0] & overlap
    c1 = clicks[:, 1] & overlap
    any_click = c0 | c1
    valid = any_click.any(axis=1)
    slot = np.argmax(any_click, axis=1)
    rows = np.arange(B)
    h0 = c0[rows, slot]
    h1 = c1[rows, slot]
    tie = rng.integers(0, 2, size=B)
    det = np.where(h0 & h1, tie, np.where(h1, 1, 0))
    return valid, slot, det


def extract_valid(
    clicks: ClickRecord, d: int, L: int, rng: Optional[np.random.Generator] = None
) -> Optional[tuple[int, int]]:
    """Select the one click of a round that yields a sifted bit, if any.

    Clicks outside the overlap slots ``d .. L-1`` are dropped; among the rest
    the earliest wins. A same-slot double click is resolved by a fair bit
    from ``rng``.
    """
    valid = sorted((s, det) for s, det in clicks.clicks if d <= s <= L - 1)
    if not valid:
        return None
    slot = valid[0][0]
    dets = {det for s, det in valid if s == slot}
    if len(dets) == 1:
        return slot, dets.pop()
    if rng is None:
        raise DomainError("a double click needs an rng to break the tie")
    return slot, int(rng.integers(0, 2))


def per_delay_gain_and_error(L: int, mu: float, channel: ChannelModel) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form detection and error probabilities for each delay ``d = 1..L-1``.

    Within one round the phase differences of the ``L - d`` overlap slots are
    independent fair bits, so every overlap slot is an independent trial with
    a "right" detector of mean ``eta*m*(1 + V cos delta)/2 + dark`` and a
    "wrong" one with the minus sign. The earliest firing slot is kept.

    Returns:
        ``(q, err)`` of length ``L - 1``: probability of a valid detection and
        joint probability of a valid detection that is in error.
    """
    if L < 2 or not mu > 0:
        raise DomainError("need L >= 2 and mu > 0")
    d = np.arange(1, L)
    V = channel.visibility_table(L)[1:]
    delta = channel.offset_table(L)[1:]
    m = channel.efficiency * channel.transmittance * mu / L
    contrast = V * np.cos(delta)
    lam_right = 0.5 * m * (1 + contrast) + channel.dark_mean
    lam_wrong = 0.5 * m * (1 - contrast) + channel.dark_mean
    p_right = -np.expm1(-lam_right)
    p_wrong = -np.expm1(-lam_wrong)
    p_any = -np.expm1(-(lam_right + lam_wrong))
    p_err_slot = p_wrong * (1 - p_right) + 0.5 * p_wrong * p_right
    k = L - d
    q = -np.expm1(-k * (lam_right + lam_wrong))
    err = np.where(p_any > 0, p_err_slot * q / np.where(p_any > 0, p_any, 1.0), 0.0)
    return q, err


def analytic_gain_and_error(L: int, mu: float, channel: ChannelModel) -> tuple[float, float]:
    """Expected gain Q and bit error rate for delays drawn uniformly from 1..L-1."""
    q, err = per_delay_gain_and_error(L, mu, channel)
    Q = float(q.mean())
    e = float(err.sum() / q.sum()) if q.sum() > 0 else 0.0
    return Q, e

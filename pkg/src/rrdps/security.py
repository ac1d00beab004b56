"""Asymptotic key-rate bounds for round-robin DPS with a Poissonian source.

The per-round key rate is

    R = Q - Q*H(e_bit) - QH_PA

where the privacy-amplification cost QH_PA is bounded by assuming that every
detection with more than ``n_th`` photons in the train came from the
high-photon tail of the source, and that the remaining gain ``Q_nth`` came
from trains carrying exactly ``n_th`` photons.

All functions here are pure and thread safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError, InfeasibleSecurityError, PreconditionError

__all__ = [
    "SecurityParams",
    "RateBreakdown",
    "binary_entropy",
    "poisson_pmf",
    "poisson_tail",
    "phase_error_bound",
    "select_threshold",
    "privacy_amplification_cost",
    "key_rate",
    "final_key_length",
    "DEFAULT_TRAINS_PER_SECOND",
]

# 660 ms of key generation per second at 10 kHz.
DEFAULT_TRAINS_PER_SECOND = 6600.0

# Summation of the Poisson series stops once a term falls below this.
PMF_CUTOFF = 1e-15


@dataclass(frozen=True)
class SecurityParams:
    """Inputs to the key-rate bound.

    Attributes:
        L: pulses per train.
        mu: mean total photon number of one train.
        Q: mean number of valid detections per train.
        e_bit: observed bit error rate.
    """

    L: int
    mu: float
    Q: float
    e_bit: float

    def __post_init__(self) -> None:
        if int(self.L) != self.L or self.L < 2:
            raise InfeasibleSecurityError(f"L must be an integer >= 2, got {self.L!r}")
        if not self.mu > 0:
            raise InfeasibleSecurityError(f"mu must be > 0, got {self.mu!r}")
        if not 0.0 <= self.Q <= 1.0:
            raise InfeasibleSecurityError(f"Q must lie in [0, 1], got {self.Q!r}")
        if not 0.0 <= self.e_bit <= 0.5:
            raise InfeasibleSecurityError(f"e_bit must lie in [0, 0.5], got {self.e_bit!r}")


@dataclass(frozen=True)
class RateBreakdown:
    """Every intermediate of the key-rate evaluation.

    ``n_th`` is 0 only for the degenerate ``Q == 0`` case, where no threshold
    is feasible and every cost is zero.
    """

    n_th: int
    q_nth: float
    h_pa: float
    ec_cost: float
    rate_per_round: float
    rate_bps: float

    @property
    def insecure(self) -> bool:
        return self.rate_per_round <= 0.0


def binary_entropy(p: float) -> float:
    """Binary Shannon entropy in bits, with 0*log(0) taken as 0."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {p!r}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def _check_poisson_args(n: int, mu: float) -> None:
    if n < 0:
        raise DomainError(f"photon number must be >= 0, got {n!r}")
    if not mu > 0:
        raise DomainError(f"Poisson mean must be > 0, got {mu!r}")


def poisson_pmf(n: int, mu: float) -> float:
    """P(N = n) for N ~ Poisson(mu), evaluated in log space."""
    _check_poisson_args(n, mu)
    return math.exp(n * math.log(mu) - mu - math.lgamma(n + 1))


def poisson_tail(n_min: int, mu: float) -> float:
    """P(N >= n_min) for N ~ Poisson(mu).

    Below the mean the complement of the lower sum is used; above it the upper
    terms are summed directly, which keeps small tails accurate instead of
    losing them to cancellation against 1.
    """
    _check_poisson_args(n_min, mu)
    if n_min == 0:
        return 1.0
    if n_min <= mu:
        lower = math.fsum(poisson_pmf(n, mu) for n in range(n_min))
        return max(0.0, 1.0 - lower)
    terms = []
    n = n_min
    term = poisson_pmf(n, mu)
    while term > 0.0:
        terms.append(term)
        # terms decrease geometrically once n > mu
        if term < 1e-17 * terms[0]:
            break
        n += 1
        term *= mu / n
    return min(1.0, math.fsum(terms))


def phase_error_bound(n: int, L: int) -> float:
    """Upper bound on the phase error rate of a train holding exactly ``n`` photons."""
    if L < 2:
        raise DomainError(f"train length must be >= 2, got {L!r}")
    if n < 0:
        raise DomainError(f"photon number must be >= 0, got {n!r}")
    return (1.0 - (1.0 - 2.0 / L) ** n) / 2.0


def select_threshold(mu: float, Q: float) -> int:
    """Smallest ``n_th >= 1`` whose Poisson tail above it fits inside the gain.

    Returns the smallest ``n_th`` with ``P(N > n_th) <= Q``. Any larger
    threshold is also feasible but gives a looser bound, because the phase
    error bound grows with the photon number.
    """
    if not 0.0 < Q <= 1.0:
        raise DomainError(f"gain must lie in (0, 1], got {Q!r}")
    if not mu > 0:
        raise DomainError(f"Poisson mean must be > 0, got {mu!r}")
    n_th = 1
    while poisson_tail(n_th + 1, mu) > Q:
        n_th += 1
    return n_th


def privacy_amplification_cost(params: SecurityParams, n_th: int) -> float:
    """Per-round privacy-amplification cost QH_PA for a given threshold.

    The series over ``n > n_th`` is summed until the Poisson term drops below
    ``PMF_CUTOFF`` past the mode; the leftover tail is charged at the maximal
    entropy of one bit so the bound is never underestimated.

    Raises:
        PreconditionError: if ``Q - P(N > n_th)`` is negative.
    """
    L, mu, Q = params.L, params.mu, params.Q
    if n_th < 0:
        raise DomainError(f"threshold must be >= 0, got {n_th!r}")
    q_nth = Q - poisson_tail(n_th + 1, mu)
    if q_nth < 0.0:
        raise PreconditionError(
            f"threshold n_th={n_th} infeasible: tail {Q - q_nth:.6g} exceeds Q={Q:.6g}"
        )
    terms = [q_nth * binary_entropy(phase_error_bound(n_th, L))]
    n = n_th + 1
    while True:
        pmf = poisson_pmf(n, mu)
        if pmf < PMF_CUTOFF and n > mu:
            break
        terms.append(pmf * binary_entropy(phase_error_bound(n, L)))
        n += 1
    terms.append(poisson_tail(n, mu))
    return math.fsum(terms)


def key_rate(
    params: SecurityParams, trains_per_second: float = DEFAULT_TRAINS_PER_SECOND
) -> RateBreakdown:
    """Evaluate the full key-rate bound.

    Negative rates are returned as-is; ``RateBreakdown.insecure`` flags them.
    """
    if params.Q == 0.0:
        return RateBreakdown(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    n_th = select_threshold(params.mu, params.Q)
    q_nth = params.Q - poisson_tail(n_th + 1, params.mu)
    h_pa = privacy_amplification_cost(params, n_th)
    ec_cost = params.Q * binary_entropy(params.e_bit)
    rate = params.Q - ec_cost - h_pa
    return RateBreakdown(
        n_th=n_th,
        q_nth=q_nth,
        h_pa=h_pa,
        ec_cost=ec_cost,
        rate_per_round=rate,
        rate_bps=rate * trains_per_second,
    )


def final_key_length(rate_per_round: float, rounds: int) -> int:
    """Number of secure bits distilled from ``rounds`` trains (floored, never negative)."""
    if rounds < 0:
        raise DomainError(f"round count must be >= 0, got {rounds!r}")
    return int(math.floor(max(0.0, rate_per_round) * rounds))

"""Round-robin DPS protocol layer: encoding, delay choice, announcement, sifting.

Alice and Bob are separate single-owner objects that only exchange immutable
messages. Bob never sees a :class:`PulseTrainRecord`; he learns nothing about
Alice's phases except through his own detections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DomainError, ProtocolError, RandomnessExhausted

__all__ = [
    "BitStream",
    "PulseTrainRecord",
    "DelayChoice",
    "Announcement",
    "SiftedRecord",
    "SessionLedger",
    "N_GATES",
    "SLOT_NS",
    "word_bits",
    "alice_encode",
    "bob_choose_delay",
    "draw_delays",
    "gate_delay_ns",
    "gate_states",
    "interpret_detection",
    "orient_pair",
    "sift",
    "Alice",
    "Bob",
]

N_GATES = 7
SLOT_NS = 2.0


class BitStream:
    """A source of random bits, either a fixed finite sequence or a seeded generator.

    Bits are consumed in order and never reused; asking a finite stream for
    more bits than it has left raises :class:`RandomnessExhausted`.
    """

    def __init__(self, bits: Optional[Iterable[int]] = None, *, rng: Optional[np.random.Generator] = None):
        if (bits is None) == (rng is None):
            raise ValueError("give exactly one of bits or rng")
        self._rng = rng
        self._bits = None if bits is None else np.asarray(list(bits), dtype=np.uint8)
        if self._bits is not None and np.any(self._bits > 1):
            raise DomainError("bit stream may only contain 0 and 1")
        self._pos = 0

    @classmethod
    def from_seed(cls, seed: int) -> "BitStream":
        return cls(rng=np.random.default_rng(seed))

    @classmethod
    def from_string(cls, text: str) -> "BitStream":
        return cls(int(ch) for ch in text if ch in "01")

    @property
    def consumed(self) -> int:
        return self._pos

    def take(self, n: int) -> np.ndarray:
        if n < 0:
            raise DomainError("cannot take a negative number of bits")
        if self._rng is not None:
            self._pos += n
            return self._rng.integers(0, 2, size=n, dtype=np.uint8)
        if self._pos + n > len(self._bits):
            raise RandomnessExhausted(
                f"bit stream exhausted: wanted {n} bits, {len(self._bits) - self._pos} left"
            )
        out = self._bits[self._pos : self._pos + n].copy()
        self._pos += n
        return out

    def take_uint(self, width: int) -> int:
        """Read ``width`` bits as an unsigned integer, most significant bit first."""
        value = 0
        for b in self.take(width):
            value = (value << 1) | int(b)
        return value


@dataclass(frozen=True)
class PulseTrainRecord:
    round_id: int
    phase_bits: tuple[int, ...]

    @property
    def L(self) -> int:
        return len(self.phase_bits)


@dataclass(frozen=True)
class DelayChoice:
    """Bob's measurement setting for one round.

    ``gate_word`` is the binary encoding of ``d``: bit ``i - 1`` set means
    delay gate ``i`` is switched into the path.
    """

    c: int
    d: int
    L: int

    def __post_init__(self) -> None:
        if self.c not in (0, 1):
            raise DomainError(f"direction bit must be 0 or 1, got {self.c!r}")
        if not 1 <= self.d <= self.L - 1:
            raise DomainError(f"delay must lie in [1, {self.L - 1}], got {self.d!r}")

    @property
    def r_signed(self) -> int:
        return self.d * (1 - 2 * self.c)

    @property
    def gate_word(self) -> int:
        return self.d


@dataclass(frozen=True)
class Announcement:
    """Bob's public message: the two pulse indices whose phase difference he measured."""

    round_id: int
    i: int
    j: int

    def __post_init__(self) -> None:
        if self.i == self.j:
            raise DomainError("announced indices must differ")
        if self.i < 0 or self.j < 0:
            raise DomainError("announced indices must be non-negative")

    def check(self, L: int) -> None:
        if not (0 <= self.i < L and 0 <= self.j < L):
            raise ProtocolError(f"announced pair ({self.i}, {self.j}) outside train of length {L}")


@dataclass(frozen=True)
class SiftedRecord:
    round_id: int
    i: int
    j: int
    alice_bit: int
    bob_bit: int
    d: int

    @property
    def error(self) -> bool:
        return self.alice_bit != self.bob_bit


def word_bits(L: int) -> int:
    """Number of random bits needed to pick a delay for trains of length ``L``."""
    if L < 2:
        raise DomainError(f"train length must be >= 2, got {L!r}")
    return max(1, math.ceil(math.log2(L)))


def alice_encode(L: int, randomness: BitStream, round_id: int = 0) -> PulseTrainRecord:
    """Draw ``L`` phase bits (0 for phase 0, 1 for phase pi)."""
    if L < 2:
        raise DomainError(f"train length must be >= 2, got {L!r}")
    bits = randomness.take(L)
    return PulseTrainRecord(round_id, tuple(int(b) for b in bits))


def bob_choose_delay(L: int, randomness: BitStream) -> DelayChoice:
    """Pick a delay uniformly from 1..L-1 by rejection, then a direction bit.

    For L=128 each attempt reads a 7-bit word; the word 0 (no delay) and any
    word >= L are rejected and redrawn.
    """
    width = word_bits(L)
    while True:
        word = randomness.take_uint(width)
        if 1 <= word < L:
            break
    c = int(randomness.take(1)[0])
    return DelayChoice(c=c, d=word, L=L)


def draw_delays(L: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``bob_choose_delay``: returns ``(c, d)`` arrays of length ``size``."""
    width = word_bits(L)
    d = rng.integers(0, 1 << width, size=size)
    bad = (d == 0) | (d >= L)
    while bad.any():
        d[bad] = rng.integers(0, 1 << width, size=int(bad.sum()))
        bad = (d == 0) | (d >= L)
    c = rng.integers(0, 2, size=size)
    return c, d


def gate_delay_ns(gate_word: int) -> float:
    """Total optical delay of a gate word; gate i adds 2**(i-1) slots of 2 ns."""
    if int(gate_word) != gate_word or not 0 <= gate_word < (1 << N_GATES):
        raise DomainError(f"gate word must be an integer in [0, 127], got {gate_word!r}")
    return SLOT_NS * sum(1 << i for i in range(N_GATES) if (gate_word >> i) & 1)


def gate_states(gate_word: int) -> tuple[bool, ...]:
    """On/off state of DG_1..DG_7 for a gate word."""
    if not 0 <= gate_word < (1 << N_GATES):
        raise DomainError(f"gate word must lie in [0, 127], got {gate_word!r}")
    return tuple(bool((gate_word >> i) & 1) for i in range(N_GATES))


def interpret_detection(
    click_slot: int, detector: int, choice: DelayChoice, L: int
) -> Optional[tuple[int, int, int]]:
    """Map a click on the interferometer output timeline to a pulse pair.

    Output slot ``t`` mixes pulse ``t`` (short arm) with pulse ``t - d`` (long
    arm). Only slots where both exist carry key information.

    Returns:
        ``(i, j, bob_bit)`` with ``i < j``, or ``None`` for an edge slot.
    """
    d = choice.d
    if not 0 <= click_slot <= L - 1 + d:
        raise DomainError(f"slot {click_slot} outside output timeline [0, {L - 1 + d}]")
    if detector not in (0, 1):
        raise DomainError(f"detector id must be 0 or 1, got {detector!r}")
    a, b = click_slot, click_slot - d
    if not (0 <= a < L and 0 <= b < L):
        return None
    return min(a, b), max(a, b), detector


def orient_pair(lo: int, hi: int, choice: DelayChoice, L: int) -> tuple[int, int]:
    """Order a pair so that ``j == (i + r') mod L`` for Bob's signed delay."""
    if choice.c == 0:
        i, j = lo, hi
    else:
        i, j = hi, lo
    assert j == (i + choice.r_signed) % L
    return i, j


def sift(record: PulseTrainRecord, announcement: Announcement) -> int:
    """Alice's key bit for an announced pair: ``s_i XOR s_j``."""
    if record.round_id != announcement.round_id:
        raise ProtocolError(
            f"announcement for round {announcement.round_id} applied to round {record.round_id}"
        )
    announcement.check(record.L)
    return record.phase_bits[announcement.i] ^ record.phase_bits[announcement.j]


class SessionLedger:
    """Per-delay sifted-bit and error tallies for one session.

    Index ``d`` of the arrays counts rounds measured at delay ``d``; index 0 is
    never used by key rounds.
    """

    def __init__(self, L: int):
        if L < 2:
            raise DomainError(f"train length must be >= 2, got {L!r}")
        self.L = L
        self.sifted = np.zeros(L, dtype=np.int64)
        self.errors = np.zeros(L, dtype=np.int64)
        self.rounds_sent = 0
        self.valid_detections = 0

    def add_rounds(self, n: int) -> None:
        self.rounds_sent += int(n)

    def update(self, record: SiftedRecord) -> None:
        self.sifted[record.d] += 1
        self.errors[record.d] += int(record.error)
        self.valid_detections += 1

    def update_batch(self, d: np.ndarray, alice_bits: np.ndarray, bob_bits: np.ndarray) -> None:
        d = np.asarray(d, dtype=np.int64)
        err = np.asarray(alice_bits) != np.asarray(bob_bits)
        self.sifted += np.bincount(d, minlength=self.L)[: self.L]
        self.errors += np.bincount(d, weights=err, minlength=self.L)[: self.L].astype(np.int64)
        self.valid_detections += int(d.size)

    def merge(self, other: "SessionLedger") -> "SessionLedger":
        if other.L != self.L:
            raise ProtocolError("cannot merge ledgers for different train lengths")
        self.sifted += other.sifted
        self.errors += other.errors
        self.rounds_sent += other.rounds_sent
        self.valid_detections += other.valid_detections
        return self

    @property
    def total_sifted(self) -> int:
        return int(self.sifted.sum())

    @property
    def total_errors(self) -> int:
        return int(self.errors.sum())

    @property
    def gain(self) -> float:
        return self.valid_detections / self.rounds_sent if self.rounds_sent else 0.0

    @property
    def error_rate(self) -> float:
        n = self.total_sifted
        return self.total_errors / n if n else 0.0

    def error_rates(self) -> np.ndarray:
        """e_bit per delay; delays with no sifted bits report 0."""
        out = np.zeros(self.L)
        np.divide(self.errors, self.sifted, out=out, where=self.sifted > 0)
        return out

    def report(self) -> dict:
        return {
            "rounds_sent": self.rounds_sent,
            "valid_detections": self.valid_detections,
            "sifted": self.total_sifted,
            "errors": self.total_errors,
            "Q": self.gain,
            "e_bit": self.error_rate,
            "e_bit_per_delay": self.error_rates().tolist(),
        }


@dataclass
class Alice:
    """Sender state machine: prepares trains and answers announcements."""

    L: int
    randomness: BitStream
    _records: dict = field(default_factory=dict, repr=False)
    _next_round: int = 0

    def prepare(self) -> PulseTrainRecord:
        record = alice_encode(self.L, self.randomness, round_id=self._next_round)
        self._records[record.round_id] = record
        self._next_round += 1
        return record

    def sift(self, announcement: Announcement) -> int:
        try:
            record = self._records[announcement.round_id]
        except KeyError:
            raise ProtocolError(f"no train was sent in round {announcement.round_id}") from None
        return sift(record, announcement)

    def forget(self, round_id: int) -> None:
        self._records.pop(round_id, None)


@dataclass
class Bob:
    """Receiver state machine: chooses delays, reads clicks, announces pairs."""

    L: int
    randomness: BitStream
    choices: dict = field(default_factory=dict, repr=False)
    _results: dict = field(default_factory=dict, repr=False)

    def choose(self, round_id: int) -> DelayChoice:
        choice = bob_choose_delay(self.L, self.randomness)
        self.choices[round_id] = choice
        return choice

    def detect(self, round_id: int, click: Optional[tuple[int, int]]) -> Optional[Announcement]:
        """Consume the selected click of a round; return the public announcement, if any."""
        choice = self.choices[round_id]
        if click is None:
            return None
        hit = interpret_detection(click[0], click[1], choice, self.L)
        if hit is None:
            return None
        lo, hi, bob_bit = hit
        i, j = orient_pair(lo, hi, choice, self.L)
        self._results[round_id] = (i, j, bob_bit, choice.d)
        return Announcement(round_id, i, j)

    def record(self, announcement: Announcement, alice_bit: int) -> SiftedRecord:
        """Pair Bob's own bit with Alice's for ledger bookkeeping (error estimation)."""
        i, j, bob_bit, d = self._results.pop(announcement.round_id)
        if (i, j) != (announcement.i, announcement.j):
            raise ProtocolError("announcement does not match Bob's detection")
        return SiftedRecord(announcement.round_id, i, j, int(alice_bit), int(bob_bit), d)


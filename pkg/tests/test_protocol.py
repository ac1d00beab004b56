import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rrdps import codec
from rrdps.errors import DomainError, ProtocolError, RandomnessExhausted
from rrdps.protocol import (
    Alice,
    Announcement,
    Bob,
    BitStream,
    DelayChoice,
    PulseTrainRecord,
    SessionLedger,
    SiftedRecord,
    alice_encode,
    bob_choose_delay,
    draw_delays,
    gate_delay_ns,
    gate_states,
    interpret_detection,
    orient_pair,
    sift,
    word_bits,
)


def word(value, width=7):
    return format(value, f"0{width}b")


# --- randomness and encoding -----------------------------------------------

def test_encode_from_fixed_bits():
    rec = alice_encode(4, BitStream.from_string("1011"))
    assert rec.phase_bits == (1, 0, 1, 1)
    assert rec.L == 4


def test_encode_seeded_is_repeatable():
    a = alice_encode(128, BitStream.from_seed(7))
    b = alice_encode(128, BitStream.from_seed(7))
    assert a == b
    assert alice_encode(128, BitStream.from_seed(8)) != a


def test_exhausted_stream_raises():
    s = BitStream.from_string("101")
    with pytest.raises(RandomnessExhausted):
        alice_encode(4, s)
    assert s.consumed == 0


def test_bits_are_not_reused():
    s = BitStream.from_string("10110010")
    assert list(s.take(4)) == [1, 0, 1, 1]
    assert list(s.take(4)) == [0, 0, 1, 0]
    with pytest.raises(RandomnessExhausted):
        s.take(1)


def test_bitstream_rejects_non_bits():
    with pytest.raises(DomainError):
        BitStream([0, 2])
    with pytest.raises(ValueError):
        BitStream()


def test_take_uint_msb_first():
    assert BitStream.from_string("0000101").take_uint(7) == 5


# --- delay choice ------------------------------------------------------------

def test_word_bits():
    assert word_bits(128) == 7
    assert word_bits(2) == 1
    assert word_bits(100) == 7


def test_delay_one_uses_first_gate():
    ch = bob_choose_delay(128, BitStream.from_string(word(1) + "0"))
    assert (ch.d, ch.c, ch.gate_word) == (1, 0, 1)
    assert gate_states(ch.gate_word) == (True,) + (False,) * 6
    assert gate_delay_ns(ch.gate_word) == 2.0


def test_delay_127_uses_all_gates():
    ch = bob_choose_delay(128, BitStream.from_string(word(127) + "1"))
    assert (ch.d, ch.c) == (127, 1)
    assert gate_states(ch.gate_word) == (True,) * 7
    assert gate_delay_ns(ch.gate_word) == 254.0


def test_zero_word_rejected():
    s = BitStream.from_string(word(0) + word(5) + "1")
    ch = bob_choose_delay(128, s)
    assert ch.d == 5 and ch.c == 1
    assert s.consumed == 15


def test_oversized_words_rejected_for_small_L():
    # L=5 needs 3-bit words; 5, 6, 7 and 0 are all rejected
    s = BitStream.from_string("101" "110" "111" "000" "011" "0")
    assert bob_choose_delay(5, s).d == 3


def test_delay_exhaustion():
    with pytest.raises(RandomnessExhausted):
        bob_choose_delay(128, BitStream.from_string(word(0) + word(0)))


def test_draw_delays_uniform():
    rng = np.random.default_rng(3)
    c, d = draw_delays(8, 70_000, rng)
    assert d.min() == 1 and d.max() == 7
    counts = np.bincount(d, minlength=8)[1:]
    expected = 10_000
    assert np.all(np.abs(counts - expected) < 4 * np.sqrt(expected))
    assert abs(c.mean() - 0.5) < 0.01


def test_gate_bijection():
    delays = {gate_delay_ns(w) for w in range(128)}
    assert delays == {2.0 * k for k in range(128)}
    assert gate_delay_ns(0) == 0.0
    with pytest.raises(DomainError):
        gate_delay_ns(128)


def test_delay_choice_bounds():
    with pytest.raises(DomainError):
        DelayChoice(c=0, d=0, L=8)
    with pytest.raises(DomainError):
        DelayChoice(c=0, d=8, L=8)
    with pytest.raises(DomainError):
        DelayChoice(c=2, d=1, L=8)
    assert DelayChoice(c=1, d=3, L=8).r_signed == -3


# --- detection mapping ---------------------------------------------------------

@pytest.mark.parametrize("d", [1, 5, 127])
def test_first_overlap_slot(d):
    assert interpret_detection(d, 1, DelayChoice(0, d, 128), 128) == (0, d, 1)


@pytest.mark.parametrize("d", [1, 5, 127])
def test_edge_slots_carry_nothing(d):
    ch = DelayChoice(0, d, 128)
    assert interpret_detection(0, 0, ch, 128) is None
    assert interpret_detection(127 + d, 0, ch, 128) is None


def test_slot_out_of_range():
    ch = DelayChoice(0, 3, 8)
    with pytest.raises(DomainError):
        interpret_detection(11, 0, ch, 8)
    with pytest.raises(DomainError):
        interpret_detection(-1, 0, ch, 8)


def test_slot_enumeration_L8():
    L = 8
    for d in range(1, L):
        ch = DelayChoice(0, d, L)
        pairs = []
        for t in range(L + d):
            hit = interpret_detection(t, 0, ch, L)
            if hit is not None:
                pairs.append(hit[:2])
        assert len(pairs) == L - d
        assert pairs == [(k, k + d) for k in range(L - d)]


@given(st.integers(2, 128).flatmap(lambda L: st.tuples(
    st.just(L), st.integers(1, L - 1), st.integers(0, 1), st.integers(0, 10_000))))
def test_orientation_matches_signed_delay(args):
    L, d, c, t = args
    ch = DelayChoice(c, d, L)
    slot = d + t % (L - d)
    lo, hi, _ = interpret_detection(slot, 0, ch, L)
    i, j = orient_pair(lo, hi, ch, L)
    assert j == (i + ch.r_signed) % L
    assert {i, j} == {lo, hi}


# --- sifting and ledger --------------------------------------------------------

def test_sift_xor():
    rec = PulseTrainRecord(0, (0, 1, 1, 0))
    assert sift(rec, Announcement(0, 0, 2)) == 1
    assert sift(rec, Announcement(0, 1, 2)) == 0


def test_sift_round_mismatch():
    with pytest.raises(ProtocolError):
        sift(PulseTrainRecord(1, (0, 1)), Announcement(2, 0, 1))


def test_sift_pair_outside_train():
    with pytest.raises(ProtocolError):
        sift(PulseTrainRecord(0, (0, 1, 0)), Announcement(0, 0, 3))


def test_announcement_distinct_indices():
    with pytest.raises(DomainError):
        Announcement(0, 2, 2)


def test_ledger_all_matching():
    led = SessionLedger(8)
    for k in range(10):
        led.update(SiftedRecord(k, 0, 3, 1, 1, 3))
    led.add_rounds(100)
    assert led.error_rate == 0.0
    assert led.gain == pytest.approx(0.1)


def test_ledger_per_delay_rate():
    led = SessionLedger(8)
    for k in range(10):
        led.update(SiftedRecord(k, 0, 3, 1, int(k < 4), 3))
    assert led.error_rates()[3] == pytest.approx(0.6)
    led2 = SessionLedger(8)
    for k in range(10):
        led2.update(SiftedRecord(k, 0, 3, 1, int(k >= 4), 3))
    assert led2.error_rates()[3] == pytest.approx(0.4)


def test_ledger_batch_equals_single_updates():
    rng = np.random.default_rng(1)
    d = rng.integers(1, 16, 500)
    a = rng.integers(0, 2, 500)
    b = rng.integers(0, 2, 500)
    one = SessionLedger(16)
    for k in range(500):
        one.update(SiftedRecord(k, 0, int(d[k]), int(a[k]), int(b[k]), int(d[k])))
    many = SessionLedger(16)
    many.update_batch(d, a, b)
    assert np.array_equal(one.sifted, many.sifted)
    assert np.array_equal(one.errors, many.errors)


def test_ledger_merge():
    a, b = SessionLedger(4), SessionLedger(4)
    a.update(SiftedRecord(0, 0, 1, 0, 1, 1))
    b.update(SiftedRecord(1, 0, 2, 1, 1, 2))
    a.add_rounds(3)
    b.add_rounds(5)
    a.merge(b)
    assert a.total_sifted == 2 and a.total_errors == 1 and a.rounds_sent == 8
    with pytest.raises(ProtocolError):
        a.merge(SessionLedger(5))


# --- the two parties -------------------------------------------------------------

def test_alice_bob_exchange_without_noise():
    L = 4
    alice = Alice(L, BitStream.from_string("0110"))
    bob = Bob(L, BitStream.from_string("10" + "1"))  # d=2, c=1
    rec = alice.prepare()
    ch = bob.choose(rec.round_id)
    assert (ch.d, ch.c) == (2, 1)
    # slot 3 mixes pulses 3 and 1; bits 0 and 1 differ, so D1 fires
    ann = bob.detect(rec.round_id, (3, 1))
    assert (ann.i, ann.j) == (3, 1)
    out = bob.record(ann, alice.sift(ann))
    assert out.alice_bit == 1 and out.bob_bit == 1 and not out.error


def test_bob_edge_click_gives_no_announcement():
    bob = Bob(4, BitStream.from_string("01" "0"))
    bob.choose(0)
    assert bob.detect(0, (0, 0)) is None
    assert bob.detect(0, None) is None


def test_alice_unknown_round():
    alice = Alice(4, BitStream.from_seed(0))
    with pytest.raises(ProtocolError):
        alice.sift(Announcement(9, 0, 1))


# --- codec ---------------------------------------------------------------------

@given(st.integers(0, 2**64 - 1), st.integers(0, 65535), st.integers(0, 65535))
def test_announcement_roundtrip(rid, i, j):
    if i == j:
        return
    msg = Announcement(rid, i, j)
    blob = codec.encode_announcement(msg)
    assert len(blob) == 2 + 12
    assert codec.decode_announcement(blob) == msg


@given(st.integers(0, 2**64 - 1), st.integers(0, 127), st.integers(0, 127),
       st.integers(0, 1), st.integers(0, 1), st.integers(1, 127))
def test_sifted_roundtrip(rid, i, j, a, b, d):
    rec = SiftedRecord(rid, i, j, a, b, d)
    assert codec.decode_sifted(codec.encode_sifted(rec)) == rec


@given(st.integers(0, 2**32), st.lists(st.tuples(st.integers(0, 300), st.integers(0, 1)), max_size=50))
def test_clicks_roundtrip(rid, clicks):
    rid2, back = codec.decode_clicks(codec.encode_clicks(rid, clicks))
    assert rid2 == rid and back == clicks


def test_frame_stream_roundtrip():
    recs = [SiftedRecord(k, k % 7, k % 7 + 1, k & 1, 1, 1) for k in range(20)]
    buf = io.BytesIO()
    assert codec.write_frames(buf, (codec.encode_sifted(r) for r in recs)) == 20
    buf.seek(0)
    assert [codec.decode_sifted(f) for f in codec.iter_frames(buf)] == recs


def test_truncated_frames():
    blob = codec.encode_sifted(SiftedRecord(1, 0, 1, 0, 0, 1))
    with pytest.raises(ProtocolError):
        codec.decode_sifted(blob[:-1])
    with pytest.raises(ProtocolError):
        list(codec.iter_frames(io.BytesIO(blob[:-3])))
    with pytest.raises(ProtocolError):
        codec.decode_announcement(blob)

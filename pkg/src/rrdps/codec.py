"""Length-prefixed binary framing for protocol messages and click dumps.

Every frame is a little-endian ``uint16`` payload length followed by the
payload. Payload layouts (all little-endian):

=============  ==========================================================
Announcement   round_id u64, i u16, j u16
SiftedRecord   round_id u64, i u16, j u16, alice_bit u8, bob_bit u8, d u16
ClickRecord    round_id u64, count u16, then count x (slot u16, detector u8)
=============  ==========================================================
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Iterator

from .errors import ProtocolError
from .protocol import Announcement, SiftedRecord

__all__ = [
    "encode_announcement",
    "decode_announcement",
    "encode_sifted",
    "decode_sifted",
    "encode_clicks",
    "decode_clicks",
    "frame",
    "iter_frames",
    "write_frames",
]

_LEN = struct.Struct("<H")
_ANN = struct.Struct("<QHH")
_SIFT = struct.Struct("<QHHBBH")
_CLICK_HEAD = struct.Struct("<QH")
_CLICK = struct.Struct("<HB")


def frame(payload: bytes) -> bytes:
    if len(payload) > 0xFFFF:
        raise ProtocolError(f"payload of {len(payload)} bytes does not fit a frame")
    return _LEN.pack(len(payload)) + payload


def _unframe(data: bytes, layout: struct.Struct) -> tuple:
    if len(data) < _LEN.size:
        raise ProtocolError("truncated frame header")
    (n,) = _LEN.unpack_from(data)
    payload = data[_LEN.size : _LEN.size + n]
    if n != layout.size or len(payload) != n:
        raise ProtocolError(f"expected a {layout.size}-byte payload, frame says {n} (got {len(payload)})")
    return layout.unpack(payload)


def encode_announcement(msg: Announcement) -> bytes:
    return frame(_ANN.pack(msg.round_id, msg.i, msg.j))


def decode_announcement(data: bytes) -> Announcement:
    return Announcement(*_unframe(data, _ANN))


def encode_sifted(rec: SiftedRecord) -> bytes:
    return frame(_SIFT.pack(rec.round_id, rec.i, rec.j, rec.alice_bit, rec.bob_bit, rec.d))


def decode_sifted(data: bytes) -> SiftedRecord:
    return SiftedRecord(*_unframe(data, _SIFT))


def encode_clicks(round_id: int, clicks: list[tuple[int, int]]) -> bytes:
    body = b"".join(_CLICK.pack(slot, det) for slot, det in clicks)
    return frame(_CLICK_HEAD.pack(round_id, len(clicks)) + body)


def decode_clicks(data: bytes) -> tuple[int, list[tuple[int, int]]]:
    (n,) = _LEN.unpack_from(data)
    payload = data[_LEN.size : _LEN.size + n]
    if len(payload) != n or n < _CLICK_HEAD.size:
        raise ProtocolError("truncated click record")
    round_id, count = _CLICK_HEAD.unpack_from(payload)
    if n != _CLICK_HEAD.size + count * _CLICK.size:
        raise ProtocolError(f"click record claims {count} clicks but carries {n} bytes")
    clicks = [
        _CLICK.unpack_from(payload, _CLICK_HEAD.size + k * _CLICK.size) for k in range(count)
    ]
    return round_id, clicks


def iter_frames(stream: BinaryIO) -> Iterator[bytes]:
    """Yield each complete frame (header included) from a binary stream."""
    while True:
        head = stream.read(_LEN.size)
        if not head:
            return
        if len(head) < _LEN.size:
            raise ProtocolError("truncated frame header at end of stream")
        (n,) = _LEN.unpack(head)
        payload = stream.read(n)
        if len(payload) < n:
            raise ProtocolError("truncated frame payload at end of stream")
        yield head + payload


def write_frames(stream: BinaryIO, frames) -> int:
    count = 0
    for f in frames:
        stream.write(f)
        count += 1
    return count

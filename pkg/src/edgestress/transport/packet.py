"""Application-layer payload layout.

Sized payloads of 8 bytes or more start with a big-endian 64-bit sequence
number followed by filler; smaller sizes and literal payloads carry no
sequence number and cannot be tracked per packet.
"""
from __future__ import annotations

import random
import string
import struct
from dataclasses import dataclass
from typing import Optional

SEQ_BYTES = 8
_SEQ = struct.Struct(">Q")
_FILLER_ALPHABET = (string.ascii_letters + string.digits).encode()


@dataclass(frozen=True)
class Packet:
    seq: Optional[int]
    filler: bytes = b""
    literal: Optional[bytes] = None

    def encode(self) -> bytes:
        if self.literal is not None:
            return self.literal
        if self.seq is None:
            return self.filler
        return _SEQ.pack(self.seq) + self.filler

    @property
    def size(self) -> int:
        return len(self.encode())


def tracked(payload_bytes: int, literal: Optional[str] = None) -> bool:
    return literal is None and payload_bytes >= SEQ_BYTES


def make_filler(nbytes: int, seed: int = 0) -> bytes:
    """Deterministic printable filler of ``nbytes`` bytes."""
    rng = random.Random(seed)
    return bytes(rng.choice(_FILLER_ALPHABET) for _ in range(max(0, nbytes)))


class PayloadFactory:
    """Builds wire payloads for one device type, reusing its filler bytes."""

    def __init__(self, payload_bytes: int, literal: Optional[str] = None, seed: int = 0):
        self.literal = literal.encode("utf-8") if literal is not None else None
        self.tracked = tracked(payload_bytes, literal)
        filler_len = payload_bytes - SEQ_BYTES if self.tracked else payload_bytes
        self.filler = b"" if self.literal is not None else make_filler(filler_len, seed)

    def packet(self, seq: Optional[int]) -> Packet:
        if self.literal is not None:
            return Packet(None, literal=self.literal)
        if not self.tracked:
            return Packet(None, self.filler)
        return Packet(seq, self.filler)

    def encode(self, seq: int) -> bytes:
        if self.literal is not None:
            return self.literal
        if not self.tracked:
            return self.filler
        return _SEQ.pack(seq) + self.filler


def decode_seq(data: bytes) -> Optional[int]:
    if len(data) < SEQ_BYTES:
        return None
    return _SEQ.unpack_from(data)[0]

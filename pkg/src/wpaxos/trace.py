"""Canonical trace records.

A trace file is a short header line followed by length-prefixed records. Each
record is the compact JSON encoding of ``[tag, time, ...fields]``; lengths are
4-byte big-endian. Two runs with the same configuration and seed must produce
identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from typing import BinaryIO, Iterable, Iterator, List

MAGIC = b"WPXTRACE1\n"

META = 0
SEND = 1
DELIVER = 2
DROP = 3
TIMER = 4
FAULT = 5
INVOKE = 6
REPLY = 7
COMMIT = 8
EXEC = 9
P1A = 10
OWN = 11
LOSE = 12
NACK = 13
FORWARD = 14
HANDOVER = 15
VIOLATION = 16
ABORT = 17
CONFIG = 18
RETRY = 19

TAG_NAMES = {
    META: "meta", SEND: "send", DELIVER: "deliver", DROP: "drop", TIMER: "timer",
    FAULT: "fault", INVOKE: "invoke", REPLY: "reply", COMMIT: "commit", EXEC: "exec",
    P1A: "p1a", OWN: "own", LOSE: "lose", NACK: "nack", FORWARD: "forward",
    HANDOVER: "handover", VIOLATION: "violation", ABORT: "abort", CONFIG: "config",
    RETRY: "retry",
}

_LEN = struct.Struct(">I")


def encode_record(rec: list) -> bytes:
    body = json.dumps(rec, separators=(",", ":"), ensure_ascii=True).encode()
    return _LEN.pack(len(body)) + body


class TraceWriter:
    """Accumulates records in memory and hashes them as they arrive."""

    def __init__(self, levels: Iterable[int] | None = None):
        self._buf = io.BytesIO()
        self._buf.write(MAGIC)
        self._hash = hashlib.sha256(MAGIC)
        self.count = 0
        self.skip = frozenset(levels or ())

    def add(self, rec: list) -> None:
        if rec[0] in self.skip:
            return
        data = encode_record(rec)
        self._buf.write(data)
        self._hash.update(data)
        self.count += 1

    def getvalue(self) -> bytes:
        return self._buf.getvalue()

    def digest(self) -> str:
        return self._hash.hexdigest()

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.getvalue())


def iter_records(data: bytes | BinaryIO) -> Iterator[list]:
    if not isinstance(data, (bytes, bytearray)):
        data = data.read()
    if not data.startswith(MAGIC):
        raise ValueError("not a wpaxos trace (bad header)")
    pos = len(MAGIC)
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise ValueError(f"truncated record length at byte {pos}")
        (size,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + size > n:
            raise ValueError(f"truncated record body at byte {pos}")
        yield json.loads(data[pos:pos + size])
        pos += size


def read_trace(path) -> List[list]:
    with open(path, "rb") as fh:
        return list(iter_records(fh.read()))

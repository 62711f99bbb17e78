"""Length-prefixed control-plane frames.

Frame layout (all little-endian)::

    u32 length   # bytes that follow: 2 + 8 + len(body)
    u16 kind
    u64 epoch
    body         # kind-specific, see LAYOUTS

A body is a fixed struct head followed by an optional variable tail
(raw bytes, a utf-8 string, or a list of u32 pairs / u32 values).
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

HEADER = struct.Struct("<IHQ")
LEN_PREFIX = struct.Struct("<I")
MAX_FRAME = 1 << 30
NO_ITER = -1


class ProtocolError(ValueError):
    pass


class Kind(enum.IntEnum):
    REGISTER_DAEMON = 1
    REGISTER_WORKER = 2
    FAULT_NOTIFY = 3
    REINIT_CMD = 4
    ROLLBACK = 5
    BARRIER_ENTER = 6
    BARRIER_RELEASE = 7
    CKPT_PUT = 8
    CKPT_GET = 9
    CKPT_DATA = 10
    CKPT_REPORT = 11
    SHUTDOWN = 12
    # runtime plumbing beyond the recovery protocol proper
    SPAWN = 13
    DATA = 14
    COLL = 15
    COLL_RESULT = 16
    WORKER_DONE = 17
    ULFM_REQ = 18
    ULFM_REPLY = 19
    KEEPALIVE = 20


class CollOp(enum.IntEnum):
    SUM = 1
    MAX = 2
    MIN = 3
    BCAST = 4
    GATHER = 5


class UlfmOp(enum.IntEnum):
    REVOKE = 1
    SHRINK = 2
    AGREE = 3
    MERGE = 4


# kind -> (head struct, head field names, tail name, tail type)
# tail types: "bytes", "str", "pairs" (list of (u32,u32)), "u32s", None
LAYOUTS: Dict[Kind, Tuple[str, Tuple[str, ...], Any, Any]] = {
    Kind.REGISTER_DAEMON: ("<II", ("daemon", "pid"), "address", "str"),
    Kind.REGISTER_WORKER: ("<II", ("rank", "pid"), None, None),
    Kind.FAULT_NOTIFY: ("<I", ("rank",), None, None),
    Kind.REINIT_CMD: ("<q", ("commit_iter",), "assignment", "pairs"),
    Kind.ROLLBACK: ("<q", ("commit_iter",), None, None),
    Kind.BARRIER_ENTER: ("<II", ("rank", "seq"), None, None),
    Kind.BARRIER_RELEASE: ("<I", ("seq",), None, None),
    Kind.CKPT_PUT: ("<IIq", ("dst", "rank", "iter"), "payload", "bytes"),
    Kind.CKPT_GET: ("<IIq", ("dst", "rank", "iter"), None, None),
    Kind.CKPT_DATA: ("<IIqB", ("dst", "rank", "iter", "ok"), "payload", "bytes"),
    Kind.CKPT_REPORT: ("<Iqddd", ("rank", "iter", "t_app", "t_write", "t_read"), None, None),
    Kind.SHUTDOWN: ("", (), None, None),
    Kind.SPAWN: ("<IBq", ("rank", "state", "commit_iter"), None, None),
    Kind.DATA: ("<III", ("src", "dst", "tag"), "payload", "bytes"),
    Kind.COLL: ("<IIBI", ("rank", "seq", "op", "arg"), "payload", "bytes"),
    Kind.COLL_RESULT: ("<I", ("seq",), "payload", "bytes"),
    Kind.WORKER_DONE: ("<Ii", ("rank", "status"), "payload", "bytes"),
    Kind.ULFM_REQ: ("<IBI", ("rank", "op", "flag"), None, None),
    Kind.ULFM_REPLY: ("<BIq", ("op", "flag", "commit_iter"), "ranks", "u32s"),
    Kind.KEEPALIVE: ("", (), None, None),
}

_STRUCTS = {k: struct.Struct(v[0]) for k, v in LAYOUTS.items()}
_TAIL_DEFAULTS = {"bytes": b"", "str": "", "pairs": (), "u32s": ()}


@dataclass
class ControlMessage:
    kind: Kind
    epoch: int = 0
    fields: Dict[str, Any] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["fields"][name]
        except KeyError:
            raise AttributeError(name) from None


def msg(kind: Kind, epoch: int = 0, **fields) -> ControlMessage:
    _, names, tail, ttype = LAYOUTS[kind]
    expected = set(names) | ({tail} if tail else set())
    if tail and tail not in fields:
        fields[tail] = _TAIL_DEFAULTS[ttype]
    if set(fields) != expected:
        raise ProtocolError(f"{kind.name}: fields {sorted(fields)} != {sorted(expected)}")
    return ControlMessage(Kind(kind), epoch, fields)


def encode_body(m: ControlMessage) -> bytes:
    _, names, tail, ttype = LAYOUTS[m.kind]
    head = _STRUCTS[m.kind].pack(*(m.fields[n] for n in names))
    if tail is None:
        return head
    value = m.fields[tail]
    if ttype == "bytes":
        return head + bytes(value)
    if ttype == "str":
        return head + value.encode()
    if ttype == "pairs":
        return head + struct.pack("<I", len(value)) + b"".join(struct.pack("<II", a, b) for a, b in value)
    if ttype == "u32s":
        return head + struct.pack(f"<I{len(value)}I", len(value), *value)
    raise AssertionError(ttype)


def decode_body(kind: int, body: bytes) -> Dict[str, Any]:
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    _, names, tail, ttype = LAYOUTS[kind]
    st = _STRUCTS[kind]
    if len(body) < st.size:
        raise ProtocolError(f"{kind.name}: body too short ({len(body)} < {st.size})")
    fields = dict(zip(names, st.unpack_from(body)))
    rest = body[st.size:]
    if tail is None:
        if rest:
            raise ProtocolError(f"{kind.name}: {len(rest)} trailing bytes")
    elif ttype == "bytes":
        fields[tail] = bytes(rest)
    elif ttype == "str":
        fields[tail] = rest.decode()
    else:
        if len(rest) < 4:
            raise ProtocolError(f"{kind.name}: missing list count")
        (n,) = struct.unpack_from("<I", rest)
        width = 8 if ttype == "pairs" else 4
        if len(rest) != 4 + n * width:
            raise ProtocolError(f"{kind.name}: list length mismatch")
        flat = struct.unpack_from(f"<{n * width // 4}I", rest, 4)
        fields[tail] = [tuple(flat[i:i + 2]) for i in range(0, len(flat), 2)] if ttype == "pairs" else list(flat)
    return fields


def encode(m: ControlMessage) -> bytes:
    body = encode_body(m)
    return HEADER.pack(2 + 8 + len(body), m.kind, m.epoch) + body


def decode(frame: bytes) -> ControlMessage:
    """Decode exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise ProtocolError("short frame")
    length, kind, epoch = HEADER.unpack_from(frame)
    if length != len(frame) - LEN_PREFIX.size:
        raise ProtocolError(f"frame length {length} does not match {len(frame) - 4} bytes")
    fields = decode_body(kind, frame[HEADER.size:])
    return ControlMessage(Kind(kind), epoch, fields)


class FrameReader:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[ControlMessage]:
        self._buf += data
        out, off = [], 0
        buf = self._buf
        while len(buf) - off >= LEN_PREFIX.size:
            (length,) = LEN_PREFIX.unpack_from(buf, off)
            if length < 10 or length > MAX_FRAME:
                raise ProtocolError(f"bad frame length {length}")
            end = off + LEN_PREFIX.size + length
            if len(buf) < end:
                break
            out.append(decode(bytes(buf[off:end])))
            off = end
        del buf[:off]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)

"""Binary messages between CC-clients and the CC-server.

All integers and floats are little-endian.  A state report is the app id
followed by the twelve state values as f32.  Several reports share one
packet as a batch; the server answers each with a model update carrying
a serialized network.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .featurize import SystemState

REPORT_FMT = struct.Struct("<H12f")
REPORT_BYTES = REPORT_FMT.size  # 50
COUNT_FMT = struct.Struct("<H")
UPDATE_HEADER = struct.Struct("<HI")
FRAME_HEADER = struct.Struct("<BI")
WIRE_PACKET = 1500
# largest batch whose encoding fits one 1500 B packet after 40 B of IP/TCP
# headers and 6 B of framing
MAX_BATCH = 29

FRAME_BATCH = 1
FRAME_UPDATES = 2


class ProtocolError(ValueError):
    pass


class TruncatedMessage(ProtocolError):
    pass


class BadLength(ProtocolError):
    pass


class BatchTooLarge(ProtocolError):
    pass


@dataclass(frozen=True)
class StateReport:
    app_id: int
    state: SystemState


@dataclass(frozen=True)
class ModelUpdateMsg:
    app_id: int
    snapshot: bytes


def encode_state_report(state: SystemState, app_id: int) -> bytes:
    if not 0 <= app_id <= 0xFFFF:
        raise ValueError(f"app_id {app_id} does not fit u16")
    return REPORT_FMT.pack(app_id, *state.to_array().tolist())


def decode_state_report(data: bytes) -> StateReport:
    if len(data) < REPORT_BYTES:
        raise TruncatedMessage(f"state report needs {REPORT_BYTES} bytes, got {len(data)}")
    if len(data) > REPORT_BYTES:
        raise BadLength(f"state report is {REPORT_BYTES} bytes, got {len(data)}")
    app_id, *values = REPORT_FMT.unpack(data)
    return StateReport(app_id, SystemState.from_values(values))


def encode_batch(reports) -> bytes:
    """``reports``: sequence of :class:`StateReport` or ``(app_id, state)``."""
    reports = list(reports)
    if not reports:
        raise ValueError("a batch needs at least one report")
    if len(reports) > MAX_BATCH:
        raise BatchTooLarge(f"{len(reports)} reports exceed the batch limit of {MAX_BATCH}")
    parts = [COUNT_FMT.pack(len(reports))]
    for r in reports:
        app_id, state = (r.app_id, r.state) if isinstance(r, StateReport) else r
        parts.append(encode_state_report(state, app_id))
    return b"".join(parts)


def decode_batch(data: bytes) -> list:
    if len(data) < COUNT_FMT.size:
        raise TruncatedMessage("batch shorter than its count field")
    (count,) = COUNT_FMT.unpack_from(data)
    if count > MAX_BATCH:
        raise BatchTooLarge(f"batch claims {count} reports")
    need = COUNT_FMT.size + count * REPORT_BYTES
    if len(data) < need:
        raise TruncatedMessage(f"batch of {count} needs {need} bytes, got {len(data)}")
    if len(data) > need:
        raise BadLength(f"batch of {count} is {need} bytes, got {len(data)}")
    out = []
    for i in range(count):
        off = COUNT_FMT.size + i * REPORT_BYTES
        out.append(decode_state_report(data[off:off + REPORT_BYTES]))
    return out


def batch_size_bytes(n: int) -> int:
    return COUNT_FMT.size + n * REPORT_BYTES


def encode_model_update(msg: ModelUpdateMsg) -> bytes:
    return UPDATE_HEADER.pack(msg.app_id, len(msg.snapshot)) + bytes(msg.snapshot)


def decode_model_update(data: bytes, offset: int = 0):
    """Returns ``(msg, next_offset)`` so updates can be read back to back."""
    if len(data) - offset < UPDATE_HEADER.size:
        raise TruncatedMessage("model update shorter than its header")
    app_id, n = UPDATE_HEADER.unpack_from(data, offset)
    start = offset + UPDATE_HEADER.size
    if len(data) - start < n:
        raise TruncatedMessage(f"model update declares {n} bytes, {len(data) - start} present")
    return ModelUpdateMsg(app_id, bytes(data[start:start + n])), start + n


def decode_model_updates(data: bytes) -> list:
    out, off = [], 0
    while off < len(data):
        msg, off = decode_model_update(data, off)
        out.append(msg)
    return out


def frame(kind: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(kind, len(payload)) + payload


def read_frame(stream):
    """Read one frame from a binary stream; ``None`` at clean EOF."""
    head = stream.read(FRAME_HEADER.size)
    if not head:
        return None
    if len(head) < FRAME_HEADER.size:
        raise TruncatedMessage("frame header cut short")
    kind, n = FRAME_HEADER.unpack(head)
    payload = stream.read(n)
    if len(payload) < n:
        raise TruncatedMessage(f"frame declares {n} bytes, got {len(payload)}")
    return kind, payload


def overhead_ratio(n_apps: int, interval_packets: int, mss_on_wire: int = WIRE_PACKET) -> float:
    """Control bytes per data byte when every app reports once per
    ``interval_packets`` data packets and reports travel in whole batch
    packets."""
    if n_apps < 1 or interval_packets < 1:
        raise ValueError("n_apps and interval_packets must be positive")
    packets = math.ceil(n_apps / MAX_BATCH)
    return packets * WIRE_PACKET / (n_apps * interval_packets * mss_on_wire)

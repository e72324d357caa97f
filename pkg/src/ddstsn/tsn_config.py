"""Configuration plane: scheduler-to-agent RPC hand-off of per-switch XML
documents, agent translation into raw Ethernet configuration frames
(EtherType 0xF123), switch-side atomic application with status replies, and
endpoint release-time notification.

Frame layout (bit-exact wire contract of this repo):

    dst_mac(6) src_mac(6) ether_type(2,=0xF123) tsn_type(1) device_id(1)
    config_len(2,BE) tsn_config(config_len bytes)

``tsn_config`` always begins with a one-byte segment header: bit 7 is the
last-segment flag, bits 0..6 the segment sequence number. Payloads larger
than one frame are split across consecutive frames. A frame never exceeds
1514 bytes.

Gate payload (type 2): hyperperiod(8 BE), port count(1), then per port:
port(1) guard(8 BE) entry count(2 BE) and per entry queue(1) start(8 BE)
duration(8 BE). Stream payload (type 3): stream count(2 BE), then per
stream: src ip(4) port(2) dst ip(4) port(2) vid(2) priority(1)
recovery window(2 BE) function count(1) and per function port(1) role(1).
Time-sync payload (type 1) is opaque.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .config_doc import (
    ConfigSchemaError,
    StreamConfig,
    StreamFunction,
    StreamRole,
    SwitchConfig,
    parse_switch_config,
)
from .flow_ident import FlowId
from .model import Locator
from .scheduler import GclEntry, PortSchedule

ETHER_TYPE = 0xF123
MAX_FRAME_BYTES = 1514
_HEADER_BYTES = 6 + 6 + 2 + 1 + 1 + 2
_SEGMENT_CAPACITY = MAX_FRAME_BYTES - _HEADER_BYTES - 1  # minus the segment header byte
_LAST_FLAG = 0x80

AGENT_MAC = bytes.fromhex("02545300ff01")


class TsnProtocol(Enum):
    AS = 1    # time sync; opaque payload
    QBV = 2   # gate control lists
    CB = 3    # stream replication/elimination


class StatusResult(Enum):
    OK = "Ok"
    PARSE_ERROR = "ParseError"
    APPLY_ERROR = "ApplyError"


class MalformedFrame(Exception):
    """Bytes are not a valid configuration frame."""


class AgentUnreachable(Exception):
    """The configuration agent did not accept the RPC."""


class NotifyTimeout(Exception):
    """An endpoint did not acknowledge its release notice."""


def switch_mac(device_id: int) -> bytes:
    return bytes.fromhex("0254530000") + bytes([device_id])


@dataclass(frozen=True)
class TsnConfigFrame:
    dst_mac: bytes
    src_mac: bytes
    tsn_type: TsnProtocol
    device_id: int
    tsn_config: bytes

    def __post_init__(self) -> None:
        if len(self.dst_mac) != 6 or len(self.src_mac) != 6:
            raise ValueError("MAC addresses must be 6 bytes")
        if not 0 <= self.device_id <= 0xFF:
            raise ValueError("device id must fit one byte")
        if _HEADER_BYTES + len(self.tsn_config) > MAX_FRAME_BYTES:
            raise ValueError("frame exceeds 1514 bytes; segment the payload")
        if len(self.tsn_config) < 1:
            raise ValueError("tsn_config must carry at least the segment header")

    @property
    def segment_seq(self) -> int:
        return self.tsn_config[0] & 0x7F

    @property
    def is_last_segment(self) -> bool:
        return bool(self.tsn_config[0] & _LAST_FLAG)

    @property
    def segment_data(self) -> bytes:
        return self.tsn_config[1:]


def encode_frame(frame: TsnConfigFrame) -> bytes:
    return b"".join([
        frame.dst_mac, frame.src_mac,
        struct.pack(">H", ETHER_TYPE),
        bytes([frame.tsn_type.value, frame.device_id]),
        struct.pack(">H", len(frame.tsn_config)),
        frame.tsn_config,
    ])


def decode_frame(data: bytes) -> TsnConfigFrame:
    if len(data) < _HEADER_BYTES + 1:
        raise MalformedFrame("frame shorter than header")
    dst, src = data[0:6], data[6:12]
    ether_type, = struct.unpack(">H", data[12:14])
    if ether_type != ETHER_TYPE:
        raise MalformedFrame(f"unexpected EtherType {ether_type:#06x}")
    try:
        tsn_type = TsnProtocol(data[14])
    except ValueError:
        raise MalformedFrame(f"unknown TSN type {data[14]}") from None
    device_id = data[15]
    config_len, = struct.unpack(">H", data[16:18])
    payload = data[18:]
    if len(payload) != config_len:
        raise MalformedFrame("config_len does not match payload size")
    return TsnConfigFrame(dst, src, tsn_type, device_id, payload)


def segment_payload(payload: bytes) -> list[bytes]:
    """Split a logical payload into per-frame tsn_config blobs."""
    chunks = [payload[i:i + _SEGMENT_CAPACITY]
              for i in range(0, len(payload), _SEGMENT_CAPACITY)] or [b""]
    if len(chunks) > 0x7F + 1:
        raise ValueError("payload too large to segment")
    out = []
    for seq, chunk in enumerate(chunks):
        header = seq | (_LAST_FLAG if seq == len(chunks) - 1 else 0)
        out.append(bytes([header]) + chunk)
    return out


def reassemble_segments(blobs: Sequence[bytes]) -> bytes:
    """Inverse of segment_payload; raises MalformedFrame on gaps/disorder."""
    payload = b""
    for expected, blob in enumerate(blobs):
        if not blob:
            raise MalformedFrame("empty segment")
        seq, last = blob[0] & 0x7F, bool(blob[0] & _LAST_FLAG)
        if seq != expected:
            raise MalformedFrame(f"segment {seq} out of order (expected {expected})")
        if last != (expected == len(blobs) - 1):
            raise MalformedFrame("last-segment flag on the wrong segment")
        payload += blob[1:]
    return payload


# --------------------------------------------------------------------------
# Protocol payload codecs
# --------------------------------------------------------------------------

def encode_gate_payload(hyperperiod_ns: int, ports: Mapping[int, PortSchedule]) -> bytes:
    out = [struct.pack(">QB", hyperperiod_ns, len(ports))]
    for port_id in sorted(ports):
        psched = ports[port_id]
        out.append(struct.pack(">BQH", port_id, psched.guard_ns, len(psched.entries)))
        for e in psched.entries:
            out.append(struct.pack(">BQQ", e.queue, e.start_ns, e.duration_ns))
    return b"".join(out)


def decode_gate_payload(data: bytes) -> tuple[int, dict[int, PortSchedule]]:
    try:
        hyperperiod, nports = struct.unpack_from(">QB", data, 0)
        pos = 9
        ports: dict[int, PortSchedule] = {}
        for _ in range(nports):
            port_id, guard, nentries = struct.unpack_from(">BQH", data, pos)
            pos += 11
            entries = []
            for _ in range(nentries):
                queue, start, duration = struct.unpack_from(">BQQ", data, pos)
                pos += 17
                entries.append(GclEntry(queue, start, duration))
            ports[port_id] = PortSchedule(guard, tuple(entries))
    except struct.error as exc:
        raise MalformedFrame(f"truncated gate payload: {exc}") from exc
    if pos != len(data):
        raise MalformedFrame("trailing bytes in gate payload")
    return hyperperiod, ports


_ROLE_CODE = {StreamRole.IDENTIFY: 1, StreamRole.REPLICATE_EGRESS: 2,
              StreamRole.ELIMINATE_EGRESS: 3}
_ROLE_FROM = {v: k for k, v in _ROLE_CODE.items()}


def encode_stream_payload(streams: Sequence[StreamConfig]) -> bytes:
    out = [struct.pack(">H", len(streams))]
    for s in streams:
        out.append(s.src.packed() + struct.pack(">H", s.src.port))
        out.append(s.dst.packed() + struct.pack(">H", s.dst.port))
        out.append(struct.pack(">HBH", s.vid, s.priority, s.recovery_window))
        out.append(bytes([len(s.functions)]))
        for fn in s.functions:
            out.append(bytes([fn.port, _ROLE_CODE[fn.role]]))
    return b"".join(out)


def decode_stream_payload(data: bytes) -> tuple[StreamConfig, ...]:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise MalformedFrame("truncated stream payload")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    count, = struct.unpack(">H", take(2))
    streams = []
    for _ in range(count):
        src_ip = ".".join(str(b) for b in take(4))
        src_port, = struct.unpack(">H", take(2))
        dst_ip = ".".join(str(b) for b in take(4))
        dst_port, = struct.unpack(">H", take(2))
        vid, priority, window = struct.unpack(">HBH", take(5))
        nfunc = take(1)[0]
        functions = []
        for _ in range(nfunc):
            port, role_code = take(1)[0], take(1)[0]
            role = _ROLE_FROM.get(role_code)
            if role is None:
                raise MalformedFrame(f"unknown stream role code {role_code}")
            functions.append(StreamFunction(port, role))
        try:
            streams.append(StreamConfig(
                Locator(src_ip, src_port), Locator(dst_ip, dst_port),
                vid, priority, window, tuple(functions)))
        except ValueError as exc:
            raise MalformedFrame(str(exc)) from exc
    if pos != len(data):
        raise MalformedFrame("trailing bytes in stream payload")
    return tuple(streams)


# --------------------------------------------------------------------------
# Agent translation
# --------------------------------------------------------------------------

def agent_translate(doc: bytes, src_mac: bytes = AGENT_MAC) -> list[TsnConfigFrame]:
    """Parse one per-switch document and emit its configuration frames.

    Emits one frame sequence per configured protocol: gates always, streams
    when the document has any, time-sync when an opaque payload is present.
    """
    cfg = parse_switch_config(doc)
    dst = switch_mac(cfg.device_id)
    frames: list[TsnConfigFrame] = []

    def emit(protocol: TsnProtocol, payload: bytes) -> None:
        for blob in segment_payload(payload):
            frames.append(TsnConfigFrame(dst, src_mac, protocol, cfg.device_id, blob))

    emit(TsnProtocol.QBV, encode_gate_payload(cfg.hyperperiod_ns, cfg.ports))
    if cfg.streams:
        emit(TsnProtocol.CB, encode_stream_payload(cfg.streams))
    if cfg.time_sync:
        emit(TsnProtocol.AS, cfg.time_sync)
    return frames


# --------------------------------------------------------------------------
# Switch-side application
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfigStatus:
    device_id: int
    tsn_type: TsnProtocol
    result: StatusResult
    detail: str = ""


@dataclass
class SwitchState:
    """Live TSN configuration of one simulated switch."""

    hyperperiod_ns: int = 0
    ports: dict[int, PortSchedule] = field(default_factory=dict)
    streams: tuple[StreamConfig, ...] = ()
    time_sync: bytes = b""


class SwitchConfigStore:
    """Receives configuration frames for one device and applies complete,
    well-formed transactions atomically; anything partial or corrupt leaves
    the previous configuration untouched and reports a parse error.

    A new configuration is staged when the last segment arrives and goes
    live at the next hyperperiod boundary (immediately when idle).
    """

    def __init__(self, device_id: int):
        self.device_id = device_id
        self.state = SwitchState()
        self._partial: dict[TsnProtocol, list[bytes]] = {}

    def handle_frame_bytes(self, data: bytes) -> ConfigStatus | None:
        try:
            frame = decode_frame(data)
        except MalformedFrame as exc:
            return ConfigStatus(self.device_id, TsnProtocol.QBV,
                                StatusResult.PARSE_ERROR, str(exc))
        return self.handle_frame(frame)

    def handle_frame(self, frame: TsnConfigFrame) -> ConfigStatus | None:
        """Returns a status when a transaction completes or fails, else None.

        Frames addressed to another device are ignored.
        """
        if frame.device_id != self.device_id:
            return None
        blobs = self._partial.setdefault(frame.tsn_type, [])
        blobs.append(frame.tsn_config)
        if not frame.is_last_segment:
            if frame.segment_seq != len(blobs) - 1:
                del self._partial[frame.tsn_type]
                return ConfigStatus(self.device_id, frame.tsn_type,
                                    StatusResult.PARSE_ERROR, "segment out of order")
            return None
        del self._partial[frame.tsn_type]
        try:
            payload = reassemble_segments(blobs)
            self._apply(frame.tsn_type, payload)
        except MalformedFrame as exc:
            return ConfigStatus(self.device_id, frame.tsn_type,
                                StatusResult.PARSE_ERROR, str(exc))
        return ConfigStatus(self.device_id, frame.tsn_type, StatusResult.OK)

    def _apply(self, protocol: TsnProtocol, payload: bytes) -> None:
        if protocol is TsnProtocol.QBV:
            hyperperiod, ports = decode_gate_payload(payload)
            self.state.hyperperiod_ns = hyperperiod
            self.state.ports = ports
        elif protocol is TsnProtocol.CB:
            self.state.streams = decode_stream_payload(payload)
        else:
            self.state.time_sync = payload

    def matches(self, cfg: SwitchConfig) -> bool:
        """Field-by-field semantic equality with a parsed document."""
        return (self.state.hyperperiod_ns == cfg.hyperperiod_ns
                and self.state.ports == cfg.ports
                and self.state.streams == cfg.streams
                and self.state.time_sync == cfg.time_sync)


# --------------------------------------------------------------------------
# RPC hand-off (scheduler side -> agent side)
# --------------------------------------------------------------------------

def encode_rpc_request(txn_id: int, doc: bytes) -> bytes:
    return struct.pack(">QI", txn_id, len(doc)) + doc


def decode_rpc_request(data: bytes) -> tuple[int, bytes]:
    if len(data) < 12:
        raise MalformedFrame("rpc request shorter than header")
    txn_id, length = struct.unpack(">QI", data[:12])
    if len(data) - 12 != length:
        raise MalformedFrame("rpc length mismatch")
    return txn_id, data[12:]


@dataclass
class DeliveryRecord:
    device: str
    device_id: int
    frames: list[TsnConfigFrame]
    statuses: list[ConfigStatus]


@dataclass
class ConfigTransaction:
    txn_id: int
    deliveries: list[DeliveryRecord] = field(default_factory=list)
    translate_ns: int = 0   # agent parse + frame send time
    apply_ns: int = 0       # switch apply + status return time

    @property
    def statuses(self) -> list[ConfigStatus]:
        return [s for d in self.deliveries for s in d.statuses]

    def all_ok(self) -> bool:
        return all(s.result is StatusResult.OK for s in self.statuses)


class ConfigAgent:
    """Receives per-switch documents over the RPC framing, translates them
    into configuration frames and feeds the addressed switch."""

    def __init__(self, switches: Mapping[str, SwitchConfigStore]):
        self.switches = dict(switches)

    def handle_request(self, data: bytes) -> ConfigTransaction:
        txn_id, doc = decode_rpc_request(data)
        txn = ConfigTransaction(txn_id)
        t0 = time.perf_counter_ns()
        frames = agent_translate(doc)   # ConfigSchemaError propagates to the caller
        txn.translate_ns = time.perf_counter_ns() - t0
        cfg = parse_switch_config(doc)
        store = self.switches.get(cfg.device)
        if store is None:
            raise ConfigSchemaError(f"agent knows no switch named {cfg.device!r}")
        record = DeliveryRecord(cfg.device, cfg.device_id, frames, [])
        t1 = time.perf_counter_ns()
        for frame in frames:
            status = store.handle_frame_bytes(encode_frame(frame))
            if status is not None:
                record.statuses.append(status)
        txn.apply_ns = time.perf_counter_ns() - t1
        txn.deliveries.append(record)
        return txn


def push_config(
    docs: Mapping[str, bytes],
    agent: Callable[[bytes], ConfigTransaction] | ConfigAgent,
    txn_id: int = 1,
) -> ConfigTransaction:
    """Deliver every per-switch document to the agent; aggregates statuses.

    Raises AgentUnreachable when the agent call fails, ConfigSchemaError when
    a document does not validate.
    """
    handler = agent.handle_request if isinstance(agent, ConfigAgent) else agent
    merged = ConfigTransaction(txn_id)
    for device in sorted(docs):
        doc = docs[device]
        parse_switch_config(doc)   # validate before hand-off
        try:
            txn = handler(encode_rpc_request(txn_id, doc))
        except ConfigSchemaError:
            raise
        except Exception as exc:
            raise AgentUnreachable(str(exc)) from exc
        merged.deliveries.extend(txn.deliveries)
        merged.translate_ns += txn.translate_ns
        merged.apply_ns += txn.apply_ns
    return merged


# --------------------------------------------------------------------------
# Endpoint release notification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReleaseNotice:
    flow_id: FlowId
    release_time_ns: int     # offset within the flow's period
    period_ns: int
    effective_from_ns: int   # absolute simulated time

    def __post_init__(self) -> None:
        if not 0 <= self.release_time_ns < self.period_ns:
            raise ValueError("release time must lie within the period")


@dataclass(frozen=True)
class NotifyAck:
    flow_id: FlowId
    endpoint: str
    result: StatusResult
    detail: str = ""


class EndpointConfigPort:
    """Configuration-plane face of one talker endpoint: accepts release
    notices for the flows it publishes and acknowledges them."""

    def __init__(self, name: str, flow_ids: Iterable[FlowId], responsive: bool = True):
        self.name = name
        self.flow_ids = set(flow_ids)
        self.responsive = responsive
        self.release_times: dict[FlowId, ReleaseNotice] = {}

    def apply_release(self, notice: ReleaseNotice) -> NotifyAck | None:
        if not self.responsive:
            return None
        if notice.flow_id not in self.flow_ids:
            return NotifyAck(notice.flow_id, self.name, StatusResult.APPLY_ERROR,
                             "unknown flow id")
        self.release_times[notice.flow_id] = notice
        return NotifyAck(notice.flow_id, self.name, StatusResult.OK)


def notify_endpoints(
    notices: Sequence[ReleaseNotice],
    endpoints: Sequence[EndpointConfigPort],
) -> tuple[list[NotifyAck], bool]:
    """Deliver each notice to the endpoint owning its flow.

    Returns (acks, run_time_ready): the run-time phase may begin only once
    every notice was acknowledged Ok. Unresponsive endpoints raise
    NotifyTimeout naming the endpoint.
    """
    by_flow: dict[FlowId, EndpointConfigPort] = {}
    for ep in endpoints:
        for fid in ep.flow_ids:
            by_flow[fid] = ep
    acks: list[NotifyAck] = []
    for notice in notices:
        ep = by_flow.get(notice.flow_id)
        if ep is None:
            raise NotifyTimeout(f"no endpoint owns flow {notice.flow_id.short()}")
        ack = ep.apply_release(notice)
        if ack is None:
            raise NotifyTimeout(f"endpoint {ep.name} did not acknowledge")
        acks.append(ack)
    ready = bool(acks) and all(a.result is StatusResult.OK for a in acks)
    return acks, ready

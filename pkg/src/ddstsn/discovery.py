"""Centralized discovery: announcement types, a compact binary wire codec,
the discovery server that relays announcements between matching clients, and
client-side session logic.

Clients talk only to the server, never to each other. The server processes
one inbound message at a time; handlers are deterministic functions of
(registry state, message). Client sessions are sans-io state machines so the
same logic runs threaded over UDP, threaded over the in-memory transport, or
single-threaded inside the deterministic pipeline pump.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .model import (
    GUID_LEN,
    EndpointDescriptor,
    EndpointKind,
    Guid,
    Locator,
    QosPolicies,
    Reliability,
    Status,
    qos_compatible,
)

DEFAULT_SERVER_PORT = 11811
DEFAULT_RETRY_NS = 100_000_000  # resend the participant announcement every 100 ms
DEFAULT_TIMEOUT_NS = 5_000_000_000
DEFAULT_LEASE_NS = 10_000_000_000


class MalformedMessage(Exception):
    """Input bytes are not the encoding of any valid discovery message."""


class UnknownParticipant(Exception):
    """Endpoint announcement arrived before its participant announcement."""


class DiscoveryTimeout(Exception):
    """The discovery server did not respond before the session deadline."""


class MessageKind(Enum):
    PDP = 1
    EDP = 2
    DATA = 3


@dataclass(frozen=True)
class ParticipantAnnouncement:
    participant_guid: Guid
    locator: Locator
    status: Status
    lease_duration_ns: int

    def __post_init__(self) -> None:
        if self.status is Status.ALIVE and self.lease_duration_ns <= 0:
            raise ValueError("lease duration must be > 0 for alive participants")
        if self.lease_duration_ns < 0:
            raise ValueError("lease duration must be >= 0")
        if self.participant_guid.is_unset:
            raise ValueError("participant guid must not be unset")


@dataclass(frozen=True)
class EndpointAnnouncement:
    participant_guid: Guid
    endpoint: EndpointDescriptor

    def __post_init__(self) -> None:
        if self.endpoint.guid == self.participant_guid:
            raise ValueError("endpoint guid must differ from its participant guid")
        if self.participant_guid.is_unset:
            raise ValueError("participant guid must not be unset")


@dataclass(frozen=True)
class DiscoveryMessage:
    kind: MessageKind
    payload: ParticipantAnnouncement | EndpointAnnouncement | bytes

    def __post_init__(self) -> None:
        expected = {
            MessageKind.PDP: ParticipantAnnouncement,
            MessageKind.EDP: EndpointAnnouncement,
            MessageKind.DATA: bytes,
        }[self.kind]
        if not isinstance(self.payload, expected):
            raise ValueError(f"{self.kind} message needs a {expected.__name__} payload")

    @classmethod
    def pdp(cls, ann: ParticipantAnnouncement) -> DiscoveryMessage:
        return cls(MessageKind.PDP, ann)

    @classmethod
    def edp(cls, ann: EndpointAnnouncement) -> DiscoveryMessage:
        return cls(MessageKind.EDP, ann)

    @classmethod
    def data(cls, payload: bytes) -> DiscoveryMessage:
        return cls(MessageKind.DATA, payload)


# --------------------------------------------------------------------------
# Wire codec: 1-byte kind tag, 4-byte big-endian payload length, fixed-width
# fields, 2-byte length-prefixed UTF-8 strings.
# --------------------------------------------------------------------------

_STATUS_CODE = {Status.ALIVE: 1, Status.UNALIVE: 0}
_STATUS_FROM = {v: k for k, v in _STATUS_CODE.items()}
_KIND_CODE = {EndpointKind.WRITER: 1, EndpointKind.READER: 2}
_KIND_FROM = {v: k for k, v in _KIND_CODE.items()}
_REL_CODE = {Reliability.BEST_EFFORT: 0, Reliability.RELIABLE: 1}
_REL_FROM = {v: k for k, v in _REL_CODE.items()}


def _pack_locator(loc: Locator) -> bytes:
    return loc.packed() + struct.pack(">H", loc.port)


def _pack_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for codec")
    return struct.pack(">H", len(raw)) + raw


def _pack_participant(ann: ParticipantAnnouncement) -> bytes:
    return b"".join([
        ann.participant_guid.value,
        _pack_locator(ann.locator),
        bytes([_STATUS_CODE[ann.status]]),
        struct.pack(">Q", ann.lease_duration_ns),
    ])


def _pack_endpoint(edp: EndpointDescriptor) -> bytes:
    qos = edp.qos
    return b"".join([
        bytes([_KIND_CODE[edp.kind], _STATUS_CODE[edp.status]]),
        edp.guid.value,
        _pack_string(edp.topic),
        _pack_locator(edp.locator),
        struct.pack(">HB", qos.partition, qos.priority),
        struct.pack(">QQQ", qos.deadline_ns, qos.latency_ns, qos.jitter_ns),
        bytes([_REL_CODE[qos.reliability]]),
        struct.pack(">I", qos.size),
    ])


def encode_message(msg: DiscoveryMessage) -> bytes:
    if msg.kind is MessageKind.PDP:
        payload = _pack_participant(msg.payload)
    elif msg.kind is MessageKind.EDP:
        payload = msg.payload.participant_guid.value + _pack_endpoint(msg.payload.endpoint)
    else:
        payload = bytes(msg.payload)
    return struct.pack(">BI", msg.kind.value, len(payload)) + payload


class _Cursor:
    """Strict reader over the payload; any shortfall is a malformed message."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedMessage("truncated payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessage("string payload is not UTF-8") from exc

    def locator(self) -> Locator:
        ip = ".".join(str(b) for b in self.take(4))
        return self._build(Locator, ip, self.u16())

    def guid(self) -> Guid:
        return self._build(Guid, self.take(GUID_LEN))

    @staticmethod
    def _build(ctor, *args):
        try:
            return ctor(*args)
        except ValueError as exc:
            raise MalformedMessage(str(exc)) from exc

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedMessage("trailing bytes after payload")


def _enum_from(table: dict, code: int, what: str):
    try:
        return table[code]
    except KeyError:
        raise MalformedMessage(f"bad {what} code {code}") from None


def _read_endpoint(cur: _Cursor) -> EndpointDescriptor:
    kind = _enum_from(_KIND_FROM, cur.u8(), "endpoint kind")
    status = _enum_from(_STATUS_FROM, cur.u8(), "status")
    guid = cur.guid()
    topic = cur.string()
    locator = cur.locator()
    partition = cur.u16()
    priority = cur.u8()
    deadline, latency, jitter = cur.u64(), cur.u64(), cur.u64()
    reliability = _enum_from(_REL_FROM, cur.u8(), "reliability")
    size = cur.u32()
    qos = cur._build(QosPolicies, partition, priority, deadline, latency, reliability, jitter, size)
    return cur._build(EndpointDescriptor, kind, status, guid, topic, locator, qos)


def decode_message(data: bytes) -> DiscoveryMessage:
    if len(data) < 5:
        raise MalformedMessage("message shorter than header")
    kind_code, length = struct.unpack(">BI", data[:5])
    if len(data) - 5 != length:
        raise MalformedMessage("length field does not match payload size")
    try:
        kind = MessageKind(kind_code)
    except ValueError:
        raise MalformedMessage(f"bad kind tag {kind_code}") from None
    cur = _Cursor(data[5:])
    if kind is MessageKind.PDP:
        guid = cur.guid()
        locator = cur.locator()
        status = _enum_from(_STATUS_FROM, cur.u8(), "status")
        lease = cur.u64()
        cur.done()
        payload = cur._build(ParticipantAnnouncement, guid, locator, status, lease)
    elif kind is MessageKind.EDP:
        participant = cur.guid()
        endpoint = _read_endpoint(cur)
        cur.done()
        payload = cur._build(EndpointAnnouncement, participant, endpoint)
    else:
        payload = cur.data
    return DiscoveryMessage(kind, payload)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

@dataclass
class _ParticipantRecord:
    locator: Locator
    last_seen_ns: int
    lease_duration_ns: int


@dataclass
class ServerRegistry:
    """State behind the discovery server.

    ``matches`` remembers which endpoint pairs have been informed of each
    other so departures can be forwarded to exactly those peers.
    """

    participants: dict[Guid, _ParticipantRecord] = field(default_factory=dict)
    endpoints: dict[Guid, EndpointDescriptor] = field(default_factory=dict)
    owners: dict[Guid, Guid] = field(default_factory=dict)
    matches: dict[Guid, set[Guid]] = field(default_factory=dict)

    def endpoints_of(self, participant: Guid) -> list[Guid]:
        return sorted(g for g, owner in self.owners.items() if owner == participant)

    def matched_pairs(self) -> set[tuple[Guid, Guid]]:
        """All informed (writer, reader) guid pairs."""
        pairs = set()
        for guid, peers in self.matches.items():
            edp = self.endpoints.get(guid)
            if edp is None:
                continue
            for peer in peers:
                if edp.kind is EndpointKind.WRITER:
                    pairs.add((guid, peer))
                else:
                    pairs.add((peer, guid))
        return pairs


# A forwarding instruction: deliver this announcement to that participant.
EdpForward = tuple[Guid, EndpointAnnouncement]


def _unalive(edp: EndpointDescriptor) -> EndpointDescriptor:
    return EndpointDescriptor(edp.kind, Status.UNALIVE, edp.guid, edp.topic, edp.locator, edp.qos)


def _drop_endpoint(registry: ServerRegistry, guid: Guid) -> list[EdpForward]:
    """Remove one endpoint, telling previously matched peers it is gone."""
    edp = registry.endpoints.pop(guid)
    owner = registry.owners.pop(guid)
    forwards: list[EdpForward] = []
    gone = EndpointAnnouncement(owner, _unalive(edp))
    for peer in sorted(registry.matches.pop(guid, set())):
        registry.matches.get(peer, set()).discard(guid)
        peer_owner = registry.owners.get(peer)
        if peer_owner is not None:
            forwards.append((peer_owner, gone))
    return forwards


def server_handle_pdp(
    registry: ServerRegistry,
    ann: ParticipantAnnouncement,
    now_ns: int = 0,
) -> tuple[bool, list[EdpForward]]:
    """Apply a participant announcement.

    Returns (reply_to_announcer, forwards): ``reply_to_announcer`` is True
    when the server must answer the announcer with its own participant
    announcement; ``forwards`` carries departure notices for previously
    matched peers when the participant went away.
    """
    if ann.status is Status.ALIVE:
        registry.participants[ann.participant_guid] = _ParticipantRecord(
            ann.locator, now_ns, ann.lease_duration_ns)
        return True, []
    registry.participants.pop(ann.participant_guid, None)
    forwards: list[EdpForward] = []
    for guid in registry.endpoints_of(ann.participant_guid):
        forwards.extend(_drop_endpoint(registry, guid))
    return False, forwards


def server_handle_edp(registry: ServerRegistry, ann: EndpointAnnouncement) -> list[EdpForward]:
    """Apply an endpoint announcement, returning forwarding pairs.

    For a new alive endpoint, every compatible opposite endpoint on the same
    topic yields two forwards: one informing each side of the other. Departed
    endpoints are removed and their previously matched peers informed.
    """
    if ann.participant_guid not in registry.participants:
        raise UnknownParticipant(f"participant {ann.participant_guid.dotted()} not registered")
    edp = ann.endpoint
    if edp.status is Status.UNALIVE:
        if edp.guid in registry.endpoints:
            return _drop_endpoint(registry, edp.guid)
        return []
    if edp.guid in registry.endpoints:
        return []  # duplicate alive announcement: idempotent
    registry.endpoints[edp.guid] = edp
    registry.owners[edp.guid] = ann.participant_guid
    forwards: list[EdpForward] = []
    for other_guid in sorted(registry.endpoints):
        other = registry.endpoints[other_guid]
        if other.guid == edp.guid or other.kind is edp.kind or other.topic != edp.topic:
            continue
        writer, reader = (edp, other) if edp.kind is EndpointKind.WRITER else (other, edp)
        if not qos_compatible(writer.qos, reader.qos):
            continue
        registry.matches.setdefault(edp.guid, set()).add(other.guid)
        registry.matches.setdefault(other.guid, set()).add(edp.guid)
        other_owner = registry.owners[other.guid]
        forwards.append((other_owner, ann))
        forwards.append((ann.participant_guid, EndpointAnnouncement(other_owner, other)))
    return forwards


class DiscoveryServer:
    """Message-level wrapper: decodes datagrams, runs the handlers, encodes
    replies, and feeds every processed endpoint announcement (explicit or
    synthesized from departures/lease expiry) to the observer in order."""

    def __init__(
        self,
        guid: Guid,
        locator: Locator,
        observer=None,
        lease_check: bool = False,
    ):
        self.guid = guid
        self.locator = locator
        self.registry = ServerRegistry()
        self.observer = observer
        self.lease_check = lease_check

    def _own_pdp(self) -> DiscoveryMessage:
        return DiscoveryMessage.pdp(ParticipantAnnouncement(
            self.guid, self.locator, Status.ALIVE, DEFAULT_LEASE_NS))

    def _notify(self, ann: EndpointAnnouncement) -> None:
        if self.observer is not None:
            self.observer(ann)

    def _emit_forwards(self, forwards: list[EdpForward]) -> list[tuple[Locator, bytes]]:
        out = []
        for dest_guid, fwd in forwards:
            record = self.registry.participants.get(dest_guid)
            if record is not None:
                out.append((record.locator, encode_message(DiscoveryMessage.edp(fwd))))
        return out

    def handle_datagram(self, data: bytes, src: Locator, now_ns: int = 0) -> list[tuple[Locator, bytes]]:
        """Process one datagram; returns (destination, bytes) replies.

        Malformed datagrams and protocol-order violations are dropped.
        """
        try:
            msg = decode_message(data)
        except MalformedMessage:
            return []
        if msg.kind is MessageKind.PDP:
            reply, forwards = server_handle_pdp(self.registry, msg.payload, now_ns)
            for _, fwd in forwards:
                self._notify(fwd)
            out = self._emit_forwards(forwards)
            if reply:
                out.insert(0, (msg.payload.locator, encode_message(self._own_pdp())))
            return out
        if msg.kind is MessageKind.EDP:
            try:
                forwards = server_handle_edp(self.registry, msg.payload)
            except UnknownParticipant:
                return []
            self._notify(msg.payload)
            return self._emit_forwards(forwards)
        return []

    def expire_leases(self, now_ns: int) -> list[tuple[Locator, bytes]]:
        """Treat every over-lease participant as an implicit departure."""
        out: list[tuple[Locator, bytes]] = []
        for guid in sorted(self.registry.participants):
            record = self.registry.participants[guid]
            if now_ns - record.last_seen_ns > record.lease_duration_ns:
                gone = ParticipantAnnouncement(guid, record.locator, Status.UNALIVE, 0)
                _, forwards = server_handle_pdp(self.registry, gone, now_ns)
                for _, fwd in forwards:
                    self._notify(fwd)
                out.extend(self._emit_forwards(forwards))
        return out


# --------------------------------------------------------------------------
# Client session (sans-io)
# --------------------------------------------------------------------------

class ClientSession:
    """Discovery session of one participant.

    Announces the participant to the server (retrying on a fixed interval),
    then announces each local endpoint once the server has answered, and
    collects the remote endpoint descriptors the server forwards back.
    """

    def __init__(
        self,
        participant_guid: Guid,
        locator: Locator,
        endpoints: list[EndpointDescriptor],
        server: Locator,
        *,
        retry_ns: int = DEFAULT_RETRY_NS,
        timeout_ns: int = DEFAULT_TIMEOUT_NS,
        lease_ns: int = DEFAULT_LEASE_NS,
    ):
        if not endpoints:
            raise ValueError("a discovery session needs at least one local endpoint")
        self.participant_guid = participant_guid
        self.locator = locator
        self.endpoints = list(endpoints)
        self.server = server
        self.retry_ns = retry_ns
        self.timeout_ns = timeout_ns
        self.lease_ns = lease_ns
        self.discovered: dict[Guid, EndpointDescriptor] = {}
        self.server_seen = False
        self._started_ns: int | None = None
        self._last_pdp_ns: int | None = None

    # -- outbound helpers ---------------------------------------------------

    def _pdp_bytes(self, status: Status = Status.ALIVE) -> bytes:
        lease = self.lease_ns if status is Status.ALIVE else 0
        return encode_message(DiscoveryMessage.pdp(
            ParticipantAnnouncement(self.participant_guid, self.locator, status, lease)))

    def _edp_bytes(self) -> list[bytes]:
        return [
            encode_message(DiscoveryMessage.edp(EndpointAnnouncement(self.participant_guid, edp)))
            for edp in self.endpoints
        ]

    # -- state machine ------------------------------------------------------

    def start(self, now_ns: int = 0) -> list[tuple[Locator, bytes]]:
        self._started_ns = now_ns
        self._last_pdp_ns = now_ns
        return [(self.server, self._pdp_bytes())]

    def poll(self, now_ns: int) -> list[tuple[Locator, bytes]]:
        """Drive retries; raises DiscoveryTimeout once the deadline passes."""
        if self.server_seen or self._started_ns is None:
            return []
        if now_ns - self._started_ns >= self.timeout_ns:
            raise DiscoveryTimeout(
                f"no server response from {self.server.udpv4()} "
                f"after {self.timeout_ns / 1e9:.1f}s")
        if now_ns - self._last_pdp_ns >= self.retry_ns:
            self._last_pdp_ns = now_ns
            return [(self.server, self._pdp_bytes())]
        return []

    def on_datagram(self, data: bytes, src: Locator, now_ns: int = 0) -> list[tuple[Locator, bytes]]:
        try:
            msg = decode_message(data)
        except MalformedMessage:
            return []
        if msg.kind is MessageKind.PDP and src == self.server:
            if self.server_seen:
                return []
            self.server_seen = True
            return [(self.server, raw) for raw in self._edp_bytes()]
        if msg.kind is MessageKind.EDP and src == self.server:
            edp = msg.payload.endpoint
            if edp.status is Status.ALIVE:
                self.discovered[edp.guid] = edp
            else:
                self.discovered.pop(edp.guid, None)
        return []

    def close(self) -> list[tuple[Locator, bytes]]:
        """Graceful departure: announce the participant unalive."""
        return [(self.server, self._pdp_bytes(Status.UNALIVE))]


# --------------------------------------------------------------------------
# Transports
# --------------------------------------------------------------------------

class InMemoryNetwork:
    """Thread-safe mailbox transport keyed by locator.

    Records every (src, dst) pair so tests can assert that clients exchange
    discovery traffic only with the server.
    """

    def __init__(self):
        self._boxes: dict[Locator, queue.Queue] = {}
        self._lock = threading.Lock()
        self.log: list[tuple[Locator, Locator]] = []

    def mailbox(self, locator: Locator) -> queue.Queue:
        with self._lock:
            return self._boxes.setdefault(locator, queue.Queue())

    def send(self, src: Locator, dst: Locator, data: bytes) -> None:
        with self._lock:
            self.log.append((src, dst))
            box = self._boxes.setdefault(dst, queue.Queue())
        box.put((src, data))


class UdpTransport:
    """Minimal UDP binding carrying the codec bytes as datagrams."""

    def __init__(self, locator: Locator):
        self.locator = locator
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((locator.ip, locator.port))
        self.sock.settimeout(0.05)

    def send(self, dst: Locator, data: bytes) -> None:
        self.sock.sendto(data, (dst.ip, dst.port))

    def recv(self) -> tuple[Locator, bytes] | None:
        try:
            data, addr = self.sock.recvfrom(65535)
        except socket.timeout:
            return None
        return Locator(addr[0], addr[1]), data

    def close(self) -> None:
        self.sock.close()


# --------------------------------------------------------------------------
# Threaded runners
# --------------------------------------------------------------------------

class ServerRunner:
    """Runs a DiscoveryServer on a thread over the in-memory transport."""

    def __init__(self, server: DiscoveryServer, net: InMemoryNetwork):
        self.server = server
        self.net = net
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self) -> ServerRunner:
        self._thread.start()
        return self

    def _loop(self) -> None:
        box = self.net.mailbox(self.server.locator)
        while not self._stop.is_set():
            try:
                src, data = box.get(timeout=0.02)
            except queue.Empty:
                continue
            for dst, out in self.server.handle_datagram(data, src, time.monotonic_ns()):
                self.net.send(self.server.locator, dst, out)

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)


class DiscoverySession:
    """Threaded driver for a ClientSession over the in-memory transport."""

    def __init__(self, session: ClientSession, net: InMemoryNetwork):
        self.session = session
        self.net = net
        self.error: Exception | None = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self) -> DiscoverySession:
        self._thread.start()
        return self

    def _send_all(self, messages: list[tuple[Locator, bytes]]) -> None:
        for dst, data in messages:
            self.net.send(self.session.locator, dst, data)

    def _loop(self) -> None:
        box = self.net.mailbox(self.session.locator)
        self._send_all(self.session.start(time.monotonic_ns()))
        while not self._stop.is_set():
            try:
                src, data = box.get(timeout=0.01)
                self._send_all(self.session.on_datagram(data, src, time.monotonic_ns()))
            except queue.Empty:
                pass
            try:
                self._send_all(self.session.poll(time.monotonic_ns()))
            except DiscoveryTimeout as exc:
                self.error = exc
                return

    def wait_for(self, count: int, timeout_s: float = 5.0) -> dict[Guid, EndpointDescriptor]:
        """Block until `count` remote endpoints are known (or raise)."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.error is not None:
                raise self.error
            if len(self.session.discovered) >= count:
                return dict(self.session.discovered)
            time.sleep(0.002)
        raise TimeoutError(f"discovered {len(self.session.discovered)}/{count} endpoints")

    def wait_for_error(self, timeout_s: float = 5.0) -> Exception:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.error is not None:
                return self.error
            time.sleep(0.002)
        raise TimeoutError("session did not fail")

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)


def client_discover(
    endpoints: list[EndpointDescriptor],
    server: Locator,
    net: InMemoryNetwork,
    *,
    participant_guid: Guid,
    locator: Locator,
    retry_ns: int = DEFAULT_RETRY_NS,
    timeout_ns: int = DEFAULT_TIMEOUT_NS,
) -> DiscoverySession:
    """Start a threaded discovery session for one participant."""
    session = ClientSession(
        participant_guid, locator, endpoints, server,
        retry_ns=retry_ns, timeout_ns=timeout_ns)
    return DiscoverySession(session, net).start()

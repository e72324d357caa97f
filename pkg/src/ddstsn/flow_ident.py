"""Flow identification: writer/reader registries, incremental matching of
endpoint announcements into point-to-point flows, and the FlowInfo document.

The identifier consumes the discovery server's announcement stream in arrival
order, exactly once. Each alive announcement of a previously unknown endpoint
is matched against registered opposite endpoints on the same topic; each
departure removes the endpoint and every flow it participates in. The flow's
QoS fields come from the reader side, which states the requirement.

The FlowInfo document uses a fixed XML-like vocabulary whose element names
contain spaces (``<Flow Features>``, ``<Topic Name>`` ...); standard XML
parsers reject such names, so this module ships its own small emitter and
parser for exactly this schema.
"""

from __future__ import annotations

import queue as queue_mod
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .discovery import EndpointAnnouncement
from .model import (
    EndpointDescriptor,
    EndpointKind,
    Guid,
    Locator,
    Reliability,
    Status,
    qos_compatible,
)

DEFAULT_FIXED_SIZE = 62  # Ethernet 14 + 802.1Q 4 + IPv4 20 + UDP 8 + message header 16


class FlowInfoSchemaError(Exception):
    """FlowInfo document does not follow the fixed schema."""


class MissingRouteError(Exception):
    """No route is known between two locators' host nodes."""


@dataclass(frozen=True, order=True)
class FlowId:
    writer_guid: Guid
    reader_guid: Guid

    def __post_init__(self) -> None:
        if self.writer_guid.is_unset or self.reader_guid.is_unset:
            raise ValueError("flow id guids must not be unset")

    def short(self) -> str:
        return f"{self.writer_guid.value.hex()[:8]}->{self.reader_guid.value.hex()[:8]}"


@dataclass(frozen=True)
class DdsFlow:
    """One identified point-to-point flow and its end-to-end requirements."""

    id: FlowId
    topic: str
    src: Locator
    dst: Locator
    size: int            # full on-wire frame bytes (fixed overhead + payload)
    vid: int
    prio: int
    prd_ns: int
    latency_ns: int
    jitter_ns: int
    reliability: Reliability
    route: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.route:
            raise ValueError("route must be non-empty")
        for a, b in zip(self.route, self.route[1:]):
            if a == b:
                raise ValueError("route hops must be distinct")
        if self.size <= 0 or self.prd_ns <= 0 or self.latency_ns <= 0 or self.jitter_ns < 0:
            raise ValueError("flow durations/size out of range")
        if not isinstance(self.route, tuple):
            object.__setattr__(self, "route", tuple(self.route))


class RouteTable:
    """Static routes keyed by (source node, destination node), plus the
    ip -> hosting-node map needed to resolve locators to nodes."""

    def __init__(
        self,
        host_by_ip: Mapping[str, str],
        routes: Mapping[tuple[str, str], Sequence[str]],
    ):
        self.host_by_ip = dict(host_by_ip)
        self.routes = {pair: tuple(path) for pair, path in routes.items()}
        for (src, dst), path in self.routes.items():
            if path[0] != src or path[-1] != dst:
                raise ValueError(f"route for {src}->{dst} must start/end at those nodes")

    def node_of(self, locator: Locator) -> str | None:
        return self.host_by_ip.get(locator.ip)

    def lookup(self, src: Locator, dst: Locator) -> tuple[str, ...] | None:
        src_node = self.node_of(src)
        dst_node = self.node_of(dst)
        if src_node is None or dst_node is None:
            return None
        return self.routes.get((src_node, dst_node))

    def require(self, src: Locator, dst: Locator) -> tuple[str, ...]:
        route = self.lookup(src, dst)
        if route is None:
            raise MissingRouteError(f"no route between {src.udpv4()} and {dst.udpv4()}")
        return route


def map_flow(
    writer: EndpointDescriptor,
    reader: EndpointDescriptor,
    route: Sequence[str],
    fixed_size: int = DEFAULT_FIXED_SIZE,
) -> DdsFlow:
    """Map a matched writer/reader pair to a flow.

    The reader's QoS states the flow requirement; the on-wire size is the
    fixed per-frame overhead plus the reader's declared payload size.
    """
    if writer.kind is not EndpointKind.WRITER or reader.kind is not EndpointKind.READER:
        raise ValueError("map_flow needs a writer and a reader, in that order")
    if writer.topic != reader.topic:
        raise ValueError("matched endpoints must share a topic")
    if not qos_compatible(writer.qos, reader.qos):
        raise ValueError("matched endpoints must have compatible QoS")
    qos = reader.qos
    return DdsFlow(
        id=FlowId(writer.guid, reader.guid),
        topic=reader.topic,
        src=writer.locator,
        dst=reader.locator,
        size=fixed_size + qos.size,
        vid=qos.partition,
        prio=qos.priority,
        prd_ns=qos.deadline_ns,
        latency_ns=qos.latency_ns,
        jitter_ns=qos.jitter_ns,
        reliability=qos.reliability,
        route=tuple(route),
    )


@dataclass
class MissingRoute:
    """A matched pair whose flow could not be created for lack of a route."""

    topic: str
    writer_guid: Guid
    reader_guid: Guid
    src: Locator
    dst: Locator


@dataclass
class FlowUpdate:
    added: list[DdsFlow] = field(default_factory=list)
    removed: list[DdsFlow] = field(default_factory=list)
    missing_routes: list[MissingRoute] = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return bool(self.added or self.removed)


@dataclass
class FlowRegistry:
    """Per-topic writer/reader registries and the identified flow set."""

    writers: dict[str, dict[Guid, EndpointDescriptor]] = field(default_factory=dict)
    readers: dict[str, dict[Guid, EndpointDescriptor]] = field(default_factory=dict)
    flows: dict[str, dict[FlowId, DdsFlow]] = field(default_factory=dict)

    def all_flows(self) -> list[DdsFlow]:
        out = [f for per_topic in self.flows.values() for f in per_topic.values()]
        out.sort(key=lambda f: (f.topic, f.id))
        return out

    def flow_count(self) -> int:
        return sum(len(per_topic) for per_topic in self.flows.values())


class FlowIdentifier:
    """Applies the identification algorithm to an announcement stream."""

    def __init__(
        self,
        route_table: RouteTable,
        fixed_size: int = DEFAULT_FIXED_SIZE,
        registry: FlowRegistry | None = None,
    ):
        self.route_table = route_table
        self.fixed_size = fixed_size
        self.registry = registry if registry is not None else FlowRegistry()

    def _pair(self, writer: EndpointDescriptor, reader: EndpointDescriptor, update: FlowUpdate) -> None:
        route = self.route_table.lookup(writer.locator, reader.locator)
        if route is None:
            update.missing_routes.append(MissingRoute(
                writer.topic, writer.guid, reader.guid, writer.locator, reader.locator))
            return
        flow = map_flow(writer, reader, route, self.fixed_size)
        self.registry.flows.setdefault(writer.topic, {})[flow.id] = flow
        update.added.append(flow)

    def process(self, ann: EndpointAnnouncement) -> FlowUpdate:
        """One algorithm step for one announcement."""
        edp = ann.endpoint
        tp = edp.topic
        reg = self.registry
        update = FlowUpdate()
        writers = reg.writers.setdefault(tp, {})
        readers = reg.readers.setdefault(tp, {})
        flows = reg.flows.setdefault(tp, {})

        if edp.status is Status.UNALIVE:
            if edp.kind is EndpointKind.WRITER and edp.guid in writers:
                del writers[edp.guid]
                stale = [fid for fid in flows if fid.writer_guid == edp.guid]
                update.removed.extend(flows.pop(fid) for fid in sorted(stale))
            elif edp.kind is EndpointKind.READER and edp.guid in readers:
                del readers[edp.guid]
                stale = [fid for fid in flows if fid.reader_guid == edp.guid]
                update.removed.extend(flows.pop(fid) for fid in sorted(stale))
            return update

        if edp.kind is EndpointKind.WRITER and edp.guid not in writers:
            writers[edp.guid] = edp
            for guid in sorted(readers):
                reader = readers[guid]
                if qos_compatible(edp.qos, reader.qos):
                    self._pair(edp, reader, update)
        elif edp.kind is EndpointKind.READER and edp.guid not in readers:
            readers[edp.guid] = edp
            for guid in sorted(writers):
                writer = writers[guid]
                if qos_compatible(writer.qos, edp.qos):
                    self._pair(writer, edp, update)
        return update

    def consume(self, announcements: queue_mod.Queue, stop=None) -> list[FlowUpdate]:
        """Drain a queue of announcements until the sentinel appears.

        Used when the identifier runs in its own thread next to the server;
        announcements are processed in arrival order, exactly once.
        """
        updates = []
        while True:
            item = announcements.get()
            if item is stop:
                return updates
            updates.append(self.process(item))


def brute_force_flows(
    writers: Iterable[EndpointDescriptor],
    readers: Iterable[EndpointDescriptor],
    route_table: RouteTable,
    fixed_size: int = DEFAULT_FIXED_SIZE,
) -> dict[FlowId, DdsFlow]:
    """Independent oracle: full cross-product match over endpoint sets."""
    out: dict[FlowId, DdsFlow] = {}
    for w in writers:
        for r in readers:
            if w.topic == r.topic and qos_compatible(w.qos, r.qos):
                route = route_table.lookup(w.locator, r.locator)
                if route is not None:
                    flow = map_flow(w, r, route, fixed_size)
                    out[flow.id] = flow
    return out


# --------------------------------------------------------------------------
# FlowInfo document
# --------------------------------------------------------------------------

FLOWINFO_DECLARATION = '<?xml version="1.0" encoding="UTF-8"?>'
_ROOT = "Flow Features"
_LEAVES = (
    "Topic Name", "Size", "Talker Guid", "Talker Address", "Listener Guid",
    "Listener Address", "VID", "Priority", "Deadline", "Latency", "Jitter",
    "Reliability",
)


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _unescape(text: str) -> str:
    return (text.replace("&quot;", '"').replace("&gt;", ">").replace("&lt;", "<")
            .replace("&amp;", "&"))


def render_flowinfo(flows: Sequence[DdsFlow]) -> bytes:
    """Serialize flows deterministically (sorted by topic, writer, reader)."""
    ordered = sorted(flows, key=lambda f: (f.topic, f.id))
    lines = [FLOWINFO_DECLARATION, f"<{_ROOT}>"]
    for n, f in enumerate(ordered, start=1):
        lines.append(f'  <Flow{n} Flow ID="{n}">')
        lines.append(f"    <Topic Name>{_escape(f.topic)}</Topic Name>")
        lines.append(f"    <Size>{f.size}</Size>")
        lines.append("    <Node Info>")
        lines.append(f"      <Talker Guid>{f.id.writer_guid.dotted()}</Talker Guid>")
        lines.append(f"      <Talker Address>{f.src.udpv4()}</Talker Address>")
        lines.append(f"      <Listener Guid>{f.id.reader_guid.dotted()}</Listener Guid>")
        lines.append(f"      <Listener Address>{f.dst.udpv4()}</Listener Address>")
        lines.append("    </Node Info>")
        lines.append("    <QoS Info>")
        lines.append(f"      <VID>{f.vid}</VID>")
        lines.append(f"      <Priority>{f.prio}</Priority>")
        lines.append(f"      <Deadline>{f.prd_ns}</Deadline>")
        lines.append(f"      <Latency>{f.latency_ns}</Latency>")
        lines.append(f"      <Jitter>{f.jitter_ns}</Jitter>")
        lines.append(f"      <Reliability>{f.reliability.value}</Reliability>")
        lines.append("    </QoS Info>")
        lines.append(f"  </Flow{n}>")
    lines.append(f"</{_ROOT}>")
    return ("\n".join(lines) + "\n").encode("utf-8")


def emit_flowinfo(registry: FlowRegistry) -> bytes:
    return render_flowinfo(registry.all_flows())


_TOKEN = re.compile(r"<[^>]*>|[^<]+")
_FLOW_OPEN = re.compile(r'^(Flow\d+) Flow ID="(\d+)"$')


class _Tokens:
    def __init__(self, text: str):
        self.items = [t for t in _TOKEN.findall(text) if t.strip()]
        self.pos = 0

    def peek(self) -> str | None:
        return self.items[self.pos].strip() if self.pos < len(self.items) else None

    def next(self) -> str:
        tok = self.peek()
        if tok is None:
            raise FlowInfoSchemaError("unexpected end of document")
        self.pos += 1
        return tok


def _leaf(tokens: _Tokens, name: str) -> str:
    if tokens.next() != f"<{name}>":
        raise FlowInfoSchemaError(f"expected <{name}> element")
    value = ""
    tok = tokens.next()
    if not tok.startswith("<"):
        value = tok
        tok = tokens.next()
    if tok != f"</{name}>":
        raise FlowInfoSchemaError(f"unterminated <{name}> element")
    return _unescape(value)


def parse_flowinfo(data: bytes, route_table: RouteTable) -> list[DdsFlow]:
    """Parse a FlowInfo document, resolving each flow's route."""
    text = data.decode("utf-8")
    # drop comment lines (artifact provenance headers)
    text = re.sub(r"<!--.*?-->", "", text, flags=re.S)
    tokens = _Tokens(text)
    if not tokens.next().startswith("<?xml"):
        raise FlowInfoSchemaError("missing XML declaration")
    if tokens.next() != f"<{_ROOT}>":
        raise FlowInfoSchemaError(f"missing <{_ROOT}> root element")
    flows: list[DdsFlow] = []
    while True:
        tok = tokens.next()
        if tok == f"</{_ROOT}>":
            break
        match = _FLOW_OPEN.match(tok.strip("<>"))
        if not match:
            raise FlowInfoSchemaError(f"unknown element {tok}")
        flow_tag = match.group(1)
        topic = _leaf(tokens, "Topic Name")
        size = int(_leaf(tokens, "Size"))
        if tokens.next() != "<Node Info>":
            raise FlowInfoSchemaError("expected <Node Info> element")
        writer_guid = Guid.from_dotted(_leaf(tokens, "Talker Guid"))
        src = Locator.from_udpv4(_leaf(tokens, "Talker Address"))
        reader_guid = Guid.from_dotted(_leaf(tokens, "Listener Guid"))
        dst = Locator.from_udpv4(_leaf(tokens, "Listener Address"))
        if tokens.next() != "</Node Info>":
            raise FlowInfoSchemaError("unterminated <Node Info> element")
        if tokens.next() != "<QoS Info>":
            raise FlowInfoSchemaError("expected <QoS Info> element")
        vid = int(_leaf(tokens, "VID"))
        prio = int(_leaf(tokens, "Priority"))
        deadline = int(_leaf(tokens, "Deadline"))
        latency = int(_leaf(tokens, "Latency"))
        jitter = int(_leaf(tokens, "Jitter"))
        rel_text = _leaf(tokens, "Reliability")
        try:
            reliability = Reliability(rel_text)
        except ValueError:
            raise FlowInfoSchemaError(f"unknown reliability {rel_text!r}") from None
        if tokens.next() != "</QoS Info>":
            raise FlowInfoSchemaError("unterminated <QoS Info> element")
        if tokens.next() != f"</{flow_tag}>":
            raise FlowInfoSchemaError(f"unterminated <{flow_tag}> element")
        route = route_table.require(src, dst)
        try:
            flows.append(DdsFlow(
                id=FlowId(writer_guid, reader_guid), topic=topic, src=src, dst=dst,
                size=size, vid=vid, prio=prio, prd_ns=deadline, latency_ns=latency,
                jitter_ns=jitter, reliability=reliability, route=route))
        except ValueError as exc:
            raise FlowInfoSchemaError(str(exc)) from exc
    if tokens.peek() is not None:
        raise FlowInfoSchemaError("trailing content after root element")
    return flows

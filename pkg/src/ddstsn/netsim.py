"""Deterministic discrete-event simulator: end stations, switches with eight
strict-priority queues per egress port, time-aware gate enforcement from a
GCL, frame replication/elimination for reliable flows, endpoint processing
latency, interference generators and fault injection.

Time is integer nanoseconds; ties are broken by event insertion order, so a
run is a pure function of (inputs, seed) and traces are byte-identical across
repeats. The event horizon is the frame-creation window: frames are created
only before ``duration_ns`` and the loop then drains, so every created frame
terminates as delivered, dropped or eliminated (or is left parked behind a
dead link and counted as in flight).
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from bisect import insort
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .flow_ident import DdsFlow, FlowId
from .model import Guid
from .scheduler import (
    FrerPlan,
    Gcl,
    Schedule,
    ScheduledFlow,
    Topology,
    all_chains,
    replica_enqueue_ns,
)

NUM_QUEUES = 8
BEST_EFFORT_PRIO = 0


class ConfigMismatch(Exception):
    """Schedule or plans reference topology elements that do not exist."""


class UnknownFlow(Exception):
    """The trace contains no events for the requested flow."""


# --------------------------------------------------------------------------
# Endpoint processing-latency model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointLatencyModel:
    """Processing latency components on the publish and subscribe paths.

    The publish-side latency is serialization, message-header build, one
    term per sub-message, and the socket send; the subscribe side is socket
    receive, header parse, one term per sub-message, the notification
    callback and deserialization. ``t_wait`` holds per-thread
    synchronization waits that enter only the total.
    """

    t_ser: int = 0
    t_hd: int = 0
    t_sub: tuple[int, ...] = ()
    t_skt_s: int = 0
    t_skt_r: int = 0
    t_phd: int = 0
    t_psub: tuple[int, ...] = ()
    t_cb: int = 0
    t_dser: int = 0
    t_disc: int = 0
    t_wait: tuple[int, ...] = ()
    jitter_bound_ns: int = 0

    def __post_init__(self) -> None:
        values = [self.t_ser, self.t_hd, *self.t_sub, self.t_skt_s, self.t_skt_r,
                  self.t_phd, *self.t_psub, self.t_cb, self.t_dser, self.t_disc,
                  *self.t_wait, self.jitter_bound_ns]
        if any(v < 0 for v in values):
            raise ValueError("latency components must be >= 0")

    @property
    def t_write(self) -> int:
        return self.t_ser + self.t_hd + sum(self.t_sub) + self.t_skt_s

    @property
    def t_read(self) -> int:
        return self.t_skt_r + self.t_phd + sum(self.t_psub) + self.t_cb + self.t_dser

    @property
    def t_total(self) -> int:
        return self.t_disc + self.t_write + self.t_read + sum(self.t_wait)

    @classmethod
    def default(cls) -> "EndpointLatencyModel":
        # deterministic constants in the ballpark of measured lightweight
        # pub-sub stacks: 26 us publish, 34 us subscribe
        return cls(t_ser=6_000, t_hd=4_000, t_sub=(4_000, 4_000), t_skt_s=8_000,
                   t_skt_r=8_000, t_phd=4_000, t_psub=(4_000, 4_000), t_cb=6_000,
                   t_dser=8_000, t_disc=0, t_wait=())

    @classmethod
    def zero(cls) -> "EndpointLatencyModel":
        return cls()


# --------------------------------------------------------------------------
# Trace model
# --------------------------------------------------------------------------

class PathMember(Enum):
    PRIMARY = "primary"
    REPLICA = "replica"


class EventKind(Enum):
    PUBLISH_START = "PublishStart"
    ENQUEUE_PORT = "EnqueuePort"
    GATE_OPEN_TX = "GateOpenTx"
    LINK_DELIVER = "LinkDeliver"
    ELIMINATED = "Eliminated"
    DELIVERED = "Delivered"
    DROPPED = "Dropped"


@dataclass(frozen=True)
class TraceEvent:
    time_ns: int
    kind: EventKind
    flow_id: FlowId
    seq: int
    member: PathMember
    size: int
    node: str
    detail: str = ""


@dataclass(frozen=True)
class TimingRecord:
    flow_id: FlowId
    seq: int
    side: str                  # "write" | "read" | "total"
    components: tuple[tuple[str, int], ...]
    total_ns: int


@dataclass
class SimTrace:
    events: list[TraceEvent] = field(default_factory=list)
    timings: list[TimingRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def events_for(self, flow_id: FlowId) -> list[TraceEvent]:
        return [e for e in self.events if e.flow_id == flow_id]

    def flow_ids(self) -> list[FlowId]:
        return sorted({e.flow_id for e in self.events})

    def to_ndjson(self) -> bytes:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True)]
        for e in self.events:
            lines.append(json.dumps({
                "t": e.time_ns, "kind": e.kind.value, "flow": e.flow_id.short(),
                "seq": e.seq, "member": e.member.value, "size": e.size,
                "node": e.node, "detail": e.detail,
            }, sort_keys=True))
        return ("\n".join(lines) + "\n").encode()


@dataclass(frozen=True)
class FlowStats:
    flow_id: FlowId
    latencies_ns: tuple[int, ...]
    mean_ns: float
    max_ns: int
    jitter_ns: int        # max - min over delivered instances
    published: int
    delivered: int
    duplicates: int       # duplicates removed at the elimination point
    lost: int


# --------------------------------------------------------------------------
# Faults and interference
# --------------------------------------------------------------------------

class FaultKind(Enum):
    LINK_DOWN = "LinkDown"
    LINK_UP = "LinkUp"
    FRAME_CORRUPT = "FrameCorrupt"


@dataclass(frozen=True)
class FaultEvent:
    time_ns: int
    kind: FaultKind
    link: tuple[str, str] | None = None
    flow_id: FlowId | None = None
    seq: int | None = None


def validate_fault_script(faults: Sequence[FaultEvent]) -> None:
    down: set[frozenset] = set()
    for fault in sorted(faults, key=lambda f: f.time_ns):
        if fault.kind in (FaultKind.LINK_DOWN, FaultKind.LINK_UP):
            if fault.link is None:
                raise ValueError(f"{fault.kind.value} needs a link target")
            key = frozenset(fault.link)
            if fault.kind is FaultKind.LINK_DOWN:
                down.add(key)
            else:
                if key not in down:
                    raise ValueError("LinkUp without a matching LinkDown")
                down.discard(key)


def synth_flow_id(name: str) -> FlowId:
    """Deterministic synthetic flow id for non-discovered traffic."""
    w = hashlib.sha256(f"{name}/talker".encode()).digest()[:16]
    r = hashlib.sha256(f"{name}/listener".encode()).digest()[:16]
    return FlowId(Guid(w), Guid(r))


@dataclass(frozen=True)
class InterferenceSpec:
    """Shape of one periodic best-effort injector."""

    name: str
    size: int
    period_ns: int
    path: tuple[str, ...]

    @property
    def flow_id(self) -> FlowId:
        return synth_flow_id(f"interference/{self.name}")

    @property
    def offered_bps(self) -> float:
        return self.size * 8 * 1e9 / self.period_ns


def interference_phases(specs: Sequence[InterferenceSpec], seed: int) -> list[int]:
    """Jittered start phase per spec, drawn deterministically from the seed."""
    rng = random.Random(seed)
    return [rng.randrange(spec.period_ns) for spec in specs]


# --------------------------------------------------------------------------
# Gate model
# --------------------------------------------------------------------------

def _merge(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    ivs = sorted((s, e) for s, e in intervals if e > s)
    if not ivs:
        return []
    merged = [list(ivs[0])]
    for s, e in ivs[1:]:
        if s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


class _QueueGate:
    """Open intervals of one queue's gate over a hyperperiod, unrolled to
    [0, 2h) so wrap-around openings stay contiguous."""

    def __init__(self, open_ivs: Iterable[tuple[int, int]], h: int):
        self.h = h
        base = _merge(open_ivs)
        self.ext = _merge(list(base) + [(s + h, e + h) for s, e in base])

    def can_start(self, t: int, dur: int) -> bool:
        pos = t % self.h
        for s, e in self.ext:
            if s <= pos and pos + dur <= e:
                return True
            if s > pos:
                break
        return False

    def next_start(self, t: int, dur: int) -> int | None:
        pos = t % self.h
        for s, e in self.ext:
            if e <= pos:
                continue
            cand = max(s, pos)
            if e - cand >= dur:
                return t + (cand - pos)
        return None


_ALWAYS_OPEN = None  # sentinel: gate closed never


class _PortGates:
    """Gate state of one egress port: explicit windows per scheduled queue,
    complement-minus-guard for every other queue."""

    def __init__(self, h: int, windows: Mapping[int, list[tuple[int, int]]], guard_ns: int):
        self.h = h
        self.by_queue: dict[int, _QueueGate] = {
            q: _QueueGate(ivs, h) for q, ivs in windows.items()
        }
        blocked = []
        for ivs in windows.values():
            for s, e in ivs:
                gs = s - guard_ns
                if gs < 0:
                    blocked.append((gs + h, h))
                    blocked.append((0, e))
                else:
                    blocked.append((gs, e))
        open_ivs = []
        cursor = 0
        for s, e in _merge(blocked):
            if s > cursor:
                open_ivs.append((cursor, s))
            cursor = max(cursor, e)
        if cursor < h:
            open_ivs.append((cursor, h))
        self.default = _QueueGate(open_ivs, h)

    def gate(self, queue: int) -> _QueueGate:
        return self.by_queue.get(queue, self.default)


# --------------------------------------------------------------------------
# Engine
# --------------------------------------------------------------------------

@dataclass
class _Frame:
    flow_id: FlowId
    seq: int
    size: int
    priority: int
    vid: int
    member: PathMember
    created_ns: int
    route: tuple[str, ...]
    publish_ns: int


class _Port:
    __slots__ = ("node", "peer", "queues", "busy_until")

    def __init__(self, node: str, peer: str):
        self.node = node
        self.peer = peer
        self.queues: list[deque] = [deque() for _ in range(NUM_QUEUES)]
        self.busy_until = 0


class _Engine:
    def __init__(
        self,
        topology: Topology,
        gcl: Gcl | None,
        sched: Schedule,
        frer_plans: Mapping[FlowId, FrerPlan],
        models: Mapping[FlowId, EndpointLatencyModel],
        default_model: EndpointLatencyModel,
        interference: Sequence[InterferenceSpec],
        faults: Sequence[FaultEvent],
        duration_ns: int,
        seed: int,
    ):
        self.topology = topology
        self.gcl = gcl
        self.sched = sched
        self.plans = dict(frer_plans)
        self.models = dict(models)
        self.default_model = default_model
        self.interference = list(interference)
        self.faults = sorted(faults, key=lambda f: f.time_ns)
        self.duration_ns = duration_ns
        self.seed = seed
        self.rng = random.Random(seed)
        self.trace = SimTrace(meta={"seed": seed, "duration_ns": duration_ns,
                                    "tas": gcl is not None})
        self.now = 0
        self._heap: list = []
        self._counter = 0
        self.ports: dict[tuple[str, str], _Port] = {}
        self.gates: dict[tuple[str, str], _PortGates] = {}
        self.down_intervals: dict[frozenset, list[tuple[int, int]]] = {}
        self.link_down: dict[frozenset, int] = {}
        self.corrupt: set[tuple[FlowId, int]] = {}
        self.recovery: dict[FlowId, tuple[set, int]] = {}
        self.listener_of: dict[tuple[FlowId, PathMember], str] = {}
        self._seq: dict[FlowId, int] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _model(self, flow_id: FlowId) -> EndpointLatencyModel:
        return self.models.get(flow_id, self.default_model)

    def _port(self, a: str, b: str) -> _Port:
        port = self.ports.get((a, b))
        if port is None:
            self.topology.link_between(a, b)   # ConfigMismatch guarded earlier
            port = _Port(a, b)
            self.ports[(a, b)] = port
        return port

    def _build(self) -> None:
        validate_fault_script(self.faults)
        self.corrupt = {(f.flow_id, f.seq) for f in self.faults
                        if f.kind is FaultKind.FRAME_CORRUPT}
        for fault in self.faults:
            if fault.link is not None:
                try:
                    self.topology.link_between(*fault.link)
                except ValueError as exc:
                    raise ConfigMismatch(str(exc)) from exc
        for item in self.sched.flows:
            try:
                self.topology.validate_route(item.flow.route)
            except ValueError as exc:
                raise ConfigMismatch(str(exc)) from exc
        for spec in self.interference:
            try:
                self.topology.validate_route(spec.path)
            except ValueError as exc:
                raise ConfigMismatch(str(exc)) from exc

        if self.gcl is not None:
            self._build_gates()

        for item in self.sched.flows:
            plan = self.plans.get(item.flow.id)
            self.listener_of[(item.flow.id, PathMember.PRIMARY)] = item.flow.route[-1]
            if plan is not None:
                self.listener_of[(item.flow.id, PathMember.REPLICA)] = plan.secondary_route[-1]
                self.recovery[item.flow.id] = (set(), -1)
            self._schedule_publishes(item)

        phases = interference_phases(self.interference, self.seed)
        for spec, phase in zip(self.interference, phases):
            self._schedule_interference(spec, phase)

        for fault in self.faults:
            self.push(fault.time_ns, lambda f=fault: self._apply_fault(f))

    def _build_gates(self) -> None:
        h = self.gcl.hyperperiod_ns
        # switch ports straight from the GCL
        port_windows: dict[tuple[str, str], dict[int, list]] = {}
        port_guard: dict[tuple[str, str], int] = {}
        port_of: dict[tuple[str, int], tuple[str, str]] = {}
        for link in self.topology.links:
            port_of[(link.a, link.a_port)] = (link.a, link.b)
            port_of[(link.b, link.b_port)] = (link.b, link.a)
        for (switch, port_id), psched in self.gcl.ports.items():
            link_dir = port_of.get((switch, port_id))
            if link_dir is None:
                raise ConfigMismatch(f"GCL references unknown port {port_id} on {switch}")
            windows = port_windows.setdefault(link_dir, {})
            for entry in psched.entries:
                windows.setdefault(entry.queue, []).append(
                    (entry.start_ns, entry.start_ns + entry.duration_ns))
            port_guard[link_dir] = psched.guard_ns
        # end-station egress: implicit release gates derived from the schedule
        for flow, chain, kind in all_chains(self.sched.flows):
            if kind != "primary":
                continue
            hop = chain.hops[0]
            windows = port_windows.setdefault(hop.link, {})
            for m in range(h // flow.prd_ns):
                s = (hop.start_ns + m * flow.prd_ns) % h
                e = s + hop.duration_ns
                if e <= h:
                    windows.setdefault(flow.prio, []).append((s, e))
                else:
                    windows.setdefault(flow.prio, []).append((s, h))
                    windows.setdefault(flow.prio, []).append((0, e - h))
            port_guard.setdefault(hop.link, self.topology.guard_ns(*hop.link))
        for link_dir, windows in port_windows.items():
            self.gates[link_dir] = _PortGates(h, windows, port_guard[link_dir])

    def _schedule_publishes(self, item: ScheduledFlow) -> None:
        flow = item.flow
        m = 0
        while True:
            t = item.release_time_ns + m * flow.prd_ns
            if t >= self.duration_ns:
                break
            self.push(t, lambda it=item, inst=m: self._publish(it, inst))
            m += 1

    def _schedule_interference(self, spec: InterferenceSpec, phase: int) -> None:
        m = 0
        while True:
            t = phase + m * spec.period_ns
            if t >= self.duration_ns:
                break
            self.push(t, lambda sp=spec, inst=m: self._inject(sp))
            m += 1

    # -- event plumbing ------------------------------------------------------

    def push(self, time_ns: int, fn) -> None:
        heapq.heappush(self._heap, (time_ns, self._counter, fn))
        self._counter += 1

    def log(self, kind: EventKind, frame: _Frame, node: str, detail: str = "",
            time_ns: int | None = None) -> None:
        self.trace.events.append(TraceEvent(
            self.now if time_ns is None else time_ns, kind, frame.flow_id,
            frame.seq, frame.member, frame.size, node, detail))

    def run(self) -> SimTrace:
        while self._heap:
            self.now, _, fn = heapq.heappop(self._heap)
            fn()
        return self.trace

    # -- faults --------------------------------------------------------------

    def _apply_fault(self, fault: FaultEvent) -> None:
        if fault.kind is FaultKind.LINK_DOWN:
            self.link_down[frozenset(fault.link)] = self.now
        elif fault.kind is FaultKind.LINK_UP:
            key = frozenset(fault.link)
            start = self.link_down.pop(key, None)
            if start is not None:
                self.down_intervals.setdefault(key, []).append((start, self.now))
            a, b = fault.link
            for link_dir in ((a, b), (b, a)):
                if link_dir in self.ports:
                    self.push(self.now, lambda d=link_dir: self._attempt(d))

    def _is_down(self, a: str, b: str, t: int) -> bool:
        key = frozenset((a, b))
        start = self.link_down.get(key)
        if start is not None and start <= t:
            return True
        return any(s <= t < e for s, e in self.down_intervals.get(key, ()))

    def _down_overlaps(self, a: str, b: str, start: int, end: int) -> bool:
        key = frozenset((a, b))
        open_start = self.link_down.get(key)
        if open_start is not None and open_start < end:
            return True
        return any(s < end and e > start for s, e in self.down_intervals.get(key, ()))

    # -- publishing -----------------------------------------------------------

    def _next_seq(self, flow_id: FlowId) -> int:
        seq = self._seq.get(flow_id, 0)
        self._seq[flow_id] = seq + 1
        return seq

    def _write_components(self, model: EndpointLatencyModel) -> list[tuple[str, int]]:
        parts = [("t_ser", model.t_ser), ("t_hd", model.t_hd)]
        parts += [(f"t_sub_{i}", v) for i, v in enumerate(model.t_sub)]
        parts.append(("t_skt_s", model.t_skt_s))
        if model.jitter_bound_ns:
            parts[0] = ("t_ser", model.t_ser + self.rng.randint(0, model.jitter_bound_ns))
        return parts

    def _read_components(self, model: EndpointLatencyModel) -> list[tuple[str, int]]:
        parts = [("t_skt_r", model.t_skt_r), ("t_phd", model.t_phd)]
        parts += [(f"t_psub_{i}", v) for i, v in enumerate(model.t_psub)]
        parts += [("t_cb", model.t_cb), ("t_dser", model.t_dser)]
        if model.jitter_bound_ns:
            parts[-1] = ("t_dser", model.t_dser + self.rng.randint(0, model.jitter_bound_ns))
        return parts

    def _publish(self, item: ScheduledFlow, instance: int) -> None:
        flow = item.flow
        model = self._model(flow.id)
        seq = self._next_seq(flow.id)
        frame = _Frame(flow.id, seq, flow.size, flow.prio, flow.vid,
                       PathMember.PRIMARY, self.now, flow.route, self.now)
        self.log(EventKind.PUBLISH_START, frame, flow.route[0])
        write_parts = self._write_components(model)
        t_write = sum(v for _, v in write_parts)
        self.trace.timings.append(TimingRecord(
            flow.id, seq, "write", tuple(write_parts), t_write))
        ready = self.now + t_write
        es_link = (flow.route[0], flow.route[1])
        if self.gcl is not None:
            base = item.hops[0].start_ns
            k = max(0, -(-(ready - base) // flow.prd_ns))  # ceil división
            t_rel = base + k * flow.prd_ns
            self.push(t_rel, lambda fr=frame, l=es_link: self._release_scheduled(fr, l))
        else:
            self.push(ready, lambda fr=frame, l=es_link: self._enqueue(fr, l))

    def _inject(self, spec: InterferenceSpec) -> None:
        seq = self._next_seq(spec.flow_id)
        frame = _Frame(spec.flow_id, seq, spec.size, BEST_EFFORT_PRIO, 1,
                       PathMember.PRIMARY, self.now, spec.path, self.now)
        self.listener_of.setdefault((spec.flow_id, PathMember.PRIMARY), spec.path[-1])
        self.log(EventKind.PUBLISH_START, frame, spec.path[0])
        self._enqueue(frame, (spec.path[0], spec.path[1]))

    # -- transmission ---------------------------------------------------------

    def _enqueue(self, frame: _Frame, link_dir: tuple[str, str]) -> None:
        port = self._port(*link_dir)
        port.queues[frame.priority].append(frame)
        self.log(EventKind.ENQUEUE_PORT, frame, link_dir[0],
                 f"{link_dir[0]}->{link_dir[1]} q{frame.priority}")
        self._attempt(link_dir)

    def _release_scheduled(self, frame: _Frame, link_dir: tuple[str, str]) -> None:
        """Time-triggered release of a scheduled frame at the talker NIC."""
        port = self._port(*link_dir)
        start = max(self.now, port.busy_until)
        if start > self.now:
            # the schedule guarantees a free line; arriving here means the
            # schedule was violated, transmit as soon as the line frees
            self.push(start, lambda: self._release_scheduled(frame, link_dir))
            return
        self._transmit(port, frame, link_dir)

    def _attempt(self, link_dir: tuple[str, str]) -> None:
        port = self._port(*link_dir)
        t = self.now
        if port.busy_until > t:
            self.push(port.busy_until, lambda d=link_dir: self._attempt(d))
            return
        if self._is_down(*link_dir, t):
            return  # a LinkUp event will retrigger this port
        gates = self.gates.get(link_dir) if self.gcl is not None else None
        wake: int | None = None
        for q in range(NUM_QUEUES - 1, -1, -1):
            queue = port.queues[q]
            if not queue:
                continue
            frame = queue[0]
            dur = self.topology.tx_ns(*link_dir, frame.size)
            if gates is None:
                self._transmit(port, queue.popleft(), link_dir)
                return
            gate = gates.gate(q)
            if gate.can_start(t, dur):
                self._transmit(port, queue.popleft(), link_dir)
                return
            nxt = gate.next_start(t, dur)
            if nxt is not None:
                wake = nxt if wake is None else min(wake, nxt)
        if wake is not None:
            self.push(wake, lambda d=link_dir: self._attempt(d))

    def _transmit(self, port: _Port, frame: _Frame, link_dir: tuple[str, str]) -> None:
        a, b = link_dir
        t = self.now
        if self._is_down(a, b, t):
            self.log(EventKind.DROPPED, frame, a, f"link {a}->{b} down")
            self.push(t, lambda d=link_dir: self._attempt(d))
            return
        dur = self.topology.tx_ns(a, b, frame.size)
        occ = self.topology.occupancy_ns(a, b, frame.size)
        prop = self.topology.link_between(a, b).propagation_ns
        self.log(EventKind.GATE_OPEN_TX, frame, a, f"{a}->{b}")
        port.busy_until = t + occ
        arrival = t + dur + prop
        self.push(arrival, lambda fr=frame, s=t: self._deliver_link(fr, link_dir, s))
        self.push(t + occ, lambda d=link_dir: self._attempt(d))

    # -- arrival ---------------------------------------------------------------

    def _deliver_link(self, frame: _Frame, link_dir: tuple[str, str], tx_start: int) -> None:
        a, b = link_dir
        if self._down_overlaps(a, b, tx_start, self.now):
            self.log(EventKind.DROPPED, frame, b, f"lost on {a}->{b}")
            return
        if (frame.flow_id, frame.seq) in self.corrupt and frame.member is PathMember.PRIMARY:
            self.log(EventKind.DROPPED, frame, b, "corrupt frame discarded")
            return
        self.log(EventKind.LINK_DELIVER, frame, b, f"{a}->{b}")
        listener = self.listener_of.get((frame.flow_id, frame.member))
        if b == frame.route[-1] and b == listener:
            self._deliver_app(frame, b)
            return
        self._forward(frame, b)

    def _forward(self, frame: _Frame, node: str) -> None:
        plan = self.plans.get(frame.flow_id)
        proc = self.topology.switch_delay_ns
        if plan is not None and node == plan.elimination_switch:
            if not self._recovery_accept(frame.flow_id, frame.seq, plan.recovery_window):
                self.log(EventKind.ELIMINATED, frame, node,
                         f"duplicate seq {frame.seq}")
                return
        if (plan is not None and node == plan.replication_switch
                and frame.member is PathMember.PRIMARY):
            replica = _Frame(frame.flow_id, frame.seq, frame.size, frame.priority,
                             frame.vid, PathMember.REPLICA, frame.created_ns,
                             plan.secondary_route, frame.publish_ns)
            idx = plan.secondary_route.index(node)
            rep_link = (node, plan.secondary_route[idx + 1])
            self.push(self.now + proc, lambda fr=replica, l=rep_link: self._enqueue(fr, l))
        idx = frame.route.index(node)
        next_link = (node, frame.route[idx + 1])
        self.push(self.now + proc, lambda fr=frame, l=next_link: self._enqueue(fr, l))

    def _recovery_accept(self, flow_id: FlowId, seq: int, window: int) -> bool:
        seen, highest = self.recovery[flow_id]
        if seq in seen or seq <= highest - window:
            return False
        seen.add(seq)
        highest = max(highest, seq)
        seen = {s for s in seen if s > highest - window}
        self.recovery[flow_id] = (seen, highest)
        return True

    def _deliver_app(self, frame: _Frame, node: str) -> None:
        model = self._model(frame.flow_id)
        read_parts = self._read_components(model)
        t_read = sum(v for _, v in read_parts)
        done = self.now + t_read
        self.trace.timings.append(TimingRecord(
            frame.flow_id, frame.seq, "read", tuple(read_parts), t_read))
        t_write = next((r.total_ns for r in self.trace.timings
                        if r.flow_id == frame.flow_id and r.seq == frame.seq
                        and r.side == "write"), 0)
        total_parts = ([("t_disc", model.t_disc), ("t_write", t_write),
                        ("t_read", t_read)]
                       + [(f"t_wait_{i}", v) for i, v in enumerate(model.t_wait)])
        self.trace.timings.append(TimingRecord(
            frame.flow_id, frame.seq, "total",
            tuple(total_parts), sum(v for _, v in total_parts)))
        self.push(done, lambda fr=frame, n=node: self.log(EventKind.DELIVERED, fr, n))


def run(
    topology: Topology,
    gcl: Gcl | None,
    sched: Schedule,
    frer_plans: Mapping[FlowId, FrerPlan] | None = None,
    latency_models: Mapping[FlowId, EndpointLatencyModel] | None = None,
    interference: Sequence[InterferenceSpec] = (),
    faults: Sequence[FaultEvent] = (),
    duration_ns: int = 0,
    seed: int = 0,
    default_model: EndpointLatencyModel | None = None,
) -> SimTrace:
    """Replay a schedule deterministically and capture the event trace.

    With ``gcl`` present, switch ports enforce the gate windows and talker
    NICs release scheduled frames exactly at their first-hop offsets; without
    it the network behaves as strict-priority Ethernet with no preemption.
    """
    if duration_ns < sched.hyperperiod_ns:
        raise ValueError("duration must cover at least one hyperperiod")
    engine = _Engine(
        topology, gcl, sched, frer_plans or {}, latency_models or {},
        default_model if default_model is not None else EndpointLatencyModel.default(),
        interference, faults, duration_ns, seed)
    return engine.run()


def measure(trace: SimTrace, flow_id: FlowId) -> FlowStats:
    """Per-flow statistics from a trace."""
    events = trace.events_for(flow_id)
    if not events:
        raise UnknownFlow(f"no events for flow {flow_id.short()}")
    publish_at: dict[int, int] = {}
    delivered_at: dict[int, int] = {}
    duplicates = 0
    for e in events:
        if e.kind is EventKind.PUBLISH_START:
            publish_at[e.seq] = e.time_ns
        elif e.kind is EventKind.DELIVERED:
            delivered_at[e.seq] = e.time_ns
        elif e.kind is EventKind.ELIMINATED:
            duplicates += 1
    latencies = tuple(delivered_at[seq] - publish_at[seq]
                      for seq in sorted(delivered_at) if seq in publish_at)
    published = len(publish_at)
    delivered = len(delivered_at)
    return FlowStats(
        flow_id=flow_id,
        latencies_ns=latencies,
        mean_ns=(sum(latencies) / len(latencies)) if latencies else 0.0,
        max_ns=max(latencies) if latencies else 0,
        jitter_ns=(max(latencies) - min(latencies)) if latencies else 0,
        published=published,
        delivered=delivered,
        duplicates=duplicates,
        lost=published - delivered,
    )


def link_bytes(trace: SimTrace, a: str, b: str) -> int:
    """Total frame bytes transmitted on the directed link a->b."""
    return sum(e.size for e in trace.events
               if e.kind is EventKind.GATE_OPEN_TX and e.detail == f"{a}->{b}")


def conservation_counts(trace: SimTrace, flow_id: FlowId) -> dict[str, int]:
    """Frame-copy accounting: copies created vs terminal events."""
    copies = set()
    terminal = 0
    publishes = 0
    for e in trace.events_for(flow_id):
        if e.kind is EventKind.PUBLISH_START:
            publishes += 1
            copies.add((e.seq, e.member))
        elif e.kind is EventKind.ENQUEUE_PORT:
            copies.add((e.seq, e.member))
        elif e.kind in (EventKind.DELIVERED, EventKind.DROPPED, EventKind.ELIMINATED):
            terminal += 1
    return {"published": publishes, "copies": len(copies), "terminal": terminal,
            "in_flight": len(copies) - terminal}

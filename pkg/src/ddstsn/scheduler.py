"""Schedule synthesis: per-flow per-hop transmission offsets, per-port gate
control lists over one hyperperiod, and replication plans for reliable flows.

The solver is a deterministic backtracking search over release offsets with
earliest-feasible placement, ordered by (priority desc, period asc). Offsets
repeat every flow period, so every hyperperiod instance of a flow sees the
identical chain and scheduled jitter is zero by construction. Non-overlap on
an egress port is enforced on occupancy intervals (frame bytes plus FCS,
preamble and inter-frame gap) so a frame can always start exactly at its
offset. Queue isolation (no two frames buffered in the same priority queue
of the same port at once) keeps FIFO service consistent with the windows.

An independent validator re-derives every constraint directly from the
schedule; it shares no code path with the placement search.
"""

from __future__ import annotations

import math
from bisect import bisect_right, insort
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .flow_ident import DdsFlow, FlowId
from .model import Reliability

FRAME_OVERHEAD_BYTES = 24   # 4 FCS + 20 preamble/inter-frame gap, line occupancy only
MIN_WIRE_BYTES = 64
MAX_BE_FRAME_BYTES = 1522
DEFAULT_SWITCH_DELAY_NS = 10_000
DEFAULT_RECOVERY_WINDOW = 32
MAX_HYPERPERIOD_NS = 2**63 - 1
_MAX_FLOW_ATTEMPTS = 800
_MAX_HOP_SHIFTS = 4000


class HyperperiodOverflow(Exception):
    """The period mix produces an unrepresentable hyperperiod."""


class NoDisjointPath(Exception):
    """The topology cannot provide a second link-disjoint route."""


class InfeasibleSchedule(Exception):
    """The constraint system is unsatisfiable; carries a conflict report."""

    def __init__(self, conflicts: list[str]):
        super().__init__("; ".join(conflicts))
        self.conflicts = conflicts


class NodeRole(Enum):
    END_STATION = "endstation"
    SWITCH = "switch"


@dataclass(frozen=True)
class Link:
    a: str
    a_port: int
    b: str
    b_port: int
    bandwidth_bps: int
    propagation_ns: int = 0

    def __post_init__(self) -> None:
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.propagation_ns < 0:
            raise ValueError("propagation delay must be >= 0")
        if self.a == self.b:
            raise ValueError("link endpoints must differ")


class Topology:
    """Nodes, bidirectional links and the switch store-and-forward delay."""

    def __init__(self, roles: Mapping[str, NodeRole], links: Iterable[Link],
                 switch_delay_ns: int = DEFAULT_SWITCH_DELAY_NS):
        self.roles = dict(roles)
        self.links = tuple(links)
        self.switch_delay_ns = switch_delay_ns
        self._by_pair: dict[tuple[str, str], Link] = {}
        self._ports: dict[tuple[str, str], int] = {}
        used_ports: set[tuple[str, int]] = set()
        for link in self.links:
            for node in (link.a, link.b):
                if node not in self.roles:
                    raise ValueError(f"link references unknown node {node!r}")
            for node, port in ((link.a, link.a_port), (link.b, link.b_port)):
                if (node, port) in used_ports:
                    raise ValueError(f"port {port} used twice on node {node}")
                used_ports.add((node, port))
            self._by_pair[(link.a, link.b)] = link
            self._by_pair[(link.b, link.a)] = link
            self._ports[(link.a, link.b)] = link.a_port
            self._ports[(link.b, link.a)] = link.b_port

    def is_switch(self, node: str) -> bool:
        return self.roles[node] is NodeRole.SWITCH

    def neighbors(self, node: str) -> list[str]:
        return sorted(b for (a, b) in self._ports if a == node)

    def link_between(self, a: str, b: str) -> Link:
        try:
            return self._by_pair[(a, b)]
        except KeyError:
            raise ValueError(f"no link between {a} and {b}") from None

    def egress_port(self, node: str, neighbor: str) -> int:
        return self._ports[(node, neighbor)]

    def wire_bytes(self, size: int) -> int:
        return max(size, MIN_WIRE_BYTES)

    def tx_ns(self, a: str, b: str, size: int) -> int:
        """Time to put the frame's bytes on the a->b wire."""
        bps = self.link_between(a, b).bandwidth_bps
        return (self.wire_bytes(size) * 8 * 1_000_000_000 + bps - 1) // bps

    def occupancy_ns(self, a: str, b: str, size: int) -> int:
        """Line occupancy including FCS, preamble and inter-frame gap."""
        bps = self.link_between(a, b).bandwidth_bps
        wire = self.wire_bytes(size) + FRAME_OVERHEAD_BYTES
        return (wire * 8 * 1_000_000_000 + bps - 1) // bps

    def guard_ns(self, a: str, b: str) -> int:
        """Guard band: transmission time of one maximum-size best-effort frame."""
        bps = self.link_between(a, b).bandwidth_bps
        return (MAX_BE_FRAME_BYTES * 8 * 1_000_000_000 + bps - 1) // bps

    def validate_route(self, route: Sequence[str]) -> None:
        if len(route) < 2:
            raise ValueError(f"route {route} too short")
        for a, b in zip(route, route[1:]):
            self.link_between(a, b)
        for node in route[1:-1]:
            if not self.is_switch(node):
                raise ValueError(f"route {route} passes through end station {node}")


def hyperperiod_ns(flows: Sequence[DdsFlow]) -> int:
    """Least common multiple of all flow periods."""
    if not flows:
        raise ValueError("hyperperiod of an empty flow set is undefined")
    h = 1
    for flow in flows:
        if flow.prd_ns <= 0:
            raise ValueError("all periods must be > 0")
        h = math.lcm(h, flow.prd_ns)
        if h > MAX_HYPERPERIOD_NS:
            raise HyperperiodOverflow(f"hyperperiod exceeds {MAX_HYPERPERIOD_NS} ns")
    return h


# --------------------------------------------------------------------------
# FRER planning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FrerPlan:
    """Replication/elimination placement for one reliable flow.

    End stations are single-homed, so the attachment links are necessarily
    shared; disjointness holds between the replication switch (adjacent to
    the talker) and the elimination switch (adjacent to the listener).
    """

    flow_id: FlowId
    primary_route: tuple[str, ...]
    secondary_route: tuple[str, ...]
    replication_switch: str
    replication_port: int       # ingress port facing the talker
    elimination_switch: str
    elimination_port: int       # egress port facing the listener
    recovery_window: int = DEFAULT_RECOVERY_WINDOW


def _bfs_disjoint(topology: Topology, start: str, goal: str,
                  banned: set[frozenset]) -> tuple[str, ...] | None:
    prev: dict[str, str | None] = {start: None}
    dq = deque([start])
    while dq:
        node = dq.popleft()
        if node == goal:
            path = [node]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return tuple(reversed(path))
        for nbr in topology.neighbors(node):
            if nbr in prev or frozenset((node, nbr)) in banned:
                continue
            if not topology.is_switch(nbr) and nbr != goal:
                continue
            prev[nbr] = node
            dq.append(nbr)
    return None


def plan_frer(flow: DdsFlow, topology: Topology,
              recovery_window: int = DEFAULT_RECOVERY_WINDOW) -> FrerPlan:
    """Plan replication for one reliable flow over a second disjoint route."""
    if flow.reliability is not Reliability.RELIABLE:
        raise ValueError("replication is only planned for reliable flows")
    route = flow.route
    topology.validate_route(route)
    if len(route) < 4:
        raise NoDisjointPath(
            f"flow {flow.id.short()}: route {route} has no switch segment to diversify")
    repl, elim = route[1], route[-2]
    primary_mid = route[1:-1]
    banned = {frozenset(pair) for pair in zip(primary_mid, primary_mid[1:])}
    alt = _bfs_disjoint(topology, repl, elim, banned)
    if alt is None:
        raise NoDisjointPath(
            f"flow {flow.id.short()}: no second link-disjoint path {repl}->{elim}")
    secondary = (route[0],) + alt + (route[-1],)
    return FrerPlan(
        flow_id=flow.id,
        primary_route=route,
        secondary_route=secondary,
        replication_switch=repl,
        replication_port=topology.egress_port(repl, route[0]),
        elimination_switch=elim,
        elimination_port=topology.egress_port(elim, route[-1]),
        recovery_window=recovery_window,
    )


def plan_all_frer(flows: Sequence[DdsFlow], topology: Topology,
                  recovery_window: int = DEFAULT_RECOVERY_WINDOW,
                  ) -> tuple[dict[FlowId, FrerPlan], list[str]]:
    """Plan every reliable flow; flows without a disjoint path are reported
    and left unreplicated."""
    plans: dict[FlowId, FrerPlan] = {}
    warnings: list[str] = []
    for flow in flows:
        if flow.reliability is not Reliability.RELIABLE:
            continue
        try:
            plans[flow.id] = plan_frer(flow, topology, recovery_window)
        except NoDisjointPath as exc:
            warnings.append(str(exc))
    return plans, warnings


# --------------------------------------------------------------------------
# Schedule data model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HopWindow:
    link: tuple[str, str]
    start_ns: int        # base offset; repeats every flow period
    duration_ns: int


@dataclass(frozen=True)
class ScheduledFlow:
    flow: DdsFlow
    release_time_ns: int
    hops: tuple[HopWindow, ...]
    replica: "ScheduledFlow | None" = None


@dataclass(frozen=True)
class GclEntry:
    queue: int
    start_ns: int
    duration_ns: int


@dataclass(frozen=True)
class PortSchedule:
    guard_ns: int
    entries: tuple[GclEntry, ...]  # sorted by (start, queue)


@dataclass(frozen=True)
class Gcl:
    hyperperiod_ns: int
    ports: dict[tuple[str, int], PortSchedule] = field(default_factory=dict)


@dataclass(frozen=True)
class Schedule:
    flows: tuple[ScheduledFlow, ...]
    gcl: Gcl
    hyperperiod_ns: int


# --------------------------------------------------------------------------
# Interval bookkeeping
# --------------------------------------------------------------------------

def _segments(base: int, width: int, period: int, h: int) -> list[tuple[int, int]]:
    """Concrete [start, end) segments of a periodic interval over [0, h)."""
    if width <= 0:
        return []
    out = []
    for m in range(h // period):
        s = (base + m * period) % h
        e = s + width
        if e <= h:
            out.append((s, e))
        else:
            out.append((s, h))
            out.append((0, e - h))
    return out


class _Busy:
    """Sorted committed segments over [0, h) with overlap queries."""

    def __init__(self, h: int):
        self.h = h
        self.segs: list[tuple[int, int]] = []

    def add(self, seg: tuple[int, int]) -> None:
        insort(self.segs, seg)

    def overlap(self, s: int, e: int,
                extra: Sequence[tuple[int, int]] = ()) -> tuple[int, int] | None:
        idx = bisect_right(self.segs, (s, self.h + 1))
        if idx > 0 and self.segs[idx - 1][1] > s:
            return self.segs[idx - 1]
        while idx < len(self.segs) and self.segs[idx][0] < e:
            if self.segs[idx][1] > s:
                return self.segs[idx]
            idx += 1
        for seg in extra:
            if seg[0] < e and seg[1] > s:
                return seg
        return None


class _Bump(Exception):
    """Hop cannot be placed for this chain start; advance it and retry."""

    def __init__(self, delta: int):
        super().__init__(f"advance chain start by {delta}")
        self.delta = max(1, delta)


class _Placer:
    def __init__(self, topology: Topology, h: int):
        self.topology = topology
        self.h = h
        self.port_busy: dict[tuple[str, str], _Busy] = {}
        self.queue_busy: dict[tuple[str, str, int], _Busy] = {}

    def _port(self, link: tuple[str, str]) -> _Busy:
        return self.port_busy.setdefault(link, _Busy(self.h))

    def _queue(self, link: tuple[str, str], prio: int) -> _Busy:
        return self.queue_busy.setdefault((*link, prio), _Busy(self.h))

    def place_chain(
        self,
        flow: DdsFlow,
        links: Sequence[tuple[str, str]],
        enq0: int,
        *,
        first_hop_is_endstation: bool,
        pending_port: dict,
        pending_queue: dict,
    ) -> list[HopWindow]:
        """Place one chain with earliest-feasible windows.

        Raises _Bump when no window works for the given enqueue time and the
        chain start itself must move later.
        """
        topo = self.topology
        prd = flow.prd_ns
        enq = enq0
        hops: list[HopWindow] = []
        for k, (a, b) in enumerate(links):
            dur = topo.tx_ns(a, b, flow.size)
            occ = topo.occupancy_ns(a, b, flow.size)
            prop = topo.link_between(a, b).propagation_ns
            port = self._port((a, b))
            extra_port = pending_port.get((a, b), ())
            queue = self._queue((a, b), flow.prio)
            extra_queue = pending_queue.get((a, b, flow.prio), ())
            t = enq
            for _ in range(_MAX_HOP_SHIFTS):
                hit = None
                for seg in _segments(t, occ, prd, self.h):
                    hit = port.overlap(*seg, extra_port)
                    if hit is not None:
                        t += max(1, hit[1] - seg[0])
                        break
                if hit is None:
                    break
            else:
                raise _Bump(prd)
            # queue isolation: the buffered span [enq, t) must not overlap any
            # other buffered span of the same (port, priority queue)
            if not (first_hop_is_endstation and k == 0) and t > enq:
                for seg in _segments(enq, t - enq, prd, self.h):
                    hit = queue.overlap(*seg, extra_queue)
                    if hit is not None:
                        raise _Bump(hit[1] - seg[0])
            hops.append(HopWindow((a, b), t, dur))
            arrival = t + dur + prop
            enq = arrival + (topo.switch_delay_ns if topo.is_switch(b) else 0)
        return hops

    def record(self, flow: DdsFlow, hops: Sequence[HopWindow], enqueues: Sequence[int],
               *, first_hop_is_endstation: bool,
               pending_port: dict, pending_queue: dict) -> None:
        """Stage a placed chain's segments into the pending maps."""
        topo = self.topology
        for k, hop in enumerate(hops):
            occ = topo.occupancy_ns(*hop.link, flow.size)
            pending_port.setdefault(hop.link, []).extend(
                _segments(hop.start_ns, occ, flow.prd_ns, self.h))
            if not (first_hop_is_endstation and k == 0) and hop.start_ns > enqueues[k]:
                pending_queue.setdefault((*hop.link, flow.prio), []).extend(
                    _segments(enqueues[k], hop.start_ns - enqueues[k], flow.prd_ns, self.h))

    def commit(self, pending_port: dict, pending_queue: dict) -> None:
        for link, segs in pending_port.items():
            busy = self._port(link)
            for seg in segs:
                busy.add(seg)
        for key, segs in pending_queue.items():
            busy = self._queue((key[0], key[1]), key[2])
            for seg in segs:
                busy.add(seg)


def chain_arrival_ns(topology: Topology, hops: Sequence[HopWindow]) -> int:
    """Time the frame is fully received at the chain's final node."""
    last = hops[-1]
    return last.start_ns + last.duration_ns + topology.link_between(*last.link).propagation_ns


def chain_enqueues(topology: Topology, hops: Sequence[HopWindow], enq0: int) -> list[int]:
    """Time the frame becomes available for transmission at each hop."""
    out = []
    enq = enq0
    for hop in hops:
        out.append(enq)
        enq = hop.start_ns + hop.duration_ns + topology.link_between(*hop.link).propagation_ns
        if topology.is_switch(hop.link[1]):
            enq += topology.switch_delay_ns
    return out


def _route_links(route: Sequence[str]) -> list[tuple[str, str]]:
    return list(zip(route, route[1:]))


def _talker_delay(talker_delay_ns, flow: DdsFlow) -> int:
    if isinstance(talker_delay_ns, int):
        return talker_delay_ns
    return int(talker_delay_ns.get(flow.id, 0))


def replica_enqueue_ns(topology: Topology, primary_hops: Sequence[HopWindow]) -> int:
    """When the duplicate becomes available at the replication switch."""
    first = primary_hops[0]
    return (first.start_ns + first.duration_ns
            + topology.link_between(*first.link).propagation_ns
            + topology.switch_delay_ns)


def schedule(
    flows: Sequence[DdsFlow],
    static_flows: Sequence[DdsFlow],
    topology: Topology,
    *,
    frer_plans: Mapping[FlowId, FrerPlan] | None = None,
    talker_delay_ns: int | Mapping[FlowId, int] = 0,
) -> Schedule:
    """Synthesize offsets and gate lists for all scheduled flows.

    ``talker_delay_ns`` is the publish-side processing budget: the first-hop
    offset is placed at least that far into the period and the release time
    is the offset minus the budget, so a frame is ready exactly when its
    first window opens.
    """
    frer_plans = dict(frer_plans or {})
    all_flows = sorted(
        list(flows) + list(static_flows),
        key=lambda f: (-f.prio, f.prd_ns, f.topic, f.id),
    )
    if not all_flows:
        return Schedule((), Gcl(hyperperiod_ns=1, ports={}), 1)
    seen_ids: set[FlowId] = set()
    for flow in all_flows:
        topology.validate_route(flow.route)
        if flow.id in seen_ids:
            raise ValueError(f"duplicate flow id {flow.id.short()}")
        seen_ids.add(flow.id)
    h = hyperperiod_ns(all_flows)

    placer = _Placer(topology, h)
    conflicts: list[str] = []
    scheduled: list[ScheduledFlow] = []

    for flow in all_flows:
        delay = _talker_delay(talker_delay_ns, flow)
        plan = frer_plans.get(flow.id)
        links = _route_links(flow.route)
        o0 = delay
        ub = delay + flow.prd_ns - 1
        placed = None
        attempts = 0
        while attempts < _MAX_FLOW_ATTEMPTS and o0 <= ub:
            attempts += 1
            pending_port: dict = {}
            pending_queue: dict = {}
            try:
                hops = placer.place_chain(
                    flow, links, o0, first_hop_is_endstation=True,
                    pending_port=pending_port, pending_queue=pending_queue)
            except _Bump as bump:
                o0 += bump.delta
                continue
            if hops[0].start_ns != o0:
                # the first transmission could not start at the release point;
                # move the release instead of waiting at the talker
                o0 = hops[0].start_ns
                if o0 > ub:
                    break
            release = o0 - delay
            arrival = chain_arrival_ns(topology, hops)
            if arrival - release > flow.latency_ns:
                enqueues = chain_enqueues(topology, hops, o0)
                waits = [hop.start_ns - e for hop, e in zip(hops, enqueues) if hop.start_ns > e]
                if not waits:
                    conflicts.append(
                        f"flow {flow.id.short()} ({flow.topic}): unavoidable chain latency "
                        f"{arrival - release} ns exceeds bound {flow.latency_ns} ns")
                    break
                o0 += min(waits)
                continue
            enqueues = chain_enqueues(topology, hops, o0)
            placer.record(flow, hops, enqueues, first_hop_is_endstation=True,
                          pending_port=pending_port, pending_queue=pending_queue)
            replica_sched = None
            if plan is not None:
                rep_links = _route_links(plan.secondary_route[1:])
                rep_enq0 = replica_enqueue_ns(topology, hops)
                try:
                    rep_hops = placer.place_chain(
                        flow, rep_links, rep_enq0, first_hop_is_endstation=False,
                        pending_port=pending_port, pending_queue=pending_queue)
                except _Bump as bump:
                    o0 += bump.delta
                    continue
                rep_arrival = chain_arrival_ns(topology, rep_hops)
                if rep_arrival - release > flow.latency_ns:
                    o0 += max(1, rep_arrival - release - flow.latency_ns)
                    continue
                rep_enqueues = chain_enqueues(topology, rep_hops, rep_enq0)
                placer.record(flow, rep_hops, rep_enqueues, first_hop_is_endstation=False,
                              pending_port=pending_port, pending_queue=pending_queue)
                replica_sched = ScheduledFlow(flow, release, tuple(rep_hops), None)
            placer.commit(pending_port, pending_queue)
            placed = ScheduledFlow(flow, release, tuple(hops), replica_sched)
            break
        if placed is None:
            if not conflicts or f"flow {flow.id.short()}" not in conflicts[-1]:
                conflicts.append(
                    f"flow {flow.id.short()} ({flow.topic}): no feasible release offset in "
                    f"[{0}, {flow.prd_ns - 1}] after {attempts} placements")
            raise InfeasibleSchedule(conflicts)
        scheduled.append(placed)

    scheduled.sort(key=lambda s: (s.flow.topic, s.flow.id))
    gcl = build_gcl(scheduled, topology, h)
    return Schedule(tuple(scheduled), gcl, h)


def all_chains(scheduled: Sequence[ScheduledFlow]):
    """Yield (flow, chain, kind) for every primary and replica chain."""
    for item in scheduled:
        yield item.flow, item, "primary"
        if item.replica is not None:
            yield item.flow, item.replica, "replica"


def build_gcl(scheduled: Sequence[ScheduledFlow], topology: Topology, h: int) -> Gcl:
    """One gate window per scheduled frame transmission on switch egress
    ports; best-effort queues get the complement minus a per-port guard."""
    entries: dict[tuple[str, int], list[GclEntry]] = {}
    guards: dict[tuple[str, int], int] = {}
    for flow, chain, _ in all_chains(scheduled):
        for hop in chain.hops:
            a, b = hop.link
            if not topology.is_switch(a):
                continue
            port = (a, topology.egress_port(a, b))
            guards[port] = topology.guard_ns(a, b)
            for seg in _segments(hop.start_ns, hop.duration_ns, flow.prd_ns, h):
                entries.setdefault(port, []).append(
                    GclEntry(flow.prio, seg[0], seg[1] - seg[0]))
    ports = {
        port: PortSchedule(guards[port],
                           tuple(sorted(items, key=lambda e: (e.start_ns, e.queue))))
        for port, items in sorted(entries.items())
    }
    return Gcl(hyperperiod_ns=h, ports=ports)


# --------------------------------------------------------------------------
# Independent validator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    flow: str = ""


def validate_schedule(sched: Schedule, topology: Topology) -> list[Violation]:
    """Re-derive every scheduling constraint directly from the schedule.

    Checks gate coverage, per-port occupancy non-overlap, hop precedence,
    end-to-end latency bounds, per-instance latency equality (zero scheduled
    jitter) and same-queue buffering isolation. Empty report = valid.
    """
    h = sched.hyperperiod_ns
    out: list[Violation] = []
    port_segs: dict[tuple[str, str], list[tuple[int, int, str]]] = {}
    queue_segs: dict[tuple[str, str, int], list[tuple[int, int, str]]] = {}

    for flow, chain, kind in all_chains(sched.flows):
        tag = f"{flow.id.short()}/{kind}"
        if h % flow.prd_ns != 0:
            out.append(Violation("coverage", "period does not divide hyperperiod", tag))
            continue
        if kind == "primary" and chain.hops[0].start_ns < chain.release_time_ns:
            out.append(Violation(
                "precedence",
                f"first hop at {chain.hops[0].start_ns} precedes release "
                f"{chain.release_time_ns}", tag))

        prev_ready = None
        broken = False
        for hop in chain.hops:
            a, b = hop.link
            try:
                link = topology.link_between(a, b)
            except ValueError:
                out.append(Violation("coverage", f"unknown link {a}->{b}", tag))
                broken = True
                break
            dur = topology.tx_ns(a, b, flow.size)
            if hop.duration_ns != dur:
                out.append(Violation(
                    "coverage",
                    f"hop {a}->{b} duration {hop.duration_ns} != size-derived {dur}", tag))
            if prev_ready is not None and hop.start_ns < prev_ready:
                out.append(Violation(
                    "precedence",
                    f"hop {a}->{b} starts at {hop.start_ns} before the frame is "
                    f"available at {prev_ready}", tag))
            arrival = hop.start_ns + hop.duration_ns + link.propagation_ns
            prev_ready = arrival + (topology.switch_delay_ns if topology.is_switch(b) else 0)
            occ = topology.occupancy_ns(a, b, flow.size)
            for seg in _segments(hop.start_ns, occ, flow.prd_ns, h):
                port_segs.setdefault((a, b), []).append((seg[0], seg[1], tag))
            if topology.is_switch(a):
                port = (a, topology.egress_port(a, b))
                psched = sched.gcl.ports.get(port)
                for seg in _segments(hop.start_ns, hop.duration_ns, flow.prd_ns, h):
                    covered = psched is not None and any(
                        e.queue == flow.prio and e.start_ns <= seg[0]
                        and seg[1] <= e.start_ns + e.duration_ns
                        for e in psched.entries)
                    if not covered:
                        out.append(Violation(
                            "gate",
                            f"window [{seg[0]},{seg[1]}) of queue {flow.prio} on port "
                            f"{port} lies outside every gate-open window", tag))
        if broken:
            continue

        release = chain.release_time_ns
        latency = chain_arrival_ns(topology, chain.hops) - release
        if latency > flow.latency_ns:
            out.append(Violation(
                "latency",
                f"end-to-end latency {latency} ns exceeds bound {flow.latency_ns} ns", tag))
        # offsets repeat per period, so instance latencies must all be equal
        arrivals = sorted({
            (chain_arrival_ns(topology, chain.hops) + m * flow.prd_ns)
            - (release + m * flow.prd_ns)
            for m in range(h // flow.prd_ns)
        })
        if len(arrivals) > 1:
            out.append(Violation("jitter", "instances have unequal latencies", tag))

    # same-queue buffering spans
    for flow, chain, kind in all_chains(sched.flows):
        tag = f"{flow.id.short()}/{kind}"
        if kind == "primary":
            enq0 = chain.hops[0].start_ns
            start_idx = 1   # the end-station NIC releases per flow, not from a queue
        else:
            parent = next(i for i in sched.flows if i.flow.id == flow.id)
            enq0 = replica_enqueue_ns(topology, parent.hops)
            start_idx = 0
        try:
            enqueues = chain_enqueues(topology, chain.hops, enq0)
        except ValueError:
            continue
        for idx in range(start_idx, len(chain.hops)):
            hop = chain.hops[idx]
            if hop.start_ns > enqueues[idx]:
                for seg in _segments(enqueues[idx], hop.start_ns - enqueues[idx],
                                     flow.prd_ns, h):
                    queue_segs.setdefault((*hop.link, flow.prio), []).append(
                        (seg[0], seg[1], tag))

    def _report_overlaps(segmap, kind, what):
        for key in sorted(segmap):
            segs = sorted(segmap[key])
            for (s1, e1, t1), (s2, e2, t2) in zip(segs, segs[1:]):
                if s2 < e1:
                    out.append(Violation(
                        kind,
                        f"{what} [{s1},{e1}) of {t1} overlaps [{s2},{e2}) of {t2} "
                        f"on {key}", t1))

    _report_overlaps(port_segs, "overlap", "occupancy")
    _report_overlaps(queue_segs, "queue-isolation", "buffered span")
    return out

"""Per-switch configuration documents: the tree the scheduler hands to the
configuration agent, one XML document per switch.

Element vocabulary (stable; golden-file tested):

    <switch-config device="SW1" device-id="1">
      <gates><hyperperiod>...</hyperperiod>
        <port id="0"><guard>...</guard>
          <entry><queue>7</queue><start>0</start><duration>1296</duration></entry>
        </port>
      </gates>
      <frer><stream>
        <src>UDPv4:[ip]:port</src><dst>...</dst><vid>2</vid><priority>7</priority>
        <recovery-window>32</recovery-window>
        <function port="1">replicate-egress</function>
      </stream></frer>
      <time-sync>6964...</time-sync>           (opaque hex payload)
    </switch-config>

The same dataclasses describe the semantic device state, so config fidelity
can be checked field-by-field between a document and an applied switch.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .flow_ident import FlowId
from .model import Locator
from .scheduler import FrerPlan, GclEntry, PortSchedule, Schedule, Topology


class ConfigSchemaError(Exception):
    """Document does not follow the switch-config schema."""


class StreamRole(Enum):
    IDENTIFY = "identify"
    REPLICATE_EGRESS = "replicate-egress"
    ELIMINATE_EGRESS = "eliminate-egress"


@dataclass(frozen=True)
class StreamFunction:
    port: int
    role: StreamRole


@dataclass(frozen=True)
class StreamConfig:
    """Stream identity plus the per-port replication/elimination functions."""

    src: Locator
    dst: Locator
    vid: int
    priority: int
    recovery_window: int
    functions: tuple[StreamFunction, ...]


@dataclass(frozen=True)
class SwitchConfig:
    """Semantic configuration of one switch (document or applied state)."""

    device: str
    device_id: int
    hyperperiod_ns: int
    ports: dict[int, PortSchedule] = field(default_factory=dict)
    streams: tuple[StreamConfig, ...] = ()
    time_sync: bytes = b""


def build_switch_configs(
    sched: Schedule,
    topology: Topology,
    device_ids: Mapping[str, int],
    frer_plans: Mapping[FlowId, FrerPlan] | None = None,
    time_sync_payload: bytes = b"",
) -> dict[str, SwitchConfig]:
    """Project a schedule into one configuration per switch."""
    frer_plans = dict(frer_plans or {})
    configs: dict[str, SwitchConfig] = {}
    by_switch_ports: dict[str, dict[int, PortSchedule]] = {}
    for (switch, port), psched in sched.gcl.ports.items():
        by_switch_ports.setdefault(switch, {})[port] = psched

    by_switch_streams: dict[str, list[StreamConfig]] = {}
    flows = {item.flow.id: item.flow for item in sched.flows}
    for fid in sorted(frer_plans):
        plan = frer_plans[fid]
        flow = flows.get(fid)
        if flow is None:
            continue
        repl_primary_port = topology.egress_port(
            plan.replication_switch, plan.primary_route[plan.primary_route.index(plan.replication_switch) + 1])
        repl_secondary_port = topology.egress_port(
            plan.replication_switch, plan.secondary_route[plan.secondary_route.index(plan.replication_switch) + 1])
        identity = dict(src=flow.src, dst=flow.dst, vid=flow.vid, priority=flow.prio,
                        recovery_window=plan.recovery_window)
        by_switch_streams.setdefault(plan.replication_switch, []).append(StreamConfig(
            functions=tuple(sorted([
                StreamFunction(repl_primary_port, StreamRole.REPLICATE_EGRESS),
                StreamFunction(repl_secondary_port, StreamRole.REPLICATE_EGRESS),
            ], key=lambda f: f.port)), **identity))
        by_switch_streams.setdefault(plan.elimination_switch, []).append(StreamConfig(
            functions=(StreamFunction(plan.elimination_port, StreamRole.ELIMINATE_EGRESS),),
            **identity))

    for switch in sorted(device_ids):
        if not topology.is_switch(switch):
            continue
        configs[switch] = SwitchConfig(
            device=switch,
            device_id=device_ids[switch],
            hyperperiod_ns=sched.hyperperiod_ns,
            ports=dict(sorted(by_switch_ports.get(switch, {}).items())),
            streams=tuple(sorted(
                by_switch_streams.get(switch, []),
                key=lambda s: (s.src, s.dst, s.vid, s.priority))),
            time_sync=time_sync_payload,
        )
    return configs


def render_switch_config(cfg: SwitchConfig) -> bytes:
    root = ET.Element("switch-config")
    root.set("device", cfg.device)
    root.set("device-id", str(cfg.device_id))
    gates = ET.SubElement(root, "gates")
    ET.SubElement(gates, "hyperperiod").text = str(cfg.hyperperiod_ns)
    for port_id in sorted(cfg.ports):
        psched = cfg.ports[port_id]
        port_el = ET.SubElement(gates, "port", id=str(port_id))
        ET.SubElement(port_el, "guard").text = str(psched.guard_ns)
        for entry in psched.entries:
            e = ET.SubElement(port_el, "entry")
            ET.SubElement(e, "queue").text = str(entry.queue)
            ET.SubElement(e, "start").text = str(entry.start_ns)
            ET.SubElement(e, "duration").text = str(entry.duration_ns)
    if cfg.streams:
        frer = ET.SubElement(root, "frer")
        for stream in cfg.streams:
            s = ET.SubElement(frer, "stream")
            ET.SubElement(s, "src").text = stream.src.udpv4()
            ET.SubElement(s, "dst").text = stream.dst.udpv4()
            ET.SubElement(s, "vid").text = str(stream.vid)
            ET.SubElement(s, "priority").text = str(stream.priority)
            ET.SubElement(s, "recovery-window").text = str(stream.recovery_window)
            for fn in stream.functions:
                f = ET.SubElement(s, "function", port=str(fn.port))
                f.text = fn.role.value
    if cfg.time_sync:
        ET.SubElement(root, "time-sync").text = cfg.time_sync.hex()
    ET.indent(root)
    return b'<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root) + b"\n"


def _int_child(el: ET.Element, name: str) -> int:
    child = el.find(name)
    if child is None or child.text is None:
        raise ConfigSchemaError(f"missing <{name}> under <{el.tag}>")
    try:
        return int(child.text)
    except ValueError:
        raise ConfigSchemaError(f"<{name}> is not an integer") from None


def _text_child(el: ET.Element, name: str) -> str:
    child = el.find(name)
    if child is None or child.text is None:
        raise ConfigSchemaError(f"missing <{name}> under <{el.tag}>")
    return child.text


def parse_switch_config(data: bytes) -> SwitchConfig:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ConfigSchemaError(f"not well-formed XML: {exc}") from exc
    if root.tag != "switch-config":
        raise ConfigSchemaError(f"unexpected root element <{root.tag}>")
    device = root.get("device")
    device_id = root.get("device-id")
    if device is None or device_id is None:
        raise ConfigSchemaError("switch-config needs device and device-id attributes")
    gates = root.find("gates")
    if gates is None:
        raise ConfigSchemaError("missing <gates> section")
    hyperperiod = _int_child(gates, "hyperperiod")
    ports: dict[int, PortSchedule] = {}
    for port_el in gates.findall("port"):
        pid = port_el.get("id")
        if pid is None:
            raise ConfigSchemaError("<port> needs an id attribute")
        guard = _int_child(port_el, "guard")
        entries = []
        for e in port_el.findall("entry"):
            entries.append(GclEntry(_int_child(e, "queue"), _int_child(e, "start"),
                                    _int_child(e, "duration")))
        ports[int(pid)] = PortSchedule(guard, tuple(entries))
    streams = []
    frer = root.find("frer")
    if frer is not None:
        for s in frer.findall("stream"):
            functions = []
            for f in s.findall("function"):
                port = f.get("port")
                if port is None or f.text is None:
                    raise ConfigSchemaError("<function> needs a port attribute and a role")
                try:
                    role = StreamRole(f.text)
                except ValueError:
                    raise ConfigSchemaError(f"unknown stream role {f.text!r}") from None
                functions.append(StreamFunction(int(port), role))
            streams.append(StreamConfig(
                src=Locator.from_udpv4(_text_child(s, "src")),
                dst=Locator.from_udpv4(_text_child(s, "dst")),
                vid=_int_child(s, "vid"),
                priority=_int_child(s, "priority"),
                recovery_window=_int_child(s, "recovery-window"),
                functions=tuple(functions)))
    sync_el = root.find("time-sync")
    time_sync = bytes.fromhex(sync_el.text) if sync_el is not None and sync_el.text else b""
    return SwitchConfig(
        device=device,
        device_id=int(device_id),
        hyperperiod_ns=hyperperiod,
        ports=ports,
        streams=tuple(streams),
        time_sync=time_sync,
    )

"""Shared pub-sub domain types: identifiers, locators, QoS policies, endpoint
descriptors, and the writer/reader QoS compatibility rule used for matching.

All durations in this package are integer nanoseconds. The types here are
immutable value objects and are safe to share between threads.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass
from enum import Enum

GUID_LEN = 16
MIN_VLAN_ID = 1
MAX_VLAN_ID = 4094
MAX_PRIORITY = 7


class EndpointKind(Enum):
    WRITER = "writer"
    READER = "reader"


class Status(Enum):
    ALIVE = "alive"
    UNALIVE = "unalive"


class Reliability(Enum):
    RELIABLE = "Reliable"
    BEST_EFFORT = "BestEffort"


@dataclass(frozen=True, order=True)
class Guid:
    """16-byte opaque entity identifier.

    The all-zero value is reserved to mean "unset" and is never assigned to a
    live entity; registries reject it.
    """

    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, (bytes, bytearray)):
            raise ValueError("guid value must be bytes")
        if len(self.value) != GUID_LEN:
            raise ValueError(f"guid must be exactly {GUID_LEN} bytes, got {len(self.value)}")
        if isinstance(self.value, bytearray):
            object.__setattr__(self, "value", bytes(self.value))

    @property
    def is_unset(self) -> bool:
        return self.value == bytes(GUID_LEN)

    @classmethod
    def from_int(cls, n: int) -> Guid:
        return cls(n.to_bytes(GUID_LEN, "big"))

    def dotted(self) -> str:
        """Render as dotted hex bytes, e.g. ``01.0f.c5...`` (all 16 bytes)."""
        return ".".join(f"{b:02x}" for b in self.value)

    @classmethod
    def from_dotted(cls, text: str) -> Guid:
        parts = text.split(".")
        if len(parts) != GUID_LEN:
            raise ValueError(f"dotted guid needs {GUID_LEN} byte groups, got {len(parts)}")
        return cls(bytes(int(p, 16) for p in parts))

    def __repr__(self) -> str:  # keep asserts readable
        return f"Guid({self.dotted()})"


@dataclass(frozen=True, order=True)
class Locator:
    """IPv4 address plus UDP port of one endpoint."""

    ip: str
    port: int

    def __post_init__(self) -> None:
        ipaddress.IPv4Address(self.ip)  # raises on malformed input
        if not 0 < self.port <= 0xFFFF:
            raise ValueError(f"port must be in 1..65535, got {self.port}")

    def udpv4(self) -> str:
        """Render in the address notation used by the flow-info document."""
        return f"UDPv4:[{self.ip}]:{self.port}"

    @classmethod
    def from_udpv4(cls, text: str) -> Locator:
        if not text.startswith("UDPv4:[") or "]:" not in text:
            raise ValueError(f"not a UDPv4 locator: {text!r}")
        ip, _, port = text[len("UDPv4:["):].partition("]:")
        return cls(ip, int(port))

    def packed(self) -> bytes:
        return ipaddress.IPv4Address(self.ip).packed


@dataclass(frozen=True)
class QosPolicies:
    """QoS requested by a reader or offered by a writer.

    ``partition`` is a logical partition id mapped directly to a VLAN ID,
    ``deadline`` is the publication period, ``latency`` the maximum acceptable
    end-to-end latency, ``jitter`` the maximum acceptable latency jitter and
    ``size`` the byte size of the topic payload.
    """

    partition: int
    priority: int
    deadline_ns: int
    latency_ns: int
    reliability: Reliability
    jitter_ns: int
    size: int

    def __post_init__(self) -> None:
        if not MIN_VLAN_ID <= self.partition <= MAX_VLAN_ID:
            raise ValueError(f"partition must be in {MIN_VLAN_ID}..{MAX_VLAN_ID}")
        if not 0 <= self.priority <= MAX_PRIORITY:
            raise ValueError("priority must be in 0..7")
        if self.deadline_ns <= 0:
            raise ValueError("deadline must be > 0")
        if self.latency_ns <= 0:
            raise ValueError("latency must be > 0")
        if self.jitter_ns < 0:
            raise ValueError("jitter must be >= 0")
        if self.size <= 0:
            raise ValueError("size must be > 0")
        if not isinstance(self.reliability, Reliability):
            raise ValueError("reliability must be a Reliability value")


@dataclass(frozen=True)
class EndpointDescriptor:
    """Everything the control plane knows about one writer or reader."""

    kind: EndpointKind
    status: Status
    guid: Guid
    topic: str
    locator: Locator
    qos: QosPolicies

    def __post_init__(self) -> None:
        if not self.topic:
            raise ValueError("topic must be non-empty")
        if self.guid.is_unset:
            raise ValueError("endpoint guid must not be the unset (all-zero) value")
        if not isinstance(self.kind, EndpointKind) or not isinstance(self.status, Status):
            raise ValueError("kind/status must be enum values")


def qos_compatible(writer_qos: QosPolicies, reader_qos: QosPolicies) -> bool:
    """Request-offered compatibility check between a writer and a reader.

    Compatible iff the partitions match, the writer offers at least the
    requested reliability, and every offered bound (deadline, latency, jitter)
    is at most the requested bound. Priority and size never block matching.
    """
    if writer_qos.partition != reader_qos.partition:
        return False
    if reader_qos.reliability is Reliability.RELIABLE and writer_qos.reliability is not Reliability.RELIABLE:
        return False
    if writer_qos.deadline_ns > reader_qos.deadline_ns:
        return False
    if writer_qos.latency_ns > reader_qos.latency_ns:
        return False
    if writer_qos.jitter_ns > reader_qos.jitter_ns:
        return False
    return True

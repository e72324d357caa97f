"""Control-plane toolkit and deterministic simulator for publish-subscribe
flows over time-aware-shaped Ethernet in small in-vehicle-style topologies.

The package covers the full pipeline: centralized endpoint discovery, flow
identification, gate-control-list scheduling with frame replication planning,
device configuration over a raw-Ethernet config protocol, and a deterministic
discrete-event replay simulator that verifies latency/jitter/reliability
contracts.
"""

__version__ = "0.1.0"

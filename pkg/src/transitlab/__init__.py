"""transitlab: a deterministic packet-level lab for transit-node traffic
hijacking (tunnel redirection, switch-flood replication) and the matching
detection tooling (state audits, dual-protocol path probing, latency
comparison)."""

from .netcore import (
    MacAddress,
    Packet,
    TunnelMode,
    TunnelSpec,
    decapsulate,
    decrement_ttl,
    encapsulate,
    header_bytes,
)
from .topology import Topology, fixture_path, load_topology
from .simnet import EventTrace, Simulation
from .control import Connector, ConnectorServer, FlowModCommand, audit_node, dump_config, dump_live
from .scenarios import (
    RedirectPlan,
    ReplicatePlan,
    detect_divergence,
    detect_latency_shift,
    fleet_audit,
    stage_redirect,
    stage_replicate,
    stage_scenario,
    traceroute,
    update_rolling_filter,
)

__version__ = "0.1.0"

__all__ = [
    "Connector",
    "ConnectorServer",
    "EventTrace",
    "FlowModCommand",
    "MacAddress",
    "Packet",
    "RedirectPlan",
    "ReplicatePlan",
    "Simulation",
    "Topology",
    "TunnelMode",
    "TunnelSpec",
    "audit_node",
    "decapsulate",
    "decrement_ttl",
    "detect_divergence",
    "detect_latency_shift",
    "dump_config",
    "dump_live",
    "encapsulate",
    "fixture_path",
    "fleet_audit",
    "header_bytes",
    "load_topology",
    "stage_redirect",
    "stage_replicate",
    "stage_scenario",
    "traceroute",
    "update_rolling_filter",
]

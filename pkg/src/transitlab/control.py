"""Control plane state: persistent config vs ephemeral runtime entries.

Each router keeps a declarative ConfigStore (exactly what the topology
document provisioned) and an EphemeralStore of runtime-injected entries
that never show up in config dumps and survive nothing.  The compiled
tables the forwarding pipeline consults are the merge of the two.  The
connector is the standardized command interface that injects ephemeral
state; the audit walks the gap between the two stores.
"""
from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

from . import topology as topo
from .dataplane import (
    CONFIG_ORIGIN,
    Connected,
    Discard,
    DropAction,
    FibEntry,
    FilterMatch,
    FilterRule,
    ForwardNormal,
    MacAddress,
    NodeState,
    PuntAction,
    RedirectTunnel,
    ReplicateMac,
    RpfMode,
    Via,
)
from .netcore import TunnelSpec

if TYPE_CHECKING:  # pragma: no cover
    from .simnet import Simulation

VIA_CONNECTOR = "connector"
VIA_SHELL = "shell"

CLASS_TUNNEL = "Tunnel"
CLASS_MCAST = "MulticastMac"
CLASS_POLICY = "PolicyRoute"
CLASS_OTHER = "Other"
SEVERITY = {CLASS_TUNNEL: 0, CLASS_MCAST: 1, CLASS_POLICY: 2, CLASS_OTHER: 3}

ORIGIN_EPHEMERAL = "Ephemeral"
ORIGIN_CONFIG_MISMATCH = "ConfigMismatch"


class ConnectorError(Exception):
    code = "error"


class ConnectorDisabled(ConnectorError):
    code = "connector_disabled"


class UnknownEntry(ConnectorError):
    code = "unknown_entry"


@dataclass(frozen=True)
class AcceptMac:
    interface: str
    mac: MacAddress


Payload = FilterRule | FibEntry | AcceptMac | TunnelSpec


@dataclass
class EphemeralEntry:
    entry_id: str
    payload: Payload
    installed_at: int
    via: str = VIA_CONNECTOR


@dataclass
class ConfigStore:
    fib: list[FibEntry] = field(default_factory=list)
    filters: list[FilterRule] = field(default_factory=list)
    rpf: dict[str, RpfMode] = field(default_factory=dict)
    accept_macs: dict[str, set[MacAddress]] = field(default_factory=dict)
    tunnels: list[TunnelSpec] = field(default_factory=list)


@dataclass
class FlowModCommand:
    verb: str  # "add" | "remove"
    target: str
    payload: Payload | None = None
    entry_id: str | None = None


# --- JSON forms (dumps, wire protocol, audit reports) -------------------------


def match_to_dict(m: FilterMatch) -> dict:
    doc: dict[str, Any] = {}
    if m.src is not None:
        doc["src"] = str(m.src)
    if m.dst is not None:
        doc["dst"] = str(m.dst)
    if m.protocol is not None:
        doc["protocol"] = m.protocol
    if m.dst_port is not None:
        doc["dst_port"] = m.dst_port
    if m.in_if is not None:
        doc["in_if"] = m.in_if
    return doc


def action_to_dict(action) -> dict:
    if isinstance(action, ForwardNormal):
        return {"kind": "forward"}
    if isinstance(action, DropAction):
        return {"kind": "drop"}
    if isinstance(action, PuntAction):
        return {"kind": "punt"}
    if isinstance(action, RedirectTunnel):
        return {"kind": "redirect_tunnel", "tunnel": tunnel_to_dict(action.tunnel)}
    if isinstance(action, ReplicateMac):
        return {"kind": "replicate_mac", "dst_mac": str(action.dst_mac), "out_if": action.out_if}
    raise TypeError(f"unknown action {action!r}")


def tunnel_to_dict(t: TunnelSpec) -> dict:
    return {"mode": t.mode.value, "local": str(t.local), "remote": str(t.remote)}


def fib_entry_to_dict(e: FibEntry) -> dict:
    doc: dict[str, Any] = {"prefix": str(e.prefix)}
    if isinstance(e.next_hop, Via):
        doc["via"] = str(e.next_hop.neighbor)
        doc["out_if"] = e.next_hop.out_if
    elif isinstance(e.next_hop, Connected):
        doc["connected"] = e.next_hop.out_if
    else:
        doc["discard"] = True
    return doc


def filter_to_dict(r: FilterRule) -> dict:
    return {
        "id": r.id,
        "priority": r.priority,
        "match": match_to_dict(r.match),
        "action": action_to_dict(r.action),
    }


def payload_to_dict(payload: Payload) -> dict:
    if isinstance(payload, FilterRule):
        return {"kind": "filter", **filter_to_dict(payload)}
    if isinstance(payload, FibEntry):
        return {"kind": "fib", **fib_entry_to_dict(payload)}
    if isinstance(payload, AcceptMac):
        return {"kind": "accept_mac", "interface": payload.interface, "mac": str(payload.mac)}
    if isinstance(payload, TunnelSpec):
        return {"kind": "tunnel_endpoint", **tunnel_to_dict(payload)}
    raise TypeError(f"unknown payload {payload!r}")


def parse_payload(doc: dict, path: str = "payload") -> Payload:
    kind = doc.get("kind")
    if kind == "filter":
        rule = dict(doc)
        rule.pop("kind")
        rule.setdefault("id", "")        # assigned at install
        rule.setdefault("priority", -1)  # assigned at install
        return topo.parse_filter_rule(rule, path)
    if kind == "fib":
        entry = dict(doc)
        entry.pop("kind")
        return topo.parse_fib_entry(entry, path)
    if kind == "accept_mac":
        return AcceptMac(
            interface=doc.get("interface", ""),
            mac=MacAddress.parse(doc["mac"]),
        )
    if kind == "tunnel_endpoint":
        entry = dict(doc)
        entry.pop("kind")
        return topo.parse_tunnel(entry, path)
    raise topo.SchemaError(f"{path}.kind", f"unknown payload kind {kind!r}")


# --- per-node control state ----------------------------------------------------


_FIB_SORT = lambda e: (int(e.prefix.network_address), e.prefix.prefixlen)  # noqa: E731
_TUN_SORT = lambda t: (t.mode.value, int(t.local), int(t.remote))  # noqa: E731


class NodeControl:
    """Config store, ephemeral store, and the compile step for one node."""

    def __init__(self, defn: topo.NodeDef, config: ConfigStore, state: NodeState):
        self.defn = defn
        self.config = config
        self.state = state
        self.ephemeral: list[EphemeralEntry] = []
        self.conflicts: list[str] = []
        self._id_counter = 0

    @classmethod
    def from_topology(
        cls, topology: topo.Topology, defn: topo.NodeDef, state: NodeState
    ) -> "NodeControl":
        name = defn.name
        config = ConfigStore(
            fib=list(topology.fibs.get(name, [])),
            filters=list(topology.filters.get(name, [])),
            rpf=dict(topology.rpf.get(name, {})),
            accept_macs={k: set(v) for k, v in topology.accept_macs.get(name, {}).items()},
            tunnels=list(topology.tunnels.get(name, [])),
        )
        nc = cls(defn, config, state)
        nc.compile()
        return nc

    def next_entry_id(self) -> str:
        self._id_counter += 1
        return f"{self.defn.name}-e{self._id_counter:03d}"

    def default_filter_priority(self) -> int:
        floor = min((r.priority for r in self.config.filters), default=100)
        return max(floor - 10, 0)

    def compile(self) -> list[str]:
        """Merge config and ephemeral stores into the live tables.

        Ephemeral FIB entries win prefix conflicts against config (the
        conflict is recorded, not fatal); ephemeral filters already carry
        priorities below config defaults.  Recompiling without store
        changes is a no-op on the result.
        """
        conflicts: list[str] = []
        fib: dict = {e.prefix: e for e in self.config.fib}
        filters: list[FilterRule] = list(self.config.filters)
        accept: dict[str, set[MacAddress]] = {
            k: set(v) for k, v in self.config.accept_macs.items()
        }
        tunnels: list[TunnelSpec] = list(self.config.tunnels)

        for entry in self.ephemeral:
            payload = entry.payload
            if isinstance(payload, FibEntry):
                if payload.prefix in fib and fib[payload.prefix].origin == CONFIG_ORIGIN:
                    conflicts.append(
                        f"ephemeral {entry.entry_id} overrides config prefix {payload.prefix}"
                    )
                fib[payload.prefix] = replace(payload, origin=entry.entry_id)
            elif isinstance(payload, FilterRule):
                filters.append(replace(payload, origin=entry.entry_id))
            elif isinstance(payload, AcceptMac):
                accept.setdefault(payload.interface, set()).add(payload.mac)
            else:
                tunnels.append(payload)

        self.state.fib = sorted(fib.values(), key=_FIB_SORT)
        self.state.filters = sorted(filters, key=lambda r: r.sort_key)
        self.state.rpf = dict(self.config.rpf)
        self.state.tunnel_endpoints = sorted(tunnels, key=_TUN_SORT)
        self.state.punt_limit = self.defn.punt_limit
        for ifname, iface in self.state.interfaces.items():
            iface.mac_table.accept_macs = set(accept.get(ifname, set()))
        self.conflicts = conflicts
        return conflicts

    def find_entry(self, entry_id: str) -> EphemeralEntry | None:
        for entry in self.ephemeral:
            if entry.entry_id == entry_id:
                return entry
        return None


def dump_config(nc: NodeControl) -> str:
    """Canonical JSON of the declarative config store only."""
    return _dump(
        nc.config.fib,
        nc.config.filters,
        nc.config.rpf,
        nc.config.accept_macs,
        nc.config.tunnels,
        nc.defn.punt_limit,
    )


def dump_live(nc: NodeControl) -> str:
    """Canonical JSON of the compiled state, ephemeral entries included."""
    accept = {
        ifname: iface.mac_table.accept_macs
        for ifname, iface in nc.state.interfaces.items()
        if iface.mac_table.accept_macs
    }
    return _dump(
        nc.state.fib,
        nc.state.filters,
        nc.state.rpf,
        accept,
        nc.state.tunnel_endpoints,
        nc.state.punt_limit,
    )


def _dump(fib, filters, rpf, accept_macs, tunnels, punt_limit) -> str:
    doc = {
        "fib": [fib_entry_to_dict(e) for e in sorted(fib, key=_FIB_SORT)],
        "filters": [filter_to_dict(r) for r in sorted(filters, key=lambda r: r.sort_key)],
        "rpf": {ifname: mode.value for ifname, mode in rpf.items()},
        "accept_macs": {ifname: sorted(str(m) for m in macs) for ifname, macs in accept_macs.items() if macs},
        "tunnels": [tunnel_to_dict(t) for t in sorted(tunnels, key=_TUN_SORT)],
        "punt_limit": punt_limit,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# --- audit ---------------------------------------------------------------------


@dataclass
class Anomaly:
    entry: dict
    next_hop_class: str
    origin: str


@dataclass
class AuditReport:
    node: str
    anomalies: list[Anomaly]
    summary: dict[str, int]

    @property
    def clean(self) -> bool:
        return not self.anomalies

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "anomalies": [
                {"entry": a.entry, "class": a.next_hop_class, "origin": a.origin}
                for a in self.anomalies
            ],
            "summary": self.summary,
        }


def classify(payload: Payload) -> str:
    if isinstance(payload, FilterRule):
        if isinstance(payload.action, RedirectTunnel):
            return CLASS_TUNNEL
        if isinstance(payload.action, ReplicateMac):
            return CLASS_MCAST
        return CLASS_POLICY
    if isinstance(payload, TunnelSpec):
        return CLASS_TUNNEL
    return CLASS_OTHER


def audit_node(nc: NodeControl) -> AuditReport:
    """Diff compiled state against config-derived state, classified.

    Every live ephemeral entry is one anomaly.  On transit-role nodes,
    filter-to-tunnel and multicast-MAC entries are flagged even when they
    came from config.
    """
    anomalies = [
        Anomaly(payload_to_dict(e.payload), classify(e.payload), ORIGIN_EPHEMERAL)
        for e in nc.ephemeral
    ]
    if nc.defn.role == topo.ROLE_TRANSIT:
        for rule in nc.config.filters:
            if isinstance(rule.action, (RedirectTunnel, ReplicateMac)):
                anomalies.append(
                    Anomaly(payload_to_dict(rule), classify(rule), ORIGIN_CONFIG_MISMATCH)
                )
        for tun in nc.config.tunnels:
            anomalies.append(
                Anomaly(payload_to_dict(tun), CLASS_TUNNEL, ORIGIN_CONFIG_MISMATCH)
            )
    summary: dict[str, int] = {}
    for a in anomalies:
        summary[a.next_hop_class] = summary.get(a.next_hop_class, 0) + 1
    anomalies.sort(key=lambda a: (SEVERITY[a.next_hop_class], json.dumps(a.entry, sort_keys=True)))
    return AuditReport(node=nc.defn.name, anomalies=anomalies, summary=summary)


# --- the connector ---------------------------------------------------------------


class Connector:
    """Standardized command interface for injecting ephemeral state."""

    def __init__(self, sim: "Simulation"):
        self.sim = sim

    def _node(self, target: str) -> NodeControl:
        router = self.sim.routers.get(target)
        if router is None:
            raise topo.ValidationError(f"unknown or non-router target {target!r}")
        if not router.defn.connector_enabled:
            raise ConnectorDisabled(f"connector disabled on {target}")
        return router.control

    def _validate(self, nc: NodeControl, payload: Payload) -> None:
        interfaces = nc.state.interfaces
        locals_ = {i.addr for i in interfaces.values() if i.addr is not None}
        if isinstance(payload, FilterRule):
            if payload.match.in_if is not None and payload.match.in_if not in interfaces:
                raise topo.ValidationError(f"unknown interface {payload.match.in_if!r}")
            action = payload.action
            if isinstance(action, ReplicateMac) and action.out_if not in interfaces:
                raise topo.ValidationError(f"unknown interface {action.out_if!r}")
            if isinstance(action, RedirectTunnel) and action.tunnel.local not in locals_:
                raise topo.ValidationError(
                    f"tunnel local {action.tunnel.local} is not an address of {nc.defn.name}"
                )
        elif isinstance(payload, FibEntry):
            nh = payload.next_hop
            if isinstance(nh, (Via, Connected)) and nh.out_if not in interfaces:
                raise topo.ValidationError(f"unknown out_if {nh.out_if!r}")
        elif isinstance(payload, AcceptMac):
            if payload.interface not in interfaces:
                raise topo.ValidationError(f"unknown interface {payload.interface!r}")
        elif isinstance(payload, TunnelSpec):
            if payload.local not in locals_:
                raise topo.ValidationError(
                    f"tunnel local {payload.local} is not an address of {nc.defn.name}"
                )

    def apply(self, command: FlowModCommand) -> str:
        """Validate, install into the ephemeral store, recompile, log Inject."""
        if command.verb == "remove":
            if command.entry_id is None:
                raise topo.ValidationError("remove needs an entry_id")
            self.remove(command.target, command.entry_id)
            return command.entry_id
        if command.verb != "add":
            raise topo.ValidationError(f"unknown verb {command.verb!r}")
        if command.payload is None:
            raise topo.ValidationError("add needs a payload")
        nc = self._node(command.target)
        self._validate(nc, command.payload)
        return self._install(nc, command.payload)

    def _install(self, nc: NodeControl, payload: Payload) -> str:
        entry_id = nc.next_entry_id()
        if isinstance(payload, FilterRule):
            payload = replace(
                payload,
                id=payload.id or entry_id,
                priority=payload.priority if payload.priority >= 0 else nc.default_filter_priority(),
            )
        entry = EphemeralEntry(
            entry_id=entry_id, payload=payload, installed_at=self.sim.now, via=VIA_CONNECTOR
        )
        nc.ephemeral.append(entry)
        nc.compile()
        self.sim.log_inject(nc.defn.name, entry_id, payload_to_dict(payload))
        return entry_id

    def remove(self, target: str, entry_id: str) -> None:
        nc = self._node(target)
        entry = nc.find_entry(entry_id)
        if entry is None:
            raise UnknownEntry(f"no ephemeral entry {entry_id!r} on {target}")
        nc.ephemeral.remove(entry)
        nc.compile()

    def update_match(self, target: str, entry_id: str, new_match: FilterMatch) -> str:
        """Atomically swap the match of an installed filter (rolling filter).

        The swap happens between event steps, so no packet ever sees a
        table with neither the old nor the new match.
        """
        nc = self._node(target)
        entry = nc.find_entry(entry_id)
        if entry is None or not isinstance(entry.payload, FilterRule):
            raise UnknownEntry(f"no ephemeral filter {entry_id!r} on {target}")
        probe = replace(entry.payload, match=new_match)
        self._validate(nc, probe)
        entry.payload = probe
        nc.compile()
        return entry_id

    def fanout(self, commands: list[FlowModCommand]) -> dict[str, dict]:
        """Apply a batch: all-or-nothing per node, best effort across nodes."""
        grouped: dict[str, list[FlowModCommand]] = {}
        for cmd in commands:
            grouped.setdefault(cmd.target, []).append(cmd)
        results: dict[str, dict] = {}
        for target, cmds in grouped.items():
            try:
                nc = self._node(target)
                for cmd in cmds:
                    if cmd.verb != "add" or cmd.payload is None:
                        raise topo.ValidationError("fanout batches carry add commands")
                    self._validate(nc, cmd.payload)
            except (topo.ValidationError, ConnectorError) as exc:
                results[target] = {"error": {"code": getattr(exc, "code", "validation"), "detail": str(exc)}}
                continue
            results[target] = {"ok": [self._install(nc, cmd.payload) for cmd in cmds]}
        return results


class ConnectorServer:
    """Line-delimited JSON command channel over a local socket.

    One session at a time; each request line gets one response line:
    {"ok": <entry_id>} or {"error": <code>, "detail": <text>}.
    """

    def __init__(self, connector: Connector, path: str):
        self.connector = connector
        self.path = path
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(path)
        self._sock.listen(1)
        self._thread: threading.Thread | None = None
        self._running = False

    def start(self) -> None:
        self._running = True
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        self._sock.close()
        if self._thread is not None:
            self._thread.join(timeout=2)

    def _serve(self) -> None:
        while self._running:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            with conn, conn.makefile("rw", encoding="utf-8") as stream:
                for line in stream:
                    line = line.strip()
                    if not line:
                        continue
                    stream.write(json.dumps(self._handle(line), separators=(",", ":")) + "\n")
                    stream.flush()

    def _handle(self, line: str) -> dict:
        try:
            doc = json.loads(line)
            verb = doc["verb"]
            target = doc["target"]
            if verb == "remove":
                with self.connector.sim.lock:
                    self.connector.remove(target, doc["entry_id"])
                return {"ok": doc["entry_id"]}
            payload = parse_payload(doc["payload"])
            with self.connector.sim.lock:
                entry_id = self.connector.apply(
                    FlowModCommand(verb="add", target=target, payload=payload)
                )
            return {"ok": entry_id}
        except topo.ValidationError as exc:
            return {"error": "validation", "detail": str(exc)}
        except topo.SchemaError as exc:
            return {"error": "schema", "detail": str(exc)}
        except ConnectorError as exc:
            return {"error": exc.code, "detail": str(exc)}
        except (KeyError, json.JSONDecodeError) as exc:
            return {"error": "bad_request", "detail": str(exc)}

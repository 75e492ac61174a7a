"""Topology documents: schema, validation, and parsing into typed state.

A topology is a JSON object with sections `nodes`, `links`, `fibs`,
`filters`, `rpf`, `accept_macs`, `tunnels`, `apps`, and an optional
`scenarios` section holding the canned attack plans the CLI stages.
Bundled fixtures live in transitlab/fixtures/*.topo.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from ipaddress import AddressValueError, IPv4Address, IPv4Interface, NetmaskValueError
from pathlib import Path
from typing import Any

from .dataplane import (
    Action,
    Connected,
    Discard,
    DropAction,
    FibEntry,
    FilterMatch,
    FilterRule,
    ForwardNormal,
    NextHop,
    PuntAction,
    RedirectTunnel,
    ReplicateMac,
    RpfMode,
    Via,
)
from .netcore import (
    DEFAULT_ROUTE,
    IPv4Network,
    MacAddress,
    PacketError,
    Prefix,
    TunnelMode,
    TunnelSpec,
    prefix,
)

KIND_ROUTER = "router"
KIND_SWITCH = "switch"
KIND_HOST = "host"

ROLE_TRANSIT = "transit"
ROLE_LEAF = "leaf"
ROLE_PEERING = "peering"

# Per-role RPF default for interfaces the document leaves unset.
ROLE_RPF_DEFAULT = {
    ROLE_TRANSIT: RpfMode.OFF,
    ROLE_PEERING: RpfMode.LOOSE,
    ROLE_LEAF: RpfMode.STRICT,
}

DEFAULT_PUNT_LIMIT = 128


class SchemaError(Exception):
    """Structural problem in the document; carries the field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ValidationError(Exception):
    """Semantically invalid topology (asymmetric link, duplicate address, ...)."""


@dataclass
class InterfaceDef:
    name: str
    mac: MacAddress | None
    addr: IPv4Address | None
    network: IPv4Network | None


@dataclass
class NodeDef:
    name: str
    kind: str
    role: str = ROLE_TRANSIT
    punt_limit: int = DEFAULT_PUNT_LIMIT
    connector_enabled: bool = True
    gateway: IPv4Address | None = None  # hosts only: single default route
    interfaces: dict[str, InterfaceDef] = field(default_factory=dict)


@dataclass
class FlowSpec:
    dst: IPv4Address
    protocol: int
    count: int
    interval_us: int
    src: IPv4Address | None = None  # defaults to the owning host's address
    dst_port: int | None = None
    src_port: int = 40000
    flags: str = "PA"
    payload: dict[str, Any] = field(default_factory=lambda: {"random": 32})
    start_ttl: int = 64

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValidationError("flow count must be >= 1")
        if self.interval_us < 0:
            raise ValidationError("flow interval must be >= 0")


AID_CAPTURE = "capture"
AID_DIRECT = "direct"
AID_HAIRPIN = "hairpin"


@dataclass
class AppSpec:
    kind: str  # "source" | "echo" | "aid"
    flows: list[FlowSpec] = field(default_factory=list)
    aid_mode: str = AID_CAPTURE
    hairpin_remote: IPv4Address | None = None
    mutator: dict[str, Any] | None = None
    stealth: bool = False


Endpoint = tuple[str, str]  # (node, interface)


@dataclass
class Topology:
    nodes: dict[str, NodeDef]
    peers: dict[Endpoint, Endpoint]
    latency: dict[Endpoint, int]  # microseconds, symmetric
    fibs: dict[str, list[FibEntry]]
    filters: dict[str, list[FilterRule]]
    rpf: dict[str, dict[str, RpfMode]]
    accept_macs: dict[str, dict[str, set[MacAddress]]]
    tunnels: dict[str, list[TunnelSpec]]
    apps: dict[str, AppSpec]
    scenarios: dict[str, Any]

    def node(self, name: str) -> NodeDef:
        try:
            return self.nodes[name]
        except KeyError:
            raise ValidationError(f"unknown node {name!r}") from None

    def addr_of(self, name: str) -> IPv4Address:
        node = self.node(name)
        for iface in node.interfaces.values():
            if iface.addr is not None:
                return iface.addr
        raise ValidationError(f"node {name!r} has no addressed interface")

    def routers(self) -> list[str]:
        return [n for n, d in self.nodes.items() if d.kind == KIND_ROUTER]


# --- parsing helpers ---------------------------------------------------------


def _expect(obj: Any, typ: type, path: str) -> Any:
    if not isinstance(obj, typ):
        raise SchemaError(path, f"expected {typ.__name__}, got {type(obj).__name__}")
    return obj


def _get(obj: dict, key: str, typ: type, path: str, default: Any = ...) -> Any:
    if key not in obj:
        if default is ...:
            raise SchemaError(f"{path}.{key}", "missing required field")
        return default
    return _expect(obj[key], typ, f"{path}.{key}")


def _parse_addr_text(text: str, path: str) -> IPv4Interface:
    if ":" in text and text.count(":") > 1:
        raise ValidationError(f"{path}: IPv6 literals are not supported: {text!r}")
    try:
        return IPv4Interface(text)
    except (AddressValueError, NetmaskValueError, ValueError) as exc:
        raise SchemaError(path, f"bad address {text!r}: {exc}") from None


def _parse_ip(text: Any, path: str) -> IPv4Address:
    text = _expect(text, str, path)
    if ":" in text:
        raise ValidationError(f"{path}: IPv6 literals are not supported: {text!r}")
    try:
        return IPv4Address(text)
    except AddressValueError as exc:
        raise SchemaError(path, f"bad IPv4 address {text!r}: {exc}") from None


def _parse_prefix(text: Any, path: str) -> IPv4Network:
    text = _expect(text, str, path)
    if ":" in text:
        raise ValidationError(f"{path}: IPv6 literals are not supported: {text!r}")
    try:
        return prefix(text)
    except ValueError as exc:
        raise ValidationError(f"{path}: bad prefix {text!r}: {exc}") from None


def _parse_mac(text: Any, path: str) -> MacAddress:
    text = _expect(text, str, path)
    try:
        return MacAddress.parse(text)
    except PacketError as exc:
        raise SchemaError(path, str(exc)) from None


def parse_match(doc: dict, path: str) -> FilterMatch:
    _expect(doc, dict, path)
    try:
        return FilterMatch(
            src=_parse_prefix(doc["src"], f"{path}.src") if "src" in doc else None,
            dst=_parse_prefix(doc["dst"], f"{path}.dst") if "dst" in doc else None,
            protocol=_get(doc, "protocol", int, path, None),
            dst_port=_get(doc, "dst_port", int, path, None),
            in_if=_get(doc, "in_if", str, path, None),
        )
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def parse_action(doc: dict, path: str) -> Action:
    _expect(doc, dict, path)
    kind = _get(doc, "kind", str, path)
    if kind == "forward":
        return ForwardNormal()
    if kind == "drop":
        return DropAction()
    if kind == "punt":
        return PuntAction()
    if kind == "redirect_tunnel":
        return RedirectTunnel(tunnel=parse_tunnel(_get(doc, "tunnel", dict, path), f"{path}.tunnel"))
    if kind == "replicate_mac":
        try:
            return ReplicateMac(
                dst_mac=_parse_mac(_get(doc, "dst_mac", str, path), f"{path}.dst_mac"),
                out_if=_get(doc, "out_if", str, path),
            )
        except ValueError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    raise SchemaError(f"{path}.kind", f"unknown action kind {kind!r}")


def parse_tunnel(doc: dict, path: str) -> TunnelSpec:
    _expect(doc, dict, path)
    mode = _get(doc, "mode", str, path)
    if mode not in (TunnelMode.IPIP.value, TunnelMode.GRE.value):
        raise SchemaError(f"{path}.mode", f"unknown tunnel mode {mode!r}")
    try:
        return TunnelSpec(
            mode=TunnelMode(mode),
            local=_parse_ip(_get(doc, "local", str, path), f"{path}.local"),
            remote=_parse_ip(_get(doc, "remote", str, path), f"{path}.remote"),
        )
    except PacketError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def parse_filter_rule(doc: dict, path: str, origin: str = "config") -> FilterRule:
    _expect(doc, dict, path)
    return FilterRule(
        id=_get(doc, "id", str, path),
        priority=_get(doc, "priority", int, path),
        match=parse_match(_get(doc, "match", dict, path), f"{path}.match"),
        action=parse_action(_get(doc, "action", dict, path), f"{path}.action"),
        origin=origin,
    )


def parse_fib_entry(doc: dict, path: str, origin: str = "config") -> FibEntry:
    _expect(doc, dict, path)
    pfx = _parse_prefix(_get(doc, "prefix", str, path), f"{path}.prefix")
    next_hop: NextHop
    if "via" in doc:
        next_hop = Via(
            neighbor=_parse_ip(doc["via"], f"{path}.via"),
            out_if=_get(doc, "out_if", str, path),
        )
    elif "connected" in doc:
        next_hop = Connected(out_if=_expect(doc["connected"], str, f"{path}.connected"))
    elif doc.get("discard"):
        next_hop = Discard()
    else:
        raise SchemaError(path, "fib entry needs one of: via, connected, discard")
    return FibEntry(prefix=pfx, next_hop=next_hop, origin=origin)


# --- document loading --------------------------------------------------------


def _parse_nodes(doc: dict) -> dict[str, NodeDef]:
    nodes: dict[str, NodeDef] = {}
    for name, ndoc in _expect(doc, dict, "nodes").items():
        path = f"nodes.{name}"
        _expect(ndoc, dict, path)
        kind = _get(ndoc, "kind", str, path)
        if kind not in (KIND_ROUTER, KIND_SWITCH, KIND_HOST):
            raise SchemaError(f"{path}.kind", f"unknown node kind {kind!r}")
        role = _get(ndoc, "role", str, path, ROLE_TRANSIT)
        if role not in ROLE_RPF_DEFAULT:
            raise SchemaError(f"{path}.role", f"unknown role {role!r}")
        node = NodeDef(
            name=name,
            kind=kind,
            role=role,
            punt_limit=_get(ndoc, "punt_limit", int, path, DEFAULT_PUNT_LIMIT),
            connector_enabled=_get(ndoc, "connector", bool, path, True),
        )
        if "gateway" in ndoc:
            node.gateway = _parse_ip(ndoc["gateway"], f"{path}.gateway")
        for ifname, idoc in _get(ndoc, "interfaces", dict, path).items():
            ipath = f"{path}.interfaces.{ifname}"
            _expect(idoc, dict, ipath)
            mac = _parse_mac(idoc["mac"], f"{ipath}.mac") if "mac" in idoc else None
            addr = network = None
            if "addr" in idoc:
                parsed = _parse_addr_text(_expect(idoc["addr"], str, f"{ipath}.addr"), f"{ipath}.addr")
                addr, network = parsed.ip, parsed.network
            if kind == KIND_SWITCH and addr is not None:
                raise ValidationError(f"{ipath}: switch interfaces must not carry addresses")
            if kind in (KIND_ROUTER, KIND_HOST):
                if addr is None:
                    raise ValidationError(f"{ipath}: {kind} interfaces need an address")
                if mac is None:
                    raise ValidationError(f"{ipath}: {kind} interfaces need a MAC")
            node.interfaces[ifname] = InterfaceDef(ifname, mac, addr, network)
        nodes[name] = node
    return nodes


def _parse_links(
    doc: list, nodes: dict[str, NodeDef]
) -> tuple[dict[Endpoint, Endpoint], dict[Endpoint, int]]:
    peers: dict[Endpoint, Endpoint] = {}
    latency: dict[Endpoint, int] = {}

    def endpoint(text: str, path: str) -> Endpoint:
        node, _, ifname = text.partition(".")
        if node not in nodes:
            raise ValidationError(f"{path}: one-sided link, unknown node {node!r}")
        if ifname not in nodes[node].interfaces:
            raise ValidationError(f"{path}: one-sided link, unknown interface {text!r}")
        return (node, ifname)

    for i, ldoc in enumerate(_expect(doc, list, "links")):
        path = f"links[{i}]"
        _expect(ldoc, dict, path)
        a = endpoint(_get(ldoc, "a", str, path), f"{path}.a")
        b = endpoint(_get(ldoc, "b", str, path), f"{path}.b")
        lat = _get(ldoc, "latency_us", int, path, 1000)
        if lat < 0:
            raise ValidationError(f"{path}.latency_us: must be >= 0")
        for end in (a, b):
            if end in peers:
                raise ValidationError(f"{path}: interface {end[0]}.{end[1]} already linked")
        peers[a], peers[b] = b, a
        latency[a] = latency[b] = lat
    return peers, latency


def load_topology(source: str | Path | dict) -> Topology:
    """Load and validate a topology document (file path or parsed dict)."""
    if isinstance(source, dict):
        doc: Any = source
    else:
        try:
            doc = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"not valid JSON: {exc}") from None
    _expect(doc, dict, "$")

    nodes = _parse_nodes(_get(doc, "nodes", dict, "$"))
    peers, latency = _parse_links(_get(doc, "links", list, "$", []), nodes)

    seen_addrs: dict[IPv4Address, str] = {}
    for name, node in nodes.items():
        for iface in node.interfaces.values():
            if iface.addr is None:
                continue
            if iface.addr in seen_addrs:
                raise ValidationError(
                    f"duplicate interface address {iface.addr} on {name} and {seen_addrs[iface.addr]}"
                )
            seen_addrs[iface.addr] = name

    fibs: dict[str, list[FibEntry]] = {}
    for name, entries in _get(doc, "fibs", dict, "$", {}).items():
        if name not in nodes:
            raise ValidationError(f"fibs: unknown node {name!r}")
        parsed: list[FibEntry] = []
        seen_prefixes: set[Prefix] = set()
        for i, edoc in enumerate(_expect(entries, list, f"fibs.{name}")):
            entry = parse_fib_entry(edoc, f"fibs.{name}[{i}]")
            if entry.prefix in seen_prefixes:
                raise ValidationError(
                    f"fibs.{name}: duplicate prefix {entry.prefix} (no ECMP)"
                )
            seen_prefixes.add(entry.prefix)
            _check_out_if(entry.next_hop, nodes[name], f"fibs.{name}[{i}]")
            parsed.append(entry)
        fibs[name] = parsed

    # Hosts get connected routes plus a single default via their gateway.
    for name, node in nodes.items():
        if node.kind != KIND_HOST:
            continue
        if name in fibs:
            raise ValidationError(f"fibs.{name}: hosts derive their FIB from gateway")
        entries = []
        for iface in node.interfaces.values():
            if iface.network is not None:
                entries.append(FibEntry(prefix=iface.network, next_hop=Connected(iface.name)))
        if node.gateway is not None:
            if not any(node.gateway in e.prefix for e in entries):
                raise ValidationError(f"nodes.{name}.gateway: {node.gateway} not on a connected network")
            out_if = next(
                i.name for i in node.interfaces.values()
                if i.network is not None and node.gateway in i.network
            )
            entries.append(FibEntry(prefix=DEFAULT_ROUTE, next_hop=Via(node.gateway, out_if)))
        fibs[name] = entries

    filters: dict[str, list[FilterRule]] = {}
    for name, rules in _get(doc, "filters", dict, "$", {}).items():
        if name not in nodes:
            raise ValidationError(f"filters: unknown node {name!r}")
        parsed_rules = [
            parse_filter_rule(rdoc, f"filters.{name}[{i}]")
            for i, rdoc in enumerate(_expect(rules, list, f"filters.{name}"))
        ]
        ids = [r.id for r in parsed_rules]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"filters.{name}: duplicate rule ids")
        filters[name] = sorted(parsed_rules, key=lambda r: r.sort_key)

    rpf: dict[str, dict[str, RpfMode]] = {}
    for name, modes in _get(doc, "rpf", dict, "$", {}).items():
        if name not in nodes:
            raise ValidationError(f"rpf: unknown node {name!r}")
        rpf[name] = {}
        for ifname, mode in _expect(modes, dict, f"rpf.{name}").items():
            if ifname not in nodes[name].interfaces:
                raise ValidationError(f"rpf.{name}.{ifname}: unknown interface")
            try:
                rpf[name][ifname] = RpfMode(mode)
            except ValueError:
                raise SchemaError(f"rpf.{name}.{ifname}", f"unknown mode {mode!r}") from None
    for name, node in nodes.items():
        if node.kind != KIND_ROUTER:
            continue
        default = ROLE_RPF_DEFAULT[node.role]
        rpf.setdefault(name, {})
        for ifname in node.interfaces:
            rpf[name].setdefault(ifname, default)

    accept_macs: dict[str, dict[str, set[MacAddress]]] = {}
    for name, per_if in _get(doc, "accept_macs", dict, "$", {}).items():
        if name not in nodes:
            raise ValidationError(f"accept_macs: unknown node {name!r}")
        accept_macs[name] = {}
        for ifname, macs in _expect(per_if, dict, f"accept_macs.{name}").items():
            if ifname not in nodes[name].interfaces:
                raise ValidationError(f"accept_macs.{name}.{ifname}: unknown interface")
            accept_macs[name][ifname] = {
                _parse_mac(m, f"accept_macs.{name}.{ifname}[{i}]")
                for i, m in enumerate(_expect(macs, list, f"accept_macs.{name}.{ifname}"))
            }

    tunnels: dict[str, list[TunnelSpec]] = {}
    for name, specs in _get(doc, "tunnels", dict, "$", {}).items():
        if name not in nodes:
            raise ValidationError(f"tunnels: unknown node {name!r}")
        tunnels[name] = [
            parse_tunnel(tdoc, f"tunnels.{name}[{i}]")
            for i, tdoc in enumerate(_expect(specs, list, f"tunnels.{name}"))
        ]

    apps = _parse_apps(_get(doc, "apps", dict, "$", {}), nodes)
    scenarios = _get(doc, "scenarios", dict, "$", {})

    return Topology(
        nodes=nodes,
        peers=peers,
        latency=latency,
        fibs=fibs,
        filters=filters,
        rpf=rpf,
        accept_macs=accept_macs,
        tunnels=tunnels,
        apps=apps,
        scenarios=scenarios,
    )


def _check_out_if(next_hop: NextHop, node: NodeDef, path: str) -> None:
    if isinstance(next_hop, (Via, Connected)) and next_hop.out_if not in node.interfaces:
        raise ValidationError(f"{path}: unknown out_if {next_hop.out_if!r} on {node.name}")


def _parse_apps(doc: dict, nodes: dict[str, NodeDef]) -> dict[str, AppSpec]:
    apps: dict[str, AppSpec] = {}
    for name, adoc in doc.items():
        path = f"apps.{name}"
        if name not in nodes:
            raise ValidationError(f"{path}: unknown node")
        if nodes[name].kind != KIND_HOST:
            raise ValidationError(f"{path}: apps run on hosts only")
        _expect(adoc, dict, path)
        kind = _get(adoc, "kind", str, path)
        if kind == "source":
            flows = []
            for i, fdoc in enumerate(_get(adoc, "flows", list, path, [])):
                fpath = f"{path}.flows[{i}]"
                _expect(fdoc, dict, fpath)
                flows.append(
                    FlowSpec(
                        dst=_parse_ip(_get(fdoc, "dst", str, fpath), f"{fpath}.dst"),
                        protocol=_get(fdoc, "protocol", int, fpath),
                        count=_get(fdoc, "count", int, fpath),
                        interval_us=_get(fdoc, "interval_us", int, fpath, 1000),
                        src=_parse_ip(fdoc["src"], f"{fpath}.src") if "src" in fdoc else None,
                        dst_port=_get(fdoc, "dst_port", int, fpath, None),
                        src_port=_get(fdoc, "src_port", int, fpath, 40000),
                        flags=_get(fdoc, "flags", str, fpath, "PA"),
                        payload=_get(fdoc, "payload", dict, fpath, {"random": 32}),
                        start_ttl=_get(fdoc, "start_ttl", int, fpath, 64),
                    )
                )
            apps[name] = AppSpec(kind="source", flows=flows)
        elif kind == "echo":
            apps[name] = AppSpec(kind="echo")
        elif kind == "aid":
            mode = _get(adoc, "mode", str, path, AID_CAPTURE)
            if mode not in (AID_CAPTURE, AID_DIRECT, AID_HAIRPIN):
                raise SchemaError(f"{path}.mode", f"unknown aid mode {mode!r}")
            spec = AppSpec(
                kind="aid",
                aid_mode=mode,
                mutator=_get(adoc, "mutator", dict, path, None),
                stealth=_get(adoc, "stealth", bool, path, False),
            )
            if "hairpin_remote" in adoc:
                spec.hairpin_remote = _parse_ip(adoc["hairpin_remote"], f"{path}.hairpin_remote")
            apps[name] = spec
        else:
            raise SchemaError(f"{path}.kind", f"unknown app kind {kind!r}")
    return apps


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture, e.g. fixture_path('fig4.topo')."""
    return Path(str(resources.files("transitlab").joinpath("fixtures", name)))

"""Per-node forwarding pipeline.

Longest-prefix FIB lookup, captive filters with filter-based-forwarding
actions, reverse-path checks, tunnel endpoint handling, the L2 accept
decision, and switch forwarding with flood semantics.  Node state is owned
by the simulator event loop; nothing here locks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from enum import Enum
from ipaddress import IPv4Address, IPv4Network
from typing import Callable, Iterable, Sequence

from .netcore import (
    BROADCAST_MAC,
    PROTO_ICMP,
    TUNNEL_PROTOCOLS,
    DepthExceeded,
    EthHeader,
    IcmpTimeExceeded,
    Ipv4Header,
    MacAddress,
    Packet,
    Tcp,
    TtlExpired,
    TunnelSpec,
    Udp,
    decapsulate,
    decrement_ttl,
    encapsulate,
    header_bytes,
)

CONFIG_ORIGIN = "config"


class DropReason(str, Enum):
    # These strings appear verbatim in event traces and reports.
    RPF = "Rpf"
    TTL = "Ttl"
    NO_ROUTE = "NoRoute"
    FILTER = "Filter"
    DEPTH_EXCEEDED = "DepthExceeded"
    NOT_ACCEPTED = "NotAccepted"


class RpfMode(str, Enum):
    OFF = "off"
    LOOSE = "loose"
    STRICT = "strict"


# --- FIB ----------------------------------------------------------------


@dataclass(frozen=True)
class Via:
    neighbor: IPv4Address
    out_if: str


@dataclass(frozen=True)
class Connected:
    out_if: str


@dataclass(frozen=True)
class Discard:
    pass


NextHop = Via | Connected | Discard


@dataclass(frozen=True)
class FibEntry:
    prefix: IPv4Network
    next_hop: NextHop
    origin: str = CONFIG_ORIGIN  # "config" or the ephemeral entry id


def fib_lookup(fib: Iterable[FibEntry], dst: IPv4Address) -> FibEntry | None:
    """Longest matching prefix, or None when no route (incl. no default)."""
    best: FibEntry | None = None
    for entry in fib:
        if dst in entry.prefix:
            if best is None or entry.prefix.prefixlen > best.prefix.prefixlen:
                best = entry
    return best


# --- captive filters ------------------------------------------------------


@dataclass(frozen=True)
class FilterMatch:
    src: IPv4Network | None = None
    dst: IPv4Network | None = None
    protocol: int | None = None
    dst_port: int | None = None
    in_if: str | None = None

    def __post_init__(self) -> None:
        if all(
            v is None
            for v in (self.src, self.dst, self.protocol, self.dst_port, self.in_if)
        ):
            raise ValueError("filter match needs at least one criterion")

    def matches(self, packet: Packet, in_if: str) -> bool:
        outer = packet.outer
        if self.src is not None and outer.src not in self.src:
            return False
        if self.dst is not None and outer.dst not in self.dst:
            return False
        if self.protocol is not None and outer.protocol != self.protocol:
            return False
        if self.dst_port is not None:
            tp = packet.transport
            if not isinstance(tp, (Tcp, Udp)) or tp.dst_port != self.dst_port:
                return False
        if self.in_if is not None and in_if != self.in_if:
            return False
        return True


@dataclass(frozen=True)
class ForwardNormal:
    pass


@dataclass(frozen=True)
class RedirectTunnel:
    tunnel: TunnelSpec


@dataclass(frozen=True)
class ReplicateMac:
    dst_mac: MacAddress
    out_if: str

    def __post_init__(self) -> None:
        if not self.dst_mac.is_multicast:
            raise ValueError(f"replication MAC must be multicast, got {self.dst_mac}")


@dataclass(frozen=True)
class DropAction:
    pass


@dataclass(frozen=True)
class PuntAction:
    pass


Action = ForwardNormal | RedirectTunnel | ReplicateMac | DropAction | PuntAction


@dataclass(frozen=True)
class FilterRule:
    id: str
    priority: int
    match: FilterMatch
    action: Action
    origin: str = CONFIG_ORIGIN

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.priority, self.id)


def eval_filters(rules: Sequence[FilterRule], packet: Packet, in_if: str) -> Action:
    """First-match action over rules pre-sorted by (priority, id).

    Matching examines only the outermost IPv4 header and the transport,
    mirroring hardware: tunneled inner headers are invisible to filters.
    """
    for rule in rules:
        if rule.match.matches(packet, in_if):
            return rule.action
    return ForwardNormal()


# --- reverse path forwarding ------------------------------------------------


def rpf_check(
    mode: RpfMode, fib: Sequence[FibEntry], src: IPv4Address, in_if: str
) -> bool:
    if mode is RpfMode.OFF:
        return True
    entry = fib_lookup(fib, src)
    if entry is None or isinstance(entry.next_hop, Discard):
        return False
    if mode is RpfMode.LOOSE:
        return True
    return _out_if(entry.next_hop) == in_if


def _out_if(next_hop: NextHop) -> str | None:
    if isinstance(next_hop, (Via, Connected)):
        return next_hop.out_if
    return None


# --- L2 ----------------------------------------------------------------


@dataclass
class MacTable:
    entries: dict[MacAddress, str] = field(default_factory=dict)
    accept_macs: set[MacAddress] = field(default_factory=set)

    def learn(self, mac: MacAddress, port: str) -> None:
        if not mac.is_multicast:
            self.entries[mac] = port


def l2_accept(mac_table: MacTable, frame: Packet, if_mac: MacAddress) -> bool:
    """Accept hands the frame to the L3 lookup engine; Ignore discards it."""
    if frame.eth is None:
        raise ValueError("l2_accept needs an Ethernet header")
    dst = frame.eth.dst_mac
    return dst == if_mac or dst in mac_table.accept_macs or dst == BROADCAST_MAC


def switch_forward(
    mac_table: MacTable,
    frame: Packet,
    in_port: str,
    ports: Sequence[str],
    alloc_uid: Callable[[], int],
) -> list[tuple[str, Packet]]:
    """Learning-switch forwarding.

    Known unicast goes out one port; unknown unicast, multicast and
    broadcast flood every port except the ingress.  Flood copies are
    byte-identical frames with fresh uids sharing the original's lineage.
    """
    if frame.eth is None:
        raise ValueError("switch_forward needs an Ethernet header")
    mac_table.learn(frame.eth.src_mac, in_port)
    dst = frame.eth.dst_mac
    if not dst.is_multicast and dst in mac_table.entries:
        out = mac_table.entries[dst]
        if out == in_port:
            return []
        return [(out, frame)]
    lineage = frame.lineage if frame.lineage is not None else frame.uid
    return [
        (port, replace(frame, uid=alloc_uid(), lineage=lineage))
        for port in ports
        if port != in_port
    ]


# --- per-node state and the router pipeline ---------------------------------


@dataclass
class Interface:
    name: str
    mac: MacAddress
    addr: IPv4Address | None = None
    network: IPv4Network | None = None
    mac_table: MacTable = field(default_factory=MacTable)


@dataclass
class NodeState:
    """Compiled forwarding state consulted per packet.

    Rebuilt by the control layer whenever config or ephemeral stores
    change; the pipeline never mutates it.
    """

    name: str
    interfaces: dict[str, Interface]
    fib: list[FibEntry] = field(default_factory=list)
    filters: list[FilterRule] = field(default_factory=list)
    rpf: dict[str, RpfMode] = field(default_factory=dict)
    tunnel_endpoints: list[TunnelSpec] = field(default_factory=list)
    punt_limit: int = 128

    def is_local(self, addr: IPv4Address) -> bool:
        return any(i.addr == addr for i in self.interfaces.values())

    def tunnel_endpoint_for(self, addr: IPv4Address, protocol: int) -> TunnelSpec | None:
        for spec in self.tunnel_endpoints:
            if spec.local == addr and spec.mode.protocol == protocol:
                return spec
        return None

    def rpf_mode(self, in_if: str) -> RpfMode:
        return self.rpf.get(in_if, RpfMode.OFF)


@dataclass(frozen=True)
class Emission:
    out_if: str
    packet: Packet
    next_hop: IPv4Address | None = None   # L3 address to resolve the dst MAC from
    dst_mac: MacAddress | None = None     # pre-resolved (multicast rewrite)


@dataclass
class ForwardResult:
    emissions: list[Emission] = field(default_factory=list)
    punts: list[bytes] = field(default_factory=list)
    drops: list[tuple[Packet, DropReason]] = field(default_factory=list)
    icmp_replies: list[Packet] = field(default_factory=list)


_fallback_uids = itertools.count(1_000_000)


def _time_exceeded_reply(
    node: NodeState, packet: Packet, in_if: str, alloc_uid: Callable[[], int]
) -> Packet | None:
    src_addr = node.interfaces[in_if].addr
    if src_addr is None:
        return None
    header = Ipv4Header(
        src=src_addr, dst=packet.outer.src, ttl=64, protocol=PROTO_ICMP, id=packet.outer.id
    )
    return Packet(
        ip_stack=(header,),
        transport=IcmpTimeExceeded(original_header=packet.inner),
        uid=alloc_uid(),
        lineage=packet.uid,
    )


def _fib_emission(node: NodeState, packet: Packet, result: ForwardResult) -> None:
    entry = fib_lookup(node.fib, packet.outer.dst)
    if entry is None or isinstance(entry.next_hop, Discard):
        result.drops.append((packet, DropReason.NO_ROUTE))
        return
    nh = entry.next_hop
    hop_addr = nh.neighbor if isinstance(nh, Via) else packet.outer.dst
    result.emissions.append(Emission(out_if=nh.out_if, packet=packet, next_hop=hop_addr))


def router_forward(
    node: NodeState,
    packet: Packet,
    in_if: str,
    alloc_uid: Callable[[], int] | None = None,
) -> ForwardResult:
    """Run one packet through the forwarding pipeline.

    Order: tunnel-endpoint decap (restarting with the inner packet), RPF on
    the outermost source, TTL decrement, captive filters, FIB.  RPF runs
    before the filter so a tunnel's outer header shields a spoofed inner
    source from transit checks, and TTL expiry precedes redirection so
    probes expire at the redirecting node itself.  Every failure becomes a
    drop with a reason; the pipeline never aborts.
    """
    alloc = alloc_uid if alloc_uid is not None else (lambda: next(_fallback_uids))
    result = ForwardResult()

    while True:
        outer = packet.outer
        if (
            outer.protocol in TUNNEL_PROTOCOLS
            and node.is_local(outer.dst)
            and node.tunnel_endpoint_for(outer.dst, outer.protocol) is not None
        ):
            packet = decapsulate(packet)
            continue
        break

    if node.is_local(packet.outer.dst):
        # Addressed to this node but not a registered tunnel: hand the
        # truncated header view to the control plane.
        result.punts.append(header_bytes(packet, node.punt_limit))
        return result

    if not rpf_check(node.rpf_mode(in_if), node.fib, packet.outer.src, in_if):
        result.drops.append((packet, DropReason.RPF))
        return result

    try:
        packet = decrement_ttl(packet)
    except TtlExpired:
        reply = _time_exceeded_reply(node, packet, in_if, alloc)
        if reply is not None:
            result.icmp_replies.append(reply)
        result.drops.append((packet, DropReason.TTL))
        return result

    action = eval_filters(node.filters, packet, in_if)

    if isinstance(action, DropAction):
        result.drops.append((packet, DropReason.FILTER))
    elif isinstance(action, PuntAction):
        result.punts.append(header_bytes(packet, node.punt_limit))
    elif isinstance(action, RedirectTunnel):
        try:
            wrapped = encapsulate(packet, action.tunnel)
        except DepthExceeded:
            result.drops.append((packet, DropReason.DEPTH_EXCEEDED))
        else:
            _fib_emission(node, wrapped, result)
    elif isinstance(action, ReplicateMac):
        # Filter-based next-hop rewrite: the packet leaves once, toward the
        # shared segment, carrying the hardcoded multicast destination MAC.
        # The fork happens downstream when the switch floods it.
        result.emissions.append(
            Emission(out_if=action.out_if, packet=packet, dst_mac=action.dst_mac)
        )
    else:
        _fib_emission(node, packet, result)
    return result

"""Deterministic discrete-event engine.

Owns the topology runtime (routers, switches, hosts with their apps),
schedules packet transit over latency links, and records the totally
ordered event trace that every assertion in this lab runs against.

Determinism contract: the trace is a pure function of (topology document,
seed).  The seed feeds payload generation only; forwarding never consults
randomness.
"""
from __future__ import annotations

import heapq
import itertools
import json
import random
import threading
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address
from typing import Any, Callable, Iterable

from . import control as ctl
from . import dataplane as dp
from . import topology as topo
from .netcore import (
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
    TUNNEL_PROTOCOLS,
    EthHeader,
    IcmpEcho,
    IcmpTimeExceeded,
    Ipv4Header,
    MacAddress,
    NotEncapsulated,
    Packet,
    Tcp,
    TunnelMode,
    TunnelSpec,
    Udp,
    decapsulate,
    encapsulate,
)

# Event kinds appearing in traces.
EV_ARRIVE = "packet_arrive"
EV_EMIT = "packet_emit"
EV_DROP = "drop"
EV_PUNT = "punt"
EV_CAPTURE = "capture"
EV_INJECT = "inject"
EV_DELIVER = "app_deliver"


@dataclass(frozen=True)
class Event:
    time: int
    seq: int
    kind: str
    data: dict

    def to_json(self) -> str:
        return json.dumps(
            {"time": self.time, "seq": self.seq, "kind": self.kind, **self.data},
            separators=(",", ":"),
        )


class EventTrace:
    """Totally ordered, append-only event log; immutable once a run ends."""

    def __init__(self) -> None:
        self.events: list[Event] = []
        self.annotations: list[dict] = []

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def by_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def to_ndjson(self) -> str:
        lines = [e.to_json() for e in self.events]
        lines += [
            json.dumps({"kind": "annotation", **a}, separators=(",", ":"))
            for a in self.annotations
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_ndjson(cls, text: str) -> "EventTrace":
        trace = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            kind = doc.pop("kind")
            if kind == "annotation":
                trace.annotations.append(doc)
                continue
            trace.events.append(
                Event(time=doc.pop("time"), seq=doc.pop("seq"), kind=kind, data=doc)
            )
        return trace


def packet_to_dict(packet: Packet) -> dict:
    doc: dict[str, Any] = {"uid": packet.uid, "lineage": packet.lineage}
    doc["eth"] = (
        {"src": str(packet.eth.src_mac), "dst": str(packet.eth.dst_mac)}
        if packet.eth
        else None
    )
    doc["ip"] = [
        {"src": str(h.src), "dst": str(h.dst), "ttl": h.ttl, "proto": h.protocol, "id": h.id}
        for h in packet.ip_stack
    ]
    tp = packet.transport
    if tp is None:
        doc["tp"] = None
    elif isinstance(tp, Tcp):
        doc["tp"] = {"kind": "tcp", "src_port": tp.src_port, "dst_port": tp.dst_port, "flags": tp.flags}
    elif isinstance(tp, Udp):
        doc["tp"] = {"kind": "udp", "src_port": tp.src_port, "dst_port": tp.dst_port}
    elif isinstance(tp, IcmpEcho):
        doc["tp"] = {"kind": "icmp_echo", "seq": tp.seq, "reply": tp.is_reply}
    else:
        oh = tp.original_header
        doc["tp"] = {
            "kind": "icmp_time_exceeded",
            "original": {"src": str(oh.src), "dst": str(oh.dst), "ttl": oh.ttl, "proto": oh.protocol, "id": oh.id},
        }
    doc["payload"] = packet.payload.hex()
    return doc


# --- host applications -------------------------------------------------------


@dataclass
class CaptureRecord:
    time: int
    packet: Packet  # decapsulated inner packet, pre-mutation payload
    payload: bytes


@dataclass
class AidRuntime:
    mode: str = topo.AID_CAPTURE
    hairpin: TunnelSpec | None = None
    mutator: Callable[[bytes], bytes] | None = None
    stealth: bool = False
    capture_log: list[CaptureRecord] = field(default_factory=list)


@dataclass
class HostRuntime:
    defn: topo.NodeDef
    iface: dp.Interface
    fib: list[dp.FibEntry]
    app: topo.AppSpec | None = None
    aid: AidRuntime | None = None

    @property
    def addr(self) -> IPv4Address:
        assert self.iface.addr is not None
        return self.iface.addr


@dataclass
class RouterRuntime:
    defn: topo.NodeDef
    state: dp.NodeState
    control: ctl.NodeControl


@dataclass
class SwitchRuntime:
    defn: topo.NodeDef
    mac_table: dp.MacTable
    ports: list[str]


def build_mutator(spec: dict | None) -> Callable[[bytes], bytes] | None:
    if spec is None:
        return None
    if "append" in spec:
        marker = bytes.fromhex(spec["append"])
        return lambda data: data + marker
    raise topo.ValidationError(f"unknown mutator spec {spec!r}")


class Simulation:
    """Single-threaded engine over a validated topology.

    Provision (via the control layer) before `run`; inspect the trace
    after.  Connector commands from other threads serialize through
    `self.lock` between event steps.
    """

    def __init__(
        self,
        topology: topo.Topology,
        seed: int = 0,
        include_flows: bool = True,
    ) -> None:
        self.topology = topology
        self.seed = seed
        self.now = 0
        self.trace = EventTrace()
        self.lock = threading.Lock()
        self._uid = itertools.count(1)
        self._seq = itertools.count(0)
        self._heap: list[tuple[int, int, str, tuple]] = []

        self.routers: dict[str, RouterRuntime] = {}
        self.switches: dict[str, SwitchRuntime] = {}
        self.hosts: dict[str, HostRuntime] = {}
        self._addr_index: dict[IPv4Address, tuple[str, str]] = {}

        for name, defn in topology.nodes.items():
            if defn.kind == topo.KIND_ROUTER:
                state = self._blank_state(defn)
                self.routers[name] = RouterRuntime(
                    defn=defn,
                    state=state,
                    control=ctl.NodeControl.from_topology(topology, defn, state),
                )
            elif defn.kind == topo.KIND_SWITCH:
                self.switches[name] = SwitchRuntime(
                    defn=defn, mac_table=dp.MacTable(), ports=sorted(defn.interfaces)
                )
            else:
                ifdef = next(iter(defn.interfaces.values()))
                host = HostRuntime(
                    defn=defn,
                    iface=dp.Interface(ifdef.name, ifdef.mac, ifdef.addr, ifdef.network),
                    fib=list(topology.fibs.get(name, [])),
                    app=topology.apps.get(name),
                )
                if host.app is not None and host.app.kind == "aid":
                    host.aid = AidRuntime(
                        mode=host.app.aid_mode,
                        mutator=build_mutator(host.app.mutator),
                        stealth=host.app.stealth,
                    )
                    if host.app.hairpin_remote is not None:
                        host.aid.hairpin = TunnelSpec(
                            mode=TunnelMode.IPIP, local=host.addr, remote=host.app.hairpin_remote
                        )
                self.hosts[name] = host
            for ifdef in defn.interfaces.values():
                if ifdef.addr is not None:
                    self._addr_index[ifdef.addr] = (name, ifdef.name)

        if include_flows:
            self._schedule_flows()

    # -- setup ----------------------------------------------------------------

    def _blank_state(self, defn: topo.NodeDef) -> dp.NodeState:
        interfaces = {
            i.name: dp.Interface(i.name, i.mac, i.addr, i.network)
            for i in defn.interfaces.values()
        }
        return dp.NodeState(
            name=defn.name, interfaces=interfaces, punt_limit=defn.punt_limit
        )

    def _schedule_flows(self) -> None:
        rng = random.Random(self.seed)
        for name in sorted(self.hosts):
            host = self.hosts[name]
            if host.app is None or host.app.kind != "source":
                continue
            for flow in host.app.flows:
                for k in range(flow.count):
                    packet = self._build_flow_packet(host, flow, k, rng)
                    self.schedule(k * flow.interval_us, "host_send", (name, packet))

    def _build_flow_packet(
        self, host: HostRuntime, flow: topo.FlowSpec, k: int, rng: random.Random
    ) -> Packet:
        transport: Any
        if flow.protocol == PROTO_TCP:
            transport = Tcp(flow.src_port, flow.dst_port or 0, flow.flags)
        elif flow.protocol == PROTO_UDP:
            transport = Udp(flow.src_port, flow.dst_port or 0)
        elif flow.protocol == PROTO_ICMP:
            transport = IcmpEcho(seq=k)
        else:
            transport = None
        return Packet(
            ip_stack=(
                Ipv4Header(
                    src=flow.src or host.addr,
                    dst=flow.dst,
                    ttl=flow.start_ttl,
                    protocol=flow.protocol,
                    id=k & 0xFFFF,
                ),
            ),
            transport=transport,
            payload=self._gen_payload(flow.payload, rng),
            uid=self.alloc_uid(),
        )

    @staticmethod
    def _gen_payload(spec: dict, rng: random.Random) -> bytes:
        if "random" in spec:
            return rng.randbytes(spec["random"])
        if "hex" in spec:
            return bytes.fromhex(spec["hex"])
        if "ascii" in spec:
            return spec["ascii"].encode()
        raise topo.ValidationError(f"unknown payload spec {spec!r}")

    # -- bookkeeping ----------------------------------------------------------

    def alloc_uid(self) -> int:
        return next(self._uid)

    def record(self, kind: str, data: dict) -> None:
        self.trace.events.append(Event(self.now, next(self._seq), kind, data))

    def log_inject(self, node: str, entry_id: str, payload: dict) -> None:
        self.record(EV_INJECT, {"node": node, "entry_id": entry_id, "entry": payload})

    def schedule(self, time: int, kind: str, args: tuple) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), kind, args))

    def mac_of(self, addr: IPv4Address) -> MacAddress | None:
        loc = self._addr_index.get(addr)
        if loc is None:
            return None
        node, ifname = loc
        mac = self.topology.nodes[node].interfaces[ifname].mac
        return mac

    # -- main loop ------------------------------------------------------------

    def run(self, horizon: int | None = None) -> EventTrace:
        """Process events in (time, seq) order until idle or past horizon."""
        while self._heap:
            if horizon is not None and self._heap[0][0] > horizon:
                self.trace.annotations.append(
                    {"annotation": "HorizonReached", "horizon_us": horizon}
                )
                break
            with self.lock:
                time, _, kind, args = heapq.heappop(self._heap)
                self.now = max(self.now, time)
                self._dispatch(kind, args)
        return self.trace

    def run_until_idle(self) -> None:
        self.run(horizon=None)

    def _dispatch(self, kind: str, args: tuple) -> None:
        if kind == "host_send":
            name, packet = args
            self._host_send(self.hosts[name], packet)
        elif kind == "arrive":
            node, in_if, packet = args
            self._on_arrive(node, in_if, packet)
        else:  # pragma: no cover - internal kinds are closed
            raise AssertionError(f"unknown scheduled kind {kind}")

    # -- transmission ---------------------------------------------------------

    def _emit(
        self,
        node: str,
        out_if: str,
        packet: Packet,
        next_hop: IPv4Address | None = None,
        dst_mac: MacAddress | None = None,
    ) -> None:
        src_mac = self.topology.nodes[node].interfaces[out_if].mac
        if dst_mac is None:
            dst_mac = self.mac_of(next_hop if next_hop is not None else packet.outer.dst)
        if dst_mac is None or src_mac is None:
            self._drop(node, packet, dp.DropReason.NO_ROUTE)
            return
        frame = replace(packet, eth=EthHeader(src_mac=src_mac, dst_mac=dst_mac))
        self.record(EV_EMIT, {"node": node, "out_if": out_if, "packet": packet_to_dict(frame)})
        peer = self.topology.peers.get((node, out_if))
        if peer is None:
            self._drop(node, frame, dp.DropReason.NO_ROUTE)
            return
        latency = self.topology.latency[(node, out_if)]
        self.schedule(self.now + latency, "arrive", (peer[0], peer[1], frame))

    def _drop(self, node: str, packet: Packet, reason: dp.DropReason) -> None:
        self.record(EV_DROP, {"node": node, "reason": reason.value, "packet": packet_to_dict(packet)})

    def _host_send(self, host: HostRuntime, packet: Packet) -> None:
        entry = dp.fib_lookup(host.fib, packet.outer.dst)
        if entry is None or isinstance(entry.next_hop, dp.Discard):
            self._drop(host.defn.name, packet, dp.DropReason.NO_ROUTE)
            return
        nh = entry.next_hop
        hop = nh.neighbor if isinstance(nh, dp.Via) else packet.outer.dst
        self._emit(host.defn.name, nh.out_if, packet, next_hop=hop)

    def _originate(self, router: RouterRuntime, packet: Packet) -> None:
        # Locally generated traffic (ICMP replies) skips the ingress pipeline.
        entry = dp.fib_lookup(router.state.fib, packet.outer.dst)
        if entry is None or isinstance(entry.next_hop, dp.Discard):
            self._drop(router.defn.name, packet, dp.DropReason.NO_ROUTE)
            return
        nh = entry.next_hop
        hop = nh.neighbor if isinstance(nh, dp.Via) else packet.outer.dst
        self._emit(router.defn.name, nh.out_if, packet, next_hop=hop)

    # -- reception ------------------------------------------------------------

    def _on_arrive(self, node: str, in_if: str, packet: Packet) -> None:
        self.record(EV_ARRIVE, {"node": node, "in_if": in_if, "packet": packet_to_dict(packet)})
        if node in self.switches:
            self._switch_receive(self.switches[node], in_if, packet)
        elif node in self.routers:
            self._router_receive(self.routers[node], in_if, packet)
        else:
            self._host_receive(self.hosts[node], in_if, packet)

    def _switch_receive(self, switch: SwitchRuntime, in_port: str, frame: Packet) -> None:
        for port, copy in dp.switch_forward(
            switch.mac_table, frame, in_port, switch.ports, self.alloc_uid
        ):
            name = switch.defn.name
            self.record(EV_EMIT, {"node": name, "out_if": port, "packet": packet_to_dict(copy)})
            peer = self.topology.peers.get((name, port))
            if peer is None:
                self._drop(name, copy, dp.DropReason.NO_ROUTE)
                continue
            self.schedule(self.now + self.topology.latency[(name, port)], "arrive", (peer[0], peer[1], copy))

    def _router_receive(self, router: RouterRuntime, in_if: str, packet: Packet) -> None:
        name = router.defn.name
        iface = router.state.interfaces[in_if]
        if packet.eth is not None and iface.mac is not None:
            if not dp.l2_accept(iface.mac_table, packet, iface.mac):
                self._drop(name, packet, dp.DropReason.NOT_ACCEPTED)
                return
        result = dp.router_forward(router.state, packet, in_if, self.alloc_uid)
        for dropped, reason in result.drops:
            self._drop(name, dropped, reason)
        for punted in result.punts:
            self.record(EV_PUNT, {"node": name, "bytes": punted.hex()})
        for emission in result.emissions:
            self._emit(
                name,
                emission.out_if,
                emission.packet,
                next_hop=emission.next_hop,
                dst_mac=emission.dst_mac,
            )
        for reply in result.icmp_replies:
            self._originate(router, reply)

    def _host_receive(self, host: HostRuntime, in_if: str, packet: Packet) -> None:
        name = host.defn.name
        if packet.eth is not None and host.iface.mac is not None:
            if not dp.l2_accept(host.iface.mac_table, packet, host.iface.mac):
                self._drop(name, packet, dp.DropReason.NOT_ACCEPTED)
                return
        if packet.outer.dst != host.addr:
            self._drop(name, packet, dp.DropReason.NOT_ACCEPTED)
            return
        if host.aid is not None and packet.outer.protocol in TUNNEL_PROTOCOLS:
            self._aid_receive(host, packet)
            return
        self.record(EV_DELIVER, {"node": name, "packet": packet_to_dict(packet)})
        if host.app is not None and host.app.kind == "echo":
            self._echo_reply(host, packet)

    def _echo_reply(self, host: HostRuntime, packet: Packet) -> None:
        tp = packet.transport
        reply_tp: Any = None
        payload = b""
        if isinstance(tp, IcmpEcho) and not tp.is_reply:
            reply_tp = IcmpEcho(seq=tp.seq, is_reply=True)
            payload = packet.payload
        elif isinstance(tp, Tcp) and tp.flags == "S":
            reply_tp = Tcp(src_port=tp.dst_port, dst_port=tp.src_port, flags="SA")
        if reply_tp is None:
            return
        reply = Packet(
            ip_stack=(
                Ipv4Header(
                    src=host.addr,
                    dst=packet.outer.src,
                    ttl=64,
                    protocol=packet.outer.protocol,
                    id=packet.outer.id,
                ),
            ),
            transport=reply_tp,
            payload=payload,
            uid=self.alloc_uid(),
            lineage=packet.uid,
        )
        self._host_send(host, reply)

    # -- the aid host ----------------------------------------------------------

    def _aid_receive(self, host: HostRuntime, packet: Packet) -> None:
        """Tunnel termination on the traffic-processing host.

        Unwraps the outer header, records the capture, optionally mutates
        the payload, and (mode permitting) sends the inner packet onward
        with its original source and destination untouched.
        """
        name = host.defn.name
        aid = host.aid
        assert aid is not None
        try:
            inner = decapsulate(packet)
        except NotEncapsulated:
            self.record(EV_DELIVER, {"node": name, "packet": packet_to_dict(packet)})
            return
        aid.capture_log.append(CaptureRecord(time=self.now, packet=inner, payload=inner.payload))
        self.record(
            EV_CAPTURE,
            {"node": name, "packet": packet_to_dict(inner), "payload": inner.payload.hex()},
        )
        if aid.mode == topo.AID_CAPTURE:
            self.record(EV_DELIVER, {"node": name, "packet": packet_to_dict(inner)})
            return
        if aid.mutator is not None:
            inner = replace(inner, payload=aid.mutator(inner.payload))
        if not aid.stealth:
            # The aid behaves like a visible router hop on the inner path.
            outer = inner.outer
            if outer.ttl <= 1:
                reply = Packet(
                    ip_stack=(
                        Ipv4Header(src=host.addr, dst=outer.src, ttl=64, protocol=PROTO_ICMP, id=outer.id),
                    ),
                    transport=IcmpTimeExceeded(original_header=inner.inner),
                    uid=self.alloc_uid(),
                    lineage=inner.uid,
                )
                self._drop(name, inner, dp.DropReason.TTL)
                self._host_send(host, reply)
                return
            inner = replace(inner, ip_stack=(replace(outer, ttl=outer.ttl - 1),) + inner.ip_stack[1:])
        if aid.mode == topo.AID_HAIRPIN:
            if aid.hairpin is None:
                self._drop(name, inner, dp.DropReason.NO_ROUTE)
                return
            self._host_send(host, encapsulate(inner, aid.hairpin))
        else:
            self._host_send(host, inner)

    # -- provisioning hooks used by the control/scenario layers ----------------

    def host_of_addr(self, addr: IPv4Address) -> HostRuntime | None:
        loc = self._addr_index.get(addr)
        if loc is None or loc[0] not in self.hosts:
            return None
        return self.hosts[loc[0]]

    def provision_aid(
        self,
        addr: IPv4Address,
        mode: str,
        hairpin: TunnelSpec | None = None,
        mutator: Callable[[bytes], bytes] | None = None,
        stealth: bool = False,
    ) -> None:
        host = self.host_of_addr(addr)
        if host is None:
            raise topo.ValidationError(f"no host owns aid address {addr}")
        if host.aid is None:
            host.aid = AidRuntime()
        host.aid.mode = mode
        host.aid.hairpin = hairpin
        host.aid.mutator = mutator
        host.aid.stealth = stealth

    def send_host_packet(self, host_name: str, packet: Packet, at: int | None = None) -> None:
        self.schedule(self.now if at is None else at, "host_send", (host_name, packet))

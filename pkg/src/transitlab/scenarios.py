"""Attack staging and detection tooling.

Staging goes exclusively through the connector, so every scenario is
auditable and reversible by construction.  Detection is the other half:
dual-protocol path probing, path divergence, delivery-latency comparison,
and the fleet-wide ephemeral-state audit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address
from typing import Any, Callable

from . import control as ctl
from . import topology as topo
from .dataplane import (
    FilterMatch,
    FilterRule,
    RedirectTunnel,
    ReplicateMac,
    fib_lookup,
)
from .netcore import (
    PROTO_ICMP,
    PROTO_TCP,
    IcmpEcho,
    Ipv4Header,
    MacAddress,
    Packet,
    Tcp,
    TunnelMode,
    TunnelSpec,
)
from .simnet import EV_ARRIVE, EV_DELIVER, EV_EMIT, EventTrace, Simulation, build_mutator

RETURN_DIRECT = "direct"
RETURN_HAIRPIN = "hairpin"


class ScenarioError(Exception):
    pass


class UnreachableAid(ScenarioError):
    pass


class NotOnSharedSegment(ScenarioError):
    pass


class MismatchedTargets(ScenarioError):
    pass


class FlowAbsent(ScenarioError):
    pass


# --- staging -------------------------------------------------------------------


@dataclass
class RedirectPlan:
    router: str
    match: FilterMatch
    aid: IPv4Address
    tunnel_mode: TunnelMode = TunnelMode.IPIP
    return_mode: str = RETURN_DIRECT
    mutator: Callable[[bytes], bytes] | None = None
    stealth: bool = False


@dataclass
class ReplicatePlan:
    ingress_router: str
    normal_router: str
    exfil_router: str
    switch: str
    mcast_mac: MacAddress
    match: FilterMatch
    aid: IPv4Address


def _tunnel_toward(sim: Simulation, router: str, aid: IPv4Address, mode: TunnelMode) -> TunnelSpec:
    runtime = sim.routers.get(router)
    if runtime is None:
        raise topo.ValidationError(f"unknown router {router!r}")
    entry = fib_lookup(runtime.state.fib, aid)
    if entry is None or not hasattr(entry.next_hop, "out_if"):
        raise UnreachableAid(f"{router} has no route to aid {aid}")
    local = runtime.state.interfaces[entry.next_hop.out_if].addr
    if local is None:
        raise UnreachableAid(f"{router} egress toward {aid} carries no address")
    return TunnelSpec(mode=mode, local=local, remote=aid)


def stage_redirect(sim: Simulation, plan: RedirectPlan) -> list[str]:
    """Install the captive filter chained to the exfiltration tunnel.

    Direct mode stages one entry; hairpin additionally registers the
    reverse tunnel endpoint so the aid can send processed traffic back
    through the tunnel for re-injection at the compromised router.
    """
    connector = ctl.Connector(sim)
    tunnel = _tunnel_toward(sim, plan.router, plan.aid, plan.tunnel_mode)
    commands = [
        ctl.FlowModCommand(
            verb="add",
            target=plan.router,
            payload=FilterRule(id="", priority=-1, match=plan.match, action=RedirectTunnel(tunnel)),
        )
    ]
    if plan.return_mode == RETURN_HAIRPIN:
        commands.append(ctl.FlowModCommand(verb="add", target=plan.router, payload=tunnel))
    entry_ids = [connector.apply(cmd) for cmd in commands]
    hairpin = None
    if plan.return_mode == RETURN_HAIRPIN:
        hairpin = TunnelSpec(mode=plan.tunnel_mode, local=plan.aid, remote=tunnel.local)
    sim.provision_aid(
        plan.aid,
        mode=topo.AID_HAIRPIN if plan.return_mode == RETURN_HAIRPIN else topo.AID_DIRECT,
        hairpin=hairpin,
        mutator=plan.mutator,
        stealth=plan.stealth,
    )
    return entry_ids


def update_rolling_filter(sim: Simulation, router: str, entry_id: str, new_match: FilterMatch) -> str:
    """Re-aim an installed captive filter without a visibility gap."""
    return ctl.Connector(sim).update_match(router, entry_id, new_match)


def stage_replicate(sim: Simulation, plan: ReplicatePlan) -> list[str]:
    """Stage L2 replication: multicast next-hop rewrite plus selective receivers.

    The ingress router's filter rewrites the flow's destination MAC to a
    hardcoded multicast group toward the shared switch; the switch floods
    it as unknown multicast; the normal router forwards its copy onward
    and the exfil router tunnels its copy to the aid.  The switch itself
    is never touched.
    """
    if not plan.mcast_mac.is_multicast:
        raise topo.ValidationError(f"replication MAC must be multicast, got {plan.mcast_mac}")

    def switch_port_of(router: str) -> str:
        runtime = sim.routers.get(router)
        if runtime is None:
            raise topo.ValidationError(f"unknown router {router!r}")
        for ifname in runtime.defn.interfaces:
            peer = sim.topology.peers.get((router, ifname))
            if peer is not None and peer[0] == plan.switch:
                return ifname
        raise NotOnSharedSegment(f"{router} has no interface on switch {plan.switch}")

    ingress_if = switch_port_of(plan.ingress_router)
    normal_if = switch_port_of(plan.normal_router)
    exfil_if = switch_port_of(plan.exfil_router)
    exfil_tunnel = _tunnel_toward(sim, plan.exfil_router, plan.aid, TunnelMode.IPIP)

    connector = ctl.Connector(sim)
    commands = [
        ctl.FlowModCommand(
            verb="add",
            target=plan.ingress_router,
            payload=FilterRule(
                id="", priority=-1, match=plan.match,
                action=ReplicateMac(dst_mac=plan.mcast_mac, out_if=ingress_if),
            ),
        ),
        ctl.FlowModCommand(
            verb="add",
            target=plan.normal_router,
            payload=ctl.AcceptMac(interface=normal_if, mac=plan.mcast_mac),
        ),
        ctl.FlowModCommand(
            verb="add",
            target=plan.exfil_router,
            payload=ctl.AcceptMac(interface=exfil_if, mac=plan.mcast_mac),
        ),
        ctl.FlowModCommand(
            verb="add",
            target=plan.exfil_router,
            # The exfil rule matches replicas arriving from the shared segment.
            payload=FilterRule(
                id="", priority=-1,
                match=replace(plan.match, in_if=exfil_if),
                action=RedirectTunnel(exfil_tunnel),
            ),
        ),
    ]
    entry_ids = [connector.apply(cmd) for cmd in commands]
    sim.provision_aid(plan.aid, mode=topo.AID_CAPTURE)
    return entry_ids


# --- traceroute ------------------------------------------------------------------


@dataclass(frozen=True)
class Hop:
    ttl: int
    responder: IPv4Address | None  # None records a timeout
    rtt_us: int | None


@dataclass
class TracePath:
    protocol: str  # "icmp" or "tcp:<port>"
    dst: IPv4Address
    hops: list[Hop] = field(default_factory=list)
    reached: bool = False

    @property
    def reach_ttl(self) -> int | None:
        return len(self.hops) + 1 if self.reached else None

    def responders(self) -> list[IPv4Address | None]:
        return [h.responder for h in self.hops]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "dst": str(self.dst),
            "hops": [
                {
                    "ttl": h.ttl,
                    "responder": str(h.responder) if h.responder else None,
                    "rtt_us": h.rtt_us,
                }
                for h in self.hops
            ],
            "reached": self.reached,
            "reach_ttl": self.reach_ttl,
        }


_PROBE_ID_BASE = 0xF000


def traceroute(
    sim: Simulation,
    src_host: str,
    dst: IPv4Address,
    protocol: str = "icmp",
    dst_port: int | None = None,
    max_ttl: int = 30,
) -> TracePath:
    """Probe the forwarding path with rising TTLs on the simulated clock.

    TCP probes are SYNs to dst_port, so they hit protocol/port captive
    filters exactly like data traffic; ICMP probes do not.  Each probe
    runs to quiescence before the next goes out, and unresponsive TTLs
    are recorded as timeouts.
    """
    host = sim.hosts.get(src_host)
    if host is None:
        raise topo.ValidationError(f"traceroute source {src_host!r} is not a host")
    if protocol == "tcp" and dst_port is None:
        raise topo.ValidationError("tcp traceroute needs a dst_port")
    label = "icmp" if protocol == "icmp" else f"tcp:{dst_port}"
    path = TracePath(protocol=label, dst=dst)

    for ttl in range(1, max_ttl + 1):
        probe_id = _PROBE_ID_BASE + ttl
        if protocol == "icmp":
            transport: Any = IcmpEcho(seq=ttl)
            proto_num = PROTO_ICMP
        else:
            transport = Tcp(src_port=33434 + ttl, dst_port=dst_port, flags="S")
            proto_num = PROTO_TCP
        probe = Packet(
            ip_stack=(
                Ipv4Header(src=host.addr, dst=dst, ttl=ttl, protocol=proto_num, id=probe_id),
            ),
            transport=transport,
            uid=sim.alloc_uid(),
        )
        mark = len(sim.trace.events)
        sent_at = sim.now
        sim.send_host_packet(src_host, probe)
        sim.run_until_idle()

        responder: IPv4Address | None = None
        rtt: int | None = None
        reached = False
        for event in sim.trace.events[mark:]:
            if event.kind != EV_DELIVER or event.data["node"] != src_host:
                continue
            pkt = event.data["packet"]
            tp = pkt["tp"]
            if tp is None:
                continue
            if tp["kind"] == "icmp_time_exceeded" and tp["original"]["id"] == probe_id:
                responder = IPv4Address(pkt["ip"][0]["src"])
                rtt = event.time - sent_at
                break
            if pkt["ip"][0]["src"] == str(dst) and pkt["ip"][0]["id"] == probe_id:
                is_echo_reply = tp["kind"] == "icmp_echo" and tp.get("reply")
                is_synack = tp["kind"] == "tcp" and tp.get("flags") == "SA"
                if is_echo_reply or is_synack:
                    reached = True
                    break
        if reached:
            path.reached = True
            break
        path.hops.append(Hop(ttl=ttl, responder=responder, rtt_us=rtt))
    return path


# --- detectors -------------------------------------------------------------------


@dataclass
class DivergenceReport:
    paths: tuple[str, str]
    dst: IPv4Address
    first_divergent_ttl: int | None
    extra_hops: set[IPv4Address]
    verdict: str  # "Clean" | "Divergent"

    @property
    def divergent(self) -> bool:
        return self.verdict == "Divergent"

    def to_dict(self) -> dict:
        return {
            "paths": list(self.paths),
            "dst": str(self.dst),
            "first_divergent_ttl": self.first_divergent_ttl,
            "extra_hops": sorted(str(a) for a in self.extra_hops),
            "verdict": self.verdict,
        }


def detect_divergence(p_a: TracePath, p_b: TracePath) -> DivergenceReport:
    """Compare two probe paths toward the same destination.

    Divergent when the responder sequences differ at any shared TTL or the
    paths differ in length; extra_hops lists addresses seen on one path
    only (the detour's footprint).
    """
    if p_a.dst != p_b.dst:
        raise MismatchedTargets(f"paths probe {p_a.dst} vs {p_b.dst}")
    seq_a, seq_b = p_a.responders(), p_b.responders()
    first: int | None = None
    for i in range(min(len(seq_a), len(seq_b))):
        if seq_a[i] != seq_b[i]:
            first = i + 1
            break
    if first is None and (len(seq_a) != len(seq_b) or p_a.reached != p_b.reached):
        first = min(len(seq_a), len(seq_b)) + 1
    set_a = {r for r in seq_a if r is not None}
    set_b = {r for r in seq_b if r is not None}
    return DivergenceReport(
        paths=(p_a.protocol, p_b.protocol),
        dst=p_a.dst,
        first_divergent_ttl=first,
        extra_hops=set_a.symmetric_difference(set_b),
        verdict="Divergent" if first is not None else "Clean",
    )


@dataclass(frozen=True)
class FlowKey:
    src: str
    dst: str
    protocol: int
    dst_port: int | None = None

    def matches(self, pkt: dict, tp_port: bool = True) -> bool:
        ip0 = pkt["ip"][0]
        if ip0["src"] != self.src or ip0["dst"] != self.dst or ip0["proto"] != self.protocol:
            return False
        if tp_port and self.dst_port is not None:
            tp = pkt["tp"]
            if tp is None or tp.get("dst_port") != self.dst_port:
                return False
        return True


def lineage_roots(trace: EventTrace) -> dict[int, int]:
    """Map every packet uid seen in the trace to its original ancestor."""
    parent: dict[int, int | None] = {}
    for event in trace.events:
        pkt = event.data.get("packet")
        if pkt is not None:
            parent.setdefault(pkt["uid"], pkt["lineage"])
    roots: dict[int, int] = {}

    def root_of(uid: int) -> int:
        seen = []
        while uid not in roots and parent.get(uid) is not None:
            seen.append(uid)
            uid = parent[uid]  # type: ignore[assignment]
        base = roots.get(uid, uid)
        for s in seen:
            roots[s] = base
        return base

    for uid in list(parent):
        roots[uid] = root_of(uid)
    return roots


def _send_times(trace: EventTrace) -> dict[int, int]:
    sends: dict[int, int] = {}
    for event in trace.events:
        if event.kind != EV_EMIT:
            continue
        uid = event.data["packet"]["uid"]
        if uid not in sends:
            sends[uid] = event.time
    return sends


def flow_deliveries(trace: EventTrace, flow: FlowKey, node: str | None = None) -> list[tuple[int, int]]:
    """(root_uid, delivery_delay_us) for every matching app delivery."""
    roots = lineage_roots(trace)
    sends = _send_times(trace)
    out: list[tuple[int, int]] = []
    for event in trace.events:
        if event.kind != EV_DELIVER:
            continue
        if node is not None and event.data["node"] != node:
            continue
        pkt = event.data["packet"]
        if not flow.matches(pkt):
            continue
        root = roots.get(pkt["uid"], pkt["uid"])
        if root not in sends:
            continue
        out.append((root, event.time - sends[root]))
    return out


def delivery_nodes(trace: EventTrace, flow: FlowKey) -> set[str]:
    return {
        e.data["node"]
        for e in trace.events
        if e.kind == EV_DELIVER and flow.matches(e.data["packet"])
    }


@dataclass
class LatencyReport:
    flow: FlowKey
    baseline_mean_us: float
    suspect_mean_us: float
    delta_us: float
    factor: float
    threshold_factor: float
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "flow": {
                "src": self.flow.src,
                "dst": self.flow.dst,
                "protocol": self.flow.protocol,
                "dst_port": self.flow.dst_port,
            },
            "baseline_mean_us": self.baseline_mean_us,
            "suspect_mean_us": self.suspect_mean_us,
            "delta_us": self.delta_us,
            "factor": self.factor,
            "threshold_factor": self.threshold_factor,
            "flagged": self.flagged,
        }


def detect_latency_shift(
    baseline: EventTrace,
    suspect: EventTrace,
    flow: FlowKey,
    threshold_factor: float = 1.5,
) -> LatencyReport:
    """Compare mean per-packet delivery delay between two runs of one flow.

    The delivery point is taken from the baseline trace (the monitored
    endpoint's view), so interception copies elsewhere never skew it.
    """
    base_nodes = delivery_nodes(baseline, flow)
    if not base_nodes:
        raise FlowAbsent(f"flow {flow} absent from baseline trace")
    dst_node = sorted(base_nodes)[0]
    base = [d for _, d in flow_deliveries(baseline, flow, dst_node)]
    susp = [d for _, d in flow_deliveries(suspect, flow, dst_node)]
    if not susp:
        raise FlowAbsent(f"flow {flow} absent from suspect trace")
    baseline_mean = sum(base) / len(base)
    suspect_mean = sum(susp) / len(susp)
    factor = suspect_mean / baseline_mean if baseline_mean else float("inf")
    return LatencyReport(
        flow=flow,
        baseline_mean_us=baseline_mean,
        suspect_mean_us=suspect_mean,
        delta_us=suspect_mean - baseline_mean,
        factor=factor,
        threshold_factor=threshold_factor,
        flagged=factor > threshold_factor,
    )


def forward_path(trace: EventTrace, flow: FlowKey, dst_node: str) -> list[str]:
    """Reconstruct the node sequence one delivered packet traversed.

    Follows the delivered copy's lineage chain back to the original, then
    lists the arrival nodes of exactly those copies in order; sibling
    copies (other flood branches) stay out of the path.
    """
    parent: dict[int, int | None] = {}
    for event in trace.events:
        pkt = event.data.get("packet")
        if pkt is not None:
            parent.setdefault(pkt["uid"], pkt["lineage"])
    delivered_uid: int | None = None
    for event in trace.events:
        if event.kind == EV_DELIVER and event.data["node"] == dst_node and flow.matches(
            event.data["packet"]
        ):
            delivered_uid = event.data["packet"]["uid"]
            break
    if delivered_uid is None:
        return []
    ancestry = {delivered_uid}
    cursor: int | None = delivered_uid
    while cursor is not None and parent.get(cursor) is not None:
        cursor = parent[cursor]
        ancestry.add(cursor)
    hops: list[str] = []
    for event in trace.events:
        if event.kind == EV_ARRIVE and event.data["packet"]["uid"] in ancestry:
            hops.append(event.data["node"])
        if event.kind == EV_DELIVER and event.data["packet"]["uid"] == delivered_uid:
            break
    return hops


def discover_flows(trace: EventTrace) -> list[tuple[FlowKey, str]]:
    """Distinct (flow, delivery node) pairs seen in a trace's deliveries."""
    seen: dict[tuple, tuple[FlowKey, str]] = {}
    for event in trace.events:
        if event.kind != EV_DELIVER:
            continue
        pkt = event.data["packet"]
        ip0 = pkt["ip"][0]
        tp = pkt["tp"] or {}
        key = FlowKey(
            src=ip0["src"],
            dst=ip0["dst"],
            protocol=ip0["proto"],
            dst_port=tp.get("dst_port"),
        )
        seen.setdefault((key, event.data["node"]), (key, event.data["node"]))
    return list(seen.values())


def build_report(
    baseline: EventTrace, suspect: EventTrace, threshold_factor: float = 1.5
) -> dict:
    """Per-flow path and latency comparison between two trace files.

    Only flows the baseline delivered are compared: the report models the
    operator's view of monitored connections, not the omniscient trace.
    """
    flows = []
    anomalous = False
    for flow, node in sorted(discover_flows(baseline), key=lambda fn: (str(fn[0]), fn[1])):
        base_path = forward_path(baseline, flow, node)
        susp_path = forward_path(suspect, flow, node)
        divergent = base_path != susp_path
        first = None
        for i in range(min(len(base_path), len(susp_path))):
            if base_path[i] != susp_path[i]:
                first = i + 1
                break
        if first is None and divergent:
            first = min(len(base_path), len(susp_path)) + 1
        extra = sorted(set(base_path).symmetric_difference(susp_path))
        try:
            latency = detect_latency_shift(baseline, suspect, flow, threshold_factor).to_dict()
            flagged = latency["flagged"]
        except FlowAbsent:
            latency = None
            flagged = True
        anomalous = anomalous or divergent or flagged
        flows.append(
            {
                "flow": {
                    "src": flow.src,
                    "dst": flow.dst,
                    "protocol": flow.protocol,
                    "dst_port": flow.dst_port,
                },
                "delivery_node": node,
                "path": {
                    "baseline": base_path,
                    "suspect": susp_path,
                    "verdict": "Divergent" if divergent else "Clean",
                    "first_divergent_hop": first,
                    "extra_hops": extra,
                },
                "latency": latency,
            }
        )
    return {"flows": flows, "verdict": "Anomalous" if anomalous else "Clean"}


# --- fleet audit -----------------------------------------------------------------


def fleet_audit(sim: Simulation) -> list[ctl.AuditReport]:
    """Audit every forwarding node, worst findings first."""
    reports = [ctl.audit_node(r.control) for r in sim.routers.values()]
    reports += [
        ctl.AuditReport(node=s.defn.name, anomalies=[], summary={})
        for s in sim.switches.values()
    ]

    def rank(report: ctl.AuditReport) -> tuple:
        if report.clean:
            return (1, 99, 0, report.node)
        worst = min(ctl.SEVERITY[a.next_hop_class] for a in report.anomalies)
        return (0, worst, -len(report.anomalies), report.node)

    return sorted(reports, key=rank)


# --- canned scenarios from fixture documents ---------------------------------------


def build_redirect_plan(
    doc: dict,
    return_mode: str | None = None,
    stealth: bool = False,
) -> RedirectPlan:
    mutator = build_mutator(doc.get("mutator"))
    return RedirectPlan(
        router=doc["router"],
        match=topo.parse_match(doc["filter"], "scenarios.redirect.filter"),
        aid=IPv4Address(doc["aid"]),
        tunnel_mode=TunnelMode(doc.get("tunnel_mode", "ipip")),
        return_mode=return_mode or doc.get("return_mode", RETURN_DIRECT),
        mutator=mutator,
        stealth=stealth,
    )


def build_replicate_plan(doc: dict) -> ReplicatePlan:
    return ReplicatePlan(
        ingress_router=doc["ingress_router"],
        normal_router=doc["normal_router"],
        exfil_router=doc["exfil_router"],
        switch=doc["switch"],
        mcast_mac=MacAddress.parse(doc["mcast_mac"]),
        match=topo.parse_match(doc["filter"], "scenarios.replicate.filter"),
        aid=IPv4Address(doc["aid"]),
    )


def stage_scenario(
    sim: Simulation,
    name: str,
    return_mode: str | None = None,
    stealth: bool = False,
) -> list[str]:
    """Stage a named scenario from the topology's `scenarios` section."""
    if name == "baseline":
        return []
    doc = sim.topology.scenarios.get(name)
    if doc is None:
        raise topo.ValidationError(f"topology defines no scenario {name!r}")
    if name == "redirect":
        return stage_redirect(sim, build_redirect_plan(doc, return_mode, stealth))
    if name == "replicate":
        return stage_replicate(sim, build_replicate_plan(doc))
    if name == "fanout":
        connector = ctl.Connector(sim)
        commands = []
        aids: list[tuple[IPv4Address, bool]] = []
        for entry in doc:
            tunnel = _tunnel_toward(
                sim, entry["router"], IPv4Address(entry["aid"]),
                TunnelMode(entry.get("tunnel_mode", "ipip")),
            )
            commands.append(
                ctl.FlowModCommand(
                    verb="add",
                    target=entry["router"],
                    payload=FilterRule(
                        id="", priority=-1,
                        match=topo.parse_match(entry["filter"], "scenarios.fanout.filter"),
                        action=RedirectTunnel(tunnel),
                    ),
                )
            )
            aids.append((IPv4Address(entry["aid"]), stealth))
        results = connector.fanout(commands)
        for aid, aid_stealth in aids:
            sim.provision_aid(aid, mode=topo.AID_DIRECT, stealth=aid_stealth)
        entry_ids: list[str] = []
        for outcome in results.values():
            entry_ids.extend(outcome.get("ok", []))
        return entry_ids
    raise topo.ValidationError(f"unknown scenario {name!r}")

"""Packet primitives shared by every layer of the lab.

Addresses, Ethernet/IPv4/transport headers, tunnel encapsulation and
decapsulation, TTL mechanics, and the canonical byte serialization used
for control-plane punts and trace files.  Everything here is an immutable
value; operations are pure functions.

The serialization is lab-canonical (fixed field order, big-endian, zeroed
checksums) and is NOT interoperable with real wire formats.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum
from ipaddress import IPv4Address, IPv4Network

# IANA protocol numbers the lab understands.
PROTO_ICMP = 1
PROTO_IPIP = 4
PROTO_TCP = 6
PROTO_UDP = 17
PROTO_GRE = 47
TUNNEL_PROTOCOLS = (PROTO_IPIP, PROTO_GRE)

# Stack depth guard: more than this many stacked IPv4 headers means a
# tunnel loop, not a legitimate path.
MAX_ENCAP_DEPTH = 4

DEFAULT_TUNNEL_TTL = 64

IpAddress = IPv4Address
Prefix = IPv4Network


def ip(text: str | int | IPv4Address) -> IPv4Address:
    return IPv4Address(text)


def prefix(text: str) -> IPv4Network:
    """Parse a prefix, rejecting set host bits (strict network form)."""
    return IPv4Network(text, strict=True)


DEFAULT_ROUTE = prefix("0.0.0.0/0")


class PacketError(Exception):
    """Malformed packet-level value."""


class TtlExpired(PacketError):
    """TTL would reach zero; the packet must not be forwarded."""


class DepthExceeded(PacketError):
    """Encapsulation would exceed MAX_ENCAP_DEPTH (tunnel loop guard)."""


class NotEncapsulated(PacketError):
    """Decapsulation requested on a packet that is not a tunnel packet."""


@dataclass(frozen=True, order=True)
class MacAddress:
    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value < 1 << 48:
            raise PacketError(f"MAC out of range: {self.value:#x}")

    @classmethod
    def parse(cls, text: str) -> "MacAddress":
        octets = text.split(":")
        if len(octets) != 6:
            raise PacketError(f"bad MAC {text!r}")
        return cls(int("".join(f"{int(o, 16):02x}" for o in octets), 16))

    @property
    def is_multicast(self) -> bool:
        # I/G bit: least-significant bit of the first octet.
        return bool((self.value >> 40) & 1)

    def __str__(self) -> str:
        return ":".join(f"{(self.value >> s) & 0xFF:02x}" for s in range(40, -8, -8))


BROADCAST_MAC = MacAddress(0xFFFFFFFFFFFF)


@dataclass(frozen=True)
class EthHeader:
    src_mac: MacAddress
    dst_mac: MacAddress


@dataclass(frozen=True)
class Ipv4Header:
    src: IPv4Address
    dst: IPv4Address
    ttl: int
    protocol: int
    id: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.ttl <= 255:
            raise PacketError(f"ttl out of range: {self.ttl}")
        if not 0 <= self.protocol <= 255:
            raise PacketError(f"protocol out of range: {self.protocol}")
        if not 0 <= self.id <= 0xFFFF:
            raise PacketError(f"id out of range: {self.id}")


@dataclass(frozen=True)
class Tcp:
    src_port: int
    dst_port: int
    flags: str = "PA"  # any of F/S/R/P/A, scapy-style

    def __post_init__(self) -> None:
        _check_port(self.src_port)
        _check_port(self.dst_port)


@dataclass(frozen=True)
class Udp:
    src_port: int
    dst_port: int

    def __post_init__(self) -> None:
        _check_port(self.src_port)
        _check_port(self.dst_port)


@dataclass(frozen=True)
class IcmpEcho:
    seq: int
    is_reply: bool = False


@dataclass(frozen=True)
class IcmpTimeExceeded:
    original_header: Ipv4Header  # innermost header of the expired packet


TransportHeader = Tcp | Udp | IcmpEcho | IcmpTimeExceeded


def _check_port(port: int) -> None:
    if not 0 <= port <= 0xFFFF:
        raise PacketError(f"port out of range: {port}")


class TunnelMode(str, Enum):
    IPIP = "ipip"
    GRE = "gre"

    @property
    def protocol(self) -> int:
        return PROTO_IPIP if self is TunnelMode.IPIP else PROTO_GRE


@dataclass(frozen=True)
class TunnelSpec:
    mode: TunnelMode
    local: IPv4Address
    remote: IPv4Address

    def __post_init__(self) -> None:
        if self.local == self.remote:
            raise PacketError("tunnel endpoints must differ")


@dataclass(frozen=True)
class Packet:
    """A layered frame.

    ip_stack is ordered outermost first and never empty.  uid identifies
    this exact copy within a simulation run; lineage points at the uid the
    copy was derived from (switch flood, ICMP reply) so replication
    accounting can close over ancestry.
    """

    ip_stack: tuple[Ipv4Header, ...]
    transport: TransportHeader | None = None
    payload: bytes = b""
    eth: EthHeader | None = None
    uid: int = 0
    lineage: int | None = None

    def __post_init__(self) -> None:
        if not self.ip_stack:
            raise PacketError("ip_stack must not be empty")
        if len(self.ip_stack) > MAX_ENCAP_DEPTH:
            raise PacketError("encapsulation depth exceeds limit")
        for hdr in self.ip_stack[:-1]:
            if hdr.protocol not in TUNNEL_PROTOCOLS:
                raise PacketError(
                    f"non-innermost header must be a tunnel protocol, got {hdr.protocol}"
                )

    @property
    def outer(self) -> Ipv4Header:
        return self.ip_stack[0]

    @property
    def inner(self) -> Ipv4Header:
        return self.ip_stack[-1]

    @property
    def depth(self) -> int:
        return len(self.ip_stack)


def decrement_ttl(packet: Packet) -> Packet:
    """Decrement the outermost TTL; raise TtlExpired if it would hit zero.

    Inner headers of encapsulated packets are untouched, which is what
    hides tunnel-interior hops from end-to-end probing.
    """
    outer = packet.outer
    if outer.ttl <= 1:
        raise TtlExpired(f"ttl expired for packet uid={packet.uid}")
    new_outer = replace(outer, ttl=outer.ttl - 1)
    return replace(packet, ip_stack=(new_outer,) + packet.ip_stack[1:])


def encapsulate(packet: Packet, tunnel: TunnelSpec, outer_ttl: int = DEFAULT_TUNNEL_TTL) -> Packet:
    """Push a tunnel header; inner headers and payload stay byte-identical."""
    if packet.depth + 1 > MAX_ENCAP_DEPTH:
        raise DepthExceeded(f"depth {packet.depth + 1} exceeds {MAX_ENCAP_DEPTH}")
    outer = Ipv4Header(
        src=tunnel.local,
        dst=tunnel.remote,
        ttl=outer_ttl,
        protocol=tunnel.mode.protocol,
        id=packet.outer.id,
    )
    return replace(packet, ip_stack=(outer,) + packet.ip_stack, eth=None)


def decapsulate(packet: Packet) -> Packet:
    """Pop the outermost tunnel header, restoring the original inner packet."""
    if packet.depth < 2 or packet.outer.protocol not in TUNNEL_PROTOCOLS:
        raise NotEncapsulated(f"packet uid={packet.uid} is not tunnel-encapsulated")
    return replace(packet, ip_stack=packet.ip_stack[1:], eth=None)


# --- canonical serialization ------------------------------------------------
#
# Layout (all big-endian, checksums zeroed):
#   eth        : dst(6) src(6) ethertype(2)=0x0800
#   ipv4       : 0x45, tos=0, total_len(2), id(2), frag=0(2), ttl, proto,
#                cksum=0(2), src(4), dst(4)
#   gre shim   : 4 zero-option bytes after every proto-47 header
#   tcp        : ports(4), seq=0(4), ack=0(4), offset|flags(2), win=0(2),
#                cksum=0(2), urg=0(2)
#   udp        : ports(4), len(2), cksum=0(2)
#   icmp echo  : type(8|0), code=0, cksum=0(2), ident=0(2), seq(2)
#   icmp ttlx  : type=11, code=0, cksum=0(2), unused(4), original ipv4 header

_TCP_FLAG_BITS = {"F": 0x01, "S": 0x02, "R": 0x04, "P": 0x08, "A": 0x10}


def _tcp_flag_byte(flags: str) -> int:
    bits = 0
    for ch in flags:
        try:
            bits |= _TCP_FLAG_BITS[ch]
        except KeyError:
            raise PacketError(f"unknown TCP flag {ch!r}") from None
    return bits


def _serialize_ipv4(hdr: Ipv4Header, inner_len: int) -> bytes:
    return struct.pack(
        ">BBHHHBBH4s4s",
        0x45,
        0,
        20 + inner_len,
        hdr.id,
        0,
        hdr.ttl,
        hdr.protocol,
        0,
        hdr.src.packed,
        hdr.dst.packed,
    )


def _serialize_transport(tp: TransportHeader | None) -> bytes:
    if tp is None:
        return b""
    if isinstance(tp, Tcp):
        return struct.pack(
            ">HHIIHHHH", tp.src_port, tp.dst_port, 0, 0,
            (5 << 12) | _tcp_flag_byte(tp.flags), 0, 0, 0,
        )
    if isinstance(tp, Udp):
        return struct.pack(">HHHH", tp.src_port, tp.dst_port, 8, 0)
    if isinstance(tp, IcmpEcho):
        return struct.pack(">BBHHH", 0 if tp.is_reply else 8, 0, 0, 0, tp.seq)
    if isinstance(tp, IcmpTimeExceeded):
        return struct.pack(">BBHI", 11, 0, 0, 0) + _serialize_ipv4(tp.original_header, 0)
    raise PacketError(f"unknown transport {tp!r}")


def serialize(packet: Packet) -> bytes:
    """Canonical bytes: eth, ip_stack outermost-first, transport, payload."""
    tail = _serialize_transport(packet.transport) + packet.payload
    for hdr in reversed(packet.ip_stack):
        shim = b"\x00\x00\x08\x00" if hdr.protocol == PROTO_GRE else b""
        tail = _serialize_ipv4(hdr, len(shim) + len(tail)) + shim + tail
    if packet.eth is not None:
        eth = struct.pack(
            ">6s6sH",
            packet.eth.dst_mac.value.to_bytes(6, "big"),
            packet.eth.src_mac.value.to_bytes(6, "big"),
            0x0800,
        )
        tail = eth + tail
    return tail


def header_length(packet: Packet) -> int:
    """Byte length of the serialized header region (everything before payload)."""
    return len(serialize(packet)) - len(packet.payload)


def header_bytes(packet: Packet, limit: int) -> bytes:
    """First `limit` bytes of the canonical serialization.

    This is the control-plane punt view: a fixed byte budget, so payload
    beyond the truncation point can never reach the control plane.
    """
    if limit < 0:
        raise PacketError(f"limit must be non-negative, got {limit}")
    return serialize(packet)[:limit]

"""Wire codec for all simulated packet types.

Byte layout (normative for the golden fixtures under tests/fixtures/):

  route header (9 bytes):
    +------+---------+---------+
    | kind | src     | dst     |
    | 1 B  | 4 B     | 4 B     |
    +------+---------+---------+
  transport header (8 bytes):
    +--------+-------+----------+-------+
    | opcode | flags | dest_qpn | psn   |
    | 1 B    | 1 B   | 3 B      | 3 B   |
    +--------+-------+----------+-------+
  optional RDMA extension (16 bytes, present iff opcode is Write or Read):
    rkey 4 B | vaddr 8 B | dma_len 4 B
  optional source-QPN extension (4 bytes, present only when the fabric-wide
  source-QPN mitigation is enabled):
    src_qpn 3 B | reserved 1 B (zero)
  payload (variable), then a trailing CRC-32 over all preceding bytes (4 B).

All multi-byte integers are big-endian.  flags bit 0 is the congestion mark,
bit 1 the solicited bit.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from .errors import BadChecksum, OversizePayload, Truncated, UnknownOpcode

QPN_FIELD_MAX = 1 << 24
PSN_FIELD_MAX = 1 << 24
DEFAULT_MTU = 4096

ROUTE_LEN = 9
TRANSPORT_LEN = 8
RDMA_EXT_LEN = 16
SRC_QPN_EXT_LEN = 4
ICRC_LEN = 4

_FLAG_CONGESTION = 0x01
_FLAG_SOLICITED = 0x02


class FabricKind(IntEnum):
    ROCE = 0
    IB = 1


class Opcode(IntEnum):
    SEND = 0
    WRITE = 1
    READ = 2
    READ_RESPONSE = 3
    ACK = 4
    NAK = 5
    CNP = 6
    CM_MAD = 7


#: opcodes that carry user data and are subject to congestion marking
DATA_OPCODES = frozenset({Opcode.SEND, Opcode.WRITE, Opcode.READ, Opcode.READ_RESPONSE})


def compute_icrc(data: bytes) -> int:
    """CRC-32 (reflected, polynomial 0x04C11DB7, init/final per zlib).

    The empty message hashes to 0x00000000 and the canonical check input
    b"123456789" to 0xCBF43926 under this convention.
    """
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(slots=True)
class RouteHeader:
    src_addr: int
    dst_addr: int
    fabric_kind: FabricKind = FabricKind.ROCE

    def __post_init__(self) -> None:
        if not (0 < self.src_addr < 1 << 32):
            raise ValueError(f"src_addr out of range: {self.src_addr:#x}")
        if not (0 < self.dst_addr < 1 << 32):
            raise ValueError(f"dst_addr out of range: {self.dst_addr:#x}")
        self.fabric_kind = FabricKind(self.fabric_kind)


@dataclass(slots=True)
class TransportHeader:
    opcode: Opcode
    dest_qpn: int
    psn: int
    congestion_mark: bool = False
    solicited: bool = False

    def __post_init__(self) -> None:
        self.opcode = Opcode(self.opcode)
        if not 0 <= self.dest_qpn < QPN_FIELD_MAX:
            raise ValueError(f"dest_qpn out of range: {self.dest_qpn:#x}")
        if not 0 <= self.psn < PSN_FIELD_MAX:
            raise ValueError(f"psn out of range: {self.psn:#x}")
        if self.opcode is Opcode.CNP and self.psn != 0:
            raise ValueError("CNP packets must carry psn == 0")


@dataclass(slots=True)
class RdmaExtHeader:
    rkey: int
    vaddr: int
    dma_len: int

    def __post_init__(self) -> None:
        if not 0 <= self.rkey < 1 << 32:
            raise ValueError("rkey out of range")
        if not 0 <= self.vaddr < 1 << 64:
            raise ValueError("vaddr out of range")
        if not 0 <= self.dma_len < 1 << 32:
            raise ValueError("dma_len out of range")


@dataclass(slots=True)
class SrcQpnExtHeader:
    src_qpn: int

    def __post_init__(self) -> None:
        if not 0 <= self.src_qpn < QPN_FIELD_MAX:
            raise ValueError("src_qpn out of range")


@dataclass(slots=True)
class Packet:
    route: RouteHeader
    transport: TransportHeader
    rdma_ext: Optional[RdmaExtHeader] = None
    src_qpn_ext: Optional[SrcQpnExtHeader] = None
    payload: bytes = b""
    # filled by encode/decode; not part of value equality
    icrc: Optional[int] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        needs_ext = self.transport.opcode in (Opcode.WRITE, Opcode.READ)
        if needs_ext and self.rdma_ext is None:
            raise ValueError("Write/Read packets require an RDMA extension header")
        if not needs_ext and self.rdma_ext is not None:
            raise ValueError("RDMA extension only valid on Write/Read packets")


def _pack24(value: int) -> bytes:
    return value.to_bytes(3, "big")


def encode_packet(pkt: Packet, mtu: int = DEFAULT_MTU) -> bytes:
    """Serialize a packet; the trailing ICRC is computed over everything before it."""
    if len(pkt.payload) > mtu:
        raise OversizePayload(f"payload {len(pkt.payload)} exceeds MTU {mtu}")
    t = pkt.transport
    flags = (_FLAG_CONGESTION if t.congestion_mark else 0) | (
        _FLAG_SOLICITED if t.solicited else 0
    )
    parts = [
        struct.pack(">BII", pkt.route.fabric_kind, pkt.route.src_addr, pkt.route.dst_addr),
        bytes((t.opcode, flags)),
        _pack24(t.dest_qpn),
        _pack24(t.psn),
    ]
    if pkt.rdma_ext is not None:
        e = pkt.rdma_ext
        parts.append(struct.pack(">IQI", e.rkey, e.vaddr, e.dma_len))
    if pkt.src_qpn_ext is not None:
        parts.append(_pack24(pkt.src_qpn_ext.src_qpn) + b"\x00")
    parts.append(pkt.payload)
    body = b"".join(parts)
    icrc = compute_icrc(body)
    pkt.icrc = icrc
    return body + struct.pack(">I", icrc)


def decode_packet(data: bytes, *, expect_src_qpn: bool = False) -> Packet:
    """Parse and validate a serialized packet.

    The source-QPN extension has no presence flag on the wire; whether to
    expect it is a fabric-wide mitigation setting passed by the caller.
    """
    if len(data) < ROUTE_LEN + TRANSPORT_LEN + ICRC_LEN:
        raise Truncated(f"packet too short: {len(data)} bytes")
    body, icrc_bytes = data[:-ICRC_LEN], data[-ICRC_LEN:]
    icrc = struct.unpack(">I", icrc_bytes)[0]
    if compute_icrc(body) != icrc:
        raise BadChecksum(f"icrc mismatch: {icrc:#010x}")

    kind, src, dst = struct.unpack_from(">BII", body, 0)
    opcode_raw, flags = body[9], body[10]
    try:
        opcode = Opcode(opcode_raw)
    except ValueError:
        raise UnknownOpcode(f"opcode {opcode_raw:#x}") from None
    dest_qpn = int.from_bytes(body[11:14], "big")
    psn = int.from_bytes(body[14:17], "big")
    off = ROUTE_LEN + TRANSPORT_LEN

    rdma_ext = None
    if opcode in (Opcode.WRITE, Opcode.READ):
        if len(body) < off + RDMA_EXT_LEN:
            raise Truncated("missing RDMA extension header")
        rkey, vaddr, dma_len = struct.unpack_from(">IQI", body, off)
        rdma_ext = RdmaExtHeader(rkey=rkey, vaddr=vaddr, dma_len=dma_len)
        off += RDMA_EXT_LEN

    src_qpn_ext = None
    if expect_src_qpn:
        if len(body) < off + SRC_QPN_EXT_LEN:
            raise Truncated("missing source-QPN extension header")
        src_qpn_ext = SrcQpnExtHeader(src_qpn=int.from_bytes(body[off : off + 3], "big"))
        off += SRC_QPN_EXT_LEN

    # field invariants (nonzero addresses, CNP psn == 0, ...) are re-checked
    # by the dataclass constructors; hand-forged bytes that violate them
    # raise ValueError here
    transport = TransportHeader(
        opcode=opcode,
        dest_qpn=dest_qpn,
        psn=psn,
        congestion_mark=bool(flags & _FLAG_CONGESTION),
        solicited=bool(flags & _FLAG_SOLICITED),
    )
    pkt = Packet(
        route=RouteHeader(src_addr=src, dst_addr=dst, fabric_kind=FabricKind(kind)),
        transport=transport,
        rdma_ext=rdma_ext,
        src_qpn_ext=src_qpn_ext,
        payload=body[off:],
    )
    pkt.icrc = icrc
    return pkt

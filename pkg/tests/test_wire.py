"""Wire codec tests.

The checksum is verified against an independent bit-by-bit CRC-32
implementation kept here as the oracle; the production code path uses
zlib and must agree with it on every input.
"""

import pathlib

import pytest
from hypothesis import given, strategies as st

from rdmasim.errors import BadChecksum, OversizePayload, Truncated, UnknownOpcode
from rdmasim.wire import (
    DEFAULT_MTU,
    FabricKind,
    Opcode,
    Packet,
    RdmaExtHeader,
    RouteHeader,
    SrcQpnExtHeader,
    TransportHeader,
    compute_icrc,
    decode_packet,
    encode_packet,
)

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


def crc32_reference(data: bytes) -> int:
    """Bit-by-bit reflected CRC-32, polynomial 0x04C11DB7 (reflected 0xEDB88320),
    initial value 0xFFFFFFFF, final XOR 0xFFFFFFFF."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xEDB88320
            else:
                crc >>= 1
    return crc ^ 0xFFFFFFFF


class TestChecksum:
    def test_check_value(self):
        # canonical CRC-32 check input
        assert crc32_reference(b"123456789") == 0xCBF43926
        assert compute_icrc(b"123456789") == 0xCBF43926

    def test_empty(self):
        assert crc32_reference(b"") == 0
        assert compute_icrc(b"") == 0

    @given(st.binary(max_size=512))
    def test_production_matches_reference(self, data):
        assert compute_icrc(data) == crc32_reference(data)


def _packets():
    addr = st.integers(min_value=1, max_value=(1 << 32) - 1)
    qpn = st.integers(min_value=0, max_value=(1 << 24) - 1)
    psn = st.integers(min_value=0, max_value=(1 << 24) - 1)

    @st.composite
    def packet(draw):
        opcode = draw(st.sampled_from(list(Opcode)))
        ext = None
        if opcode in (Opcode.WRITE, Opcode.READ):
            ext = RdmaExtHeader(
                rkey=draw(st.integers(0, (1 << 32) - 1)),
                vaddr=draw(st.integers(0, (1 << 64) - 1)),
                dma_len=draw(st.integers(0, (1 << 32) - 1)),
            )
        src_ext = None
        if draw(st.booleans()):
            src_ext = SrcQpnExtHeader(src_qpn=draw(qpn))
        return Packet(
            route=RouteHeader(
                src_addr=draw(addr),
                dst_addr=draw(addr),
                fabric_kind=draw(st.sampled_from(list(FabricKind))),
            ),
            transport=TransportHeader(
                opcode=opcode,
                dest_qpn=draw(qpn),
                psn=0 if opcode is Opcode.CNP else draw(psn),
                congestion_mark=draw(st.booleans()),
                solicited=draw(st.booleans()),
            ),
            rdma_ext=ext,
            src_qpn_ext=src_ext,
            payload=draw(st.binary(max_size=64)),
        )

    return packet()


class TestRoundTrip:
    @given(_packets())
    def test_encode_decode_identity(self, pkt):
        data = encode_packet(pkt)
        back = decode_packet(data, expect_src_qpn=pkt.src_qpn_ext is not None)
        assert back == pkt
        assert encode_packet(back) == data

    @given(_packets())
    def test_trailer_is_reference_crc(self, pkt):
        data = encode_packet(pkt)
        assert int.from_bytes(data[-4:], "big") == crc32_reference(data[:-4])


GOLDEN = {
    # ROCE route, SEND to QPN 0x123 at PSN 0x456, payload "hello"
    "send_basic.bin": (
        "000000000a0000000b000000012300045668656c6c6f7f8004b8",
        dict(opcode=Opcode.SEND, dest_qpn=0x123, psn=0x456),
    ),
    # IB route, congestion-marked WRITE with a full RDMA extension
    "write_rdma_ext.bin": (
        "01c0a80001c0a800020101abcdef01020300002a000000200000"
        "00000000001000deadbeefa376bf98",
        dict(opcode=Opcode.WRITE, dest_qpn=0xABCDEF, psn=0x010203),
    ),
    # management datagram to the reserved QPN with a source-QPN extension
    "mad_src_qpn.bin": (
        "000000000c0000000b0702000001000000000001000102e967d160",
        dict(opcode=Opcode.CM_MAD, dest_qpn=1, psn=0),
    ),
}


class TestGoldenFixtures:
    @pytest.mark.parametrize("name", sorted(GOLDEN))
    def test_fixture_bytes(self, name):
        expected_hex, fields = GOLDEN[name]
        data = (FIXTURES / name).read_bytes()
        assert data.hex() == expected_hex
        pkt = decode_packet(data, expect_src_qpn=name == "mad_src_qpn.bin")
        for attr, want in fields.items():
            assert getattr(pkt.transport, attr) == want
        assert encode_packet(pkt) == data

    def test_write_ext_fields(self):
        pkt = decode_packet((FIXTURES / "write_rdma_ext.bin").read_bytes())
        assert pkt.rdma_ext == RdmaExtHeader(rkey=0x2A00, vaddr=0x2000_0000_0000, dma_len=4096)
        assert pkt.transport.congestion_mark is True
        assert pkt.route.fabric_kind is FabricKind.IB
        assert pkt.payload == b"\xde\xad\xbe\xef"


class TestRejection:
    def _basic(self, **kw):
        return Packet(
            route=RouteHeader(src_addr=1, dst_addr=2),
            transport=TransportHeader(opcode=Opcode.SEND, dest_qpn=5, psn=7),
            **kw,
        )

    def test_oversize_payload(self):
        with pytest.raises(OversizePayload):
            encode_packet(self._basic(payload=b"x" * (DEFAULT_MTU + 1)))

    def test_truncated(self):
        data = encode_packet(self._basic())
        with pytest.raises(Truncated):
            decode_packet(data[:10])

    def test_missing_rdma_ext_on_wire(self):
        # a WRITE opcode byte spliced onto a SEND-shaped packet
        data = bytearray(encode_packet(self._basic()))
        data[9] = Opcode.WRITE
        body = bytes(data[:-4])
        forged = body + compute_icrc(body).to_bytes(4, "big")
        with pytest.raises(Truncated):
            decode_packet(forged)

    def test_corrupt_checksum(self):
        data = bytearray(encode_packet(self._basic(payload=b"abc")))
        data[-1] ^= 0xFF
        with pytest.raises(BadChecksum):
            decode_packet(bytes(data))

    def test_flipped_payload_bit(self):
        data = bytearray(encode_packet(self._basic(payload=b"abc")))
        data[-5] ^= 0x01
        with pytest.raises(BadChecksum):
            decode_packet(bytes(data))

    def test_unknown_opcode(self):
        data = bytearray(encode_packet(self._basic()))
        data[9] = 0x7F
        body = bytes(data[:-4])
        forged = body + compute_icrc(body).to_bytes(4, "big")
        with pytest.raises(UnknownOpcode):
            decode_packet(forged)

    def test_cnp_with_nonzero_psn_rejected(self):
        data = bytearray(encode_packet(self._basic()))
        data[9] = Opcode.CNP
        data[16] = 1  # psn low byte
        body = bytes(data[:-4])
        forged = body + compute_icrc(body).to_bytes(4, "big")
        with pytest.raises(ValueError):
            decode_packet(forged)

    def test_invariants_in_constructor(self):
        with pytest.raises(ValueError):
            RouteHeader(src_addr=0, dst_addr=1)
        with pytest.raises(ValueError):
            TransportHeader(opcode=Opcode.CNP, dest_qpn=1, psn=3)
        with pytest.raises(ValueError):
            Packet(
                route=RouteHeader(src_addr=1, dst_addr=2),
                transport=TransportHeader(opcode=Opcode.WRITE, dest_qpn=1, psn=0),
            )
        with pytest.raises(ValueError):
            Packet(
                route=RouteHeader(src_addr=1, dst_addr=2),
                transport=TransportHeader(opcode=Opcode.SEND, dest_qpn=1, psn=0),
                rdma_ext=RdmaExtHeader(rkey=0, vaddr=0, dma_len=0),
            )

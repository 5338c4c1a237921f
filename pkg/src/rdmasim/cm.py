"""RDMA connection manager service.

Runs as a kernel-role service on every node, reachable over the reserved
unreliable endpoint (QPN 1).  Connection parameters travel in plain text.
Each connection gets a hidden key from a weak generator:

    key(n) = seed XOR n        (counter increments per assignment)

so consecutive keys usually differ in a single low bit, which is what the
key-probing attack exploits.  Disconnect requests are honored for any sender
that quotes both connection keys; the source of the request is not checked
unless the ``filter_cm_source`` mitigation is enabled, and requests are not
verified with the peer unless ``challenge_disconnect`` is enabled.

MAD payload layout (CM_MAD packets, dest QPN 1):

    kind 1 B | qpn_to_act_on 3 B | initiator_key 4 B | target_key 4 B |
    src_qpn 3 B | payload_len 2 B | payload

For connect messages the first bytes of the payload carry the sender's
starting PSN (3 B) and, for replies, a status byte.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional

from .rnic import QueuePair
from .wire import Opcode, Packet, RouteHeader, TransportHeader


class CmKind(IntEnum):
    CONNECT_REQ = 1
    CONNECT_REP = 2
    READY_TO_USE = 3
    DISCONNECT_REQ = 4
    CHALLENGE_REQ = 5
    CHALLENGE_REP = 6


class CmConnState(Enum):
    REQUESTED = "requested"
    ESTABLISHED = "established"
    DISCONNECTED = "disconnected"
    FAILED = "failed"


_STATUS_OK = 0
_STATUS_REJECTED = 1


class CmKeyGenerator:
    """seed XOR incrementing counter; seed drawn randomly at service load."""

    def __init__(self, seed: int, space: int):
        self.seed = seed % space
        self.space = space
        self.local_key_state = 0

    def get_key(self) -> int:
        key = self.seed ^ self.local_key_state
        self.local_key_state += 1
        return key % self.space


@dataclass
class CmMessage:
    kind: CmKind
    qpn_to_act_on: int
    initiator_key: int = 0
    target_key: int = 0
    src_qpn_field: int = 0
    private_payload: bytes = b""

    def encode(self) -> bytes:
        return (
            bytes((self.kind,))
            + self.qpn_to_act_on.to_bytes(3, "big")
            + struct.pack(">II", self.initiator_key, self.target_key)
            + self.src_qpn_field.to_bytes(3, "big")
            + struct.pack(">H", len(self.private_payload))
            + self.private_payload
        )

    @classmethod
    def decode(cls, data: bytes) -> "CmMessage":
        kind = CmKind(data[0])
        qpn = int.from_bytes(data[1:4], "big")
        ikey, tkey = struct.unpack_from(">II", data, 4)
        src_qpn = int.from_bytes(data[12:15], "big")
        (plen,) = struct.unpack_from(">H", data, 15)
        return cls(kind, qpn, ikey, tkey, src_qpn, data[17 : 17 + plen])


@dataclass
class CmConnection:
    service: "CmService"
    qp: QueuePair
    local_qpn: int
    peer_addr: int
    local_key: int                      # hidden: never surfaced to the app
    private_payload: bytes
    remote_qpn: Optional[int] = None
    remote_key: Optional[int] = None    # hidden
    state: CmConnState = CmConnState.REQUESTED
    error: Optional[str] = None
    on_established: Optional[Callable[["CmConnection"], None]] = None
    on_disconnected: Optional[Callable[["CmConnection"], None]] = None
    on_failed: Optional[Callable[["CmConnection"], None]] = None
    events: list = field(default_factory=list)


def _challenge_secret(private_payload: bytes) -> bytes:
    return hashlib.sha256(b"cm-challenge-secret:" + private_payload).digest()


def _challenge_response(private_payload: bytes, nonce: bytes) -> bytes:
    return hmac.new(_challenge_secret(private_payload), nonce, hashlib.sha256).digest()[:8]


class CmService:
    RESERVED_QPN = 1

    def __init__(self, node):
        self.node = node
        cfg = node.fabric.config
        self.config = cfg
        self.keygen = CmKeyGenerator(
            node.fabric.rng.getrandbits(cfg.key_bits), cfg.key_space
        )
        self.connections: dict[int, CmConnection] = {}
        self.listener: Optional[Callable] = None
        self.listener_actor = node.kernel_actor
        # reserved unreliable endpoint; consumes one slot of the QP limit
        self.reserved_qp = node.rnic.create_qp(
            node.kernel_actor, _reserved_qpn=self.RESERVED_QPN
        )
        self._pending_challenges: dict[int, list] = {}  # local_qpn -> [nonce, retries_left]

    def reboot(self) -> None:
        cfg = self.config
        self.keygen = CmKeyGenerator(
            self.node.fabric.rng.getrandbits(cfg.key_bits), cfg.key_space
        )
        self.connections.clear()
        self._pending_challenges.clear()
        self.reserved_qp = self.node.rnic.create_qp(
            self.node.kernel_actor, _reserved_qpn=self.RESERVED_QPN
        )

    # --- application interface ---

    def listen(self, acceptor: Callable, actor=None) -> None:
        """Accept incoming connects.

        ``acceptor(peer_addr, private_payload)`` returns either None to
        reject or a dict of connection callbacks (``on_established``,
        ``on_disconnected``).
        """
        self.listener = acceptor
        if actor is not None:
            self.listener_actor = actor

    def connect(
        self,
        peer_addr: int,
        private_payload: bytes = b"",
        actor=None,
        on_established=None,
        on_disconnected=None,
        on_failed=None,
    ) -> CmConnection:
        fabric = self.node.fabric
        actor = actor or self.node.kernel_actor
        qp = self.node.rnic.create_qp(actor)
        start_psn = fabric.rng.randrange(self.config.psn_space)
        qp.next_send_psn = start_psn
        conn = CmConnection(
            service=self,
            qp=qp,
            local_qpn=qp.qpn,
            peer_addr=peer_addr,
            local_key=self.keygen.get_key(),
            private_payload=private_payload,
            on_established=on_established,
            on_disconnected=on_disconnected,
            on_failed=on_failed,
        )
        self.connections[qp.qpn] = conn
        msg = CmMessage(
            kind=CmKind.CONNECT_REQ,
            qpn_to_act_on=qp.qpn,
            initiator_key=conn.local_key,
            src_qpn_field=self.RESERVED_QPN,
            private_payload=start_psn.to_bytes(3, "big") + private_payload,
        )
        self._send_mad(peer_addr, msg)
        fabric.schedule(10 * self.config.latency, self._connect_timeout, conn)
        return conn

    def disconnect(self, conn: CmConnection) -> None:
        if conn.state is not CmConnState.ESTABLISHED:
            return
        msg = CmMessage(
            kind=CmKind.DISCONNECT_REQ,
            qpn_to_act_on=conn.remote_qpn,
            initiator_key=conn.local_key,
            target_key=conn.remote_key,
            src_qpn_field=self.RESERVED_QPN,
        )
        self._send_mad(conn.peer_addr, msg)
        self._surface_disconnect(conn)

    # --- MAD handling ---

    def on_mad(self, pkt: Packet) -> None:
        try:
            msg = CmMessage.decode(pkt.payload)
        except (ValueError, IndexError, struct.error):
            return
        self.handle_message(msg, pkt.route.src_addr)

    def handle_message(self, msg: CmMessage, src_addr: int) -> None:
        """Process one CM message; also the entry point for local probing."""
        if (
            self.config.mitigations.filter_cm_source
            and msg.src_qpn_field != self.RESERVED_QPN
        ):
            return  # only the reserved kernel endpoint may talk to the CM
        kind = msg.kind
        if kind is CmKind.DISCONNECT_REQ:
            self._on_disconnect_req(msg)
        elif kind is CmKind.CONNECT_REQ:
            self._on_connect_req(msg, src_addr)
        elif kind is CmKind.CONNECT_REP:
            self._on_connect_rep(msg, src_addr)
        elif kind is CmKind.READY_TO_USE:
            self._on_ready(msg)
        elif kind is CmKind.CHALLENGE_REQ:
            self._on_challenge_req(msg, src_addr)
        elif kind is CmKind.CHALLENGE_REP:
            self._on_challenge_rep(msg)

    def _on_connect_req(self, msg: CmMessage, src_addr: int) -> None:
        if self.listener is None:
            return
        start_psn = int.from_bytes(msg.private_payload[:3], "big")
        app_payload = msg.private_payload[3:]
        callbacks = self.listener(src_addr, app_payload)
        if callbacks is None:
            reply = CmMessage(
                kind=CmKind.CONNECT_REP,
                qpn_to_act_on=msg.qpn_to_act_on,
                src_qpn_field=self.RESERVED_QPN,
                private_payload=bytes((_STATUS_REJECTED,)),
            )
            self._send_mad(src_addr, reply)
            return

        fabric = self.node.fabric
        qp = self.node.rnic.create_qp(
            self.listener_actor, dest=(src_addr, msg.qpn_to_act_on)
        )
        my_psn = fabric.rng.randrange(self.config.psn_space)
        qp.next_send_psn = my_psn
        qp.expected_recv_psn = start_psn
        conn = CmConnection(
            service=self,
            qp=qp,
            local_qpn=qp.qpn,
            peer_addr=src_addr,
            local_key=self.keygen.get_key(),
            private_payload=app_payload,
            remote_qpn=msg.qpn_to_act_on,
            remote_key=msg.initiator_key,
            on_established=callbacks.get("on_established"),
            on_disconnected=callbacks.get("on_disconnected"),
        )
        self.connections[qp.qpn] = conn
        reply = CmMessage(
            kind=CmKind.CONNECT_REP,
            qpn_to_act_on=msg.qpn_to_act_on,
            initiator_key=msg.initiator_key,
            target_key=conn.local_key,
            src_qpn_field=self.RESERVED_QPN,
            private_payload=bytes((_STATUS_OK,))
            + qp.qpn.to_bytes(3, "big")
            + my_psn.to_bytes(3, "big"),
        )
        self._send_mad(src_addr, reply)

    def _on_connect_rep(self, msg: CmMessage, src_addr: int) -> None:
        conn = self.connections.get(msg.qpn_to_act_on)
        if conn is None or conn.state is not CmConnState.REQUESTED:
            return
        status = msg.private_payload[0]
        if status != _STATUS_OK:
            conn.state = CmConnState.FAILED
            conn.error = "rejected"
            if conn.on_failed is not None:
                conn.on_failed(conn)
            return
        conn.remote_qpn = int.from_bytes(msg.private_payload[1:4], "big")
        conn.remote_key = msg.target_key
        peer_psn = int.from_bytes(msg.private_payload[4:7], "big")
        conn.qp.set_dest(conn.peer_addr, conn.remote_qpn)
        conn.qp.expected_recv_psn = peer_psn
        conn.state = CmConnState.ESTABLISHED
        ready = CmMessage(
            kind=CmKind.READY_TO_USE,
            qpn_to_act_on=conn.remote_qpn,
            src_qpn_field=self.RESERVED_QPN,
        )
        self._send_mad(conn.peer_addr, ready)
        if conn.on_established is not None:
            conn.on_established(conn)

    def _on_ready(self, msg: CmMessage) -> None:
        conn = self.connections.get(msg.qpn_to_act_on)
        if conn is None or conn.state is not CmConnState.REQUESTED:
            return
        conn.state = CmConnState.ESTABLISHED
        if conn.on_established is not None:
            conn.on_established(conn)

    def _on_disconnect_req(self, msg: CmMessage) -> None:
        conn = self.connections.get(msg.qpn_to_act_on)
        if conn is None or conn.state is not CmConnState.ESTABLISHED:
            return
        if msg.initiator_key != conn.remote_key or msg.target_key != conn.local_key:
            return  # silent drop: no oracle beyond connection liveness
        if not self.config.mitigations.challenge_disconnect:
            self._surface_disconnect(conn)
            return
        if conn.local_qpn in self._pending_challenges:
            return  # already verifying an earlier request
        nonce = self.node.fabric.rng.getrandbits(64).to_bytes(8, "big")
        self._pending_challenges[conn.local_qpn] = [nonce, self.config.challenge_retries]
        self._send_challenge(conn)

    def _send_challenge(self, conn: CmConnection) -> None:
        nonce = self._pending_challenges[conn.local_qpn][0]
        msg = CmMessage(
            kind=CmKind.CHALLENGE_REQ,
            qpn_to_act_on=conn.remote_qpn,
            src_qpn_field=self.RESERVED_QPN,
            private_payload=conn.local_qpn.to_bytes(3, "big") + nonce,
        )
        self._send_mad(conn.peer_addr, msg)
        self.node.fabric.schedule(self.config.challenge_timeout, self._challenge_expired, conn)

    def _on_challenge_req(self, msg: CmMessage, src_addr: int) -> None:
        conn = self.connections.get(msg.qpn_to_act_on)
        if conn is None or conn.state is not CmConnState.ESTABLISHED:
            return  # nothing to refute: the connection is gone on this side
        asker_qpn = msg.private_payload[:3]
        nonce = msg.private_payload[3:11]
        reply = CmMessage(
            kind=CmKind.CHALLENGE_REP,
            qpn_to_act_on=int.from_bytes(asker_qpn, "big"),
            src_qpn_field=self.RESERVED_QPN,
            private_payload=_challenge_response(conn.private_payload, nonce),
        )
        self._send_mad(src_addr, reply)

    def _on_challenge_rep(self, msg: CmMessage) -> None:
        conn = self.connections.get(msg.qpn_to_act_on)
        if conn is None:
            return
        pending = self._pending_challenges.get(conn.local_qpn)
        if pending is None:
            return
        expected = _challenge_response(conn.private_payload, pending[0])
        if hmac.compare_digest(expected, msg.private_payload):
            # live peer refuted the disconnect request
            del self._pending_challenges[conn.local_qpn]

    def _challenge_expired(self, conn: CmConnection) -> None:
        pending = self._pending_challenges.get(conn.local_qpn)
        if pending is None:
            return
        pending[1] -= 1
        if pending[1] > 0:
            self._send_challenge(conn)
            return
        del self._pending_challenges[conn.local_qpn]
        self._surface_disconnect(conn)

    def _surface_disconnect(self, conn: CmConnection) -> None:
        """Notification only: the RNIC QP is untouched until the app reacts."""
        if conn.state is not CmConnState.ESTABLISHED:
            return
        conn.state = CmConnState.DISCONNECTED
        conn.events.append((self.node.fabric.now, "disconnected"))
        if conn.on_disconnected is not None:
            conn.on_disconnected(conn)

    def _connect_timeout(self, conn: CmConnection) -> None:
        if conn.state is CmConnState.REQUESTED:
            conn.state = CmConnState.FAILED
            conn.error = "timeout"
            if conn.on_failed is not None:
                conn.on_failed(conn)

    # --- transport ---

    def _send_mad(self, dst_addr: int, msg: CmMessage) -> None:
        pkt = Packet(
            route=RouteHeader(
                src_addr=self.node.addr,
                dst_addr=dst_addr,
                fabric_kind=self.config.fabric_kind,
            ),
            transport=TransportHeader(
                opcode=Opcode.CM_MAD, dest_qpn=self.RESERVED_QPN, psn=0
            ),
            payload=msg.encode(),
        )
        self.node.fabric.transmit(self.node, pkt)


def send_mad_from_qp(actor, qp: QueuePair, dst_addr: int, msg: CmMessage) -> None:
    """User-space MAD transmission over an unreliable endpoint.

    The transport stamps the sender's true QPN into the message; only raw
    admin injection can forge it.
    """
    node = actor.node
    msg.src_qpn_field = qp.qpn
    pkt = Packet(
        route=RouteHeader(
            src_addr=node.addr,
            dst_addr=dst_addr,
            fabric_kind=node.fabric.config.fabric_kind,
        ),
        transport=TransportHeader(opcode=Opcode.CM_MAD, dest_qpn=CmService.RESERVED_QPN, psn=0),
        payload=msg.encode(),
    )
    node.fabric.send(actor, pkt)

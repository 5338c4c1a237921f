"""RNIC model: verbs-style endpoints, ingress pipeline, memory registration.

The vulnerable behaviors are modeled on purpose:

* endpoint creation performs no duplicate-destination sanity check (unless
  the mitigation flag is set) and emits no network traffic;
* QPNs come from a sequential generator with a static post-reboot seed;
* packets carry no source QPN, so the ingress connection-table lookup keys
  only on (source routing address, destination QPN);
* a duplicate PSN is dropped silently but still acknowledged;
* rkey generators are predictable (static first value, or last-plus-one for
  fast registrations);
* QP limits are system-wide per machine, shared by all users and the kernel.
"""

from __future__ import annotations

import enum
from typing import Callable, Optional

from .errors import (
    AlreadyInvalid,
    DuplicateDestination,
    LimitExhausted,
    QpError,
    QuotaExhausted,
    WindowFull,
)
from .wire import (
    Opcode,
    Packet,
    RdmaExtHeader,
    RouteHeader,
    SrcQpnExtHeader,
    TransportHeader,
)

MAX_UNACKED = 128
RESERVED_CM_QPN = 1

NAK_SEQUENCE = b"\x01"
NAK_REMOTE_ACCESS = b"\x02"


class QpState(enum.Enum):
    INIT = "init"
    READY = "ready"
    ERROR = "error"


class MrAccess(enum.IntFlag):
    LOCAL_ONLY = 0
    REMOTE_READ = 1
    REMOTE_WRITE = 2


class MrKind(enum.Enum):
    STATIC = "static"
    FAST_REG = "fast-reg"


class QpnGenerator:
    """Sequential QPN allocation from a static per-boot seed."""

    def __init__(self, static_seed: int, space: int):
        self.static_seed = static_seed
        self.space = space
        self.counter = 0

    def next(self) -> int:
        qpn = (self.static_seed + self.counter) % self.space
        self.counter += 1
        return qpn

    def reboot(self) -> None:
        self.counter = 0


class RkeyGenerator:
    """Predictable rkey assignment.

    Static registrations get a fixed first value after reboot and advance by
    a constant stride; fast registrations yield last-key-plus-one.
    """

    def __init__(self, first: int, stride: int, space: int):
        self.first = first % space
        self.stride = stride
        self.space = space
        self.last: Optional[int] = None

    def next(self) -> int:
        if self.last is None:
            self.last = self.first
        else:
            self.last = (self.last + self.stride) % self.space
        return self.last

    def reboot(self) -> None:
        self.last = None


class MemoryRegion:
    __slots__ = ("rkey", "base_vaddr", "length", "access", "valid", "kind", "data")

    def __init__(self, rkey: int, base_vaddr: int, length: int, access: MrAccess, kind: MrKind):
        self.rkey = rkey
        self.base_vaddr = base_vaddr
        self.length = length
        self.access = access
        self.valid = True
        self.kind = kind
        self.data = bytearray(length)

    def contains(self, vaddr: int, length: int) -> bool:
        return self.base_vaddr <= vaddr and vaddr + length <= self.base_vaddr + self.length

    def read(self, vaddr: int, length: int) -> bytes:
        off = vaddr - self.base_vaddr
        return bytes(self.data[off : off + length])

    def write(self, vaddr: int, payload: bytes) -> None:
        off = vaddr - self.base_vaddr
        self.data[off : off + len(payload)] = payload


class QueuePair:
    __slots__ = (
        "rnic",
        "qpn",
        "dest_addr",
        "dest_qpn",
        "next_send_psn",
        "expected_recv_psn",
        "unacked_count",
        "state",
        "owner",
        "rate_factor",
        "next_emit",
        "recv_handler",
        "on_disconnect",
        "pending_reads",
        "events",
        "_recovery_scheduled",
    )

    def __init__(self, rnic: "Rnic", qpn: int, owner: str):
        self.rnic = rnic
        self.qpn = qpn
        self.owner = owner
        self.dest_addr: Optional[int] = None
        self.dest_qpn: Optional[int] = None
        self.next_send_psn = 0
        self.expected_recv_psn = 0
        self.unacked_count = 0
        self.state = QpState.INIT
        self.rate_factor = 1.0
        self.next_emit = 0
        self.recv_handler: Optional[Callable[[bytes, Packet], None]] = None
        self.on_disconnect: Optional[Callable[[], None]] = None
        self.pending_reads: dict[int, Callable[[bytes], None]] = {}
        self.events: list[tuple[int, str]] = []
        self._recovery_scheduled = False

    def set_dest(self, dest_addr: int, dest_qpn: int) -> None:
        self.dest_addr = dest_addr
        self.dest_qpn = dest_qpn
        if self.state is QpState.INIT:
            self.state = QpState.READY

    def _event(self, name: str) -> None:
        self.events.append((self.rnic.node.fabric.now, name))

    def fail(self) -> None:
        if self.state is QpState.ERROR:
            return
        self.state = QpState.ERROR
        self._event("disconnected")
        if self.on_disconnect is not None:
            self.on_disconnect()

    def __repr__(self) -> str:
        return f"<QP {self.qpn:#x} -> ({self.dest_addr}, {self.dest_qpn}) {self.state.value}>"


class Rnic:
    def __init__(self, node):
        self.node = node
        cfg = node.fabric.config
        self.config = cfg
        seed = node.fabric.rng.randint(cfg.qpn_seed_low, cfg.qpn_seed_high) % cfg.qpn_space
        self.qpn_gen = QpnGenerator(seed, cfg.qpn_space)
        self.static_rkey_gen = RkeyGenerator(
            cfg.static_rkey_first, cfg.static_rkey_stride, cfg.key_space
        )
        self.fastreg_rkey_gen = RkeyGenerator(cfg.fastreg_rkey_first, 1, cfg.key_space)
        self.qps: dict[int, QueuePair] = {}
        self.mrs: dict[int, MemoryRegion] = {}
        self._actor_qp_counts: dict[str, int] = {}

    # --- endpoint management ---

    def create_qp(
        self,
        actor,
        dest: Optional[tuple[int, int]] = None,
        initial_psn: int = 0,
        recv_handler=None,
        _reserved_qpn: Optional[int] = None,
    ) -> QueuePair:
        cfg = self.config
        quota = cfg.mitigations.per_user_quota
        actor_id = actor.actor_id
        if quota is not None and self._actor_qp_counts.get(actor_id, 0) >= quota:
            raise QuotaExhausted(f"{actor_id} reached QP quota {quota}")
        if len(self.qps) >= cfg.max_qps_system_wide:
            raise LimitExhausted("system-wide QP limit reached")
        if (
            dest is not None
            and cfg.mitigations.reject_duplicate_dest
            and any(
                qp.dest_addr == dest[0] and qp.dest_qpn == dest[1]
                for qp in self.qps.values()
            )
        ):
            raise DuplicateDestination(f"existing QP already targets {dest}")

        qpn = _reserved_qpn if _reserved_qpn is not None else self.qpn_gen.next()
        qp = QueuePair(self, qpn, actor_id)
        qp.next_send_psn = initial_psn % cfg.psn_space
        qp.recv_handler = recv_handler
        if dest is not None:
            qp.set_dest(*dest)
        self.qps[qpn] = qp
        self._actor_qp_counts[actor_id] = self._actor_qp_counts.get(actor_id, 0) + 1
        return qp

    def destroy_qp(self, qp: QueuePair) -> None:
        if self.qps.pop(qp.qpn, None) is not None:
            self._actor_qp_counts[qp.owner] -= 1

    def reboot(self) -> None:
        self.qps.clear()
        self.mrs.clear()
        self._actor_qp_counts.clear()
        self.qpn_gen.reboot()
        self.static_rkey_gen.reboot()
        self.fastreg_rkey_gen.reboot()

    # --- memory registration ---

    def register_mr(
        self,
        actor,
        length: int,
        access: MrAccess,
        kind: MrKind = MrKind.STATIC,
        base_vaddr: Optional[int] = None,
    ) -> MemoryRegion:
        gen = self.fastreg_rkey_gen if kind is MrKind.FAST_REG else self.static_rkey_gen
        rkey = gen.next()
        if base_vaddr is None:
            # bump allocation high enough that 0x0 stays invalid
            base_vaddr = 0x1000_0000 + sum(m.length + 0x1000 for m in self.mrs.values())
        mr = MemoryRegion(rkey, base_vaddr, length, access, kind)
        self.mrs[rkey] = mr
        return mr

    def invalidate_mr(self, mr: MemoryRegion) -> None:
        if not mr.valid:
            raise AlreadyInvalid(f"rkey {mr.rkey:#x} already invalidated")
        mr.valid = False

    # --- transmit path ---

    def _make_packet(
        self,
        qp: QueuePair,
        opcode: Opcode,
        psn: int,
        payload: bytes = b"",
        rdma_ext: Optional[RdmaExtHeader] = None,
    ) -> Packet:
        src_ext = None
        if self.config.mitigations.src_qpn_header:
            src_ext = SrcQpnExtHeader(src_qpn=qp.qpn)
        return Packet(
            route=RouteHeader(
                src_addr=self.node.addr,
                dst_addr=qp.dest_addr,
                fabric_kind=self.config.fabric_kind,
            ),
            transport=TransportHeader(opcode=opcode, dest_qpn=qp.dest_qpn, psn=psn),
            rdma_ext=rdma_ext,
            src_qpn_ext=src_ext,
            payload=payload,
        )

    def _post(self, qp: QueuePair, opcode: Opcode, payload: bytes, rdma_ext=None) -> int:
        if qp.state is QpState.ERROR:
            raise QpError(f"QP {qp.qpn:#x} is in error state")
        if qp.state is not QpState.READY:
            raise QpError(f"QP {qp.qpn:#x} is not connected")
        if qp.unacked_count >= MAX_UNACKED:
            raise WindowFull(f"QP {qp.qpn:#x} has {MAX_UNACKED} unacked packets")
        psn = qp.next_send_psn
        qp.next_send_psn = (psn + 1) % self.config.psn_space
        qp.unacked_count += 1
        pkt = self._make_packet(qp, opcode, psn, payload, rdma_ext)
        fabric = self.node.fabric
        # emission pacing: inter-packet gap grows as the rate factor shrinks
        gap = max(1, round(1.0 / qp.rate_factor))
        emit = max(fabric.now, qp.next_emit)
        qp.next_emit = emit + gap
        fabric.schedule(emit - fabric.now, fabric.transmit, self.node, pkt)
        return psn

    def post_send(self, qp: QueuePair, payload: bytes) -> int:
        return self._post(qp, Opcode.SEND, payload)

    def post_rdma_write(self, qp: QueuePair, payload: bytes, rkey: int, vaddr: int) -> int:
        ext = RdmaExtHeader(rkey=rkey, vaddr=vaddr, dma_len=len(payload))
        return self._post(qp, Opcode.WRITE, payload, ext)

    def post_rdma_read(
        self, qp: QueuePair, length: int, rkey: int, vaddr: int, on_data=None
    ) -> int:
        ext = RdmaExtHeader(rkey=rkey, vaddr=vaddr, dma_len=length)
        psn = self._post(qp, Opcode.READ, b"", ext)
        if on_data is not None:
            qp.pending_reads[psn] = on_data
        return psn

    def _respond(self, qp: QueuePair, opcode: Opcode, psn: int, payload: bytes = b"") -> None:
        pkt = self._make_packet(qp, opcode, psn, payload)
        self.node.fabric.transmit(self.node, pkt)

    # --- ingress pipeline ---

    def ingress(self, pkt: Packet) -> None:
        t = pkt.transport
        qp = self.qps.get(t.dest_qpn)
        if qp is None or qp.dest_addr is None:
            return  # unknown connection: silent drop
        if qp.dest_addr != pkt.route.src_addr:
            return  # routing info does not match the connection table entry
        if self.config.mitigations.src_qpn_header:
            if pkt.src_qpn_ext is None or pkt.src_qpn_ext.src_qpn != qp.dest_qpn:
                return  # source QPN does not match the recorded peer

        op = t.opcode
        if op is Opcode.CNP:
            self._on_cnp(qp)
            return
        if op is Opcode.ACK:
            if qp.unacked_count > 0:
                qp.unacked_count -= 1
            return
        if op is Opcode.NAK:
            if pkt.payload.startswith(NAK_REMOTE_ACCESS):
                qp.fail()
            # sequence NAKs with nothing outstanding are ignored
            return
        if op is Opcode.READ_RESPONSE:
            if qp.unacked_count > 0:
                qp.unacked_count -= 1
            cb = qp.pending_reads.pop(t.psn, None)
            if cb is not None:
                cb(pkt.payload)
            return

        if qp.state is QpState.ERROR:
            return

        # data packet: PSN comparison against the receive counter
        space = self.config.psn_space
        delta = (t.psn - qp.expected_recv_psn) % space
        if delta == 0:
            self._accept(qp, pkt)
        elif delta >= space // 2:
            # behind the counter: duplicate; drop silently but acknowledge
            self._respond(qp, Opcode.ACK, t.psn)
        else:
            self._respond(qp, Opcode.NAK, t.psn, NAK_SEQUENCE)

    def _accept(self, qp: QueuePair, pkt: Packet) -> None:
        t = pkt.transport
        space = self.config.psn_space
        op = t.opcode

        if op is Opcode.SEND:
            qp.expected_recv_psn = (qp.expected_recv_psn + 1) % space
            self._respond(qp, Opcode.ACK, t.psn)
            if t.congestion_mark:
                self._respond(qp, Opcode.CNP, 0)
            if qp.recv_handler is not None:
                qp.recv_handler(pkt.payload, pkt)
            return

        ext = pkt.rdma_ext
        if op is Opcode.WRITE:
            mr = self.mrs.get(ext.rkey)
            if (
                mr is None
                or not mr.valid
                or not (mr.access & MrAccess.REMOTE_WRITE)
                or not mr.contains(ext.vaddr, len(pkt.payload))
            ):
                self._remote_access_error(qp, t.psn)
                return
            mr.write(ext.vaddr, pkt.payload)
            qp.expected_recv_psn = (qp.expected_recv_psn + 1) % space
            self._respond(qp, Opcode.ACK, t.psn)
            if t.congestion_mark:
                self._respond(qp, Opcode.CNP, 0)
            return

        if op is Opcode.READ:
            qp.expected_recv_psn = (qp.expected_recv_psn + 1) % space
            # the DMA fetch takes time; permissions and contents are evaluated
            # when it actually runs, not when the request is accepted
            self.node.fabric.schedule(
                self.config.dma_read_delay, self._execute_read, qp, t.psn, ext
            )
            return

    def _execute_read(self, qp: QueuePair, psn: int, ext: RdmaExtHeader) -> None:
        if qp.state is QpState.ERROR:
            return
        mr = self.mrs.get(ext.rkey)
        if (
            mr is None
            or not mr.valid
            or not (mr.access & MrAccess.REMOTE_READ)
            or not mr.contains(ext.vaddr, ext.dma_len)
        ):
            self._remote_access_error(qp, psn)
            return
        # the read response doubles as the acknowledgment
        self._respond(qp, Opcode.READ_RESPONSE, psn, mr.read(ext.vaddr, ext.dma_len))

    def _remote_access_error(self, qp: QueuePair, psn: int) -> None:
        """Invalid one-sided access: NAK the sender and break the local QP."""
        self._respond(qp, Opcode.NAK, psn, NAK_REMOTE_ACCESS)
        qp.fail()

    def _on_cnp(self, qp: QueuePair) -> None:
        cfg = self.config
        qp.rate_factor *= cfg.rate_decrease
        if cfg.rate_recovery and not qp._recovery_scheduled:
            qp._recovery_scheduled = True
            self.node.fabric.schedule(cfg.rate_recovery_interval, self._recover_rate, qp)

    def _recover_rate(self, qp: QueuePair) -> None:
        cfg = self.config
        qp.rate_factor = min(1.0, qp.rate_factor * cfg.rate_recovery_factor)
        if qp.rate_factor < 1.0:
            self.node.fabric.schedule(cfg.rate_recovery_interval, self._recover_rate, qp)
        else:
            qp._recovery_scheduled = False

"""Attack library: deterministic adversary programs against the simulator.

Two adversary capability sets are modeled:

* ``TLU`` — a co-located unprivileged user.  It only has the verbs surface
  (creating endpoints/registrations on its own machine's RNIC, posting work,
  sending datagrams from its own endpoints) plus a capture point on its own
  machine.  Its packets always carry its machine's true source address —
  which is exactly the victim's address when the attacker shares the machine
  with a connection endpoint.
* ``TRA`` — a remote administrator on a non-endpoint machine.  It can craft
  and inject raw packets with arbitrary headers (including a forged source
  address and a forged source-QPN extension), but it holds no key for
  IPsec-protected paths and has no verbs access to the victim machines.

Every attack returns an :class:`AttackOutcome` whose ``succeeded`` flag is
decided by inspecting victim-side ground truth, never attacker belief.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .cm import CmKind, CmMessage, CmService, send_mad_from_qp
from .errors import (
    DuplicateDestination,
    IpsecDrop,
    LimitExhausted,
    QuotaExhausted,
    SpoofDenied,
)
from .fabric import Actor, Fabric, PathObserver
from .nvmeof import CapsuleKind, CapsuleStatus, NvmeCapsule
from .rnic import MAX_UNACKED
from .wire import (
    DATA_OPCODES,
    Opcode,
    Packet,
    RdmaExtHeader,
    RouteHeader,
    SrcQpnExtHeader,
    TransportHeader,
)


class ThreatModel(Enum):
    TLU = "tlu"
    TRA = "tra"


class SecurityLevel(Enum):
    NONE = "none"
    INBAND = "inband"
    IPSEC = "ipsec"


class Effect(Enum):
    FORGED_EXECUTION = "forged-execution"
    EARLY_TERMINATION = "early-termination"
    FALSIFIED_DATA = "falsified-data"
    CONNECTION_FAILURE = "connection-failure"
    SLOWDOWN = "slowdown"
    DISCONNECTION = "disconnection"


@dataclass
class AttackOutcome:
    attack_id: str
    threat_model: ThreatModel
    security: SecurityLevel
    succeeded: bool
    effect: Optional[Effect] = None
    cost: int = 1
    detail: str = ""

    def __post_init__(self) -> None:
        if self.succeeded and self.effect is None:
            raise ValueError("a successful outcome must name its effect")
        if self.cost < 1:
            raise ValueError("cost must be at least 1")


@dataclass
class ProbeResult:
    succeeded: bool
    seed: Optional[int] = None
    key_pair: Optional[tuple[int, int]] = None
    cost: int = 0
    retries: int = 0


class ConnSpy:
    """Reconstructs a victim connection's parameters from captured packets.

    Everything here is computed from bytes an eavesdropper at the capture
    point can legitimately see: connection-manager handshakes travel in
    plain text, and data-packet headers reveal PSNs, rkeys, and addresses.
    """

    def __init__(self, observer: PathObserver, client_addr: int, target_addr: int):
        self.observer = observer
        self.client_addr = client_addr
        self.target_addr = target_addr

    def _cm_handshake(self):
        req = rep = None
        for _, pkt in self.observer.packets:
            if pkt.transport.opcode is not Opcode.CM_MAD:
                continue
            try:
                msg = CmMessage.decode(pkt.payload)
            except (ValueError, IndexError):
                continue
            src, dst = pkt.route.src_addr, pkt.route.dst_addr
            if msg.kind is CmKind.CONNECT_REQ and (src, dst) == (
                self.client_addr,
                self.target_addr,
            ):
                req = msg
            elif (
                msg.kind is CmKind.CONNECT_REP
                and (src, dst) == (self.target_addr, self.client_addr)
                and msg.private_payload
                and msg.private_payload[0] == 0
            ):
                rep = msg
        if req is None or rep is None:
            raise LookupError("no captured connection handshake for this pair")
        return req, rep

    @property
    def client_qpn(self) -> int:
        return self._cm_handshake()[0].qpn_to_act_on

    @property
    def target_qpn(self) -> int:
        return int.from_bytes(self._cm_handshake()[1].private_payload[1:4], "big")

    @property
    def initiator_key(self) -> int:
        return self._cm_handshake()[0].initiator_key

    @property
    def target_key(self) -> int:
        return self._cm_handshake()[1].target_key

    def next_psn(self, src_addr: int, dst_addr: int) -> int:
        """Predicted next PSN for one direction of the victim connection."""
        req, rep = self._cm_handshake()
        if src_addr == self.client_addr:
            base = int.from_bytes(req.private_payload[:3], "big")
        else:
            base = int.from_bytes(rep.private_payload[4:7], "big")
        consumed = sum(
            1
            for _, pkt in self.observer.packets
            if pkt.route.src_addr == src_addr
            and pkt.route.dst_addr == dst_addr
            and pkt.transport.opcode in (Opcode.SEND, Opcode.WRITE, Opcode.READ)
        )
        return base + consumed

    def last_client_registration(self) -> tuple[int, int]:
        """(rkey, vaddr) of the most recent client buffer the target touched."""
        last = None
        for _, pkt in self.observer.packets:
            if (
                pkt.route.src_addr == self.target_addr
                and pkt.route.dst_addr == self.client_addr
                and pkt.rdma_ext is not None
            ):
                last = (pkt.rdma_ext.rkey, pkt.rdma_ext.vaddr)
        if last is None:
            raise LookupError("no captured one-sided access to the client")
        return last

    def last_command_id(self) -> int:
        last = None
        for _, pkt in self.observer.packets:
            if (
                pkt.route.src_addr == self.client_addr
                and pkt.route.dst_addr == self.target_addr
                and pkt.transport.opcode is Opcode.SEND
            ):
                try:
                    capsule = NvmeCapsule.decode(pkt.payload)
                except ValueError:
                    continue
                if capsule.kind is not CapsuleKind.RESPONSE:
                    last = capsule.command_id
        if last is None:
            raise LookupError("no captured command capsule")
        return last


# --- injection primitives ---


def _raw_packet(
    src_addr: int,
    dst_addr: int,
    opcode: Opcode,
    dest_qpn: int,
    psn: int,
    payload: bytes = b"",
    rdma_ext: Optional[RdmaExtHeader] = None,
    forged_src_qpn: Optional[int] = None,
    fabric_kind=None,
) -> Packet:
    ext = None if forged_src_qpn is None else SrcQpnExtHeader(src_qpn=forged_src_qpn)
    return Packet(
        route=RouteHeader(src_addr=src_addr, dst_addr=dst_addr, fabric_kind=fabric_kind or 0),
        transport=TransportHeader(opcode=opcode, dest_qpn=dest_qpn, psn=psn),
        rdma_ext=rdma_ext,
        src_qpn_ext=ext,
        payload=payload,
    )


def _try_send(fabric: Fabric, actor: Actor, pkt: Packet) -> bool:
    try:
        fabric.send(actor, pkt)
    except (SpoofDenied, IpsecDrop):
        return False
    return True


def _verbs_inject(
    actor: Actor,
    dest: tuple[int, int],
    psn: int,
    opcode: Opcode,
    payload: bytes = b"",
    rdma_ext: Optional[RdmaExtHeader] = None,
) -> None:
    """One injected packet through the attacker's own endpoint.

    The endpoint targets the victim's (address, QPN); nothing stops a second
    local endpoint from sharing that destination, and the packet carries no
    source QPN, so the receiver cannot tell it from the genuine peer's
    traffic.  The source address is the attacker machine's own.
    """
    rnic = actor.node.rnic
    qp = rnic.create_qp(actor, dest=dest)
    qp.next_send_psn = psn
    if opcode is Opcode.SEND:
        rnic.post_send(qp, payload)
    elif opcode is Opcode.WRITE:
        rnic.post_rdma_write(qp, payload, rdma_ext.rkey, rdma_ext.vaddr)
    elif opcode is Opcode.READ:
        rnic.post_rdma_read(qp, rdma_ext.dma_len, rdma_ext.rkey, rdma_ext.vaddr)
    else:
        raise ValueError(f"verbs surface cannot emit {opcode!r}")
    rnic.destroy_qp(qp)


def _inject_data(
    actor: Actor,
    threat: ThreatModel,
    impersonated_addr: int,
    dest_addr: int,
    dest_qpn: int,
    psn: int,
    opcode: Opcode,
    payload: bytes = b"",
    rdma_ext: Optional[RdmaExtHeader] = None,
    forged_src_qpn: Optional[int] = None,
) -> bool:
    """Inject one data packet that claims to come from ``impersonated_addr``."""
    fabric = actor.node.fabric
    if threat is ThreatModel.TLU:
        if actor.node.addr != impersonated_addr:
            return False  # a user cannot spoof another machine's address
        try:
            _verbs_inject(actor, (dest_addr, dest_qpn), psn, opcode, payload, rdma_ext)
        except (DuplicateDestination, QuotaExhausted, LimitExhausted):
            return False  # endpoint creation sanity checks stopped the clone
        return True
    pkt = _raw_packet(
        impersonated_addr,
        dest_addr,
        opcode,
        dest_qpn,
        psn,
        payload,
        rdma_ext,
        forged_src_qpn=forged_src_qpn,
        fabric_kind=fabric.config.fabric_kind,
    )
    return _try_send(fabric, actor, pkt)


# --- reconnaissance ---


def attack_guess_qpn(actor: Actor, threat: ThreatModel = ThreatModel.TLU) -> list[int]:
    """Candidate QPNs for previously created victim endpoints."""
    cfg = actor.node.fabric.config
    if threat is ThreatModel.TRA:
        # no local vantage point: sweep the known post-reboot seed range
        return list(range(cfg.qpn_seed_low, cfg.qpn_seed_high + 1))
    rnic = actor.node.rnic
    probe = rnic.create_qp(actor)
    own = probe.qpn
    rnic.destroy_qp(probe)
    # sequential allocation: everything between the boot seed and our own
    # fresh QPN belongs to earlier users; liveness confirmed by the local
    # device's endpoint table (visible to co-located processes)
    low = cfg.qpn_seed_low % cfg.qpn_space
    return [
        q
        for q in range(low, own)
        if q in rnic.qps and rnic.qps[q].owner != actor.actor_id
    ]


# --- PSN enumeration ---


def attack_enumerate_psn_inject(
    actor: Actor,
    victim_dest: tuple[int, int],
    payload: bytes,
    threat: ThreatModel = ThreatModel.TLU,
    security: SecurityLevel = SecurityLevel.NONE,
    start_psn: Optional[int] = None,
    success_oracle: Optional[Callable[[], bool]] = None,
    full_sweep: bool = False,
    impersonated_addr: Optional[int] = None,
) -> AttackOutcome:
    """Brute-force the hidden receive PSN by sweeping the whole space.

    The sweep runs downward from ``start_psn`` so that exactly one injected
    packet lands on the hidden counter: packets ahead of it are NAKed (no
    state change), the hit is accepted, and everything after it is a
    duplicate.  The victim's counter advances by one — as if a single
    genuine packet had arrived — which is what keeps the attack invisible
    to the impersonated endpoint.
    """
    fabric = actor.node.fabric
    space = fabric.config.psn_space
    dest_addr, dest_qpn = victim_dest
    start = (space - 1) if start_psn is None else start_psn
    rnic = actor.node.rnic

    injected = 0
    try:
        qp = rnic.create_qp(actor, dest=victim_dest)
    except (DuplicateDestination, QuotaExhausted, LimitExhausted):
        return AttackOutcome(
            "enumerate-psn", threat, security, False,
            detail="endpoint creation sanity checks stopped the clone",
        )
    qp.next_send_psn = start
    try:
        for i in range(space):
            psn = (start - i) % space
            if threat is ThreatModel.TLU:
                qp.next_send_psn = psn
                rnic.post_send(qp, payload)
                injected += 1
                if qp.unacked_count >= MAX_UNACKED:
                    rnic.destroy_qp(qp)
                    fabric.run_until_idle()
                    qp = rnic.create_qp(actor, dest=victim_dest)
                    if success_oracle is not None and not full_sweep and success_oracle():
                        break
            else:
                pkt = _raw_packet(
                    impersonated_addr if impersonated_addr is not None else actor.node.addr,
                    dest_addr,
                    Opcode.SEND,
                    dest_qpn,
                    psn,
                    payload,
                    fabric_kind=fabric.config.fabric_kind,
                )
                if not _try_send(fabric, actor, pkt):
                    return AttackOutcome(
                        "enumerate-psn", threat, security, False,
                        cost=max(1, injected), detail="injection path blocked",
                    )
                injected += 1
                if injected % MAX_UNACKED == 0:
                    fabric.run_until_idle()
                    if success_oracle is not None and not full_sweep and success_oracle():
                        break
    finally:
        if qp.qpn in rnic.qps:
            rnic.destroy_qp(qp)
    fabric.run_until_idle()

    succeeded = success_oracle() if success_oracle is not None else True
    return AttackOutcome(
        "enumerate-psn",
        threat,
        security,
        succeeded,
        effect=Effect.FORGED_EXECUTION if succeeded else None,
        cost=max(1, injected),
    )


# --- forged command execution ---


def attack_spoof_nvmeof_request(
    actor: Actor,
    spy: ConnSpy,
    target_store,
    block: int,
    data: bytes,
    threat: ThreatModel,
    security: SecurityLevel,
) -> AttackOutcome:
    """Execute an attacker-chosen write on the remote disk."""
    fabric = actor.node.fabric
    capsule = NvmeCapsule(
        kind=CapsuleKind.WRITE_IN_CAPSULE,
        command_id=0xBEEF,
        block_addr=block,
        length=len(data),
        inline_data=data,
    )
    try:
        psn = spy.next_psn(spy.client_addr, spy.target_addr)
        dest_qpn = spy.target_qpn
    except LookupError:
        return AttackOutcome(
            "spoof-nvmeof-request", threat, security, False,
            detail="victim connection parameters not observable",
        )
    sent = _inject_data(
        actor,
        threat,
        spy.client_addr,
        spy.target_addr,
        dest_qpn,
        psn,
        Opcode.SEND,
        capsule.encode(),
        forged_src_qpn=spy.client_qpn if threat is ThreatModel.TRA else None,
    )
    fabric.run_until_idle()
    succeeded = sent and target_store.read(block) == data.ljust(4096, b"\x00")
    return AttackOutcome(
        "spoof-nvmeof-request",
        threat,
        security,
        succeeded,
        effect=Effect.FORGED_EXECUTION if succeeded else None,
        detail="" if sent else "injection path blocked",
    )


def attack_spoof_nvmeof_response(
    actor: Actor,
    spy: ConnSpy,
    victim_client,
    target_store,
    threat: ThreatModel,
    security: SecurityLevel,
    trigger_block: int,
    intended_data: bytes,
) -> AttackOutcome:
    """Terminate an in-flight write early by forging its completion.

    Armed before the victim issues a bulk write: the moment the target's
    one-sided read request for the data is observed, a forged response is
    injected.  The client then releases (or invalidates) its staging buffer
    while the data fetch is still in flight.
    """
    fabric = actor.node.fabric
    state = {"armed": True, "blocked": False, "fired": False}

    def on_packet(now: int, pkt: Packet) -> None:
        if not state["armed"] or pkt.transport.opcode is not Opcode.READ:
            return
        if (
            pkt.route.src_addr != spy.target_addr
            or pkt.route.dst_addr != spy.client_addr
        ):
            return
        state["armed"] = False
        state["fired"] = True
        try:
            cid = spy.last_command_id()
        except LookupError:
            cid = 0
        forged = NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=cid, status=CapsuleStatus.OK)
        ok = _inject_data(
            actor,
            threat,
            spy.target_addr,
            spy.client_addr,
            spy.client_qpn,
            (pkt.transport.psn + 1) % fabric.config.psn_space,
            Opcode.SEND,
            forged.encode(),
            forged_src_qpn=spy.target_qpn if threat is ThreatModel.TRA else None,
        )
        state["blocked"] = not ok

    spy.observer.on_packet = on_packet
    fabric.run_until_idle()
    spy.observer.on_packet = None

    if not state["fired"] or state["blocked"]:
        return AttackOutcome(
            "spoof-nvmeof-response", threat, security, False,
            detail="trigger not observable" if not state["fired"] else "injection path blocked",
        )
    stored = target_store.read(trigger_block)
    corrupted = stored != intended_data.ljust(4096, b"\x00")
    broken = not victim_client.connected
    succeeded = corrupted or broken
    return AttackOutcome(
        "spoof-nvmeof-response",
        threat,
        security,
        succeeded,
        effect=Effect.EARLY_TERMINATION if succeeded else None,
        detail="connection torn down" if broken else ("stored data corrupted" if corrupted else ""),
    )


def attack_rdma_write_corrupt(
    actor: Actor,
    spy: ConnSpy,
    victim_client,
    target_store,
    threat: ThreatModel,
    security: SecurityLevel,
    fake_data: bytes,
    use_eavesdrop: bool = True,
) -> AttackOutcome:
    """Falsify the data a client reads, leaving the disk untouched.

    Armed before the victim issues a read: when the read command capsule is
    observed, a one-sided write is forged into the client's receive buffer
    at the PSN the target is about to use.  The target's genuine write then
    drops as a duplicate and its response completes the command, so the
    client observes attacker bytes while the stored block is unchanged.
    """
    fabric = actor.node.fabric
    cfg = fabric.config
    state = {"armed": True, "blocked": False, "fired": False}
    store_before = target_store.snapshot()

    def buffer_params() -> tuple[int, int]:
        from .nvmeof import ClientProfile, KERNEL_STAGING_BASE, STATIC_POOL_BASE

        if victim_client.profile is ClientProfile.USER_SPACE:
            # static pool: first registration after boot has a known rkey,
            # and the pool base address is a published constant
            return cfg.static_rkey_first % cfg.key_space, STATIC_POOL_BASE
        if not use_eavesdrop:
            # blind guess against fast registrations: predict the static
            # constant and pool address, which a kernel client never uses
            return cfg.static_rkey_first % cfg.key_space, STATIC_POOL_BASE
        rkey, vaddr = spy.last_client_registration()
        return (rkey + 1) % cfg.key_space, vaddr

    def on_packet(now: int, pkt: Packet) -> None:
        if not state["armed"] or pkt.transport.opcode is not Opcode.SEND:
            return
        if (
            pkt.route.src_addr != spy.client_addr
            or pkt.route.dst_addr != spy.target_addr
        ):
            return
        try:
            capsule = NvmeCapsule.decode(pkt.payload)
        except ValueError:
            return
        if capsule.kind is not CapsuleKind.READ:
            return
        state["armed"] = False
        state["fired"] = True
        try:
            rkey, vaddr = buffer_params()
            psn = spy.next_psn(spy.target_addr, spy.client_addr)
        except LookupError:
            state["blocked"] = True
            return
        ok = _inject_data(
            actor,
            threat,
            spy.target_addr,
            spy.client_addr,
            spy.client_qpn,
            psn,
            Opcode.WRITE,
            fake_data,
            rdma_ext=RdmaExtHeader(rkey=rkey, vaddr=vaddr, dma_len=len(fake_data)),
            forged_src_qpn=spy.target_qpn if threat is ThreatModel.TRA else None,
        )
        state["blocked"] = not ok

    spy.observer.on_packet = on_packet
    fabric.run_until_idle()
    spy.observer.on_packet = None

    if not state["fired"] or state["blocked"]:
        return AttackOutcome(
            "corrupt-client-memory", threat, security, False,
            detail="trigger not observable" if not state["fired"] else "injection path blocked",
        )
    falsified = any(
        cmd.result is not None and cmd.result[: len(fake_data)] == fake_data
        for cmd in _completed_reads(victim_client)
    )
    store_untouched = target_store.snapshot() == store_before
    succeeded = falsified and store_untouched
    return AttackOutcome(
        "corrupt-client-memory",
        threat,
        security,
        succeeded,
        effect=Effect.FALSIFIED_DATA if succeeded else None,
        detail="" if succeeded else "client data not falsified",
    )


def _completed_reads(client):
    # outcome inspection helper: commands the application saw complete
    return [c for c in getattr(client, "completed_commands", [])]


# --- denial of service ---


def attack_spoof_cnp(
    actor: Actor,
    victim_addr: int,
    victim_qpn: int,
    impersonated_addr: int,
    threat: ThreatModel,
    security: SecurityLevel,
    count: int = 10,
) -> AttackOutcome:
    """Throttle a victim sender with forged congestion notifications."""
    fabric = actor.node.fabric
    if threat is ThreatModel.TLU:
        return AttackOutcome(
            "spoof-cnp", threat, security, False,
            detail="congestion notifications cannot be crafted via the verbs surface",
        )
    if fabric.config.fabric_kind != 0:  # RoCE only
        return AttackOutcome(
            "spoof-cnp", threat, security, False, detail="converged-ethernet fabrics only",
        )
    victim_qp = fabric.nodes[victim_addr].rnic.qps.get(victim_qpn)
    before = victim_qp.rate_factor if victim_qp is not None else 1.0
    sent = 0
    for _ in range(count):
        pkt = _raw_packet(
            impersonated_addr,
            victim_addr,
            Opcode.CNP,
            victim_qpn,
            0,
            fabric_kind=fabric.config.fabric_kind,
        )
        if not _try_send(fabric, actor, pkt):
            return AttackOutcome(
                "spoof-cnp", threat, security, False,
                cost=max(1, sent), detail="injection path blocked",
            )
        sent += 1
    fabric.run_for(fabric.config.latency + 1)
    after = victim_qp.rate_factor if victim_qp is not None else 1.0
    succeeded = victim_qp is not None and after < 0.01 * before
    return AttackOutcome(
        "spoof-cnp",
        threat,
        security,
        succeeded,
        effect=Effect.SLOWDOWN if succeeded else None,
        cost=max(1, sent),
        detail=f"rate_factor {before} -> {after}",
    )


def attack_exhaust_connections(
    actor: Actor, threat: ThreatModel, security: SecurityLevel
) -> AttackOutcome:
    """Starve the machine-wide endpoint limit from an unprivileged login."""
    if threat is ThreatModel.TRA:
        return AttackOutcome(
            "exhaust-connections", threat, security, False,
            detail="no verbs access on the victim machine",
        )
    rnic = actor.node.rnic
    hoarded = []
    try:
        while True:
            hoarded.append(rnic.create_qp(actor))
    except QuotaExhausted:
        capped = True
    except LimitExhausted:
        capped = False
    # ground truth: can a kernel-role consumer still create an endpoint?
    try:
        probe = rnic.create_qp(actor.node.kernel_actor)
        rnic.destroy_qp(probe)
        kernel_blocked = False
    except LimitExhausted:
        kernel_blocked = True
    for qp in hoarded:
        rnic.destroy_qp(qp)
    succeeded = kernel_blocked and not capped
    return AttackOutcome(
        "exhaust-connections",
        threat,
        security,
        succeeded,
        effect=Effect.CONNECTION_FAILURE if succeeded else None,
        cost=max(1, len(hoarded)),
        detail="per-user quota capped the allocation" if capped else "",
    )


# --- connection-manager attacks ---


def attack_probe_cm_keys(
    actor: Actor, counter_estimate: int, max_retries: int = 8
) -> ProbeResult:
    """Recover the hidden key-generator state by local disconnect probing.

    The attacker self-connects (two endpoints in one process), which makes
    its own connection hold two consecutively generated keys: seed XOR n and
    seed XOR (n+1).  Since the keys are hidden even from their owner, the
    attacker probes forged disconnect requests against its own connection —
    the only oracle is whether the connection dies.  With the counter value
    n known (boot-time accounting of key assignments), one pass over the
    seed space suffices; a wrong estimate shows up as an exhausted pass and
    is retried with a neighboring counter value.
    """
    node = actor.node
    cm: CmService = node.cm
    fabric = node.fabric
    space = fabric.config.key_space

    saved_listener, saved_actor = cm.listener, cm.listener_actor
    accepted = []
    cm.listen(
        lambda peer, payload: accepted.append(peer) or {"on_established": None},
        actor=actor,
    )
    hit = {"dead": False}
    conn_i = cm.connect(
        node.addr, private_payload=b"probe", actor=actor,
        on_disconnected=lambda c: hit.update(dead=True),
    )
    fabric.run_until_idle()
    cm.listener, cm.listener_actor = saved_listener, saved_actor
    if conn_i.remote_qpn is None:
        return ProbeResult(False, cost=1)
    acceptor = cm.connections[conn_i.remote_qpn]
    acceptor.on_disconnected = lambda c: hit.update(dead=True)

    probe_qp = node.rnic.create_qp(actor)
    cost = 0
    # neighbor order: n, n+1, n-1, n+2, ... (boot-count estimate may be off)
    offsets = [0] + [d for k in range(1, max_retries) for d in (k, -k)][: max_retries - 1]
    for retry, off in enumerate(offsets):
        n = counter_estimate + off
        if n < 0:
            continue
        for s in range(space):
            cost += 1
            msg = CmMessage(
                kind=CmKind.DISCONNECT_REQ,
                qpn_to_act_on=acceptor.local_qpn,
                initiator_key=(s ^ n) % space,
                target_key=(s ^ (n + 1)) % space,
                src_qpn_field=probe_qp.qpn,
            )
            # local probing: direct delivery, no fabric traffic
            cm.handle_message(msg, node.addr)
            if hit["dead"]:
                node.rnic.destroy_qp(probe_qp)
                return ProbeResult(
                    True,
                    seed=s,
                    key_pair=((s ^ n) % space, (s ^ (n + 1)) % space),
                    cost=cost,
                    retries=retry,
                )
    node.rnic.destroy_qp(probe_qp)
    return ProbeResult(False, cost=cost, retries=len(offsets) - 1)


def attack_spoof_disconnect(
    actor: Actor,
    spy: ConnSpy,
    threat: ThreatModel,
    security: SecurityLevel,
) -> AttackOutcome:
    """Tear down someone else's connection with a forged disconnect request.

    The keys are read straight off the wire (the connection manager talks in
    plain text), and the request is sent from the attacker's own address —
    the manager never checks who a disconnect request came from.
    """
    fabric = actor.node.fabric
    try:
        msg = CmMessage(
            kind=CmKind.DISCONNECT_REQ,
            qpn_to_act_on=spy.target_qpn,
            initiator_key=spy.initiator_key,
            target_key=spy.target_key,
        )
    except LookupError:
        return AttackOutcome(
            "spoof-disconnect", threat, security, False,
            detail="handshake not observable",
        )
    victim_cm = fabric.nodes[spy.target_addr].cm
    victim_conn = victim_cm.connections.get(spy.target_qpn)

    if threat is ThreatModel.TLU:
        udqp = actor.node.rnic.create_qp(actor)
        try:
            send_mad_from_qp(actor, udqp, spy.target_addr, msg)
        except (SpoofDenied, IpsecDrop):
            actor.node.rnic.destroy_qp(udqp)
            return AttackOutcome(
                "spoof-disconnect", threat, security, False, detail="injection path blocked",
            )
        actor.node.rnic.destroy_qp(udqp)
    else:
        # raw injection can forge the reserved source QPN outright
        msg.src_qpn_field = CmService.RESERVED_QPN
        pkt = _raw_packet(
            actor.node.addr,
            spy.target_addr,
            Opcode.CM_MAD,
            CmService.RESERVED_QPN,
            0,
            msg.encode(),
            fabric_kind=fabric.config.fabric_kind,
        )
        if not _try_send(fabric, actor, pkt):
            return AttackOutcome(
                "spoof-disconnect", threat, security, False, detail="injection path blocked",
            )
    fabric.run_until_idle()
    from .cm import CmConnState

    succeeded = victim_conn is not None and victim_conn.state is CmConnState.DISCONNECTED
    return AttackOutcome(
        "spoof-disconnect",
        threat,
        security,
        succeeded,
        effect=Effect.DISCONNECTION if succeeded else None,
    )


def attack_inject_invalid(
    actor: Actor,
    spy: ConnSpy,
    threat: ThreatModel,
    security: SecurityLevel,
) -> AttackOutcome:
    """Break a connection with one one-sided write to an invalid address."""
    fabric = actor.node.fabric
    try:
        psn = spy.next_psn(spy.client_addr, spy.target_addr)
        dest_qpn = spy.target_qpn
    except LookupError:
        return AttackOutcome(
            "inject-invalid", threat, security, False,
            detail="victim connection parameters not observable",
        )
    victim_qp = fabric.nodes[spy.target_addr].rnic.qps.get(dest_qpn)
    sent = _inject_data(
        actor,
        threat,
        spy.client_addr,
        spy.target_addr,
        dest_qpn,
        psn,
        Opcode.WRITE,
        b"\x00" * 8,
        rdma_ext=RdmaExtHeader(rkey=0, vaddr=0, dma_len=8),
        forged_src_qpn=spy.client_qpn if threat is ThreatModel.TRA else None,
    )
    fabric.run_until_idle()
    from .rnic import QpState

    succeeded = sent and victim_qp is not None and victim_qp.state is QpState.ERROR
    return AttackOutcome(
        "inject-invalid",
        threat,
        security,
        succeeded,
        effect=Effect.DISCONNECTION if succeeded else None,
        detail="" if sent else "injection path blocked",
    )

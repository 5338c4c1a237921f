"""Deterministic discrete-event fabric connecting simulated nodes.

A single event loop owns all state.  Events are processed in
(deliver_time, insertion order), so identical configurations replay
identical traces.  Time is a logical tick counter; there is no wall clock.

Path-level IPsec is modeled as key possession: a policy covers an unordered
address pair and both endpoint nodes hold its key.  A packet claiming a
protected path is dropped unless the *sending node* holds the key, which is
exactly the sharing flaw that lets a co-located user inject into protected
connections while a remote spoofer cannot.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .config import SimConfig
from .errors import DuplicateAddress, IpsecDrop, SpoofDenied, Unreachable
from .wire import DATA_OPCODES, Opcode, Packet


class Privilege(Enum):
    UNPRIVILEGED = "unprivileged"
    ADMIN = "admin"


class Location(Enum):
    CO_LOCATED = "co-located"
    REMOTE = "remote"


@dataclass(frozen=True)
class Actor:
    actor_id: str
    node: "Node"
    privilege: Privilege
    location: Location

    @classmethod
    def local_user(cls, node: "Node", actor_id: str = "tlu") -> "Actor":
        """Unprivileged user co-located with a victim endpoint."""
        return cls(actor_id, node, Privilege.UNPRIVILEGED, Location.CO_LOCATED)

    @classmethod
    def remote_admin(cls, node: "Node", actor_id: str = "tra") -> "Actor":
        """Administrator on a machine that is not a connection endpoint."""
        return cls(actor_id, node, Privilege.ADMIN, Location.REMOTE)

    @classmethod
    def kernel(cls, node: "Node") -> "Actor":
        return cls(f"kernel@{node.node_id}", node, Privilege.ADMIN, Location.CO_LOCATED)


class PathObserver:
    """tcpdump-style capture of packets crossing the fabric.

    An observer attached to a node (its capture point) sees cleartext for any
    traffic to or from that node even when the path is IPsec-protected; a
    detached network observer only sees cleartext on unprotected paths.
    Connection-manager MADs are always readable: the connection manager
    exchanges its parameters in plain text.
    """

    def __init__(self, node_addr: Optional[int] = None):
        self.node_addr = node_addr
        self.packets: list[tuple[int, Packet]] = []
        self.on_packet: Optional[Callable[[int, Packet], None]] = None

    def can_see(self, pkt: Packet, protected: bool) -> bool:
        if not protected or pkt.transport.opcode is Opcode.CM_MAD:
            return True
        return self.node_addr in (pkt.route.src_addr, pkt.route.dst_addr)


class Node:
    """A machine attached to the fabric: one RNIC plus a CM kernel service."""

    def __init__(self, fabric: "Fabric", node_id: str, addr: int):
        from .cm import CmService
        from .rnic import Rnic

        self.fabric = fabric
        self.node_id = node_id
        self.addr = addr
        self.spoof_addr: Optional[int] = None  # temporary admin-assigned port address
        self.kernel_actor = Actor.kernel(self)
        self.rnic = Rnic(self)
        self.cm = CmService(self)

    def ingress(self, pkt: Packet) -> None:
        if pkt.transport.opcode is Opcode.CM_MAD:
            if pkt.transport.dest_qpn == self.cm.RESERVED_QPN:
                self.cm.on_mad(pkt)
            return
        self.rnic.ingress(pkt)

    def reboot(self) -> None:
        """Power-cycle: all QPs/MRs vanish and the generators reinitialize."""
        self.rnic.reboot()
        self.cm.reboot()

    def __repr__(self) -> str:
        return f"<Node {self.node_id} @{self.addr:#x}>"


class Fabric:
    def __init__(self, config: SimConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.now = 0
        self.nodes: dict[int, Node] = {}
        self.nodes_by_id: dict[str, Node] = {}
        self._heap: list = []
        self._seq = itertools.count()
        self._ipsec: dict[frozenset, object] = {}
        self._key_holders: dict[int, set] = {}  # node addr -> set of held path keys
        self._congestion: list[tuple[frozenset, int, int]] = []
        self.observers: list[PathObserver] = []

    # --- topology ---

    def attach_node(self, node_id: str, addr: int) -> Node:
        if addr in self.nodes:
            raise DuplicateAddress(f"address {addr:#x} already attached")
        node = Node(self, node_id, addr)
        self.nodes[addr] = node
        self.nodes_by_id[node_id] = node
        return node

    def detach_node(self, addr: int) -> None:
        node = self.nodes.pop(addr)
        self.nodes_by_id.pop(node.node_id, None)

    def add_ipsec_policy(self, addr_a: int, addr_b: int) -> None:
        """Install a shared per-path policy; both endpoint nodes hold the key."""
        path = frozenset((addr_a, addr_b))
        key = object()
        self._ipsec[path] = key
        self._key_holders.setdefault(addr_a, set()).add(key)
        self._key_holders.setdefault(addr_b, set()).add(key)

    def add_observer(self, observer: PathObserver) -> PathObserver:
        self.observers.append(observer)
        return observer

    # --- sending ---

    def send(self, actor: Actor, pkt: Packet) -> None:
        """Actor-initiated transmission, subject to the capability rules."""
        src = pkt.route.src_addr
        node = actor.node
        if src != node.addr and src != node.spoof_addr:
            if actor.privilege is not Privilege.ADMIN:
                raise SpoofDenied(
                    f"{actor.actor_id} may not send with source {src:#x}"
                )
        self._check_ipsec(node, pkt)
        self.transmit(node, pkt)

    def transmit(self, sender: Node, pkt: Packet) -> None:
        """RNIC-level emission; the source address is already the node's own."""
        if pkt.route.dst_addr not in self.nodes:
            raise Unreachable(f"no node at {pkt.route.dst_addr:#x}")
        if pkt.transport.opcode in DATA_OPCODES and self._in_congestion_window(pkt):
            pkt.transport.congestion_mark = True
        dst = self.nodes[pkt.route.dst_addr]
        # Deliver before notifying taps so that anything a tap injects in
        # reaction cannot overtake the packet it reacted to.
        self.schedule(self.config.latency, dst.ingress, pkt)
        protected = frozenset((pkt.route.src_addr, pkt.route.dst_addr)) in self._ipsec
        for obs in self.observers:
            if obs.can_see(pkt, protected):
                obs.packets.append((self.now, pkt))
                if obs.on_packet is not None:
                    obs.on_packet(self.now, pkt)

    def _check_ipsec(self, sender: Node, pkt: Packet) -> None:
        path = frozenset((pkt.route.src_addr, pkt.route.dst_addr))
        key = self._ipsec.get(path)
        if key is None:
            return
        if key not in self._key_holders.get(sender.addr, set()):
            raise IpsecDrop(f"{sender.node_id} holds no key for protected path")

    def reassign_address(self, actor: Actor, new_addr: int) -> None:
        """Admin-only temporary port readdressing (LID/IP reassignment).

        The fabric management plane notices and reverts the change after a
        configurable interval.
        """
        if actor.privilege is not Privilege.ADMIN:
            raise SpoofDenied("address reassignment requires admin privilege")
        node = actor.node
        node.spoof_addr = new_addr
        self.schedule(self.config.lid_revert_ticks, self._revert_address, node, new_addr)

    def _revert_address(self, node: Node, addr: int) -> None:
        if node.spoof_addr == addr:
            node.spoof_addr = None

    # --- congestion marking ---

    def mark_congestion(self, path: tuple[int, int], window: tuple[int, int]) -> None:
        self._congestion.append((frozenset(path), window[0], window[1]))

    def _in_congestion_window(self, pkt: Packet) -> bool:
        if not self._congestion:
            return False
        path = frozenset((pkt.route.src_addr, pkt.route.dst_addr))
        return any(
            p == path and lo <= self.now <= hi for p, lo, hi in self._congestion
        )

    # --- event loop ---

    def schedule(self, delay: int, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), fn, args))

    def step(self) -> bool:
        if not self._heap:
            return False
        t, _, fn, args = heapq.heappop(self._heap)
        self.now = t
        fn(*args)
        return True

    def run_until_idle(self, max_events: int = 10_000_000) -> None:
        for _ in range(max_events):
            if not self.step():
                return
        raise RuntimeError("event budget exhausted; runaway simulation?")

    def run_for(self, ticks: int) -> None:
        deadline = self.now + ticks
        while self._heap and self._heap[0][0] <= deadline:
            self.step()
        self.now = deadline

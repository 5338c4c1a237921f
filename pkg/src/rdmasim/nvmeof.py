"""NVMe-over-fabrics client and target over the RDMA layer.

Commands and responses travel as capsules in two-sided sends; bulk data moves
with one-sided reads/writes against a staging buffer the client exposes.

Capsule layout (64-byte header, big-endian, then optional inline data):

    +------+--------+-----+------------+--------+
    | kind | status | cid | block_addr | length |
    | 1 B  | 1 B    | 2 B | 8 B        | 4 B    |
    +------+--------+-----+------------+--------+
    | sgl: rkey 4 B | vaddr 8 B | len 4 B       |
    +-----------------------------------------------+
    | msg_mac 16 B | data_mac 16 B | inline data...|
    +-----------------------------------------------+

Two client profiles mirror the common implementation families:

* ``USER_SPACE``: one static staging pool at a well-known virtual address
  with a single long-lived rkey; a response completes whatever command is at
  the head of the queue (stale responses shift the stream, they never break
  the connection).
* ``KERNEL``: a fresh fast-registration per command (rkey = previous + 1)
  that is invalidated as soon as the response arrives; responses are matched
  by command id, unmatched ones are ignored, and a missing response times the
  command out and tears the connection down.

The dual-MAC mitigation authenticates the capsule (msg_mac) and the
out-of-band payload (data_mac) independently; verification on the receiving
side invalidates the staging registration first and only then checks the tag.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional

from .errors import Disconnected
from .rnic import MrAccess, MrKind, QueuePair
from .wire import Packet

BLOCK_SIZE = 4096
CAPSULE_HEADER_LEN = 64
MAC_LEN = 16
ZERO_MAC = b"\x00" * MAC_LEN

#: well-known user-space staging pool base address
STATIC_POOL_BASE = 0x2000_0000_0000
#: kernel clients re-register the same staging buffer for every command
KERNEL_STAGING_BASE = 0x3000_0000_0000

# frame tags above the capsule kind range: in-band authentication
AUTH_CHALLENGE = 0xF1
AUTH_PROOF = 0xF2
AUTH_FINAL = 0xF3


class CapsuleKind(IntEnum):
    WRITE_IN_CAPSULE = 1
    WRITE = 2
    READ = 3
    RESPONSE = 4


class CapsuleStatus(IntEnum):
    OK = 0
    AUTH_FAILURE = 1
    INVALID_BLOCK = 2


class ClientProfile(Enum):
    USER_SPACE = "user-space"
    KERNEL = "kernel"


@dataclass(slots=True)
class SglDescriptor:
    rkey: int
    vaddr: int
    length: int


@dataclass(slots=True)
class NvmeCapsule:
    kind: CapsuleKind
    command_id: int
    block_addr: int = 0
    length: int = 0
    sgl: Optional[SglDescriptor] = None
    inline_data: bytes = b""
    status: CapsuleStatus = CapsuleStatus.OK
    msg_mac: bytes = ZERO_MAC
    data_mac: bytes = ZERO_MAC

    def __post_init__(self) -> None:
        self.kind = CapsuleKind(self.kind)
        self.status = CapsuleStatus(self.status)
        if not 0 <= self.command_id < 1 << 16:
            raise ValueError("command_id out of range")
        if self.kind is CapsuleKind.WRITE_IN_CAPSULE and not self.inline_data:
            raise ValueError("in-capsule write requires inline data")
        if self.kind in (CapsuleKind.WRITE, CapsuleKind.READ) and self.sgl is None:
            raise ValueError("Write/Read capsules require an SGL descriptor")
        if len(self.msg_mac) != MAC_LEN or len(self.data_mac) != MAC_LEN:
            raise ValueError("MAC fields must be 16 bytes")

    def encode(self) -> bytes:
        sgl = self.sgl or SglDescriptor(0, 0, 0)
        return (
            struct.pack(
                ">BBHQI",
                self.kind,
                self.status,
                self.command_id,
                self.block_addr,
                self.length,
            )
            + struct.pack(">IQI", sgl.rkey, sgl.vaddr, sgl.length)
            + self.msg_mac
            + self.data_mac
            + self.inline_data
        )

    @classmethod
    def decode(cls, data: bytes) -> "NvmeCapsule":
        if len(data) < CAPSULE_HEADER_LEN:
            raise ValueError(f"capsule too short: {len(data)} bytes")
        kind, status, cid, block, length = struct.unpack_from(">BBHQI", data, 0)
        rkey, vaddr, sgl_len = struct.unpack_from(">IQI", data, 16)
        sgl = None
        if CapsuleKind(kind) in (CapsuleKind.WRITE, CapsuleKind.READ):
            sgl = SglDescriptor(rkey=rkey, vaddr=vaddr, length=sgl_len)
        return cls(
            kind=CapsuleKind(kind),
            status=CapsuleStatus(status),
            command_id=cid,
            block_addr=block,
            length=length,
            sgl=sgl,
            inline_data=data[CAPSULE_HEADER_LEN:],
            msg_mac=data[32:48],
            data_mac=data[48:64],
        )


def compute_msg_mac(key: bytes, capsule: NvmeCapsule) -> bytes:
    """Tag over the canonical capsule encoding with both MAC fields zeroed."""
    saved = capsule.msg_mac, capsule.data_mac
    capsule.msg_mac = capsule.data_mac = ZERO_MAC
    body = capsule.encode()
    capsule.msg_mac, capsule.data_mac = saved
    return hmac.new(key, b"msg:" + body, hashlib.sha256).digest()[:MAC_LEN]


def compute_data_mac(key: bytes, data: bytes) -> bytes:
    """Independent tag over the out-of-band data payload."""
    return hmac.new(key, b"data:" + data, hashlib.sha256).digest()[:MAC_LEN]


def _preshared_pair_key(addr_a: int, addr_b: int) -> bytes:
    lo, hi = sorted((addr_a, addr_b))
    return hashlib.sha256(b"pair-psk:%d:%d" % (lo, hi)).digest()


def _session_mac_key(secret: bytes, nonce_c: bytes, nonce_t: bytes) -> bytes:
    return hmac.new(secret, b"mac:" + nonce_c + nonce_t, hashlib.sha256).digest()


class BlockStore:
    """In-memory block device: logical block address -> 4096-byte block."""

    def __init__(self):
        self.blocks: dict[int, bytes] = {}

    def read(self, block_addr: int) -> bytes:
        return self.blocks.get(block_addr, b"\x00" * BLOCK_SIZE)

    def write(self, block_addr: int, data: bytes) -> None:
        if len(data) > BLOCK_SIZE:
            raise ValueError("write exceeds block size")
        self.blocks[block_addr] = data.ljust(BLOCK_SIZE, b"\x00")

    def snapshot(self) -> dict[int, bytes]:
        return dict(self.blocks)


@dataclass
class TargetConfig:
    ip_filter: Optional[set] = None       # allow-list of client addresses
    inband_secret: Optional[bytes] = None


class _TargetConn:
    def __init__(self, target: "NvmeTarget", cm_conn):
        self.target = target
        self.cm_conn = cm_conn
        self.qp: QueuePair = cm_conn.qp
        self.peer_addr = cm_conn.peer_addr
        self.authed = False
        self.nonce_t: Optional[bytes] = None
        self.mac_key: Optional[bytes] = None
        self.trace: list[str] = []
        self.alive = True


class NvmeTarget:
    def __init__(self, node, config: Optional[TargetConfig] = None, actor=None):
        self.node = node
        self.sim_config = node.fabric.config
        self.config = config or TargetConfig()
        self.store = BlockStore()
        self.conns: list[_TargetConn] = []
        self.actor = actor or node.kernel_actor
        # staging memory for DMA; exposure is a config choice, the safe
        # setting keeps it local-only
        access = (
            MrAccess.LOCAL_ONLY
            if self.sim_config.mitigations.target_local_only
            else MrAccess.REMOTE_READ | MrAccess.REMOTE_WRITE
        )
        self.staging_mr = node.rnic.register_mr(self.actor, BLOCK_SIZE, access)
        node.cm.listen(self._accept, actor=self.actor)

    @property
    def _mac_on(self) -> bool:
        return self.sim_config.mitigations.mac_capsules

    def _accept(self, peer_addr: int, private_payload: bytes):
        if self.config.ip_filter is not None and peer_addr not in self.config.ip_filter:
            return None
        return {"on_established": self._on_established, "on_disconnected": self._on_cm_disconnect}

    def _on_established(self, cm_conn) -> None:
        conn = _TargetConn(self, cm_conn)
        if self.config.inband_secret is None:
            conn.authed = True
            if self._mac_on:
                conn.mac_key = _preshared_pair_key(self.node.addr, conn.peer_addr)
        conn.qp.recv_handler = lambda payload, pkt, c=conn: self._on_recv(c, payload, pkt)
        conn.qp.on_disconnect = lambda c=conn: self._on_qp_error(c)
        conn.trace.append(f"established peer={conn.peer_addr:#x}")
        self.conns.append(conn)

    def _on_cm_disconnect(self, cm_conn) -> None:
        for conn in self.conns:
            if conn.cm_conn is cm_conn and conn.alive:
                conn.alive = False
                conn.trace.append("disconnected")
                self.node.rnic.destroy_qp(conn.qp)

    def _on_qp_error(self, conn: _TargetConn) -> None:
        if conn.alive:
            conn.alive = False
            conn.trace.append("disconnected")

    # --- serving ---

    def _on_recv(self, conn: _TargetConn, payload: bytes, pkt: Packet) -> None:
        if not conn.alive:
            return
        if payload and payload[0] >= 0xF0:
            self._on_auth_frame(conn, payload)
            return
        try:
            capsule = NvmeCapsule.decode(payload)
        except ValueError:
            conn.trace.append("malformed-capsule")
            return
        if not conn.authed:
            conn.trace.append("dropped-unauthenticated")
            return
        if self._mac_on and not hmac.compare_digest(
            capsule.msg_mac, compute_msg_mac(conn.mac_key, capsule)
        ):
            conn.trace.append(f"bad-msg-mac cid={capsule.command_id}")
            self._respond(conn, capsule.command_id, CapsuleStatus.AUTH_FAILURE)
            return

        if capsule.kind is CapsuleKind.WRITE_IN_CAPSULE:
            self.store.write(capsule.block_addr, capsule.inline_data)
            conn.trace.append(
                f"executed write-in-capsule cid={capsule.command_id} block={capsule.block_addr}"
            )
            self._respond(conn, capsule.command_id, CapsuleStatus.OK)
        elif capsule.kind is CapsuleKind.WRITE:
            self.node.rnic.post_rdma_read(
                conn.qp,
                capsule.sgl.length,
                capsule.sgl.rkey,
                capsule.sgl.vaddr,
                on_data=lambda data, c=conn, cap=capsule: self._on_write_data(c, cap, data),
            )
        elif capsule.kind is CapsuleKind.READ:
            self._serve_read(conn, capsule)
        else:
            conn.trace.append(f"unexpected-capsule kind={capsule.kind}")

    def _on_write_data(self, conn: _TargetConn, capsule: NvmeCapsule, data: bytes) -> None:
        if not conn.alive:
            return
        if self._mac_on and not hmac.compare_digest(
            capsule.data_mac, compute_data_mac(conn.mac_key, data)
        ):
            conn.trace.append(f"bad-data-mac cid={capsule.command_id}")
            self._respond(conn, capsule.command_id, CapsuleStatus.AUTH_FAILURE)
            return
        self.store.write(capsule.block_addr, data)
        conn.trace.append(f"executed write cid={capsule.command_id} block={capsule.block_addr}")
        self._respond(conn, capsule.command_id, CapsuleStatus.OK)

    def _serve_read(self, conn: _TargetConn, capsule: NvmeCapsule) -> None:
        data = self.store.read(capsule.block_addr)[: capsule.sgl.length]
        self.node.rnic.post_rdma_write(conn.qp, data, capsule.sgl.rkey, capsule.sgl.vaddr)
        conn.trace.append(f"executed read cid={capsule.command_id} block={capsule.block_addr}")
        data_mac = compute_data_mac(conn.mac_key, data) if self._mac_on else ZERO_MAC
        self._respond(conn, capsule.command_id, CapsuleStatus.OK, data_mac=data_mac)

    def _respond(
        self,
        conn: _TargetConn,
        cid: int,
        status: CapsuleStatus,
        data_mac: bytes = ZERO_MAC,
    ) -> None:
        capsule = NvmeCapsule(
            kind=CapsuleKind.RESPONSE, command_id=cid, status=status, data_mac=data_mac
        )
        if self._mac_on:
            capsule.msg_mac = compute_msg_mac(conn.mac_key, capsule)
        self.node.rnic.post_send(conn.qp, capsule.encode())

    # --- in-band authentication (target side) ---

    def _on_auth_frame(self, conn: _TargetConn, payload: bytes) -> None:
        secret = self.config.inband_secret
        tag = payload[0]
        if tag == AUTH_CHALLENGE and secret is not None:
            nonce_c = payload[1:9]
            conn.nonce_t = self.node.fabric.rng.getrandbits(64).to_bytes(8, "big")
            conn._nonce_c = nonce_c
            proof = hmac.new(secret, b"t:" + nonce_c, hashlib.sha256).digest()[:MAC_LEN]
            self.node.rnic.post_send(
                conn.qp, bytes((AUTH_PROOF,)) + conn.nonce_t + proof
            )
        elif tag == AUTH_FINAL and secret is not None:
            expected = hmac.new(secret, b"c:" + conn.nonce_t, hashlib.sha256).digest()[:MAC_LEN]
            if hmac.compare_digest(payload[1:17], expected):
                conn.authed = True
                conn.mac_key = _session_mac_key(secret, conn._nonce_c, conn.nonce_t)
                conn.trace.append("authenticated")
            else:
                conn.trace.append("auth-failed")
                self.node.cm.disconnect(conn.cm_conn)
        else:
            conn.trace.append("unexpected-auth-frame")


@dataclass
class NvmeCommand:
    cid: int
    kind: CapsuleKind
    block_addr: int
    data: bytes = b""
    length: int = 0
    done: bool = False
    status: Optional[CapsuleStatus] = None
    response_cid: Optional[int] = None
    result: Optional[bytes] = None        # read data handed to the app
    mr: Optional[object] = field(default=None, repr=False)  # kernel per-command MR
    on_complete: Optional[Callable[["NvmeCommand"], None]] = None


class NvmeClient:
    def __init__(self, node, profile: ClientProfile, secret: Optional[bytes] = None, actor=None):
        self.node = node
        self.sim_config = node.fabric.config
        self.profile = profile
        self.secret = secret
        self.actor = actor or node.kernel_actor
        self.cm_conn = None
        self.qp: Optional[QueuePair] = None
        self.connected = False
        self.ready = False                # connected and (if required) authenticated
        self.trace: list[str] = []
        self.pool_mr = None
        self._next_cid = 0
        self._pending: deque[NvmeCommand] = deque()
        self._outstanding: deque[NvmeCommand] = deque()
        self._stale_responses: deque[NvmeCapsule] = deque()
        self._nonce_c: Optional[bytes] = None
        self.mac_key: Optional[bytes] = None
        self.auth_error = False
        self.queue_depth = 1
        self.completed_commands: list[NvmeCommand] = []

    @property
    def _mac_on(self) -> bool:
        return self.sim_config.mitigations.mac_capsules

    # --- connection setup ---

    def connect(self, target_addr: int) -> None:
        self.target_addr = target_addr
        self.cm_conn = self.node.cm.connect(
            target_addr,
            private_payload=b"nvmeof-host",
            actor=self.actor,
            on_established=self._on_established,
            on_disconnected=self._on_cm_disconnect,
            on_failed=self._on_cm_failed,
        )

    def _on_established(self, cm_conn) -> None:
        self.qp = cm_conn.qp
        self.qp.recv_handler = self._on_recv
        self.qp.on_disconnect = self._on_qp_error
        self.connected = True
        self.trace.append(f"established peer={self.target_addr:#x}")
        if self.profile is ClientProfile.USER_SPACE:
            self.pool_mr = self.node.rnic.register_mr(
                self.actor,
                BLOCK_SIZE * 16,
                MrAccess.REMOTE_READ | MrAccess.REMOTE_WRITE,
                kind=MrKind.STATIC,
                base_vaddr=STATIC_POOL_BASE,
            )
        if self.secret is not None:
            self._nonce_c = self.node.fabric.rng.getrandbits(64).to_bytes(8, "big")
            self.node.rnic.post_send(self.qp, bytes((AUTH_CHALLENGE,)) + self._nonce_c)
        else:
            if self._mac_on:
                self.mac_key = _preshared_pair_key(self.node.addr, self.target_addr)
            self.ready = True
            self._issue_next()

    def _on_cm_failed(self, cm_conn) -> None:
        self.trace.append(f"connect-failed error={cm_conn.error}")

    def _on_cm_disconnect(self, cm_conn) -> None:
        # notification from the connection manager; the app reacts by
        # tearing the queue pair down
        if not self.connected:
            return
        self.connected = False
        self.ready = False
        self.trace.append("disconnected")
        self.node.rnic.destroy_qp(self.qp)

    def _on_qp_error(self) -> None:
        if not self.connected:
            return
        self.connected = False
        self.ready = False
        self.trace.append("disconnected")

    def disconnect(self) -> None:
        if self.connected:
            # flip the flag first: the CM surfaces the local notification
            # synchronously and must not double-report the teardown
            self.connected = False
            self.ready = False
            self.trace.append("disconnected")
            self.node.cm.disconnect(self.cm_conn)

    # --- command interface ---

    def write(self, block_addr: int, data: bytes, on_complete=None) -> NvmeCommand:
        if len(data) > BLOCK_SIZE:
            raise ValueError("write exceeds block size")
        inline_ok = (
            len(data) <= self.sim_config.in_capsule_threshold
            and CAPSULE_HEADER_LEN + len(data) <= self.sim_config.mtu
        )
        kind = CapsuleKind.WRITE_IN_CAPSULE if inline_ok else CapsuleKind.WRITE
        cmd = NvmeCommand(
            cid=self._alloc_cid(),
            kind=kind,
            block_addr=block_addr,
            data=data,
            length=len(data),
            on_complete=on_complete,
        )
        self._enqueue(cmd)
        return cmd

    def read(self, block_addr: int, on_complete=None) -> NvmeCommand:
        cmd = NvmeCommand(
            cid=self._alloc_cid(),
            kind=CapsuleKind.READ,
            block_addr=block_addr,
            length=BLOCK_SIZE,
            on_complete=on_complete,
        )
        self._enqueue(cmd)
        return cmd

    def _alloc_cid(self) -> int:
        cid = self._next_cid
        self._next_cid = (self._next_cid + 1) % (1 << 16)
        return cid

    def _enqueue(self, cmd: NvmeCommand) -> None:
        if not self.connected:
            raise Disconnected("client is not connected")
        self._pending.append(cmd)
        self._issue_next()

    def _issue_next(self) -> None:
        while (
            self.ready
            and self._pending
            and len(self._outstanding) < self.queue_depth
        ):
            cmd = self._pending.popleft()
            self._issue(cmd)

    def _staging(self, cmd: NvmeCommand, writable: bool) -> SglDescriptor:
        """Expose a staging buffer for this command per the memory mode."""
        if self.profile is ClientProfile.USER_SPACE:
            vaddr = STATIC_POOL_BASE       # depth-1 queue: slot zero
            if cmd.kind is CapsuleKind.WRITE:
                self.pool_mr.write(vaddr, cmd.data)
            return SglDescriptor(self.pool_mr.rkey, vaddr, cmd.length)
        access = MrAccess.REMOTE_WRITE if writable else MrAccess.REMOTE_READ
        cmd.mr = self.node.rnic.register_mr(
            self.actor, BLOCK_SIZE, access, kind=MrKind.FAST_REG,
            base_vaddr=KERNEL_STAGING_BASE,
        )
        if cmd.kind is CapsuleKind.WRITE:
            cmd.mr.write(KERNEL_STAGING_BASE, cmd.data)
        return SglDescriptor(cmd.mr.rkey, KERNEL_STAGING_BASE, cmd.length)

    def _issue(self, cmd: NvmeCommand) -> None:
        inline = cmd.data if cmd.kind is CapsuleKind.WRITE_IN_CAPSULE else b""
        sgl = None
        data_mac = ZERO_MAC
        if cmd.kind is CapsuleKind.WRITE:
            sgl = self._staging(cmd, writable=False)
            if self._mac_on:
                data_mac = compute_data_mac(self.mac_key, cmd.data)
        elif cmd.kind is CapsuleKind.READ:
            sgl = self._staging(cmd, writable=True)
        capsule = NvmeCapsule(
            kind=cmd.kind,
            command_id=cmd.cid,
            block_addr=cmd.block_addr,
            length=cmd.length,
            sgl=sgl,
            inline_data=inline,
            data_mac=data_mac,
        )
        if self._mac_on:
            capsule.msg_mac = compute_msg_mac(self.mac_key, capsule)
        self._outstanding.append(cmd)
        self.trace.append(
            f"issued cid={cmd.cid} kind={cmd.kind.name.lower()} block={cmd.block_addr}"
        )
        self.node.rnic.post_send(self.qp, capsule.encode())
        self.node.fabric.schedule(
            self.sim_config.response_timeout, self._check_timeout, cmd
        )
        # a response that arrived while nothing was outstanding completes the
        # next command immediately: the stream stays shifted by one
        if self.profile is ClientProfile.USER_SPACE and self._stale_responses:
            self._complete(self._outstanding.popleft(), self._stale_responses.popleft())

    def _check_timeout(self, cmd: NvmeCommand) -> None:
        if cmd.done or not self.connected:
            return
        self.trace.append(f"timeout cid={cmd.cid}")
        if self.profile is ClientProfile.KERNEL:
            self.disconnect()

    # --- completion path ---

    def _on_recv(self, payload: bytes, pkt: Packet) -> None:
        if payload and payload[0] >= 0xF0:
            self._on_auth_frame(payload)
            return
        try:
            capsule = NvmeCapsule.decode(payload)
        except ValueError:
            self.trace.append("malformed-response")
            return
        if capsule.kind is not CapsuleKind.RESPONSE:
            self.trace.append(f"unexpected-capsule kind={capsule.kind}")
            return
        if self._mac_on and not hmac.compare_digest(
            capsule.msg_mac, compute_msg_mac(self.mac_key, capsule)
        ):
            self.trace.append(f"bad-msg-mac rsp_cid={capsule.command_id}")
            return

        if self.profile is ClientProfile.USER_SPACE:
            # whatever arrives completes the oldest outstanding command;
            # with nothing outstanding the response is kept for the next one
            if not self._outstanding:
                self._stale_responses.append(capsule)
                self.trace.append(f"buffered-response rsp_cid={capsule.command_id}")
                return
            self._complete(self._outstanding.popleft(), capsule)
        else:
            for cmd in self._outstanding:
                if cmd.cid == capsule.command_id:
                    self._outstanding.remove(cmd)
                    # invalidate the staging registration first, verify after
                    if cmd.mr is not None and cmd.mr.valid:
                        self.node.rnic.invalidate_mr(cmd.mr)
                    self._complete(cmd, capsule)
                    return
            self.trace.append(f"ignored-premature rsp_cid={capsule.command_id}")

    def _complete(self, cmd: NvmeCommand, capsule: NvmeCapsule) -> None:
        cmd.done = True
        cmd.status = capsule.status
        cmd.response_cid = capsule.command_id
        if cmd.kind is CapsuleKind.READ and capsule.status is CapsuleStatus.OK:
            if self.profile is ClientProfile.USER_SPACE:
                cmd.result = self.pool_mr.read(STATIC_POOL_BASE, cmd.length)
            else:
                cmd.result = cmd.mr.read(KERNEL_STAGING_BASE, cmd.length)
            if self._mac_on and not hmac.compare_digest(
                capsule.data_mac, compute_data_mac(self.mac_key, cmd.result)
            ):
                self.trace.append(f"bad-data-mac cid={cmd.cid}")
                cmd.status = CapsuleStatus.AUTH_FAILURE
                cmd.result = None
        self.trace.append(
            f"completed cid={cmd.cid} status={cmd.status} rsp_cid={cmd.response_cid}"
        )
        self.completed_commands.append(cmd)
        # release the staging buffer: the recycled pool slot is overwritten,
        # the kernel registration is already invalid by now
        if self.profile is ClientProfile.USER_SPACE and cmd.kind is not CapsuleKind.WRITE_IN_CAPSULE:
            self.pool_mr.write(STATIC_POOL_BASE, b"\xdd" * cmd.length)
        if cmd.on_complete is not None:
            cmd.on_complete(cmd)
        self._issue_next()
        # a buffered stale response immediately completes the next command
        if (
            self.profile is ClientProfile.USER_SPACE
            and self._stale_responses
            and self._outstanding
        ):
            self._complete(self._outstanding.popleft(), self._stale_responses.popleft())

    # --- in-band authentication (client side) ---

    def _on_auth_frame(self, payload: bytes) -> None:
        if payload[0] != AUTH_PROOF or self.secret is None:
            self.trace.append("unexpected-auth-frame")
            return
        nonce_t, proof = payload[1:9], payload[9:25]
        expected = hmac.new(self.secret, b"t:" + self._nonce_c, hashlib.sha256).digest()[:MAC_LEN]
        if not hmac.compare_digest(proof, expected):
            self.trace.append("auth-failed")
            self.auth_error = True
            self.disconnect()
            return
        final = hmac.new(self.secret, b"c:" + nonce_t, hashlib.sha256).digest()[:MAC_LEN]
        self.node.rnic.post_send(self.qp, bytes((AUTH_FINAL,)) + final)
        self.mac_key = _session_mac_key(self.secret, self._nonce_c, nonce_t)
        self.ready = True
        self.trace.append("authenticated")
        self._issue_next()

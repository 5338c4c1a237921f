"""NVMe-oF layer: capsule codec, MAC scheme, both client memory profiles,
in-band authentication, and storage coherence against a reference model."""

import pytest
from hypothesis import given, settings, strategies as st

from rdmasim.config import SimConfig
from rdmasim.fabric import Fabric
from rdmasim.nvmeof import (
    BLOCK_SIZE,
    CAPSULE_HEADER_LEN,
    KERNEL_STAGING_BASE,
    STATIC_POOL_BASE,
    BlockStore,
    CapsuleKind,
    CapsuleStatus,
    ClientProfile,
    NvmeCapsule,
    NvmeClient,
    NvmeTarget,
    SglDescriptor,
    TargetConfig,
    compute_data_mac,
    compute_msg_mac,
)

SECRET = b"shared-fabric-secret"


def make_env(cfg=None, profile=ClientProfile.USER_SPACE, secret=None, target_cfg=None):
    fab = Fabric(cfg or SimConfig.test_profile(11))
    tnode = fab.attach_node("target", 0x0B)
    cnode = fab.attach_node("client", 0x0A)
    target = NvmeTarget(tnode, target_cfg or TargetConfig(inband_secret=secret))
    client = NvmeClient(cnode, profile, secret=secret)
    client.connect(0x0B)
    fab.run_until_idle()
    return fab, target, client


def capsules():
    @st.composite
    def capsule(draw):
        kind = draw(st.sampled_from(list(CapsuleKind)))
        sgl = None
        inline = b""
        if kind in (CapsuleKind.WRITE, CapsuleKind.READ):
            sgl = SglDescriptor(
                rkey=draw(st.integers(0, (1 << 32) - 1)),
                vaddr=draw(st.integers(0, (1 << 64) - 1)),
                length=draw(st.integers(0, (1 << 32) - 1)),
            )
        elif kind is CapsuleKind.WRITE_IN_CAPSULE:
            inline = draw(st.binary(min_size=1, max_size=64))
        return NvmeCapsule(
            kind=kind,
            command_id=draw(st.integers(0, (1 << 16) - 1)),
            block_addr=draw(st.integers(0, (1 << 64) - 1)),
            length=draw(st.integers(0, (1 << 32) - 1)),
            sgl=sgl,
            inline_data=inline,
            status=draw(st.sampled_from(list(CapsuleStatus))),
            msg_mac=draw(st.binary(min_size=16, max_size=16)),
            data_mac=draw(st.binary(min_size=16, max_size=16)),
        )

    return capsule()


class TestCapsuleCodec:
    @given(capsules())
    def test_round_trip(self, cap):
        back = NvmeCapsule.decode(cap.encode())
        assert back == cap

    @given(capsules())
    def test_header_is_fixed_length(self, cap):
        assert len(cap.encode()) == CAPSULE_HEADER_LEN + len(cap.inline_data)

    def test_invariants(self):
        with pytest.raises(ValueError):
            NvmeCapsule(kind=CapsuleKind.WRITE_IN_CAPSULE, command_id=0)
        with pytest.raises(ValueError):
            NvmeCapsule(kind=CapsuleKind.WRITE, command_id=0)
        with pytest.raises(ValueError):
            NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=1 << 16)
        with pytest.raises(ValueError):
            NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=0, msg_mac=b"short")

    def test_truncated_rejected(self):
        with pytest.raises(ValueError):
            NvmeCapsule.decode(b"\x04" + b"\x00" * 30)


class TestMacScheme:
    def _capsule(self, **kw):
        base = dict(kind=CapsuleKind.RESPONSE, command_id=7, block_addr=3)
        base.update(kw)
        return NvmeCapsule(**base)

    @given(st.binary(min_size=1, max_size=32), st.binary(max_size=64))
    def test_msg_mac_ignores_mac_fields(self, key, junk_tail):
        cap = self._capsule()
        tagged = self._capsule(msg_mac=b"\x11" * 16, data_mac=b"\x22" * 16)
        assert compute_msg_mac(key, cap) == compute_msg_mac(key, tagged)

    @given(st.binary(min_size=1, max_size=32))
    def test_msg_mac_covers_every_header_field(self, key):
        base = compute_msg_mac(key, self._capsule())
        assert compute_msg_mac(key, self._capsule(command_id=8)) != base
        assert compute_msg_mac(key, self._capsule(block_addr=4)) != base
        assert compute_msg_mac(key, self._capsule(status=CapsuleStatus.AUTH_FAILURE)) != base

    @given(st.binary(min_size=1, max_size=32), st.binary(max_size=128), st.binary(max_size=128))
    def test_data_mac_independent_of_capsule(self, key, d1, d2):
        # the data tag binds only the out-of-band bytes
        if d1 != d2:
            assert compute_data_mac(key, d1) != compute_data_mac(key, d2)
        assert compute_data_mac(key, d1) != compute_msg_mac(key, self._capsule(inline_data=b""))

    def test_keys_domain_separated(self):
        assert compute_data_mac(b"k", b"x") != compute_msg_mac(b"k", self._capsule())


class TestBlockStore:
    def test_unwritten_blocks_read_zero(self):
        assert BlockStore().read(99) == b"\x00" * BLOCK_SIZE

    def test_short_write_zero_padded(self):
        s = BlockStore()
        s.write(1, b"abc")
        assert s.read(1) == b"abc".ljust(BLOCK_SIZE, b"\x00")

    def test_oversize_write_rejected(self):
        with pytest.raises(ValueError):
            BlockStore().write(0, b"x" * (BLOCK_SIZE + 1))


class TestEndToEnd:
    @pytest.mark.parametrize("profile", list(ClientProfile))
    @pytest.mark.parametrize("secret", [None, SECRET])
    def test_write_then_read(self, profile, secret):
        fab, target, client = make_env(profile=profile, secret=secret)
        assert client.ready
        bulk = bytes(i % 251 for i in range(BLOCK_SIZE))
        client.write(1, b"inline payload")
        client.write(2, bulk)
        cmd = client.read(2)
        fab.run_until_idle()
        assert target.store.read(1)[:14] == b"inline payload"
        assert target.store.read(2) == bulk
        assert cmd.done and cmd.status is CapsuleStatus.OK
        assert cmd.result == bulk

    def test_inline_threshold_selects_transfer_kind(self):
        cfg = SimConfig.test_profile(11, in_capsule_threshold=128)
        fab, target, client = make_env(cfg)
        small = client.write(1, b"x" * 128)
        big = client.write(2, b"y" * 129)
        fab.run_until_idle()
        assert small.kind is CapsuleKind.WRITE_IN_CAPSULE
        assert big.kind is CapsuleKind.WRITE
        assert target.store.read(2)[:129] == b"y" * 129

    def test_ip_filter_rejects_unknown_host(self):
        fab, target, client = make_env(target_cfg=TargetConfig(ip_filter={0x99}))
        assert not client.connected
        assert "connect-failed error=rejected" in client.trace

    def test_mitigated_path_still_serves_io(self):
        from rdmasim.config import Mitigations

        cfg = SimConfig.test_profile(11, mitigations=Mitigations.all_enabled())
        for profile in ClientProfile:
            fab, target, client = make_env(cfg, profile=profile, secret=SECRET)
            cmd_w = client.write(5, b"guarded")
            cmd_r = client.read(5)
            fab.run_until_idle()
            assert cmd_w.status is CapsuleStatus.OK
            assert cmd_r.result[:7] == b"guarded"


class TestCoherence:
    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["write", "read"]),
                st.integers(0, 3),
                st.binary(min_size=1, max_size=BLOCK_SIZE),
            ),
            max_size=12,
        ),
        st.sampled_from(list(ClientProfile)),
    )
    def test_matches_sequential_reference(self, ops, profile):
        fab, target, client = make_env(profile=profile)
        reference: dict[int, bytes] = {}
        issued = []
        for op, block, data in ops:
            if op == "write":
                issued.append((client.write(block, data), None))
                reference[block] = data.ljust(BLOCK_SIZE, b"\x00")
            else:
                expect = reference.get(block, b"\x00" * BLOCK_SIZE)
                issued.append((client.read(block), expect))
        fab.run_until_idle()
        for cmd, expect in issued:
            assert cmd.done and cmd.status is CapsuleStatus.OK
            if expect is not None:
                assert cmd.result == expect
        for block, want in reference.items():
            assert target.store.read(block) == want


class TestProfileBifurcation:
    def test_user_space_reuses_one_static_registration(self):
        fab, target, client = make_env(profile=ClientProfile.USER_SPACE)
        client.write(1, b"a" * (BLOCK_SIZE))
        client.read(1)
        fab.run_until_idle()
        assert client.pool_mr.base_vaddr == STATIC_POOL_BASE
        assert client.pool_mr.valid  # never invalidated
        assert len(client.node.rnic.mrs) == 1

    def test_kernel_registers_and_invalidates_per_command(self):
        fab, target, client = make_env(profile=ClientProfile.KERNEL)
        c1 = client.write(1, b"a" * BLOCK_SIZE)
        c2 = client.read(1)
        fab.run_until_idle()
        assert c1.mr.rkey + 1 == c2.mr.rkey  # fast-reg keys count up
        assert c1.mr.base_vaddr == KERNEL_STAGING_BASE
        assert not c1.mr.valid and not c2.mr.valid  # invalidated on response

    def test_user_space_accepts_response_for_oldest_command(self):
        # FIFO matching: the response id is recorded but never enforced
        fab, target, client = make_env(profile=ClientProfile.USER_SPACE)
        forged = NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=0xBEEF)
        cmd = client.write(1, b"x")
        client._on_recv(forged.encode(), None)
        assert cmd.done and cmd.response_cid == 0xBEEF

    def test_user_space_buffers_stale_response(self):
        fab, target, client = make_env(profile=ClientProfile.USER_SPACE)
        forged = NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=0xBEEF)
        client._on_recv(forged.encode(), None)
        assert any(t.startswith("buffered-response") for t in client.trace)
        cmd = client.write(1, b"x")
        # the buffered stale response completes the new command instantly
        assert cmd.done and cmd.response_cid == 0xBEEF

    def test_kernel_ignores_unmatched_response(self):
        fab, target, client = make_env(profile=ClientProfile.KERNEL)
        forged = NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=0xBEEF)
        cmd = client.write(1, b"x")
        client._on_recv(forged.encode(), None)
        assert not cmd.done
        assert any(t.startswith("ignored-premature") for t in client.trace)

    def test_kernel_timeout_disconnects(self):
        fab, target, client = make_env(profile=ClientProfile.KERNEL)
        client.qp.recv_handler = lambda payload, pkt: None  # black-hole responses
        client.write(1, b"x")
        fab.run_until_idle()
        assert any(t.startswith("timeout") for t in client.trace)
        assert not client.connected

    def test_user_space_timeout_keeps_connection(self):
        fab, target, client = make_env(profile=ClientProfile.USER_SPACE)
        client.qp.recv_handler = lambda payload, pkt: None
        client.write(1, b"x")
        fab.run_until_idle()
        assert any(t.startswith("timeout") for t in client.trace)
        assert client.connected


class TestInbandAuth:
    def test_wrong_secret_fails_closed(self):
        fab = Fabric(SimConfig.test_profile(11))
        tnode = fab.attach_node("target", 0x0B)
        cnode = fab.attach_node("client", 0x0A)
        target = NvmeTarget(tnode, TargetConfig(inband_secret=SECRET))
        client = NvmeClient(cnode, ClientProfile.USER_SPACE, secret=b"wrong")
        client.connect(0x0B)
        fab.run_until_idle()
        assert client.auth_error and not client.ready

    def test_unauthenticated_capsules_dropped(self):
        fab, target, client = make_env(secret=SECRET)
        conn = target.conns[0]
        conn.authed = False  # pretend the handshake never finished
        client.qp.recv_handler = lambda payload, pkt: None
        cap = NvmeCapsule(kind=CapsuleKind.WRITE_IN_CAPSULE, command_id=1, block_addr=9, inline_data=b"z")
        target._on_recv(conn, cap.encode(), None)
        assert target.store.read(9) == b"\x00" * BLOCK_SIZE
        assert "dropped-unauthenticated" in conn.trace

    def test_session_mac_key_derived_from_handshake(self):
        from rdmasim.config import Mitigations

        cfg = SimConfig.test_profile(11, mitigations=Mitigations.all_enabled())
        fab, target, client = make_env(cfg, secret=SECRET)
        assert client.mac_key is not None
        assert client.mac_key == target.conns[0].mac_key
        # not the pre-shared pair fallback: bound to this session's nonces
        from rdmasim.nvmeof import _preshared_pair_key

        assert client.mac_key != _preshared_pair_key(0x0A, 0x0B)


class TestMacEnforcement:
    def cfg(self):
        from rdmasim.config import Mitigations

        return SimConfig.test_profile(11, mitigations=Mitigations.all_enabled())

    def test_unkeyed_forgery_rejected_by_target(self):
        fab, target, client = make_env(self.cfg(), secret=SECRET)
        conn = target.conns[0]
        client.qp.recv_handler = lambda payload, pkt: None
        forged = NvmeCapsule(
            kind=CapsuleKind.WRITE_IN_CAPSULE, command_id=5, block_addr=9, inline_data=b"evil"
        )
        target._on_recv(conn, forged.encode(), None)
        assert target.store.read(9) == b"\x00" * BLOCK_SIZE
        assert any(t.startswith("bad-msg-mac") for t in conn.trace)

    def test_unkeyed_forgery_rejected_by_client(self):
        fab, target, client = make_env(self.cfg(), secret=SECRET)
        cmd = client.write(1, b"x")
        forged = NvmeCapsule(kind=CapsuleKind.RESPONSE, command_id=cmd.cid)
        client._on_recv(forged.encode(), None)
        assert not cmd.done
        assert any(t.startswith("bad-msg-mac") for t in client.trace)

    def test_tampered_bulk_data_detected(self):
        fab, target, client = make_env(self.cfg(), secret=SECRET)
        conn = target.conns[0]
        cmd = client.write(3, b"q" * BLOCK_SIZE)
        fab.run_for(client.sim_config.latency)  # capsule in flight
        # corrupt the staged data after the MAC was computed
        client.pool_mr.write(STATIC_POOL_BASE, b"TAMPERED")
        fab.run_until_idle()
        assert any(t.startswith("bad-data-mac") for t in conn.trace)
        assert cmd.status is CapsuleStatus.AUTH_FAILURE
        assert target.store.read(3) == b"\x00" * BLOCK_SIZE

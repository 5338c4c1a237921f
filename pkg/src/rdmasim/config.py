"""Simulation-wide configuration: field widths, limits, and mitigation toggles.

Two width profiles are supported.  The "paper" profile uses the real field
widths (24-bit QPN/PSN, 32-bit keys); the "test" profile shrinks the value
spaces (12/12/16 bits) so exhaustive sweeps finish in seconds.  The wire
layout is unchanged in both profiles; only the generated/enumerated value
ranges shrink.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .wire import FabricKind


@dataclass
class Mitigations:
    """Toggleable defenses; everything defaults to the vulnerable behavior."""

    src_qpn_header: bool = False          # 4-byte source-QPN extension, checked at ingress
    reject_duplicate_dest: bool = False   # refuse a second local QP with the same destination
    filter_cm_source: bool = False        # CM processes MADs only from the reserved QPN 1
    challenge_disconnect: bool = False    # verify disconnect requests by challenging the peer
    per_user_quota: Optional[int] = None  # per-user QP quota ("RDMA controller")
    target_local_only: bool = False       # NVMe-oF target registers memory local-only
    mac_capsules: bool = False            # dual-MAC capsule authentication

    @classmethod
    def all_enabled(cls, quota: int = 64) -> "Mitigations":
        return cls(
            src_qpn_header=True,
            reject_duplicate_dest=True,
            filter_cm_source=True,
            challenge_disconnect=True,
            per_user_quota=quota,
            target_local_only=True,
            mac_capsules=True,
        )


@dataclass
class SimConfig:
    seed: int
    qpn_bits: int = 24
    psn_bits: int = 24
    key_bits: int = 32

    fabric_kind: FabricKind = FabricKind.ROCE
    latency: int = 5                      # delivery latency in ticks
    mtu: int = 4096
    max_qps_system_wide: int = 1 << 10
    mitigations: Mitigations = field(default_factory=Mitigations)

    rate_recovery: bool = True            # periodic CNP rate recovery timer
    rate_decrease: float = 0.5            # multiplicative decrease per CNP
    rate_recovery_factor: float = 1.05    # recovery multiplier per interval
    rate_recovery_interval: int = 100     # ticks between recovery steps

    dma_read_delay: int = 3               # ticks between accepting a Read and serving it
    lid_revert_ticks: int = 5000          # admin address reassignment revert interval
    response_timeout: int = 200           # NVMe-oF client response timeout
    in_capsule_threshold: int = 4096      # max inline write size
    challenge_retries: int = 3
    challenge_timeout: int = 50

    # predictable generator constants (masked to the profile widths)
    qpn_seed_low: int = 0x10
    qpn_seed_high: int = 0x600
    static_rkey_first: int = 0x2A00       # first static registration rkey after reboot
    static_rkey_stride: int = 8
    fastreg_rkey_first: int = 0x100       # fast-reg rkeys count up from here after reboot

    @property
    def qpn_space(self) -> int:
        return 1 << self.qpn_bits

    @property
    def psn_space(self) -> int:
        return 1 << self.psn_bits

    @property
    def key_space(self) -> int:
        return 1 << self.key_bits

    @classmethod
    def test_profile(cls, seed: int, **overrides) -> "SimConfig":
        return cls(seed=seed, qpn_bits=12, psn_bits=12, key_bits=16, **overrides)

    @classmethod
    def paper_profile(cls, seed: int, **overrides) -> "SimConfig":
        return cls(seed=seed, qpn_bits=24, psn_bits=24, key_bits=32, **overrides)

    def with_mitigations(self, **kwargs) -> "SimConfig":
        return replace(self, mitigations=replace(self.mitigations, **kwargs))

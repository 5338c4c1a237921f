"""Scenario runner and feasibility-matrix reproduction.

A scenario is a three-machine fabric: a storage client, a storage target,
and an attacker machine.  The co-located-user threat model places the
attacker process on whichever victim machine the attack requires; the
remote-admin model uses the third machine with raw injection capability.

The embedded expectations grid records, for every attack under both threat
models and three security configurations (nothing, in-band authentication,
path IPsec), whether the attack is expected to succeed, plus the three
nuance conditions attached to individual rows (fast-registration complexity
for memory corruption, quota mitigation for exhaustion, and the admin-only /
converged-ethernet-only constraints on congestion spoofing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import yaml

from .attacks import (
    AttackOutcome,
    ConnSpy,
    SecurityLevel,
    ThreatModel,
    attack_exhaust_connections,
    attack_inject_invalid,
    attack_rdma_write_corrupt,
    attack_spoof_cnp,
    attack_spoof_disconnect,
    attack_spoof_nvmeof_request,
    attack_spoof_nvmeof_response,
)
from .config import SimConfig
from .errors import ConfigError
from .fabric import Actor, Fabric, PathObserver
from .nvmeof import ClientProfile, NvmeClient, NvmeTarget, TargetConfig
from .wire import FabricKind

CLIENT_ADDR = 0x0A
TARGET_ADDR = 0x0B
ATTACKER_ADDR = 0x0C
INBAND_SECRET = b"inband-shared-secret"

ATTACK_IDS = (
    "spoof-nvmeof-request",
    "spoof-nvmeof-response",
    "corrupt-client-memory",
    "exhaust-connections",
    "spoof-cnp",
    "spoof-disconnect",
    "inject-invalid",
)

#: which victim machine hosts a co-located attacker for each attack
_TLU_HOST = {
    "spoof-nvmeof-response": "target",
    "corrupt-client-memory": "target",
}

_Y, _N = True, False
#: expected feasibility: attack -> (TLU none/inband/ipsec, TRA none/inband/ipsec)
EXPECTED_FEASIBILITY = {
    "spoof-nvmeof-request": ((_Y, _Y, _Y), (_Y, _Y, _N)),
    "spoof-nvmeof-response": ((_Y, _Y, _Y), (_Y, _Y, _N)),
    "corrupt-client-memory": ((_Y, _Y, _Y), (_Y, _Y, _N)),
    "exhaust-connections": ((_Y, _Y, _Y), (_N, _N, _N)),
    "spoof-cnp": ((_N, _N, _N), (_Y, _Y, _N)),
    "spoof-disconnect": ((_Y, _Y, _Y), (_Y, _Y, _Y)),
    "inject-invalid": ((_Y, _Y, _Y), (_Y, _Y, _N)),
}

#: nuance flags attached to individual rows
FOOTNOTES = {
    "corrupt-client-memory": "complexity-increased",  # fast-reg clients need eavesdropping
    "exhaust-connections": "mitigable-by-quota",
    "spoof-cnp": "admin-only",                        # and converged-ethernet only
}

_MODELS = (ThreatModel.TLU, ThreatModel.TRA)
_LEVELS = (SecurityLevel.NONE, SecurityLevel.INBAND, SecurityLevel.IPSEC)


def expected_cell(attack_id: str, model: ThreatModel, security: SecurityLevel) -> bool:
    row = EXPECTED_FEASIBILITY[attack_id][_MODELS.index(model)]
    return row[_LEVELS.index(security)]


# --- scenario environment ---


@dataclass
class Env:
    fabric: Fabric
    client_node: object
    target_node: object
    attacker_node: object
    attacker: Actor
    observer: PathObserver
    spy: ConnSpy
    client: NvmeClient
    target: NvmeTarget
    threat: ThreatModel
    security: SecurityLevel


def build_env(
    cfg: SimConfig,
    threat: ThreatModel,
    security: SecurityLevel,
    profile: ClientProfile = ClientProfile.USER_SPACE,
    tlu_host: str = "client",
    with_attacker: bool = True,
) -> Env:
    fabric = Fabric(cfg)
    client_node = fabric.attach_node("client", CLIENT_ADDR)
    target_node = fabric.attach_node("target", TARGET_ADDR)
    attacker_node = fabric.attach_node("attacker", ATTACKER_ADDR)
    if security is SecurityLevel.IPSEC:
        fabric.add_ipsec_policy(CLIENT_ADDR, TARGET_ADDR)

    if threat is ThreatModel.TLU:
        host = client_node if tlu_host == "client" else target_node
        attacker = Actor.local_user(host)
        observer = PathObserver(node_addr=host.addr)  # capture on the shared machine
    else:
        attacker = Actor.remote_admin(attacker_node)
        observer = PathObserver(node_addr=None)       # network vantage point
    if with_attacker:
        fabric.add_observer(observer)

    secret = INBAND_SECRET if security is SecurityLevel.INBAND else None
    target = NvmeTarget(target_node, TargetConfig(inband_secret=secret))
    client = NvmeClient(client_node, profile, secret=secret)
    client.connect(TARGET_ADDR)
    fabric.run_until_idle()
    spy = ConnSpy(observer, CLIENT_ADDR, TARGET_ADDR)
    return Env(
        fabric, client_node, target_node, attacker_node, attacker,
        observer, spy, client, target, threat, security,
    )


def victim_state(env: Env):
    """Victim-visible ground truth used for non-interference comparison."""
    return (
        tuple(env.client.trace),
        tuple(tuple(c.trace) for c in env.target.conns),
        tuple(sorted(env.target.store.snapshot().items())),
    )


# --- per-attack drivers (victim workload + attack program) ---

_BULK = bytes(i % 251 for i in range(4096))          # forces the SGL path
_ORIGINAL = bytes((i * 7) % 256 for i in range(4096))


def _drive_spoof_request(env: Env, run_attack: bool) -> Optional[AttackOutcome]:
    env.client.write(1, b"legitimate payload")
    env.fabric.run_until_idle()
    if not run_attack:
        return None
    return attack_spoof_nvmeof_request(
        env.attacker, env.spy, env.target.store, 7, b"attacker block content",
        env.threat, env.security,
    )


def _drive_spoof_response(env: Env, run_attack: bool) -> Optional[AttackOutcome]:
    env.fabric.schedule(3, env.client.write, 3, _BULK)
    if not run_attack:
        env.fabric.run_until_idle()
        return None
    return attack_spoof_nvmeof_response(
        env.attacker, env.spy, env.client, env.target.store,
        env.threat, env.security, 3, _BULK,
    )


def _drive_corrupt(env: Env, run_attack: bool, use_eavesdrop: bool = True) -> Optional[AttackOutcome]:
    env.client.write(9, _ORIGINAL)                   # bulk: observable registration
    env.fabric.run_until_idle()
    env.fabric.schedule(3, env.client.read, 9)
    if not run_attack:
        env.fabric.run_until_idle()
        return None
    return attack_rdma_write_corrupt(
        env.attacker, env.spy, env.client, env.target.store,
        env.threat, env.security, b"\xee" * 4096, use_eavesdrop=use_eavesdrop,
    )


def _drive_exhaust(env: Env, run_attack: bool) -> Optional[AttackOutcome]:
    env.client.write(1, b"legitimate payload")
    env.fabric.run_until_idle()
    if not run_attack:
        return None
    return attack_exhaust_connections(env.attacker, env.threat, env.security)


def _drive_cnp(env: Env, run_attack: bool) -> Optional[AttackOutcome]:
    env.client.write(2, _BULK)
    env.client.read(2)
    env.fabric.run_until_idle()
    if not run_attack:
        return None
    return attack_spoof_cnp(
        env.attacker, TARGET_ADDR, env.spy.target_qpn, CLIENT_ADDR,
        env.threat, env.security,
    )


def _drive_disconnect(env: Env, run_attack: bool) -> Optional[AttackOutcome]:
    env.client.write(1, b"legitimate payload")
    env.fabric.run_until_idle()
    if not run_attack:
        return None
    return attack_spoof_disconnect(env.attacker, env.spy, env.threat, env.security)


def _drive_invalid(env: Env, run_attack: bool) -> Optional[AttackOutcome]:
    env.client.write(1, b"legitimate payload")
    env.fabric.run_until_idle()
    if not run_attack:
        return None
    return attack_inject_invalid(env.attacker, env.spy, env.threat, env.security)


DRIVERS: dict[str, Callable] = {
    "spoof-nvmeof-request": _drive_spoof_request,
    "spoof-nvmeof-response": _drive_spoof_response,
    "corrupt-client-memory": _drive_corrupt,
    "exhaust-connections": _drive_exhaust,
    "spoof-cnp": _drive_cnp,
    "spoof-disconnect": _drive_disconnect,
    "inject-invalid": _drive_invalid,
}


def run_cell(
    cfg: SimConfig,
    attack_id: str,
    threat: ThreatModel,
    security: SecurityLevel,
    profile: ClientProfile = ClientProfile.USER_SPACE,
    **driver_kwargs,
) -> AttackOutcome:
    env = build_env(
        cfg, threat, security, profile=profile,
        tlu_host=_TLU_HOST.get(attack_id, "client"),
    )
    outcome = DRIVERS[attack_id](env, True, **driver_kwargs)
    env.fabric.run_until_idle()
    return outcome


# --- feasibility report ---

CSV_HEADER = "attack,model,config,succeeded,effect,cost"


@dataclass
class FeasibilityReport:
    rows: list[AttackOutcome] = field(default_factory=list)

    def is_complete_matrix(self) -> bool:
        keys = {(r.attack_id, r.threat_model, r.security) for r in self.rows}
        return len(self.rows) == 42 and len(keys) == 42

    def mismatches(self) -> list[tuple]:
        out = []
        for r in self.rows:
            expected = expected_cell(r.attack_id, r.threat_model, r.security)
            if r.succeeded != expected:
                out.append((r.attack_id, r.threat_model.value, r.security.value, expected, r.succeeded))
        return out

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            effect = r.effect.value if r.effect else ""
            lines.append(
                f"{r.attack_id},{r.threat_model.value},{r.security.value},"
                f"{'yes' if r.succeeded else 'no'},{effect},{r.cost}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cells = {(r.attack_id, r.threat_model, r.security): r for r in self.rows}
        if not self.is_complete_matrix():
            lines = [f"{'attack':24} {'model':5} {'config':7} {'ok':3} {'effect':18} cost"]
            for r in self.rows:
                effect = r.effect.value if r.effect else "-"
                lines.append(
                    f"{r.attack_id:24} {r.threat_model.value:5} {r.security.value:7} "
                    f"{'yes' if r.succeeded else 'no':3} {effect:18} {r.cost}"
                )
            return "\n".join(lines) + "\n"
        head = f"{'attack':24} | {'TLU':11} | {'TRA':11}"
        sub = f"{'':24} | {'non in ip':11} | {'non in ip':11}"
        lines = [head, sub, "-" * len(sub)]
        for attack in ATTACK_IDS:
            cols = []
            for model in _MODELS:
                marks = " ".join(
                    "Y " if cells[(attack, model, lvl)].succeeded else "N "
                    for lvl in _LEVELS
                )
                cols.append(f"{marks:11}")
            note = FOOTNOTES.get(attack, "")
            lines.append(f"{attack:24} | {cols[0]} | {cols[1]} {note}")
        return "\n".join(lines) + "\n"


def run_matrix(cfg: SimConfig) -> FeasibilityReport:
    report = FeasibilityReport()
    for attack in ATTACK_IDS:
        for model in _MODELS:
            for level in _LEVELS:
                report.rows.append(run_cell(cfg, attack, model, level))
    return report


def footnote_checks(cfg: SimConfig) -> dict[str, bool]:
    """The three row nuances, asserted as their own mini-scenarios."""
    results = {}
    # fast-registration clients: feasible with eavesdropped parameters only
    with_spy = run_cell(
        cfg, "corrupt-client-memory", ThreatModel.TLU, SecurityLevel.NONE,
        profile=ClientProfile.KERNEL, use_eavesdrop=True,
    )
    blind = run_cell(
        cfg, "corrupt-client-memory", ThreatModel.TLU, SecurityLevel.NONE,
        profile=ClientProfile.KERNEL, use_eavesdrop=False,
    )
    results["corrupt-kernel-needs-eavesdrop"] = with_spy.succeeded and not blind.succeeded
    # exhaustion stops at a per-user quota
    quota_cfg = cfg.with_mitigations(per_user_quota=64)
    results["exhaust-quota-mitigated"] = not run_cell(
        quota_cfg, "exhaust-connections", ThreatModel.TLU, SecurityLevel.NONE
    ).succeeded
    # congestion spoofing: admin-only is in the grid; also converged-ethernet only
    from dataclasses import replace

    ib_cfg = replace(cfg, fabric_kind=FabricKind.IB)
    results["cnp-roce-only"] = not run_cell(
        ib_cfg, "spoof-cnp", ThreatModel.TRA, SecurityLevel.NONE
    ).succeeded
    return results


# --- scenario files ---


@dataclass
class ScenarioConfig:
    seed: int
    widths: str = "test"                  # test (12/12/16 bits) | paper (24/24/32)
    matrix: bool = False
    threat_model: str = "tlu"
    security: str = "none"
    client_profile: str = "user-space"
    attacks: list = field(default_factory=list)
    mitigations: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.widths not in ("test", "paper"):
            raise ConfigError(f"unknown widths profile {self.widths!r}")
        if self.threat_model not in ("tlu", "tra"):
            raise ConfigError(f"unknown threat model {self.threat_model!r}")
        if self.security not in ("none", "inband", "ipsec"):
            raise ConfigError(f"unknown security config {self.security!r}")
        if self.client_profile not in ("user-space", "kernel"):
            raise ConfigError(f"unknown client profile {self.client_profile!r}")
        for attack in self.attacks:
            if attack not in ATTACK_IDS:
                raise ConfigError(f"unknown attack {attack!r}")
        if not self.matrix and not self.attacks:
            raise ConfigError("scenario needs either matrix mode or an attack list")

    def sim_config(self) -> SimConfig:
        factory = SimConfig.test_profile if self.widths == "test" else SimConfig.paper_profile
        cfg = factory(self.seed)
        if self.mitigations:
            try:
                cfg = cfg.with_mitigations(**self.mitigations)
            except TypeError as exc:
                raise ConfigError(f"bad mitigation flags: {exc}") from None
        return cfg


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must contain a mapping")
    if "seed" not in raw:
        raise ConfigError("scenario seed is mandatory")
    known = {f for f in ScenarioConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
    return ScenarioConfig(**raw)


def run_scenario(scenario: ScenarioConfig) -> FeasibilityReport:
    cfg = scenario.sim_config()
    if scenario.matrix:
        return run_matrix(cfg)
    report = FeasibilityReport()
    model = ThreatModel(scenario.threat_model)
    level = SecurityLevel(scenario.security)
    profile = (
        ClientProfile.USER_SPACE
        if scenario.client_profile == "user-space"
        else ClientProfile.KERNEL
    )
    for attack in scenario.attacks:
        report.rows.append(run_cell(cfg, attack, model, level, profile=profile))
    return report


def emit_report(report: FeasibilityReport, fmt: str = "text") -> str:
    if fmt == "csv":
        return report.to_csv()
    if fmt == "text":
        return report.to_text()
    raise ConfigError(f"unknown report format {fmt!r}")

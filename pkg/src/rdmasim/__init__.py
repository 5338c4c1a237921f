"""Deterministic discrete-event simulator of RDMA fabrics carrying
NVMe-over-fabrics traffic, with a library of protocol-level attacks and
toggleable mitigations."""

from .config import Mitigations, SimConfig
from .fabric import Actor, Fabric, PathObserver

__all__ = ["Actor", "Fabric", "Mitigations", "PathObserver", "SimConfig"]

__version__ = "1.0.0"

"""Exception hierarchy shared by the simulator modules."""


class SimError(Exception):
    """Base class for all simulator errors."""


# --- wire codec ---

class OversizePayload(SimError):
    pass


class BadChecksum(SimError):
    pass


class Truncated(SimError):
    pass


class UnknownOpcode(SimError):
    pass


# --- fabric ---

class DuplicateAddress(SimError):
    pass


class Unreachable(SimError):
    pass


class SpoofDenied(SimError):
    """Unprivileged actor tried to send with a source address that is not its node's."""


class IpsecDrop(SimError):
    """Packet claimed a protected path but the sending node holds no key for it."""


class ConfigError(SimError):
    pass


# --- rnic ---

class LimitExhausted(SimError):
    pass


class QuotaExhausted(SimError):
    pass


class DuplicateDestination(SimError):
    pass


class WindowFull(SimError):
    pass


class QpError(SimError):
    pass


class AlreadyInvalid(SimError):
    pass


# --- connection manager ---

class Rejected(SimError):
    pass


class ConnectTimeout(SimError):
    pass


class MultiBitRetry(SimError):
    """Key probe failed because consecutive keys differed outside the probed bit patterns."""


# --- nvme-of ---

class AuthFailed(SimError):
    pass


class Disconnected(SimError):
    pass

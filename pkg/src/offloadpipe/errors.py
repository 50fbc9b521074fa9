"""Exception hierarchy shared by the planner, simulator and CLI."""


class OffloadPipeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(OffloadPipeError):
    pass


class MalformedConfig(ConfigError):
    pass


class InvariantViolation(ConfigError):
    pass


class EmptyDeviceList(ConfigError):
    pass


class InfeasibleModel(OffloadPipeError):
    """No segment count admits at least one layer per device per segment."""


class InfeasiblePlan(OffloadPipeError):
    pass


class NoFeasibleAssignment(OffloadPipeError):
    pass


class LimitsExceeded(OffloadPipeError):
    pass


class ZeroKvRate(OffloadPipeError):
    pass


class NoRemainingBlocks(OffloadPipeError):
    pass


class LedgerUnderflow(OffloadPipeError):
    pass


class OutOfMemoryAtRuntime(OffloadPipeError):
    def __init__(self, device, token, needed, capacity):
        self.device = device
        self.token = token
        self.needed = needed
        self.capacity = capacity
        super().__init__(
            f"device {device} out of memory at token {token}: "
            f"needs {needed} B, capacity {capacity} B, no offloadable blocks left"
        )


class ValidationFailure(OffloadPipeError):
    def __init__(self, clause, message):
        self.clause = clause
        super().__init__(f"clause ({clause}): {message}")


class UnsupportedFormat(OffloadPipeError):
    pass


class SchemaVersionError(OffloadPipeError):
    pass

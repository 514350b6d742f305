"""Exception hierarchy shared by the simulator, protocols and CLI."""


class RmaError(Exception):
    """Base class for every error raised by rmaft."""


class BoundsError(RmaError, IndexError):
    pass


class CrashedProcessError(RmaError):
    pass


class ProtocolError(RmaError):
    """An operation was issued in a state where the protocol forbids it."""


class WouldBlock(ProtocolError):
    """A lock request found the lock held; the scheduler retries later."""


class DeadlockError(RmaError):
    pass


class CatastrophicFailure(RmaError):
    """More failures than a checksum group (or the fallback path) can absorb."""


class InfeasiblePlacement(RmaError):
    def __init__(self, level, needed, available):
        super().__init__(
            f"level {level}: group needs {needed} distinct elements, only {available} exist"
        )
        self.level = level
        self.needed = needed
        self.available = available


class FitError(RmaError, ValueError):
    pass


class ScenarioError(RmaError, ValueError):
    pass

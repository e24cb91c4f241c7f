"""Exception hierarchy shared by all solver components."""


class HSDCError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(HSDCError, ValueError):
    pass


class DegenerateNodesError(InvalidArgumentError):
    """Raised when a node set contains duplicates (or a zero node where forbidden)."""


class NonFiniteInputError(HSDCError, ValueError):
    pass


class LayoutError(HSDCError, ValueError):
    """State vector does not match the block layout of the system."""


class StaleCacheError(HSDCError, RuntimeError):
    """Cached linearization no longer matches the step's initial value."""


class DivergenceError(HSDCError, ArithmeticError):
    """A sweep produced non-finite values or the residual blew up.

    Attributes:
        node: collocation node index where the failure was detected (or None).
        step: time-step index inside the block (or None).
    """

    def __init__(self, message, node=None, step=None):
        super().__init__(message)
        self.node = node
        self.step = step

    def __str__(self):
        where = []
        if self.step is not None:
            where.append(f"step {self.step}")
        if self.node is not None:
            where.append(f"node {self.node}")
        msg = super().__str__()
        return f"{msg} ({', '.join(where)})" if where else msg


class MaxIterationsError(HSDCError):
    """Iteration cap reached before the residual tolerance was met.

    The partial result (including residual traces) is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class StateFormatError(HSDCError, ValueError):
    """State file is malformed (bad magic, truncated payload, ...)."""


class VersionMismatchError(StateFormatError):
    pass


class MeshMismatchError(HSDCError, ValueError):
    pass


class ConfigError(HSDCError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

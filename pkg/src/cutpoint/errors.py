"""Exception types raised across the compiler."""


class CompileError(Exception):
    """Base class for all compiler errors."""


class GraphError(CompileError, ValueError):
    """Malformed network description or graph structure."""

    def __init__(self, message, layer_id=None):
        self.layer_id = layer_id
        if layer_id is not None:
            message = f"layer {layer_id}: {message}"
        super().__init__(message)


class AllocationError(CompileError):
    """A block cannot be held in the three physical buffers."""

    def __init__(self, message, block_id=None):
        self.block_id = block_id
        super().__init__(message)


class CostModelError(CompileError, ValueError):
    pass


class SimulationError(CompileError, ValueError):
    pass


class InfeasibleError(CompileError):
    """No candidate policy satisfies the constraints.

    ``constraint`` names the tightest violated constraint and ``value`` /
    ``limit`` carry the best value reached and the budget.
    """

    def __init__(self, message, constraint=None, value=None, limit=None):
        self.constraint = constraint
        self.value = value
        self.limit = limit
        super().__init__(message)


class CodegenError(CompileError, ValueError):
    pass

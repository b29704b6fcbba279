"""Exception hierarchy shared by every module of the package."""


class RoutingError(Exception):
    """Base class for all errors raised by :mod:`pfsa_routing`."""


class ModelValidationError(RoutingError, ValueError):
    """An automaton, topology or script violates its structural invariants."""


class ContractError(RoutingError, ValueError):
    """A caller broke an operation's precondition."""


class StructuralError(RoutingError):
    """A chain lacks the graph structure an operation relies on."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class NumericError(RoutingError, ArithmeticError):
    """A linear solve failed or produced an unacceptable residual."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConvergenceError(RoutingError):
    """An iterative procedure hit its iteration cap."""

    def __init__(self, message, worst_node=None, rounds=None):
        super().__init__(message)
        self.worst_node = worst_node
        self.rounds = rounds


class TopologyGenerationError(RoutingError):
    """The random topology generator could not meet its constraints."""

    def __init__(self, message, unreachable=frozenset()):
        super().__init__(message)
        self.unreachable = frozenset(unreachable)


class ProtocolError(RoutingError):
    """A node received reports that do not match its neighbor table."""

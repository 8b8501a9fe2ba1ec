"""Exception hierarchy; the CLI maps each class to an exit code."""


class SigmoidVolError(Exception):
    """Base class for package errors."""


class InputError(SigmoidVolError, ValueError):
    """Malformed or inconsistent input data."""


class ArbitrageError(SigmoidVolError):
    """A surface or term failed a no-arbitrage check.

    Attributes:
        nodes: list of offending (T, K, check, margin) tuples.
    """

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = list(nodes or [])


class OptimizerError(SigmoidVolError):
    """No feasible candidate found.

    Attributes:
        diagnostics: dict describing the best infeasible candidate.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

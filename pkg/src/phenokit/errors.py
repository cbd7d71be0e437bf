"""Exception hierarchy shared across the toolkit."""


class PhenokitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InputError(PhenokitError, ValueError):
    """Malformed or missing input data (files, tables, configs)."""

    exit_code = 1


class InvariantError(PhenokitError, RuntimeError):
    """An internal contract was violated during computation."""

    exit_code = 3


class NonFiniteError(InvariantError):
    """A NaN or Inf appeared in the output of a tensor operation."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class CheckpointError(InputError):
    """A checkpoint or tensor file is corrupt or truncated."""

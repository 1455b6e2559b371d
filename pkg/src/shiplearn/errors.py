"""Package-level exception types, mapped to CLI exit codes."""


class InputError(Exception):
    """Bad or missing input data/configuration (CLI exit code 2)."""


class NumericalError(Exception):
    """Internal numerical failure such as a degenerate chain (CLI exit code 3)."""

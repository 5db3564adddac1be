"""Exception hierarchy shared across the package.

Two broad failure classes matter at the CLI boundary: problems with the
inputs (bad files, bad configs, incompatible shapes) and numerical
failures during optimization (non-finite losses, divergence). They map to
process exit codes 2 and 3 respectively.
"""


class StackreconError(Exception):
    """Base class for all package errors."""


class InputError(StackreconError):
    """Invalid input data, file, or configuration (CLI exit code 2)."""


class NumericalError(StackreconError):
    """Numerical failure during optimization (CLI exit code 3)."""

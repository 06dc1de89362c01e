"""Exception taxonomy shared across the package.

Three failure classes matter to callers: contract violations inside the
library (DomainError), bad user-supplied files or configuration
(InputError), and failures of pluggable backends such as embedding
models or attention providers (ProviderError). The CLI maps InputError
to exit code 2 and ProviderError to exit code 3.
"""


class PrimdrawError(Exception):
    """Base class for all package errors."""


class DomainError(PrimdrawError, ValueError):
    """A precondition or invariant of an operation was violated."""


class InputError(PrimdrawError, ValueError):
    """A user-supplied file or configuration value is unusable."""


class ProviderError(PrimdrawError, RuntimeError):
    """A pluggable backend (embedding, attention, rasterizer) failed."""


class NumericsError(PrimdrawError, RuntimeError):
    """Optimization produced non-finite values and cannot continue."""

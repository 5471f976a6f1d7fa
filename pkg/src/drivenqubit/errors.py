"""Exception hierarchy.

Configuration problems derive from :class:`ConfigError`; everything that goes
wrong inside a numerical pipeline derives from :class:`NumericalError`.  The
command line maps the two families onto distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent input parameters."""


class NumericalError(RuntimeError):
    """A numerical pipeline could not produce a trustworthy result."""


class InsufficientMatsubaraError(ConfigError):
    """The truncated Matsubara tail is too heavy for the requested depth."""


class MemoryBudgetError(ConfigError):
    """The hierarchy would exceed the configured number of auxiliary operators."""


class HeomDivergenceError(NumericalError):
    """Non-finite values appeared during hierarchy propagation."""

    def __init__(self, message, tier=None, time=None, component=None):
        super().__init__(message)
        self.tier = tier
        self.time = time
        self.component = component


class InvertibilityError(NumericalError):
    """The dynamical map is too close to singular to be inverted."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ConsistencyError(NumericalError):
    """An internal identity that must hold to numerical precision failed."""


class KernelNotDecayedError(NumericalError):
    """The memory kernel has not decayed within the available lag window."""

    def __init__(self, message, required_t_final=None):
        super().__init__(message)
        self.required_t_final = required_t_final

"""Exception types shared across the package."""


class FreqwmError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FreqwmError):
    """An argument violates an operation's preconditions."""


class CapacityError(FreqwmError):
    """Requested message bits exceed the key's feature dimensionality."""


class KeyFormatError(FreqwmError):
    """A key file is malformed; the message names the offending field."""


class RegistryError(FreqwmError):
    """Unknown backend name; the message lists what is available."""


class ConfigError(FreqwmError):
    """Inconsistent run configuration (shapes, domains, missing files)."""


class AttackError(FreqwmError):
    """An attack failed to produce an output image."""


class CapabilityError(FreqwmError):
    """A backend lacks a capability the caller requires (e.g. gradients)."""


class OptimizationDivergedError(FreqwmError):
    """Non-finite loss during embedding; carries the failing step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")

"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """A model, head or run configuration is inconsistent."""


class InputError(ValueError):
    """An input array or file does not satisfy an operation's preconditions."""


class ValidationError(ValueError):
    """A segmentation or dataset record violates its structural invariants."""


class VerificationError(RuntimeError):
    """A numerical self-check (e.g. gradient check) could not be carried out."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or another unrecoverable state."""

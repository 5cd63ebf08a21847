"""Exception hierarchy shared by every stage of the toolkit."""


class ClipCeError(Exception):
    """Base class for all toolkit errors."""


class InputError(ClipCeError, ValueError):
    """An argument violates an operation's preconditions."""


class TemplateError(InputError):
    """A prompt template is malformed."""


class ProviderError(ClipCeError):
    """The embedding backend is unavailable or failed."""


class ConfigError(ClipCeError, ValueError):
    """Configuration is invalid or dimensions disagree."""


class NumericError(ClipCeError, ArithmeticError):
    """A computation produced a non-finite value."""


class StateError(ClipCeError, RuntimeError):
    """An operation was called in a state that does not support it."""


class DegenerateInputError(InputError):
    """Input data has no usable content (e.g. an all-zero depth map)."""


class ParseError(ClipCeError, ValueError):
    """A file could not be parsed."""


class CacheMismatchError(ClipCeError):
    """A cache on disk was produced under different settings."""

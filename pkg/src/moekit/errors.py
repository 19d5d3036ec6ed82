"""Exception taxonomy shared by all moekit modules.

Every error carries a short ``category`` string so the CLI (and log
consumers) can report which kind of failure occurred without parsing
messages.
"""


class MoekitError(Exception):
    """Base class for all moekit errors."""

    category = "runtime"


class DomainError(MoekitError, ValueError):
    """An argument is outside the mathematical domain of an operation."""

    category = "domain"


class ShapeError(MoekitError, ValueError):
    """Tensor operands have incompatible shapes."""

    category = "shape"


class ConfigError(MoekitError, ValueError):
    """A configuration value or document is invalid."""

    category = "config"


class StateError(MoekitError, RuntimeError):
    """Mutable state (e.g. a decode cache) is inconsistent with its inputs."""

    category = "state"


class NumericError(MoekitError, ArithmeticError):
    """A computation produced or received non-finite values."""

    category = "numeric"


class FormatError(MoekitError, ValueError):
    """A serialized artifact has a bad magic/version/layout."""

    category = "format"


class CorruptionError(FormatError):
    """A serialized artifact is truncated or internally inconsistent."""

    category = "corruption"


class DigestError(FormatError):
    """A checkpoint's config digest does not match the expected one."""

    category = "digest"


class MergeError(MoekitError, ValueError):
    """Two checkpoints cannot be merged (mismatched parameter trees)."""

    category = "merge"

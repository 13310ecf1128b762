"""Exception hierarchy for the refinement engine.

Every failure surfaced to callers derives from SyncrefError so the CLI can
map categories to exit codes (usage/config errors exit 2, data errors exit 1).
"""


class SyncrefError(Exception):
    """Base class for all engine errors."""


class FormatError(SyncrefError):
    """A file violates the on-disk embedding or corpus format."""


class ValidationError(SyncrefError):
    """Data fails an invariant check (NaN, norms, ID alignment, lengths)."""


class ConfigError(SyncrefError):
    """A strategy, scorer, or pipeline configuration is out of bounds."""


class DegenerateInputError(SyncrefError):
    """An input is mathematically unusable, e.g. a zero-norm vector."""


class SizeGuardError(SyncrefError):
    """A reference-path operation was asked to run beyond its size guard."""

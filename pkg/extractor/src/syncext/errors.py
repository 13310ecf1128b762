"""Extractor error hierarchy."""


class ExtractError(Exception):
    """Base class for all extractor failures."""


class InputError(ExtractError):
    """Unusable caption corpus, image file, or degenerate row."""


class ModelError(ExtractError):
    """Unknown encoder name or encoder that failed to load."""


class UsageError(ExtractError):
    """Inconsistent or out-of-range job configuration."""

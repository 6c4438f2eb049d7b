"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class FormatError(ValueError):
    """A file does not have the expected format (magic, version, architecture)."""


class CorruptionError(FormatError):
    """A file is truncated or otherwise damaged."""

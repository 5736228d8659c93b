"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class FormatError(ValueError):
    """An on-disk artifact (checkpoint, clip cache) is malformed."""

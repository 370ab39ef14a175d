"""Error taxonomy: configuration problems versus data problems."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""


class DataError(Exception):
    """Unreadable, malformed, or insufficient input data."""

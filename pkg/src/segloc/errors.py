"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3.
"""


class SeglocError(Exception):
    pass


class ConfigError(SeglocError):
    """Invalid or inconsistent configuration (bad TOML, missing files, bad values)."""


class DataError(SeglocError):
    """Malformed or unreadable data files (scans, poses, maps, embeddings)."""


class DegenerateGeometry(SeglocError):
    """Input geometry does not constrain the requested estimate (collinear, empty...)."""

"""Shared error types."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""

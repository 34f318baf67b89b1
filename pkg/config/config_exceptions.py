class ConfigError(Exception):
    """Raised when a run configuration cannot be loaded or validated."""
    pass

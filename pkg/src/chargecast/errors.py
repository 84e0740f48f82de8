class ConfigError(Exception):
    """Raised when a configuration (column map, normalization spec, CLI flags) is unusable."""

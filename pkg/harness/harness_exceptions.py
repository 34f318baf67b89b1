class HarnessError(Exception):
    """Base exception for episode execution and analysis."""
    pass


class EpisodeFailedError(HarnessError):
    """Raised when an episode could not be driven to completion."""
    pass


class RocUndefinedError(HarnessError):
    """Raised when all scenarios carry the same label."""
    pass


class ScenarioNotFoundError(HarnessError):
    """Raised when a requested scenario is neither builtin nor on disk."""
    pass

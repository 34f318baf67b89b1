class LlmError(Exception):
    """Base exception for the language-model assisted planner."""
    pass


class ParseError(LlmError):
    """Raised when a model reply cannot be turned into a usable response."""
    pass


class BackendError(LlmError):
    """Raised when a completion backend cannot produce a reply."""
    pass

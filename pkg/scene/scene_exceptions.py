class SceneError(Exception):
    """Base exception for scene construction and geometry."""
    pass


class InvalidLaneError(SceneError):
    """Raised when a lane polyline is empty or degenerate."""
    pass


class ScenarioValidationError(SceneError):
    """Raised when a scenario document violates its invariants."""
    pass


class InvalidTrajectoryError(SceneError):
    """Raised when trajectory samples are not on a strictly increasing fixed-step grid."""
    pass

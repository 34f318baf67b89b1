class PlannerError(Exception):
    """Base exception for proposal generation and selection."""
    pass


class EmptyProposalSetError(PlannerError):
    """Raised when selection is asked to pick from no proposals."""
    pass

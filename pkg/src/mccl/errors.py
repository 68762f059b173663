class ContractError(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf appears; ``source`` names the offending primitive or loss term."""

    def __init__(self, source: str, message: str | None = None):
        self.source = source
        super().__init__(message or f"non-finite value produced by {source!r}")

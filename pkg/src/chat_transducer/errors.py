"""Exception types shared across modules."""


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class SizeError(ValueError):
    """An instance is too large for an exhaustive computation."""

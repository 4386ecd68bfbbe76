"""Exception types shared across the package."""


class TaxonomyError(ValueError):
    """Structural problem in a taxonomy definition or file."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class DataError(ValueError):
    """A sampling pool or data split cannot satisfy a request."""


class SplitError(DataError):
    """A stratified split cannot be formed, e.g. a class with too few examples."""


class ContractError(RuntimeError):
    """An operation was called outside its supported state or range."""

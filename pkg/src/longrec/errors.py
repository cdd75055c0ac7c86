"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
NumericalError -> 3, StaleCacheError -> 4.
"""


class ConfigError(ValueError):
    """Invalid, missing, or inconsistent configuration or input schema."""


class DimensionError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class EmbeddingLookupError(LookupError):
    """An id fell outside its embedding table. Never silently clamped."""


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericalError(ArithmeticError):
    """Non-finite value where the numeric contract requires finiteness."""


class StaleCacheError(RuntimeError):
    """A KV cache was used with a model whose fingerprint no longer matches."""

"""Exception types shared across the package."""


class EmptyBatchError(Exception):
    """Poisson sampling produced an empty batch.

    This is a signal, not a failure: the caller decides whether to skip the
    hospital, substitute pure noise, or abort the round.
    """


class AggregationOverflowError(ValueError):
    """A fixed-point value is too large to aggregate without slot overflow."""

    def __init__(self, value: float, limit: float, index: int | None = None):
        self.value = value
        self.limit = limit
        self.index = index
        where = f" at index {index}" if index is not None else ""
        super().__init__(
            f"value {value!r}{where} exceeds the overflow-safe magnitude {limit!r}"
        )


class ProtocolError(RuntimeError):
    """Malformed, out-of-order, or missing message in the aggregation protocol."""


class DecryptionError(RuntimeError):
    """Ciphertext noise too close to the decryption threshold to trust the result."""


class ConfigError(ValueError):
    """Experiment configuration file is missing, malformed, or inconsistent."""

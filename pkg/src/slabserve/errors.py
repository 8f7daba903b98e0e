"""Exception hierarchy shared by every module."""


class SlabServeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidProfileError(SlabServeError, ValueError):
    pass


class InfeasibleRateError(SlabServeError):
    """No profiled batch size reaches the requested rate.

    ``max_rate`` carries the best achievable throughput so callers can
    escalate to data-parallel replication.
    """

    def __init__(self, model_id, rate, max_rate):
        self.model_id = model_id
        self.rate = rate
        self.max_rate = max_rate
        super().__init__(
            f"model {model_id!r}: rate {rate:g} req/s exceeds best profiled "
            f"throughput {max_rate:g} req/s"
        )


class InfeasibleSloError(SlabServeError):
    pass


class InvalidConfigError(SlabServeError, ValueError):
    pass


class InvalidKeyError(SlabServeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class PoolExhaustedError(SlabServeError):
    pass


class InvalidFreeError(SlabServeError):
    pass


class InfeasibleCandidateError(SlabServeError):
    pass


class PlacementInfeasibleError(SlabServeError):
    def __init__(self, model_id, message=None):
        self.model_id = model_id
        super().__init__(message or f"model {model_id!r} fits on no GPU group")


class InvalidScenarioError(SlabServeError, ValueError):
    pass


class InvalidMeasurementError(SlabServeError, ValueError):
    pass


class InvariantViolation(SlabServeError, AssertionError):
    pass

"""Exception types shared across modules."""


class ContractViolation(ValueError):
    """A precondition of an operation was not met by the caller."""


class EstimationFailure(RuntimeError):
    """No geometric guess produced a self-consistent mass estimate."""


class UndefinedDistribution(ValueError):
    """The importance distribution is undefined because the total mass is zero."""


class FreshnessExhausted(RuntimeError):
    """A bucket ran out of unused sampler instances."""

    def __init__(self, step: int, bucket: int):
        super().__init__(f"bucket {bucket} has no fresh sampler left at step {step}")
        self.step = step
        self.bucket = bucket


class StepFailed(RuntimeError):
    """Every boosted attempt of a sampler instance returned no sample."""

    def __init__(self, step: int, bucket: int):
        super().__init__(f"sampler for bucket {bucket} failed at step {step}")
        self.step = step
        self.bucket = bucket


class InputError(ValueError):
    """An input file or serialized blob could not be parsed."""

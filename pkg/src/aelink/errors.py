"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated (bad shape, range, mode)."""


class DegenerateInputError(ContractError):
    """Input for which an operation has no defined output, e.g. a zero vector."""


class DetectionFailure(RuntimeError):
    """A detector could not produce a decision (e.g. singular channel for ZF)."""


class TrainingDiverged(RuntimeError):
    pass

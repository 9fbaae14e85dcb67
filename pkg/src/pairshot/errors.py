"""Exception types raised across the package."""


class ContractError(ValueError):
    """An input violated an operation's precondition (shape, size, index)."""


class LoadError(OSError):
    pass


class ManifestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class PhaseOrderError(RuntimeError):
    """A training phase was requested before its prerequisite checkpoint exists."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value, stage=None, step=None):
        self.term = term
        self.value = value
        where = f" (stage {stage}, step {step})" if stage is not None else ""
        super().__init__(f"loss term {term!r} is non-finite: {value}{where}")


class NumericError(ArithmeticError):
    pass

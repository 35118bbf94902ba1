"""Exception types shared across the package."""


class SeqclError(Exception):
    """Base class for every error raised by seqcl."""


class ShapeError(SeqclError, ValueError):
    pass


class DomainError(SeqclError, ValueError):
    """An argument lies outside its mathematical domain."""


class ConfigError(SeqclError, ValueError):
    pass


class StateError(SeqclError, RuntimeError):
    pass


class NumericError(SeqclError, ArithmeticError):
    """Training produced a non-finite value."""


class SingularityError(SeqclError, ArithmeticError):
    def __init__(self, message, ladder=()):
        super().__init__(message)
        self.ladder = tuple(ladder)


class OracleCapError(SeqclError, RuntimeError):
    def __init__(self, required, cap):
        super().__init__(
            f"oracle would enumerate {required} sequences but the cap is {cap}; "
            f"raise the cap to at least {required}"
        )
        self.required = required
        self.cap = cap

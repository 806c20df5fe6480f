"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or inconsistent inputs."""


class DomainError(ValueError):
    """An operation was called outside its domain (empty input, k > n, ...)."""


class FormatError(ValueError):
    """A binary file did not parse. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CalibrationError(RuntimeError):
    """No noise multiplier in the search bracket reaches the target epsilon."""

    def __init__(self, message: str, bracket: tuple[float, float]):
        super().__init__(f"{message}; sigma bracket [{bracket[0]}, {bracket[1]}]")
        self.bracket = bracket


class BudgetExceededError(RuntimeError):
    """A ledger spend was refused. ``remaining`` holds (eps, delta) still available."""

    def __init__(self, message: str, remaining: tuple[float, float]):
        super().__init__(f"{message}; remaining eps={remaining[0]:.6g}, delta={remaining[1]:.3g}")
        self.remaining = remaining

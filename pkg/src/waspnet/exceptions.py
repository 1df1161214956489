"""Exception hierarchy shared by every subsystem."""


class WaspError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(WaspError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class NumericalError(WaspError, ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ConfigError(WaspError, ValueError):
    """Invalid run configuration or architecture description."""


class DataError(WaspError, ValueError):
    """Malformed or missing data file."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.offset = offset


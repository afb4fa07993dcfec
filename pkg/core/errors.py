class CaloricError(Exception):
    """Base class for errors raised by this package.
    Every error carries the tag of the module that raised it, which prefixes the message."""
    module = "core"

    def __init__(self, message: str):
        super().__init__(f"[{self.module}] {message}")


class GridError(CaloricError, ValueError):
    module = "spectral"


class DumpFormatError(CaloricError, ValueError):
    module = "spectral"


class OffManifoldError(CaloricError, ValueError):
    module = "target"


class UnsupportedOrderError(CaloricError, NotImplementedError):
    module = "target"


class StabilityError(CaloricError, ValueError):
    module = "heatflow"


class ConstraintViolation(CaloricError, RuntimeError):
    module = "heatflow"


class ConvergenceError(CaloricError, RuntimeError):
    module = "heatflow"


class FrameError(CaloricError, RuntimeError):
    module = "gauge"


class TailError(CaloricError, RuntimeError):
    module = "gauge"


class SLStabilityError(StabilityError):
    module = "slflow"


class SLConstraintViolation(ConstraintViolation):
    module = "slflow"


class EnvelopeError(CaloricError, ValueError):
    module = "diagnostics"


class FitError(CaloricError, ValueError):
    module = "diagnostics"


class InitialDataError(CaloricError, ValueError):
    module = "cli"


class ConfigError(CaloricError, ValueError):
    module = "cli"

    def __init__(self, message: str, line: int = 0):
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")


class UnknownKeyError(ConfigError):
    pass


class OutOfRangeError(ConfigError):
    pass


class MissingKeyError(ConfigError):
    pass


class CutLocusError(OffManifoldError):
    """exponential map asked to reach past the injectivity radius"""

"""Exception types raised across peftkit."""


class PeftError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PeftError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(PeftError, FloatingPointError):
    pass


class ZeroBase(PeftError):
    pass


class DegenerateUpdate(PeftError):
    pass


class NormUnderflow(PeftError):
    pass


class NormUnderflowWarning(RuntimeWarning):
    pass


class ZeroColumn(PeftError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"column norm below epsilon in column(s) {self.columns}")


class RangeError(PeftError, ValueError):
    pass


class ConfigError(PeftError, ValueError):
    pass


class VersionError(PeftError):
    pass


class IntegrityError(PeftError):
    """A stored artifact does not match its recorded hash."""


class TrainingDiverged(PeftError, FloatingPointError):
    def __init__(self, step: int, lr: float, param_norms: dict):
        self.step = step
        self.lr = lr
        self.param_norms = dict(param_norms)
        norms = ", ".join(f"{k}={v:.3e}" for k, v in self.param_norms.items())
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}); parameter norms: {norms}")

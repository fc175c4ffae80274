"""Exception types shared across the package."""

from __future__ import annotations


class ActiveMetaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ActiveMetaError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class LabelRangeError(ActiveMetaError, ValueError):
    def __init__(self, op: str, low: int, high: int, num_classes: int):
        self.op = op
        self.low = low
        self.high = high
        self.num_classes = num_classes
        super().__init__(
            f"{op}: labels span [{low}, {high}] but must lie in [0, {num_classes - 1}]"
        )


class NonFiniteError(ActiveMetaError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class GradError(ActiveMetaError, RuntimeError):
    """Misuse of the gradient API (non-scalar output, tensor not on tape, ...)."""


class TapeMismatchError(GradError):
    pass


class ConfigError(ActiveMetaError, ValueError):
    """A configuration violates its invariants."""


class DataFormatError(ActiveMetaError, OSError):
    """A file on disk is missing, truncated or malformed."""

    def __init__(self, path, field: str, message: str):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path} [{field}]: {message}")


class TuneError(ActiveMetaError, RuntimeError):
    """Failure inside an adaptation / meta-update loop, with location attached."""

    def __init__(self, message: str, *, step: int | None = None, pair: int | None = None,
                 meta_step: int | None = None):
        self.step = step
        self.pair = pair
        self.meta_step = meta_step
        where = []
        if meta_step is not None:
            where.append(f"meta_step={meta_step}")
        if pair is not None:
            where.append(f"pair={pair}")
        if step is not None:
            where.append(f"step={step}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)

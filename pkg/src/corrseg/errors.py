"""Exception hierarchy. Every error carries a stable ``code`` string."""


class CorrSegError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details

    def __str__(self):
        msg = super().__str__()
        return f"[{self.code}] {msg}" if msg else f"[{self.code}]"


class ShapeMismatchError(CorrSegError, ValueError):
    code = "SHAPE_MISMATCH"


class BadLabelError(CorrSegError, ValueError):
    code = "BAD_LABEL"


class VolumeIOError(CorrSegError, OSError):
    code = "IO_ERROR"


class EmptyCaseError(CorrSegError, ValueError):
    code = "EMPTY_CASE"


class DuplicateIdError(CorrSegError, ValueError):
    code = "DUPLICATE_ID"


class ConfigError(CorrSegError, ValueError):
    code = "CONFIG_ERROR"


class DivergenceError(CorrSegError, RuntimeError):
    code = "DIVERGENCE"

    def __init__(self, message: str = "", epoch: int | None = None, loss: float | None = None):
        super().__init__(message, epoch=epoch, loss=loss)
        self.epoch = epoch
        self.loss = loss


class CheckpointMismatchError(CorrSegError, ValueError):
    code = "CHECKPOINT_MISMATCH"

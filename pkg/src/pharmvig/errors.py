"""Exception hierarchy shared by the toolkit."""


class PharmvigError(Exception):
    """Base class for toolkit errors the CLI reports without a traceback."""


class CorpusFormatError(PharmvigError, ValueError):
    """A raw data file could not be parsed. `row` is the 1-based data row."""

    def __init__(self, message: str, row: int | None = None) -> None:
        self.row = row
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


class RegistryError(PharmvigError, ValueError):
    pass


class TrainingDivergedError(PharmvigError, RuntimeError):
    """Loss or objective became non-finite during training."""


class RunRecordError(PharmvigError, ValueError):
    pass


class ReportError(PharmvigError, ValueError):
    pass


class ModelKeyError(PharmvigError, ValueError):
    """A --model key names no transformer variant, baseline or downstream head."""

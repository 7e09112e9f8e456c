class MedAugError(Exception):
    exit_code = 1


class ConfigError(MedAugError, ValueError):
    exit_code = 2


class IngestError(MedAugError, ValueError):
    exit_code = 4


class NumericAbort(MedAugError, FloatingPointError):
    """Raised when a loss or gradient goes non-finite during training."""

    exit_code = 3

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class DegenerateProportionError(MedAugError, ValueError):
    """Reweighting is undefined when no or all queue keys share the query laterality."""

"""Error types raised across the HEAR modules."""


class HearError(Exception):
    """Base class for all HEAR errors."""


class ConfigError(HearError):
    pass


class DictionaryParseError(HearError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateNameError(HearError):
    def __init__(self, name: str, line: int = 0):
        self.name = name
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"duplicate electrode name {name!r}{where}")


class EmptyLayoutError(HearError):
    pass


class UnresolvableLayoutError(HearError):
    pass


class InvalidRateError(HearError):
    pass


class InvalidBandError(HearError):
    pass


class SignalTooShortError(HearError):
    pass


class ShapeMismatchError(HearError):
    pass


class NonFiniteInputError(HearError):
    pass


class TimeOverflowError(HearError):
    pass


class EmptyBatchError(HearError):
    pass


class IndexOutOfRangeError(HearError):
    pass


class NonFiniteLossError(HearError):
    pass


class CheckpointError(HearError):
    pass


class ManifestError(HearError):
    pass


class ContainerFormatError(HearError):
    pass


class LoadError(HearError):
    def __init__(self, batch_index: int, cause: Exception = None):
        self.batch_index = batch_index
        self.cause = cause
        super().__init__(f"failed to load batch {batch_index}: {cause}")


class DesyncDetectedError(HearError):
    def __init__(self, step: int, worker: int, expected: str, observed: str):
        self.step = step
        self.worker = worker
        super().__init__(
            f"worker {worker} diverged at step {step}: expected {expected}, observed {observed}"
        )


class TooFewSamplesError(HearError):
    pass


class EmptyMatrixError(HearError):
    pass

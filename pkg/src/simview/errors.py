"""Exception and warning types shared across the package."""


class SimViewError(Exception):
    pass


class ParameterError(SimViewError, ValueError):
    pass


class DatasetLoadError(SimViewError):
    pass


class EmptyMaskError(SimViewError, ValueError):
    pass


class SplitError(SimViewError, ValueError):
    pass


class ModelError(SimViewError):
    pass


class ConsistencyError(SimViewError):
    pass


class StoreFormatError(SimViewError):
    pass


class RetrievalError(SimViewError):
    pass


class EvaluationError(SimViewError):
    pass


class TrainingError(SimViewError):
    pass


class FingerprintMismatchWarning(UserWarning):
    """Store vectors were produced by a different encoder than the one in use."""

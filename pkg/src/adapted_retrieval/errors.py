"""Exception hierarchy shared by every module.

Each exception carries the process exit code the CLI reports for it.
"""


class AdaptedRetrievalError(Exception):
    exit_code = 1


class NumericInputError(AdaptedRetrievalError, ValueError):
    """Non-finite values reached a numeric primitive."""


class DegenerateVectorError(AdaptedRetrievalError, ValueError):
    """A zero-norm vector was passed where a direction is required."""


class ShapeError(AdaptedRetrievalError, ValueError):
    pass


class ConfigurationError(AdaptedRetrievalError, ValueError):
    pass


class TapeError(AdaptedRetrievalError):
    """A forward tape does not match the parameters or upstream gradient."""


class TrainingDivergenceError(AdaptedRetrievalError):
    exit_code = 3

    def __init__(self, message, parameter=None, diagnostics=None):
        super().__init__(message)
        self.parameter = parameter
        self.diagnostics = diagnostics or {}


class ProviderError(AdaptedRetrievalError):
    exit_code = 2

    def __init__(self, message, request_ids=()):
        super().__init__(message)
        self.request_ids = list(request_ids)


class ProviderContractError(ProviderError):
    """The embedding service answered with something that breaks the wire contract."""


class InputError(AdaptedRetrievalError, ValueError):
    pass


class CorpusIndexError(AdaptedRetrievalError):
    """Retrieval against an empty or inconsistent corpus index."""


class StaleIndexError(CorpusIndexError):
    pass


class NoNegativeError(CorpusIndexError):
    pass


class IngestionError(AdaptedRetrievalError):
    pass


class ReferentialIntegrityError(IngestionError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class SplitError(AdaptedRetrievalError):
    pass


class UndefinedMetricError(AdaptedRetrievalError, ValueError):
    pass


class CheckpointError(AdaptedRetrievalError):
    pass

"""Exception types raised across the pipeline.

Every error carries a short machine-readable ``code`` so the CLI can report
failures on stderr without parsing messages.
"""


class NeuronAuctionError(Exception):
    code = "error"


class LengthError(NeuronAuctionError, ValueError):
    code = "length"


class VocabularyError(NeuronAuctionError, ValueError):
    code = "vocabulary"


class NumericError(NeuronAuctionError, ArithmeticError):
    code = "numeric"


class TrainingError(NeuronAuctionError, RuntimeError):
    code = "training"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContextOverflowError(LengthError):
    code = "context_overflow"


class CapacityError(NeuronAuctionError, ValueError):
    code = "capacity"


class DegenerateRescaleError(NumericError):
    code = "degenerate_rescale"


class DependencyError(NeuronAuctionError, RuntimeError):
    code = "dependency"


class ConfigurationError(NeuronAuctionError, ValueError):
    code = "configuration"


class ArtifactExistsError(NeuronAuctionError, FileExistsError):
    code = "exists"

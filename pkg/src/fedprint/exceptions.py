"""Exception hierarchy shared by every stage of the bench."""


class FedprintError(Exception):
    """Base class for all errors raised by fedprint."""


class ConfigurationError(FedprintError, ValueError):
    """Invalid configuration, dimensions or topology."""


class TopologyMismatchError(ConfigurationError):
    """Two models (or a model and its input) do not share a layout."""


class LayerRangeError(FedprintError, IndexError):
    """A hidden-layer index lies outside the model."""


class TrainingDivergenceError(FedprintError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class EvaluationError(FedprintError, ValueError):
    """Scored trials cannot be evaluated (e.g. a class is missing)."""


class UnknownModelError(FedprintError, KeyError):
    """A trial references a model that is not registered."""


class FormatError(FedprintError, ValueError):
    """A binary or text artifact is malformed."""


class MissingArtifactError(FedprintError, FileNotFoundError):
    """A prerequisite stage artifact is absent on disk."""

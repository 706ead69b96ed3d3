"""Exception hierarchy shared by all mpf modules."""


class MpfError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MpfError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(MpfError):
    """Input values fall outside an operation's numeric domain."""


class StateError(MpfError):
    """Object is in the wrong state for the requested operation."""


class IoError(MpfError):
    """Filesystem or serialization failure."""


class ParseError(MpfError):
    """Text input does not match the expected grammar."""


class VocabError(MpfError):
    """Caption contains a token outside the model vocabulary."""


class DegenerateEmbeddingError(MpfError):
    """An embedding has zero norm and cannot be cosine-scored."""


class TrainingDivergedError(MpfError):
    """Training loss became non-finite."""


class BridgeError(MpfError):
    """External scorer process failed, exited, or timed out."""


class ProtocolError(MpfError):
    """External scorer sent a malformed or out-of-contract message."""


class CapabilityError(MpfError):
    """Scorer backend lacks a capability required by the caller."""


class ConfigError(MpfError):
    """Invalid or inconsistent run configuration."""


class FitnessError(MpfError):
    """Non-finite fitness passed to the evolution strategy."""


class CoverageError(MpfError):
    """Evaluation data lacks images for a targeted caption."""

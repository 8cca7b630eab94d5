"""Exception types shared across the package."""


class CorruptArtifactError(RuntimeError):
    """A persisted file failed magic, version, or checksum validation."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""


class InvalidStateError(RuntimeError):
    """An operation was applied to a state that cannot accept it."""

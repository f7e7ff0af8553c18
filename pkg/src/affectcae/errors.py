"""
Exception hierarchy for affect-cae.

Library code raises these; the CLI maps them to exit codes
(see ``affectcae.cli``).
"""


class AffectError(Exception):
    """Base exception for all affect-cae failures."""


class ShapeError(AffectError):
    """Array shapes do not compose."""


class ParameterError(AffectError):
    """A hyperparameter is outside its allowed range."""


class NumericError(AffectError):
    """Non-finite values in external input."""


class StaleTapeError(AffectError):
    """A forward tape was reused after its backward pass."""


class TransferError(AffectError):
    """Pre-trained weights cannot be copied into the target network."""


class CheckpointError(AffectError):
    """Checkpoint container is malformed or does not match its spec."""


class DataError(AffectError):
    """Dataset content or layout is invalid."""


class ParseError(DataError):
    """A row or file could not be parsed."""


class RangeError(DataError):
    """A value lies outside its documented range."""


class ConfigError(AffectError):
    """Run configuration is invalid."""


class MissingArtifactError(AffectError):
    """An upstream stage artifact is absent."""

    def __init__(self, message: str, stage: str = ""):
        super().__init__(message)
        self.stage = stage


class LockError(AffectError):
    """Another command holds the output directory."""

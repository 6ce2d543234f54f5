"""
Exception hierarchy for the inspection engine.

Primitives raise these; services convert the ones that have a verdict
meaning (alignment failure, unpairable strings) into report fields.
"""
from typing import Optional


class InspectionError(Exception):
    """Base class for every error raised by the engine."""


class InvalidArgumentError(InspectionError, ValueError):
    """An argument violates a documented precondition."""


class InsufficientDataError(InspectionError):
    """Not enough samples to fit a model (e.g. fewer than 4 correspondences)."""


class AlignmentFailedError(InspectionError):
    """Reference and captured plate could not be registered."""

    def __init__(self, message: str, matches: int = 0, inlier_ratio: float = 0.0):
        super().__init__(message)
        self.matches = matches
        self.inlier_ratio = inlier_ratio


class DetectorUnavailableError(InspectionError):
    """The external region detector could not be reached or failed."""


class BackendUnavailableError(InspectionError):
    """The external OCR engine could not be reached or failed."""


class ConfigurationError(InspectionError):
    """A configuration value or a referenced file is invalid or missing."""


class ImageReadError(InspectionError, OSError):
    """An image file could not be read or decoded."""


class TrainingDivergedError(InspectionError):
    """The training loss became NaN or infinite."""

    def __init__(self, message: str, epoch: int, batch_index: int,
                 learning_rate: float, breakdown: Optional[dict] = None):
        super().__init__(
            f"{message} (epoch={epoch}, batch={batch_index}, lr={learning_rate:g})")
        self.epoch = epoch
        self.batch_index = batch_index
        self.learning_rate = learning_rate
        self.breakdown = breakdown or {}

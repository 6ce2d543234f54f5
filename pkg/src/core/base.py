"""
Base classes and interfaces for the inspection engine.
"""

from abc import ABC, abstractmethod
from enum import Enum
from typing import List, TYPE_CHECKING

if TYPE_CHECKING:
    import numpy as np
    import torch
    from models.image import GrayImage
    from models.regions import Region


class MorphKind(Enum):
    """Binary morphology operations."""
    ERODE = "erode"
    DILATE = "dilate"
    OPEN = "open"     # erode then dilate
    CLOSE = "close"   # dilate then erode


class ResizeMode(Enum):
    """Resampling modes for resize."""
    NEAREST = "nearest"
    BILINEAR = "bilinear"


class IFeatureDetector(ABC):
    """Interface for keypoint detection strategies used by alignment."""

    @abstractmethod
    def detect(self, image: 'GrayImage', max_keypoints: int) -> list:
        """Detect keypoints with descriptors, sorted by descending score."""
        pass


class IRegionProvider(ABC):
    """Interface for region detection strategies (layout, profile, external)."""

    @abstractmethod
    def detect(self, image: 'GrayImage') -> List['Region']:
        """Return classed regions found on the plate image."""
        pass


class IOcrBackend(ABC):
    """Interface for character recognition backends."""

    @abstractmethod
    def recognize(self, crops: List['GrayImage']) -> tuple:
        """Return (text, per-character confidences) for ordered character crops."""
        pass


class IReconstructor(ABC):
    """Interface for models that reconstruct a clean character from an input batch."""

    @abstractmethod
    def reconstruct(self, x: 'torch.Tensor') -> 'torch.Tensor':
        """Map an n x 3 x 64 x 64 batch in [-1, 1] to its reconstruction."""
        pass

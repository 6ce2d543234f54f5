"""
Raster data models shared by every pipeline stage.

GrayImage and BinaryImage wrap read-only numpy arrays so values can be
shared across threads without copies. Pixel (0, 0) is top-left and rows
run top to bottom.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np

from core.errors import InvalidArgumentError


class BBox(NamedTuple):
    """Axis-aligned box in pixels: top-left corner plus size."""
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.x2 and self.y <= py < self.y2

    def contains_box(self, other: 'BBox') -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x2 <= self.x2 and other.y2 <= self.y2)

    def iou(self, other: 'BBox') -> float:
        ix = max(0, min(self.x2, other.x2) - max(self.x, other.x))
        iy = max(0, min(self.y2, other.y2) - max(self.y, other.y))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def pad(self, pad: int) -> 'BBox':
        return BBox(self.x - pad, self.y - pad, self.w + 2 * pad, self.h + 2 * pad)

    def offset(self, dx: int, dy: int) -> 'BBox':
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def clamp(self, width: int, height: int) -> 'BBox':
        """Clip to [0, width) x [0, height); may return a zero-area box."""
        x1 = min(max(self.x, 0), width)
        y1 = min(max(self.y, 0), height)
        x2 = min(max(self.x2, 0), width)
        y2 = min(max(self.y2, 0), height)
        return BBox(x1, y1, x2 - x1, y2 - y1)

    def to_list(self) -> list:
        return [int(self.x), int(self.y), int(self.w), int(self.h)]

    @classmethod
    def from_points(cls, xs, ys) -> 'BBox':
        """Tight integer box around floating point coordinates."""
        x1 = int(np.floor(min(xs)))
        y1 = int(np.floor(min(ys)))
        x2 = int(np.ceil(max(xs)))
        y2 = int(np.ceil(max(ys)))
        return cls(x1, y1, max(1, x2 - x1), max(1, y2 - y1))


def _freeze(array: np.ndarray) -> np.ndarray:
    if array.flags.writeable or not array.flags.c_contiguous:
        array = np.array(array, copy=True, order="C")
        array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster, intensities in [0, 255]."""
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        pixels = self.pixels
        if not isinstance(pixels, np.ndarray) or pixels.ndim != 2:
            raise InvalidArgumentError("GrayImage requires a 2-D array")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidArgumentError("GrayImage requires width, height >= 1")
        if pixels.dtype != np.uint8:
            raise InvalidArgumentError(f"GrayImage requires uint8 data, got {pixels.dtype}")
        object.__setattr__(self, "pixels", _freeze(pixels))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @classmethod
    def from_array(cls, array: np.ndarray) -> 'GrayImage':
        """Build from any numeric array: rounds half away from zero and saturates."""
        array = np.asarray(array)
        if array.dtype == np.uint8:
            return cls(array)
        if array.dtype == np.bool_:
            return cls(array.astype(np.uint8) * 255)
        values = np.asarray(array, dtype=np.float64)
        rounded = np.sign(values) * np.floor(np.abs(values) + 0.5)
        return cls(np.clip(rounded, 0, 255).astype(np.uint8))

    @classmethod
    def filled(cls, width: int, height: int, value: int = 0) -> 'GrayImage':
        if width < 1 or height < 1:
            raise InvalidArgumentError("image dimensions must be >= 1")
        return cls(np.full((height, width), value, dtype=np.uint8))

    def crop(self, box: BBox) -> 'GrayImage':
        return GrayImage(self.pixels[box.y:box.y2, box.x:box.x2].copy())

    def mutable(self) -> np.ndarray:
        """Writable copy of the pixel data."""
        return self.pixels.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True)
class BinaryImage:
    """Boolean raster; True marks foreground."""
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = self.mask
        if not isinstance(mask, np.ndarray) or mask.ndim != 2:
            raise InvalidArgumentError("BinaryImage requires a 2-D array")
        if mask.shape[0] < 1 or mask.shape[1] < 1:
            raise InvalidArgumentError("BinaryImage requires width, height >= 1")
        if mask.dtype != np.bool_:
            mask = mask.astype(bool)
        object.__setattr__(self, "mask", _freeze(mask))

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    def count(self) -> int:
        return int(self.mask.sum())

    def complement(self) -> 'BinaryImage':
        return BinaryImage(~self.mask)

    def crop(self, box: BBox) -> 'BinaryImage':
        return BinaryImage(self.mask[box.y:box.y2, box.x:box.x2].copy())

    def to_gray(self) -> GrayImage:
        return GrayImage(self.mask.astype(np.uint8) * 255)

    @classmethod
    def empty(cls, width: int, height: int) -> 'BinaryImage':
        return cls(np.zeros((height, width), dtype=bool))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash((self.mask.shape, self.mask.tobytes()))


@dataclass(frozen=True)
class ComponentStats:
    """Statistics of one connected foreground component."""
    label: int
    area: int
    bbox: BBox
    centroid: Tuple[float, float]

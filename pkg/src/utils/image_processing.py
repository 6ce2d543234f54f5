"""
Deterministic image primitives shared by every pipeline stage.

All functions are pure: they never modify their inputs and return new
GrayImage / BinaryImage values. Intensity arithmetic saturates to
[0, 255]; blur accumulates in float64 and rounds half away from zero.
"""
from typing import List, Tuple, Union

import cv2
import numpy as np
from skimage.measure import label, regionprops

from core.base import MorphKind, ResizeMode
from core.errors import InvalidArgumentError
from models.image import BBox, BinaryImage, ComponentStats, GrayImage


def _odd_at_most(limit: int) -> int:
    return limit if limit % 2 == 1 else limit - 1


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """1-D Gaussian weights of odd length, normalized to sum 1."""
    kernel = cv2.getGaussianKernel(size, sigma, cv2.CV_64F).ravel()
    return kernel / kernel.sum()


def gaussian_blur(img: GrayImage, kernel: int, sigma: float) -> GrayImage:
    """
    Separable Gaussian blur with reflect (101) border handling.

    A kernel larger than the image is clipped per axis to the largest odd
    size that fits, so very large background-estimation kernels can be
    applied to small crops.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidArgumentError(f"blur kernel must be odd and >= 1, got {kernel}")
    if sigma <= 0:
        raise InvalidArgumentError(f"blur sigma must be > 0, got {sigma}")

    kx = min(kernel, _odd_at_most(img.width))
    ky = min(kernel, _odd_at_most(img.height))
    blurred = cv2.sepFilter2D(
        img.pixels.astype(np.float64), cv2.CV_64F,
        gaussian_kernel(kx, sigma), gaussian_kernel(ky, sigma),
        borderType=cv2.BORDER_REFLECT_101,
    )
    return GrayImage.from_array(blurred)


def threshold_binary(img: GrayImage, t: int) -> BinaryImage:
    """Pixel is foreground iff intensity > t."""
    if not 0 <= t <= 255:
        raise InvalidArgumentError(f"threshold must be in [0, 255], got {t}")
    return BinaryImage(img.pixels > t)


def otsu_threshold(img: GrayImage) -> Tuple[int, BinaryImage]:
    """Otsu's method; returns the chosen threshold and the strict (> t) mask."""
    t, _ = cv2.threshold(img.pixels, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    t = int(t)
    return t, BinaryImage(img.pixels > t)


def morphology(img: BinaryImage, kind: Union[MorphKind, str], structel: int) -> BinaryImage:
    """
    Binary erosion / dilation / opening / closing with a square structuring
    element. Pixels outside the image count as background for every step.
    """
    if structel < 1 or structel % 2 == 0:
        raise InvalidArgumentError(f"structuring element must be odd and >= 1, got {structel}")
    kind = MorphKind(kind)
    if structel == 1:
        return img

    element = np.ones((structel, structel), dtype=np.uint8)
    mask = img.mask.astype(np.uint8)

    def erode(m):
        return cv2.erode(m, element, borderType=cv2.BORDER_CONSTANT, borderValue=0)

    def dilate(m):
        return cv2.dilate(m, element, borderType=cv2.BORDER_CONSTANT, borderValue=0)

    if kind is MorphKind.ERODE:
        out = erode(mask)
    elif kind is MorphKind.DILATE:
        out = dilate(mask)
    elif kind is MorphKind.OPEN:
        out = dilate(erode(mask))
    else:
        out = erode(dilate(mask))
    return BinaryImage(out.astype(bool))


def connected_components(img: BinaryImage, connectivity: int = 8) -> Tuple[List[ComponentStats], np.ndarray]:
    """
    Label foreground components.

    Labels run 1..K in the order each component is first met in a raster
    scan; background is 0. Returns the stats list and the label map.
    """
    if connectivity not in (4, 8):
        raise InvalidArgumentError(f"connectivity must be 4 or 8, got {connectivity}")

    raw = label(img.mask, connectivity=1 if connectivity == 4 else 2, background=0)
    if raw.max() == 0:
        return [], np.zeros(img.mask.shape, dtype=np.int32)

    # Relabel by first raster occurrence
    flat = raw.ravel()
    labels, first_index = np.unique(flat, return_index=True)
    foreground = labels != 0
    order = labels[foreground][np.argsort(first_index[foreground], kind="stable")]
    lookup = np.zeros(int(raw.max()) + 1, dtype=np.int32)
    lookup[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    label_map = lookup[raw]

    stats = []
    for region in regionprops(label_map):
        min_row, min_col, max_row, max_col = region.bbox
        cy, cx = region.centroid
        stats.append(ComponentStats(
            label=int(region.label),
            area=int(region.area),
            bbox=BBox(int(min_col), int(min_row), int(max_col - min_col), int(max_row - min_row)),
            centroid=(float(cx), float(cy)),
        ))
    stats.sort(key=lambda s: s.label)
    return stats, label_map


def abs_diff(a: GrayImage, b: GrayImage) -> GrayImage:
    """Per-pixel |a - b|."""
    if a.size != b.size:
        raise InvalidArgumentError(f"dimension mismatch: {a.size} vs {b.size}")
    return GrayImage(cv2.absdiff(a.pixels, b.pixels))


def resize(img: GrayImage, w: int, h: int, mode: Union[ResizeMode, str] = ResizeMode.BILINEAR) -> GrayImage:
    """
    Resize to w x h. Nearest uses floor sampling of source coordinates;
    bilinear uses pixel-center alignment with edge clamping.
    """
    if w < 1 or h < 1:
        raise InvalidArgumentError(f"target size must be >= 1, got {w}x{h}")
    mode = ResizeMode(mode)
    if (w, h) == img.size:
        return img
    interpolation = cv2.INTER_NEAREST if mode is ResizeMode.NEAREST else cv2.INTER_LINEAR
    return GrayImage(cv2.resize(img.pixels, (w, h), interpolation=interpolation))


def invert(img: GrayImage) -> GrayImage:
    """Per-pixel 255 - v."""
    return GrayImage(cv2.bitwise_not(img.pixels))


def equalize_histogram(img: GrayImage) -> GrayImage:
    return GrayImage(cv2.equalizeHist(img.pixels))


def subtract(a: GrayImage, b: GrayImage) -> GrayImage:
    """Saturating a - b."""
    if a.size != b.size:
        raise InvalidArgumentError(f"dimension mismatch: {a.size} vs {b.size}")
    return GrayImage(cv2.subtract(a.pixels, b.pixels))


def draw_rectangle(img: GrayImage, box: BBox, value: int = 255, thickness: int = 2) -> GrayImage:
    """Draw a rectangle whose outer edge is exactly `box`, border growing inward."""
    out = img.mutable()
    clipped = box.clamp(img.width, img.height)
    if clipped.area == 0:
        return GrayImage(out)
    x1, y1, x2, y2 = box.x, box.y, box.x2, box.y2
    t = max(1, thickness)

    def fill(ya, yb, xa, xb):
        ya, yb = max(ya, 0), min(yb, img.height)
        xa, xb = max(xa, 0), min(xb, img.width)
        if ya < yb and xa < xb:
            out[ya:yb, xa:xb] = value

    fill(y1, y1 + t, x1, x2)
    fill(y2 - t, y2, x1, x2)
    fill(y1, y2, x1, x1 + t)
    fill(y1, y2, x2 - t, x2)
    return GrayImage(out)

"""
Image file I/O: 8-bit grayscale PNG and binary PGM (P5).
"""
from pathlib import Path
from typing import Union

import cv2

from core.errors import ImageReadError
from models.image import BinaryImage, GrayImage
from utils.logging_config import get_logger

logger = get_logger(__name__)


def read_image(path: Union[str, Path]) -> GrayImage:
    """Read a PNG / PGM file as grayscale."""
    path = Path(path)
    if not path.is_file():
        raise ImageReadError(f"Image not found: {path}")
    pixels = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if pixels is None:
        raise ImageReadError(f"Image not found or unable to load: {path}")
    return GrayImage(pixels)


def write_image(path: Union[str, Path], img: Union[GrayImage, BinaryImage]) -> Path:
    """Write a PNG or PGM (P5) file; binary images are stored as 0/255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(img, BinaryImage):
        img = img.to_gray()
    if not cv2.imwrite(str(path), img.pixels):
        raise OSError(f"Could not write image: {path}")
    logger.debug(f"Wrote {img.width}x{img.height} image to {path}")
    return path

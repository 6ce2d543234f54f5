"""
Synthetic engraving defects.

Each recipe removes or attenuates a connected part of the stroke mask,
imitating blocked or misfired laser passes: a cut across a stroke, an
eroded stroke edge, an occluding blob and a faded stretch. At least
MIN_DEFECT_PIXELS pixels always change and the returned box bounds every
changed pixel.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from core.base import MorphKind
from core.errors import InvalidArgumentError
from models.image import BBox, BinaryImage, GrayImage
from utils.image_processing import morphology

MIN_DEFECT_PIXELS = 8
MAX_MAGNITUDE = 0.6
FADE_FACTOR = 0.35
CUT_ELONGATION = 4.0


class DefectKind(Enum):
    STROKE_CUT = "stroke_cut"
    EDGE_EROSION = "edge_erosion"
    OCCLUSION_BLOB = "occlusion_blob"
    PARTIAL_FADE = "partial_fade"


@dataclass(frozen=True)
class DefectRecipe:
    """What to damage, how much of the stroke, and the seed driving placement."""
    kind: DefectKind
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.magnitude <= MAX_MAGNITUDE:
            raise InvalidArgumentError(f"defect magnitude must be in (0, {MAX_MAGNITUDE}], got {self.magnitude}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "magnitude": self.magnitude, "seed": self.seed}


def _band_order(coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Stroke pixels ordered by distance to a random line through a stroke
    pixel, with distance along the line weighted by CUT_ELONGATION so the
    cut stays local instead of slicing the whole raster.
    """
    centre = coords[rng.integers(len(coords))]
    angle = rng.uniform(0, np.pi)
    normal = np.array([np.cos(angle), np.sin(angle)])
    tangent = np.array([-normal[1], normal[0]])
    offsets = coords - centre
    distance = np.abs(offsets @ normal) + np.abs(offsets @ tangent) / CUT_ELONGATION
    return np.lexsort((coords[:, 1], coords[:, 0], distance))


def _edge_order(mask: np.ndarray, coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Boundary layers first, nearest to a random edge seed within each layer."""
    layer = np.zeros(mask.shape, dtype=np.int32)
    remaining = BinaryImage(mask)
    depth = 1
    while remaining.count():
        inner = morphology(remaining, MorphKind.ERODE, 3)
        layer[remaining.mask & ~inner.mask] = depth
        remaining = inner
        depth += 1
    edge = coords[layer[coords[:, 0], coords[:, 1]] == 1]
    seed = edge[rng.integers(len(edge))]
    distance = np.hypot(*(coords - seed).T)
    return np.lexsort((distance, layer[coords[:, 0], coords[:, 1]]))


def inject_defect(img: GrayImage, mask: BinaryImage, recipe: DefectRecipe) -> Tuple[GrayImage, BBox]:
    """
    Damage the strokes of img marked by mask.

    Only stroke pixels change, except for occlusion_blob which paints a
    background disk over the strokes it intersects.
    """
    if mask.mask.shape != img.pixels.shape:
        raise InvalidArgumentError("stroke mask and image sizes differ")
    coords = np.argwhere(mask.mask)
    if len(coords) < MIN_DEFECT_PIXELS:
        raise InvalidArgumentError(f"stroke mask has {len(coords)} pixels, need >= {MIN_DEFECT_PIXELS}")

    rng = np.random.default_rng(recipe.seed)
    target = min(len(coords), max(MIN_DEFECT_PIXELS, int(round(recipe.magnitude * len(coords)))))
    pixels = img.pixels.astype(np.float64)
    background = float(np.median(pixels[~mask.mask])) if (~mask.mask).any() else 0.0
    out = pixels.copy()

    if recipe.kind is DefectKind.OCCLUSION_BLOB:
        centre = coords[rng.integers(len(coords))]
        distance = np.hypot(*(coords - centre).T)
        radius = float(np.sort(distance)[target - 1]) + 0.5
        yy, xx = np.mgrid[:img.height, :img.width]
        disk = np.hypot(yy - centre[0], xx - centre[1]) <= radius
        out[disk] = background
    else:
        if recipe.kind is DefectKind.EDGE_EROSION:
            order = _edge_order(mask.mask, coords, rng)
        else:
            order = _band_order(coords, rng)
        chosen = coords[order[:target]]
        rows, cols = chosen[:, 0], chosen[:, 1]
        if recipe.kind is DefectKind.PARTIAL_FADE:
            out[rows, cols] = background + (pixels[rows, cols] - background) * FADE_FACTOR
        else:
            out[rows, cols] = background

    damaged = GrayImage.from_array(out)
    changed = np.argwhere(damaged.pixels != img.pixels)
    if len(changed) == 0:
        raise InvalidArgumentError("defect changed no pixels; strokes already match the background")
    ys, xs = changed[:, 0], changed[:, 1]
    box = BBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return damaged, box

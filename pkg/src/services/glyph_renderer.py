"""
Stroke-font glyph rendering.

Glyphs are polylines and elliptical arcs on a 32x32 design grid, read
from the bundled JSON font so renders are byte-identical on every
platform. Rendering supersamples 4x and area-averages down, which gives
anti-aliased strokes plus an exact ground-truth stroke mask.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np

from core.errors import ConfigurationError, InvalidArgumentError
from models.image import BinaryImage, GrayImage

ALPHABET = "0123456789SCBKYTA"
BACKGROUND_LEVEL = 30
STROKE_LEVEL = 220
SUPERSAMPLE = 4
ARC_STEP_DEG = 5.0

DEFAULT_FONT_PATH = Path(__file__).resolve().parent.parent / "assets" / "stroke_font.json"


@dataclass(frozen=True)
class GlyphSpec:
    """Stroke geometry of one glyph on the design grid."""
    glyph: str
    strokes: Tuple[np.ndarray, ...] = field(repr=False)
    stroke_width: float = 3.0
    grid: int = 32


@dataclass(frozen=True)
class Jitter:
    """Exact geometric perturbation applied at render time."""
    scale: float = 0.0      # fraction, +0.05 = 5% larger
    shift_x: float = 0.0    # output pixels
    shift_y: float = 0.0
    rotate: float = 0.0     # degrees, counter-clockwise
    flip: bool = False      # horizontal mirror


@dataclass(frozen=True)
class JitterRange:
    """Bounds from which a Jitter is drawn."""
    scale: float = 0.0
    shift: float = 0.0
    rotate: float = 0.0
    flip_probability: float = 0.0

    def sample(self, rng: np.random.Generator) -> Jitter:
        return Jitter(
            scale=float(rng.uniform(-self.scale, self.scale)) if self.scale else 0.0,
            shift_x=float(rng.uniform(-self.shift, self.shift)) if self.shift else 0.0,
            shift_y=float(rng.uniform(-self.shift, self.shift)) if self.shift else 0.0,
            rotate=float(rng.uniform(-self.rotate, self.rotate)) if self.rotate else 0.0,
            flip=bool(rng.random() < self.flip_probability) if self.flip_probability else False,
        )


def _arc_points(cx, cy, rx, ry, start, end) -> np.ndarray:
    steps = max(2, int(np.ceil(abs(end - start) / ARC_STEP_DEG)) + 1)
    t = np.deg2rad(np.linspace(start, end, steps))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


class StrokeFont:
    """Glyph table loaded from a stroke-font JSON file."""

    def __init__(self, glyphs: Dict[str, GlyphSpec], name: str = "stroke"):
        self.name = name
        self._glyphs = glyphs

    @classmethod
    def from_dict(cls, data: dict) -> 'StrokeFont':
        grid = int(data.get("grid", 32))
        width = float(data.get("stroke_width", 3))
        glyphs = {}
        for glyph, primitives in data["glyphs"].items():
            strokes = []
            for primitive in primitives:
                if "line" in primitive:
                    x1, y1, x2, y2 = primitive["line"]
                    strokes.append(np.array([[x1, y1], [x2, y2]], dtype=np.float64))
                elif "arc" in primitive:
                    strokes.append(_arc_points(*primitive["arc"]))
                else:
                    raise ConfigurationError(f"unknown stroke primitive in glyph {glyph!r}: {primitive}")
            glyphs[glyph] = GlyphSpec(glyph, tuple(strokes), width, grid)
        return cls(glyphs, data.get("name", "stroke"))

    def glyph(self, glyph: str) -> GlyphSpec:
        if glyph not in self._glyphs:
            raise InvalidArgumentError(f"glyph {glyph!r} is not in font {self.name}")
        return self._glyphs[glyph]

    @property
    def glyphs(self) -> List[str]:
        return list(self._glyphs)


def load_stroke_font(path: Optional[Union[str, Path]] = None) -> StrokeFont:
    """Load a stroke font; defaults to the bundled one."""
    path = Path(path) if path else DEFAULT_FONT_PATH
    try:
        font = StrokeFont.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError as e:
        raise ConfigurationError(f"stroke font not found: {path}") from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"malformed stroke font {path}: {e}") from e
    missing = [g for g in ALPHABET if g not in font.glyphs]
    if missing:
        raise ConfigurationError(f"stroke font {path} lacks glyphs {missing}")
    return font


def glyph_coverage(spec: GlyphSpec, width: int, height: int, jitter: Optional[Jitter] = None,
                   stroke_scale: float = 1.0) -> np.ndarray:
    """Fractional stroke coverage in [0, 1] of a width x height canvas."""
    jitter = jitter or Jitter()
    size = min(width, height)
    unit = size / spec.grid
    offset = np.array([(width - size) / 2.0, (height - size) / 2.0])
    centre = np.array([width / 2.0, height / 2.0])
    angle = np.deg2rad(jitter.rotate)
    rotation = np.array([[np.cos(angle), np.sin(angle)], [-np.sin(angle), np.cos(angle)]])
    factor = 1.0 + jitter.scale
    shift = np.array([jitter.shift_x, jitter.shift_y])

    canvas = np.zeros((height * SUPERSAMPLE, width * SUPERSAMPLE), dtype=np.uint8)
    thickness = max(1, int(round(spec.stroke_width * stroke_scale * unit * factor * SUPERSAMPLE)))
    for stroke in spec.strokes:
        points = stroke.copy()
        if jitter.flip:
            points[:, 0] = spec.grid - points[:, 0]
        points = points * unit + offset
        points = (points - centre) @ (factor * rotation).T + centre + shift
        fixed = np.round(points * SUPERSAMPLE * 16).astype(np.int32)  # 4 fractional bits
        cv2.polylines(canvas, [fixed.reshape(-1, 1, 2)], False, 255, thickness, cv2.LINE_8, shift=4)
    small = cv2.resize(canvas, (width, height), interpolation=cv2.INTER_AREA)
    return small.astype(np.float64) / 255.0


def compose(coverage: np.ndarray, background: float = BACKGROUND_LEVEL,
            stroke: float = STROKE_LEVEL) -> np.ndarray:
    """Blend coverage into plate intensities (float)."""
    return background + coverage * (stroke - background)


def render_character(spec: GlyphSpec, size: int, jitter: Union[Jitter, JitterRange, None] = None,
                     seed: int = 0) -> Tuple[GrayImage, BinaryImage]:
    """
    Render a glyph as bright strokes on a dark size x size canvas.

    A JitterRange is sampled with the given seed; an exact Jitter is used
    as is. Returns the image and its ground-truth stroke mask.
    """
    if size < 16:
        raise InvalidArgumentError(f"render size must be >= 16, got {size}")
    if isinstance(jitter, JitterRange):
        jitter = jitter.sample(np.random.default_rng(seed))
    coverage = glyph_coverage(spec, size, size, jitter)
    return GrayImage.from_array(compose(coverage)), BinaryImage(coverage > 0.5)

"""
String reading and verification.

A string crop is flattened by large-kernel background subtraction,
inverted to dark text on light, binarized with Otsu and closed. Connected
components are clustered by column overlap into padded character boxes,
which are recognized by a pluggable backend: the built-in template
matcher scores normalized cross-correlation against a 17-glyph atlas; the
external adapter hands a line image to an OCR engine subprocess.
Recognized strings are verified against the expected MES values by edit
distance.
"""

import json
import subprocess
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from core.base import IOcrBackend, MorphKind
from core.errors import BackendUnavailableError, ConfigurationError, InvalidArgumentError
from models.config import OcrConfig, PipelineConfig
from models.image import BBox, BinaryImage, GrayImage
from models.inspection import CharBox, RecognizedString, StringVerification
from services.glyph_renderer import ALPHABET, render_character
from utils.image_io import read_image, write_image
from utils.image_processing import (connected_components, gaussian_blur, invert, morphology,
                                    otsu_threshold, subtract)
from utils.logging_config import get_logger

logger = get_logger(__name__)


# Preprocessing and segmentation

def preprocess_string_region(crop: GrayImage, cfg: OcrConfig) -> BinaryImage:
    """Binary text mask (True = engraved stroke) of a string crop."""
    background = gaussian_blur(crop, cfg.background_kernel, cfg.sigma)
    flattened = subtract(crop, background)
    if int(flattened.pixels.max()) < cfg.min_contrast:
        return BinaryImage.empty(crop.width, crop.height)
    inverted = invert(flattened)
    _, light = otsu_threshold(inverted)
    return morphology(light.complement(), MorphKind.CLOSE, cfg.close_structel)


def segment_characters(binary: BinaryImage, pad: int = 2, min_component_area: int = 4) -> List[CharBox]:
    """Left-to-right padded character boxes from column-overlapping components."""
    if pad < 0:
        raise InvalidArgumentError(f"pad must be >= 0, got {pad}")
    stats, _ = connected_components(binary, connectivity=8)
    boxes = sorted((s.bbox for s in stats if s.area >= min_component_area), key=lambda b: (b.x, b.y))

    clusters: List[List[int]] = []
    for box in boxes:
        if clusters and box.x < clusters[-1][2]:
            c = clusters[-1]
            c[1], c[2], c[3] = min(c[1], box.y), max(c[2], box.x2), max(c[3], box.y2)
        else:
            clusters.append([box.x, box.y, box.x2, box.y2])

    char_boxes = []
    for x1, y1, x2, y2 in clusters:
        padded = BBox(x1, y1, x2 - x1, y2 - y1).pad(pad).clamp(binary.width, binary.height)
        char_boxes.append(CharBox(bbox=padded, pad=pad))
    return char_boxes


def glyph_canvas(crop: GrayImage, size: int = 32) -> Optional[np.ndarray]:
    """
    Foreground of a character crop, tight-boxed, centred on a square canvas
    and resized to size x size (uint8). None when the crop is blank.
    """
    pixels = crop.pixels
    if int(pixels.max()) == int(pixels.min()):
        return None
    _, fg = otsu_threshold(crop)
    ys, xs = np.nonzero(fg.mask)
    if len(xs) == 0:
        return None
    tight = fg.mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1].astype(np.uint8) * 255
    h, w = tight.shape
    side = max(h, w)
    canvas = np.zeros((side, side), dtype=np.uint8)
    oy, ox = (side - h) // 2, (side - w) // 2
    canvas[oy:oy + h, ox:ox + w] = tight
    return cv2.resize(canvas, (size, size), interpolation=cv2.INTER_AREA)


def standardize(canvas: np.ndarray) -> Optional[np.ndarray]:
    """Zero-mean, unit-norm float32 copy; None for a flat canvas."""
    values = canvas.astype(np.float32)
    values -= values.mean()
    norm = float(np.linalg.norm(values))
    if norm < 1e-6:
        return None
    return values / norm


def normalize_glyph(crop: GrayImage, size: int = 32) -> Optional[np.ndarray]:
    canvas = glyph_canvas(crop, size)
    return None if canvas is None else standardize(canvas)


# Recognition backends

class GlyphAtlas:
    """Standardized templates keyed by glyph."""

    def __init__(self, canvases: Dict[str, np.ndarray]):
        missing = [g for g in ALPHABET if g not in canvases]
        if missing:
            raise ConfigurationError(f"glyph atlas is missing templates for {missing}")
        self.glyphs = list(ALPHABET)
        self.canvases = {g: np.asarray(canvases[g], dtype=np.uint8) for g in ALPHABET}
        self.size = int(self.canvases[ALPHABET[0]].shape[0])
        self.templates = {}
        for glyph, canvas in self.canvases.items():
            if canvas.shape != (self.size, self.size):
                raise ConfigurationError(f"glyph template {glyph!r} is {canvas.shape}, expected {self.size}x{self.size}")
            template = standardize(canvas)
            if template is None:
                raise ConfigurationError(f"glyph template {glyph!r} is blank")
            self.templates[glyph] = template

    @classmethod
    def from_font(cls, font, size: int = 32, cfg: Optional[OcrConfig] = None) -> 'GlyphAtlas':
        """Templates rendered from the stroke font through the inspection crop path."""
        cfg = cfg or OcrConfig()
        canvases = {}
        for glyph in ALPHABET:
            image, _ = render_character(font.glyph(glyph), 64)
            mask = preprocess_string_region(image, cfg)
            boxes = segment_characters(mask, pad=0, min_component_area=cfg.min_component_area)
            if not boxes:
                raise ConfigurationError(f"glyph {glyph!r} rendered blank")
            union = BBox.from_points([min(b.bbox.x for b in boxes), max(b.bbox.x2 for b in boxes)],
                                     [min(b.bbox.y for b in boxes), max(b.bbox.y2 for b in boxes)])
            canvases[glyph] = glyph_canvas(mask.crop(union).to_gray(), size)
        return cls(canvases)

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        for glyph, canvas in self.canvases.items():
            write_image(directory / f"{glyph}.png", GrayImage(canvas))
        logger.info(f"Wrote {len(self.canvases)} glyph templates to {directory}")
        return directory


def load_glyph_atlas(directory: Union[str, Path]) -> GlyphAtlas:
    """Read <glyph>.png templates from a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigurationError(f"glyph atlas directory not found: {directory}")
    canvases = {}
    for glyph in ALPHABET:
        path = directory / f"{glyph}.png"
        if not path.is_file():
            raise ConfigurationError(f"glyph atlas is missing {path.name}")
        canvases[glyph] = read_image(path).pixels
    return GlyphAtlas(canvases)


def build_glyph_atlas(font, out_dir: Union[str, Path], size: int = 32) -> Path:
    """Write the 17 size x size glyph templates rendered from the font."""
    return GlyphAtlas.from_font(font, size).save(out_dir)


class TemplateOcrBackend(IOcrBackend):
    """Normalized cross-correlation against every atlas glyph; argmax wins."""

    def __init__(self, atlas: GlyphAtlas):
        self.atlas = atlas

    def recognize_one(self, crop: GrayImage) -> Tuple[str, float]:
        normalized = normalize_glyph(crop, self.atlas.size)
        if normalized is None:
            return "?", 0.0
        best_glyph, best_score = "?", -np.inf
        for glyph in self.atlas.glyphs:
            score = float(cv2.matchTemplate(normalized, self.atlas.templates[glyph], cv2.TM_CCOEFF_NORMED)[0, 0])
            if score > best_score:
                best_glyph, best_score = glyph, score
        return best_glyph, float(np.clip(best_score, 0.0, 1.0))

    def recognize(self, crops: List[GrayImage]) -> Tuple[str, List[float]]:
        results = [self.recognize_one(c) for c in crops]
        return "".join(g for g, _ in results), [s for _, s in results]


class ExternalOcrBackend(IOcrBackend):
    """
    Adapter for an OCR engine subprocess.

    Character crops are laid out on one line image; the command receives
    its PNG path as last argument and must print one line of text.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0, gap: int = 8):
        if not command:
            raise ConfigurationError("external OCR command is empty")
        self.command = list(command)
        self.timeout = timeout
        self.gap = gap

    def _line_image(self, crops: List[GrayImage]) -> GrayImage:
        height = max(c.height for c in crops) + 2 * self.gap
        width = sum(c.width for c in crops) + self.gap * (len(crops) + 1)
        canvas = np.zeros((height, width), dtype=np.uint8)
        x = self.gap
        for crop in crops:
            y = (height - crop.height) // 2
            canvas[y:y + crop.height, x:x + crop.width] = crop.pixels
            x += crop.width + self.gap
        return GrayImage(canvas)

    def recognize(self, crops: List[GrayImage]) -> Tuple[str, List[float]]:
        if not crops:
            return "", []
        with tempfile.TemporaryDirectory(prefix="ocr_") as tmp:
            png = write_image(Path(tmp) / "line.png", self._line_image(crops))
            try:
                result = subprocess.run(self.command + [str(png)], capture_output=True,
                                        timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise BackendUnavailableError(f"external OCR failed to run: {e}") from e
        if result.returncode != 0:
            raise BackendUnavailableError(f"external OCR exited with {result.returncode}")
        text = result.stdout.decode("utf-8", errors="replace").strip().splitlines()
        text = "".join(text[0].split()) if text else ""
        return text, [1.0] * len(text)


def build_ocr_backend(cfg: PipelineConfig) -> IOcrBackend:
    ocr = cfg.ocr
    if ocr.backend == "template":
        return TemplateOcrBackend(load_glyph_atlas(cfg.resolve(ocr.atlas_dir)))
    if ocr.backend == "external":
        return ExternalOcrBackend(ocr.external_command, ocr.external_timeout)
    raise ConfigurationError(f"Unknown OCR backend: {ocr.backend}")


def recognize_characters(chars: List[GrayImage], backend: IOcrBackend) -> Tuple[str, List[float]]:
    return backend.recognize(chars)


def _split_evenly(boxes: List[CharBox], count: int, pad: int) -> List[CharBox]:
    x1 = min(b.bbox.x for b in boxes)
    x2 = max(b.bbox.x2 for b in boxes)
    y1 = min(b.bbox.y for b in boxes)
    y2 = max(b.bbox.y2 for b in boxes)
    edges = np.linspace(x1, x2, count + 1).round().astype(int)
    return [CharBox(BBox(int(a), y1, max(1, int(b - a)), y2 - y1), pad) for a, b in zip(edges[:-1], edges[1:])]


def read_string(crop: GrayImage, cfg: OcrConfig, backend: IOcrBackend) -> Tuple[RecognizedString, BinaryImage]:
    """Preprocess, segment and recognize one string crop."""
    binary = preprocess_string_region(crop, cfg)
    boxes = segment_characters(binary, cfg.pad, cfg.min_component_area)
    if not boxes:
        return RecognizedString(""), binary
    text, confidences = backend.recognize([binary.crop(b.bbox).to_gray() for b in boxes])
    if len(text) != len(boxes):
        logger.warning(f"Recognizer returned {len(text)} characters for {len(boxes)} boxes; re-splitting boxes")
        boxes = _split_evenly(boxes, len(text), cfg.pad) if text else []
    return RecognizedString(text, list(confidences), boxes), binary


# Verification

def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def verify_strings(recognized: Sequence[RecognizedString],
                   expected: Sequence[str]) -> Tuple[List[StringVerification], float, float]:
    """
    Pair recognized and expected strings positionally.

    Returns the verifications, WER (mismatched strings / strings) and CER
    (total edit distance / expected characters).
    """
    if len(recognized) != len(expected):
        raise InvalidArgumentError(
            f"{len(recognized)} recognized strings cannot be paired with {len(expected)} expected")
    verifications = [StringVerification(e, r.text, edit_distance(r.text, e))
                     for r, e in zip(recognized, expected)]
    total_chars = sum(len(e) for e in expected)
    mismatches = sum(1 for v in verifications if v.edit_distance)
    wer = mismatches / len(verifications) if verifications else 0.0
    cer = sum(v.edit_distance for v in verifications) / total_chars if total_chars else 0.0
    return verifications, wer, cer


def load_mes_lookup(path: Union[str, Path], serial: str) -> List[str]:
    """Expected strings of one plate from the MES lookup JSON."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigurationError(f"MES lookup not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"MES lookup is not valid JSON: {path}: {e}") from e
    record = data.get(serial)
    if record is None:
        raise ConfigurationError(f"serial {serial!r} not present in MES lookup {path}")
    strings = record.get("strings") if isinstance(record, dict) else None
    if not isinstance(strings, list) or not all(isinstance(s, str) for s in strings):
        raise ConfigurationError(f"MES record for {serial!r} has no string list")
    return strings


class OcrService:
    """String reading bound to a configuration and a backend."""

    def __init__(self, cfg: OcrConfig, backend: IOcrBackend):
        self.cfg = cfg
        self.backend = backend
        self.logger = get_logger(__name__)

    def read(self, crop: GrayImage) -> Tuple[RecognizedString, BinaryImage]:
        result, binary = read_string(crop, self.cfg, self.backend)
        self.logger.debug(f"Read {result.text!r} ({len(result.char_boxes)} boxes)")
        return result, binary

"""
Synthetic nameplate corpus.

Plates are 1920x1600 renders of one fixed layout: a procedural logo, a
data-matrix placeholder, four corner fiducials and six engraved strings.
Captured plates receive a small pose perturbation, a lighting gamma and
additive Gaussian noise. Every image is written with a JSON ground truth
and indexed in a JSON-lines manifest.

Each sample draws from its own generator seeded by (corpus seed, stream,
sample index), so serial and parallel generation write the same bytes.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from tqdm import tqdm

from core.errors import InvalidArgumentError
from core.events import Event, EventType, event_bus
from models.config import CorpusConfig, PipelineConfig
from models.geometry import Homography
from models.image import BBox, BinaryImage, GrayImage
from models.regions import LayoutSpec, Region, RegionClass, save_layout_spec, sort_regions
from services.defect_injector import DefectKind, DefectRecipe, inject_defect
from services.glyph_renderer import (ALPHABET, BACKGROUND_LEVEL, STROKE_LEVEL, SUPERSAMPLE, JitterRange, compose,
                                     glyph_coverage, load_stroke_font)
from services.ocr_service import GlyphAtlas
from utils.image_io import write_image
from utils.logging_config import get_logger
from utils.manifest import write_manifest

logger = get_logger(__name__)

PLATE_WIDTH, PLATE_HEIGHT = 1920, 1600
PLATE_TYPE = "NP-1920"
CHAR_SIZE = 64
CHAR_PITCH = 60
FIELD_PAD = 3
CHAR_CROP_PAD = 2
# (x, y, length) of each engraved string field
STRING_FIELDS = ((240, 480, 10), (240, 620, 8), (240, 760, 12), (240, 900, 6), (240, 1040, 9), (240, 1180, 7))
LOGO_BOX = BBox(240, 160, 480, 240)
DMC_BOX = BBox(1440, 160, 240, 240)
DMC_MODULES = 16
FIDUCIAL_SIZE = 96
FIDUCIAL_INSET = 40
FIDUCIAL_ARM = 14
FIDUCIAL_DOT = 8
# Border band holding the fiducials; the profile detector ignores it
PROFILE_MARGIN = 200

CHAR_JITTER = JitterRange(scale=0.05, shift=2.0, rotate=3.0)
CHAR_DEFECT_MAGNITUDE = (0.08, 0.3)
LOGO_DEFECT_MAGNITUDE = (0.01, 0.03)
LOGO_DEFECT_KINDS = (DefectKind.STROKE_CUT, DefectKind.OCCLUSION_BLOB, DefectKind.PARTIAL_FADE)
PLATE_DEFECT_CATEGORIES = ("logo", "character", "string")

# Generator streams
STREAM_LOGO = 1
STREAM_REFERENCE = 2
STREAM_PLATES = 3
STREAM_PLATE_LABELS = 4
STREAM_LOGO_PAIRS = 5
SPLIT_STREAMS = {"train": 10, "val": 11, "test": 12}


def sample_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


@lru_cache(maxsize=None)
def _font():
    return load_stroke_font()


# Lighting and noise

def apply_lighting(img: GrayImage, gain: float = 1.0, gamma: float = 1.0,
                   vignette: Optional[float] = None) -> GrayImage:
    """
    v' = 255 * (gain * v / 255) ** gamma, saturated.

    vignette in [0, 1) darkens radially: the corners are scaled by
    1 - vignette, the centre is untouched.
    """
    if gain <= 0 or gamma <= 0:
        raise InvalidArgumentError(f"lighting needs gain > 0 and gamma > 0, got {gain}, {gamma}")
    if vignette is not None and not 0 <= vignette < 1:
        raise InvalidArgumentError(f"vignette must be in [0, 1), got {vignette}")
    if gain == 1.0 and gamma == 1.0 and not vignette:
        return img
    values = 255.0 * np.power(gain * img.pixels.astype(np.float64) / 255.0, gamma)
    if vignette:
        yy, xx = np.mgrid[:img.height, :img.width]
        cx, cy = (img.width - 1) / 2.0, (img.height - 1) / 2.0
        r2 = (((xx - cx) / max(cx, 1.0)) ** 2 + ((yy - cy) / max(cy, 1.0)) ** 2) / 2.0
        values *= 1.0 - vignette * r2
    return GrayImage.from_array(values)


def add_noise(img: GrayImage, sigma: float, rng: np.random.Generator) -> GrayImage:
    if sigma <= 0:
        return img
    return GrayImage.from_array(img.pixels + rng.normal(0.0, sigma, img.pixels.shape))


@dataclass(frozen=True)
class Lighting:
    gain: float = 1.0
    gamma: float = 1.0
    vignette: Optional[float] = None

    def apply(self, img: GrayImage) -> GrayImage:
        return apply_lighting(img, self.gain, self.gamma, self.vignette)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PlatePose:
    """Rigid perturbation of the plate about its centre."""
    rotation_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    def homography(self, width: int = PLATE_WIDTH, height: int = PLATE_HEIGHT) -> Homography:
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        a = np.deg2rad(self.rotation_deg)
        c, s = np.cos(a), np.sin(a)
        m = np.array([[c, -s, cx + self.shift_x - c * cx + s * cy],
                      [s, c, cy + self.shift_y - s * cx - c * cy],
                      [0.0, 0.0, 1.0]])
        return Homography(m)

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.shift_x == 0 and self.shift_y == 0

    def to_dict(self) -> dict:
        return asdict(self)


# Layout and artwork

def string_field_box(x: int, y: int, length: int) -> BBox:
    """Field box holding length character cells at (x, y)."""
    return BBox(x - FIELD_PAD, y - FIELD_PAD, (length - 1) * CHAR_PITCH + CHAR_SIZE + 2 * FIELD_PAD,
                CHAR_SIZE + 2 * FIELD_PAD)


def field_capacity(box: BBox) -> int:
    cell = box.h - 2 * FIELD_PAD
    pitch = max(1, int(round(cell * CHAR_PITCH / CHAR_SIZE)))
    return max(0, (box.w - 2 * FIELD_PAD - cell) // pitch + 1)


def character_cells(box: BBox, length: int) -> List[BBox]:
    """Square cells of the characters engraved in a string field."""
    cell = box.h - 2 * FIELD_PAD
    pitch = max(1, int(round(cell * CHAR_PITCH / CHAR_SIZE)))
    return [BBox(box.x + FIELD_PAD + j * pitch, box.y + FIELD_PAD, cell, cell) for j in range(length)]


def nameplate_layout() -> LayoutSpec:
    regions = [Region(RegionClass.LOGO, LOGO_BOX), Region(RegionClass.DMC, DMC_BOX)]
    regions += [Region(RegionClass.STRING, string_field_box(x, y, n)) for x, y, n in STRING_FIELDS]
    return LayoutSpec(PLATE_TYPE, (PLATE_WIDTH, PLATE_HEIGHT), sort_regions(regions)).validate()


def _supersampled(width: int, height: int) -> np.ndarray:
    return np.zeros((height * SUPERSAMPLE, width * SUPERSAMPLE), dtype=np.uint8)


def _downsample(canvas: np.ndarray, width: int, height: int) -> np.ndarray:
    return cv2.resize(canvas, (width, height), interpolation=cv2.INTER_AREA).astype(np.float64) / 255.0


def _px(value: float) -> int:
    return int(round(value * SUPERSAMPLE))


def generate_logo(seed: int = 0, width: int = LOGO_BOX.w, height: int = LOGO_BOX.h) -> GrayImage:
    """
    Procedural logo: framed emblem (ring with a rotated triangle) beside a
    seeded block wordmark and an underline.
    """
    rng = sample_rng(seed, STREAM_LOGO)
    canvas = _supersampled(width, height)
    stroke = 6
    cv2.rectangle(canvas, (_px(stroke / 2), _px(stroke / 2)),
                  (_px(width - stroke / 2), _px(height - stroke / 2)), 255, _px(stroke))

    cx, cy, r = height * 0.5, height * 0.5, height * 0.32
    cv2.circle(canvas, (_px(cx), _px(cy)), _px(r), 255, _px(stroke))
    start = rng.uniform(0, 2 * np.pi)
    angles = start + np.arange(3) * 2 * np.pi / 3
    triangle = np.stack([cx + 0.62 * r * np.cos(angles), cy + 0.62 * r * np.sin(angles)], axis=1)
    cv2.fillPoly(canvas, [np.round(triangle * SUPERSAMPLE).astype(np.int32)], 255)

    # Wordmark: each block keeps its stem and gets a seeded set of bars
    top, bottom, bar = 60, 172, 10
    x = height + 10
    for _ in range(4):
        w = int(rng.integers(24, 35))
        cv2.rectangle(canvas, (_px(x), _px(top)), (_px(x + bar), _px(bottom)), 255, -1)
        for y, present in zip((top, (top + bottom - bar) / 2, bottom - bar), rng.random(3) < 0.6):
            if present:
                cv2.rectangle(canvas, (_px(x), _px(y)), (_px(x + w), _px(y + bar)), 255, -1)
        if rng.random() < 0.4:
            cv2.rectangle(canvas, (_px(x + w - bar), _px(top)), (_px(x + w), _px(bottom)), 255, -1)
        x += w + 12
    cv2.rectangle(canvas, (_px(height + 10), _px(188)), (_px(min(x, width - 20)), _px(198)), 255, -1)
    return GrayImage.from_array(compose(_downsample(canvas, width, height)))


def _dmc_coverage(size: int) -> np.ndarray:
    """Finder edges and timing pattern of a data-matrix symbol, no data."""
    canvas = _supersampled(size, size)
    module = size / DMC_MODULES
    cv2.rectangle(canvas, (0, 0), (_px(module) - 1, _px(size) - 1), 255, -1)
    cv2.rectangle(canvas, (0, _px(size - module)), (_px(size) - 1, _px(size) - 1), 255, -1)
    for k in range(0, DMC_MODULES, 2):
        cv2.rectangle(canvas, (_px(k * module), 0), (_px((k + 1) * module) - 1, _px(module) - 1), 255, -1)
        cv2.rectangle(canvas, (_px(size - module), _px((k + 1) * module)),
                      (_px(size) - 1, _px((k + 2) * module) - 1), 255, -1)
    return _downsample(canvas, size, size)


def _fiducial_coverage(corner: int) -> np.ndarray:
    """L mark pointing at its corner with corner + 1 dots on the diagonal."""
    canvas = _supersampled(FIDUCIAL_SIZE, FIDUCIAL_SIZE)
    end = _px(FIDUCIAL_SIZE) - 1
    arm = _px(FIDUCIAL_ARM)
    cv2.rectangle(canvas, (0, 0), (end, arm - 1), 255, -1)
    cv2.rectangle(canvas, (0, 0), (arm - 1, end), 255, -1)
    dot = _px(FIDUCIAL_DOT)
    for k in range(corner + 1):
        o = 2 * arm + 2 * k * dot
        cv2.rectangle(canvas, (o, o), (o + dot - 1, o + dot - 1), 255, -1)
    coverage = _downsample(canvas, FIDUCIAL_SIZE, FIDUCIAL_SIZE)
    if corner in (1, 3):
        coverage = coverage[:, ::-1]
    if corner in (2, 3):
        coverage = coverage[::-1, :]
    return coverage


def _fiducial_boxes(width: int, height: int) -> List[BBox]:
    far_x = width - FIDUCIAL_INSET - FIDUCIAL_SIZE
    far_y = height - FIDUCIAL_INSET - FIDUCIAL_SIZE
    return [BBox(x, y, FIDUCIAL_SIZE, FIDUCIAL_SIZE) for x, y in
            ((FIDUCIAL_INSET, FIDUCIAL_INSET), (far_x, FIDUCIAL_INSET),
             (FIDUCIAL_INSET, far_y), (far_x, far_y))]


def _stamp(canvas: np.ndarray, box: BBox, values: np.ndarray):
    """Engrave values into canvas; bright strokes win where elements overlap."""
    region = canvas[box.y:box.y2, box.x:box.x2]
    np.maximum(region, values[:region.shape[0], :region.shape[1]], out=region)


def stroke_mask(img: GrayImage) -> BinaryImage:
    return BinaryImage(img.pixels > (BACKGROUND_LEVEL + STROKE_LEVEL) / 2)


# Nameplate rendering

@dataclass
class PlateBlueprint:
    """What gets engraved on one plate."""
    layout: LayoutSpec
    strings: List[str]
    logo: GrayImage
    serial: str

    def validate(self) -> 'PlateBlueprint':
        fields = self.layout.regions_of(RegionClass.STRING)
        if len(fields) != len(self.strings):
            raise InvalidArgumentError(
                f"blueprint has {len(self.strings)} strings for {len(fields)} string regions")
        for text, region in zip(self.strings, fields):
            unknown = sorted(set(text) - set(ALPHABET))
            if unknown:
                raise InvalidArgumentError(f"string {text!r} contains glyphs outside the alphabet: {unknown}")
            if len(text) > field_capacity(region.bbox):
                raise InvalidArgumentError(f"string {text!r} does not fit region {region.bbox.to_list()}")
        if len(self.layout.regions_of(RegionClass.LOGO)) > 1:
            raise InvalidArgumentError("layout has more than one logo region")
        return self


@dataclass
class PlateDefect:
    """Ground truth of one engraved defect, in captured-image coordinates."""
    stage: str  # logo | character | string
    region_index: int
    bbox: BBox
    char_index: Optional[int] = None
    recipe: Optional[DefectRecipe] = None
    engraved: Optional[str] = None
    expected: Optional[str] = None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "region_index": self.region_index, "char_index": self.char_index,
                "bbox": self.bbox.to_list(), "recipe": self.recipe.to_dict() if self.recipe else None,
                "engraved": self.engraved, "expected": self.expected}


@dataclass
class PlateGroundTruth:
    serial: str
    regions: List[Region]
    strings: List[str]
    defects: List[PlateDefect] = field(default_factory=list)
    pose: PlatePose = field(default_factory=PlatePose)
    lighting: Lighting = field(default_factory=Lighting)
    noise_sigma: float = 0.0

    @property
    def defective(self) -> bool:
        return bool(self.defects)

    def to_dict(self) -> dict:
        return {
            "serial": self.serial,
            "label": "defective" if self.defective else "clean",
            "regions": [r.to_dict() for r in self.regions],
            "strings": list(self.strings),
            "defects": [d.to_dict() for d in self.defects],
            "pose": self.pose.to_dict(),
            "lighting": self.lighting.to_dict(),
            "noise_sigma": self.noise_sigma,
        }


DefectPlan = Sequence[Tuple[int, DefectRecipe]]


def _defect_char_index(text: str, recipe: DefectRecipe) -> int:
    return int(np.random.default_rng([recipe.seed, 1]).integers(len(text)))


def render_nameplate(bp: PlateBlueprint, defect_plan: Optional[DefectPlan] = None,
                     pose: Optional[PlatePose] = None, lighting: Optional[Lighting] = None,
                     noise_sigma: float = 0.0, seed: int = 0) -> Tuple[GrayImage, PlateGroundTruth]:
    """
    Composite a plate from its blueprint.

    defect_plan lists (layout region index, recipe): a logo entry damages
    the logo raster, a string entry damages one character of that string
    chosen by the recipe seed. Ground-truth boxes follow the pose into
    captured-image coordinates.
    """
    bp.validate()
    layout = bp.layout
    width, height = layout.nominal_size
    pose = pose or PlatePose()
    lighting = lighting or Lighting()
    string_regions = layout.regions_of(RegionClass.STRING)
    text_of = {id(r): t for r, t in zip(string_regions, bp.strings)}

    logo_recipe, char_recipes = None, {}
    for index, recipe in defect_plan or []:
        if not 0 <= index < len(layout.regions):
            raise InvalidArgumentError(f"defect plan names region {index}, layout has {len(layout.regions)}")
        region = layout.regions[index]
        if region.region_class is RegionClass.LOGO:
            logo_recipe = (index, recipe)
        elif region.region_class is RegionClass.STRING:
            if not text_of[id(region)]:
                raise InvalidArgumentError(f"defect plan targets empty string region {index}")
            char_recipes[index] = recipe
        else:
            raise InvalidArgumentError(f"defects cannot be planned on {region.region_class.value} regions")

    canvas = np.full((height, width), float(BACKGROUND_LEVEL))
    planted: List[PlateDefect] = []
    for index, region in enumerate(layout.regions):
        box = region.bbox
        if region.region_class is RegionClass.LOGO:
            logo = bp.logo
            if logo.size != (box.w, box.h):
                logo = GrayImage(cv2.resize(logo.pixels, (box.w, box.h), interpolation=cv2.INTER_AREA))
            if logo_recipe is not None:
                logo, damage = inject_defect(logo, stroke_mask(logo), logo_recipe[1])
                planted.append(PlateDefect("logo", index, damage.offset(box.x, box.y), recipe=logo_recipe[1]))
            _stamp(canvas, box, logo.pixels.astype(np.float64))
        elif region.region_class is RegionClass.DMC:
            side = min(box.w, box.h)
            _stamp(canvas, BBox(box.x, box.y, side, side), compose(_dmc_coverage(side)))
        else:
            text = text_of[id(region)]
            recipe = char_recipes.get(index)
            target = _defect_char_index(text, recipe) if recipe else None
            for j, (glyph, cell) in enumerate(zip(text, character_cells(box, len(text)))):
                char = GrayImage.from_array(compose(glyph_coverage(_font().glyph(glyph), cell.w, cell.h)))
                if j == target:
                    char, damage = inject_defect(char, stroke_mask(char), recipe)
                    planted.append(PlateDefect("character", index, damage.offset(cell.x, cell.y),
                                               char_index=j, recipe=recipe))
                _stamp(canvas, cell, char.pixels.astype(np.float64))
    for corner, box in enumerate(_fiducial_boxes(width, height)):
        _stamp(canvas, box, compose(_fiducial_coverage(corner)))

    h = pose.homography(width, height)
    if not pose.is_identity:
        canvas = cv2.warpPerspective(canvas.astype(np.float32), h.m, (width, height), flags=cv2.INTER_LINEAR,
                                     borderMode=cv2.BORDER_CONSTANT, borderValue=float(BACKGROUND_LEVEL))
    image = lighting.apply(GrayImage.from_array(canvas))
    image = add_noise(image, noise_sigma, np.random.default_rng(seed))

    def captured(box: BBox) -> BBox:
        return box if pose.is_identity else h.map_box(box).clamp(width, height)

    truth = PlateGroundTruth(
        serial=bp.serial,
        regions=[r.with_bbox(captured(r.bbox)) for r in layout.regions],
        strings=list(bp.strings),
        defects=[PlateDefect(d.stage, d.region_index, captured(d.bbox), d.char_index, d.recipe) for d in planted],
        pose=pose, lighting=lighting, noise_sigma=noise_sigma,
    )
    return image, truth


def render_reference(layout: LayoutSpec, logo: GrayImage, noise_sigma: float = 0.0, seed: int = 0) -> GrayImage:
    """Plate-type reference: logo, code and fiducials with every string field blank."""
    blank = PlateBlueprint(layout, [""] * len(layout.regions_of(RegionClass.STRING)), logo, "reference")
    image, _ = render_nameplate(blank, noise_sigma=noise_sigma, seed=seed)
    return image


# Corpus generation

def _run_samples(fn: Callable, tasks: List, workers: int, desc: str) -> List:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(fn, tasks, chunksize=8), total=len(tasks), desc=desc, leave=False))
    return [fn(task) for task in tqdm(tasks, desc=desc, leave=False)]


def char_crop_box(mask: BinaryImage, pad: int = CHAR_CROP_PAD) -> BBox:
    """Foreground bounding box plus pad, the crop inspection takes per character."""
    ys, xs = np.nonzero(mask.mask)
    if len(xs) == 0:
        raise InvalidArgumentError("character mask is empty")
    return BBox.from_points([xs.min(), xs.max() + 1], [ys.min(), ys.max() + 1]).pad(pad).clamp(mask.width,
                                                                                                mask.height)


@dataclass(frozen=True)
class _CharTask:
    seed: int
    split: str
    index: int
    glyph: str
    defective: bool
    out_dir: str
    gammas: Tuple[float, ...]
    noise_sigma: float
    flip_probability: float


def _char_sample(task: _CharTask) -> dict:
    rng = sample_rng(task.seed, SPLIT_STREAMS[task.split], task.index)
    jitter_range = JitterRange(CHAR_JITTER.scale, CHAR_JITTER.shift, CHAR_JITTER.rotate, task.flip_probability)
    jitter = jitter_range.sample(rng)
    coverage = glyph_coverage(_font().glyph(task.glyph), CHAR_SIZE, CHAR_SIZE, jitter)
    clean = GrayImage.from_array(compose(coverage))
    mask = BinaryImage(coverage > 0.5)

    damaged, damage, recipe = clean, None, None
    if task.defective:
        kinds = list(DefectKind)
        recipe = DefectRecipe(kinds[int(rng.integers(len(kinds)))], float(rng.uniform(*CHAR_DEFECT_MAGNITUDE)),
                              int(rng.integers(2 ** 31)))
        damaged, damage = inject_defect(clean, mask, recipe)

    # Both members of a pair share lighting and noise
    gamma = float(task.gammas[int(rng.integers(len(task.gammas)))])
    noise = rng.normal(0.0, task.noise_sigma, clean.pixels.shape) if task.noise_sigma > 0 else 0.0

    def finish(img: GrayImage) -> GrayImage:
        return GrayImage.from_array(apply_lighting(img, 1.0, gamma).pixels + noise)

    crop = char_crop_box(mask)
    name = f"{task.index:05d}"
    path = Path(task.out_dir) / task.split / f"{name}.png"
    write_image(path, finish(damaged).crop(crop))
    gt_name = f"{task.split}/{name}.png"
    if task.defective:
        gt_name = f"{task.split}/{name}_gt.png"
        write_image(Path(task.out_dir) / gt_name, finish(clean).crop(crop))
    bbox = None
    if damage is not None:
        local = damage.offset(-crop.x, -crop.y).clamp(crop.w, crop.h)
        bbox = local.to_list() if local.area > 0 else None
    return {
        "split": task.split,
        "index": task.index,
        "glyph": task.glyph,
        "label": "defective" if task.defective else "clean",
        "path": f"{task.split}/{name}.png",
        "gt_path": gt_name,
        "defect": recipe.to_dict() if recipe else None,
        "bbox": bbox,
        "lighting": Lighting(gamma=gamma).to_dict(),
        "noise_sigma": task.noise_sigma,
        "jitter": asdict(jitter),
    }


def _char_plan(cfg: CorpusConfig) -> Dict[str, List[Tuple[str, bool]]]:
    n = len(ALPHABET)
    return {
        "train": ([(ALPHABET[i % n], False) for i in range(cfg.train_clean_chars)]
                  + [(g, True) for g in ALPHABET for _ in range(cfg.train_defect_per_glyph)]),
        "val": [(ALPHABET[i % n], i % 2 == 1) for i in range(cfg.val_chars)],
        "test": ([(ALPHABET[i % n], False) for i in range(cfg.test_clean_chars)]
                 + [(ALPHABET[i % n], True) for i in range(cfg.test_defect_chars)]),
    }


def generate_char_corpus(cfg: CorpusConfig, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write chars/<split>/ crops and one chars/<split>.jsonl manifest per split.

    Defective samples carry a clean ground-truth twin (gt_path); clean
    samples are their own ground truth. Flipping is a training-only
    augmentation.
    """
    cfg.validate()
    root = Path(out_dir) / "chars"
    manifests = {}
    for split, plan in _char_plan(cfg).items():
        flip = cfg.flip_probability if split == "train" else 0.0
        tasks = [_CharTask(cfg.seed, split, i, glyph, defective, str(root), tuple(cfg.gammas),
                           cfg.noise_sigma, flip) for i, (glyph, defective) in enumerate(plan)]
        records = _run_samples(_char_sample, tasks, cfg.workers, f"chars/{split}")
        manifests[split] = write_manifest(root / f"{split}.jsonl", records)
        defective = sum(1 for r in records if r["label"] == "defective")
        logger.info(f"Generated {len(records)} {split} characters ({defective} defective)")
        event_bus.publish(Event(EventType.SAMPLE_GENERATED, source="synthdata",
                                data={"corpus": "chars", "split": split, "count": len(records)}))
    return manifests


@lru_cache(maxsize=8)
def _reference_assets(seed: int, noise_sigma: float) -> Tuple[LayoutSpec, GrayImage, GrayImage]:
    layout = nameplate_layout()
    logo = generate_logo(seed)
    reference = render_reference(layout, logo, noise_sigma, int(sample_rng(seed, STREAM_REFERENCE).integers(2 ** 31)))
    return layout, logo, reference


@dataclass(frozen=True)
class _PlateTask:
    seed: int
    index: int
    category: Optional[str]
    out_dir: str
    gammas: Tuple[float, ...]
    noise_sigma: float
    max_rotation_deg: float
    max_shift_px: float


def _random_string(rng: np.random.Generator, length: int) -> str:
    return "".join(ALPHABET[i] for i in rng.integers(len(ALPHABET), size=length))


def _plate_sample(task: _PlateTask) -> dict:
    rng = sample_rng(task.seed, STREAM_PLATES, task.index)
    layout, logo, _ = _reference_assets(task.seed, task.noise_sigma)
    fields = layout.regions_of(RegionClass.STRING)
    expected = [_random_string(rng, field_capacity(r.bbox)) for r in fields]
    engraved = list(expected)
    serial = f"NP{task.index:05d}"

    plan, misprint = [], None
    if task.category == "logo":
        index = next(i for i, r in enumerate(layout.regions) if r.region_class is RegionClass.LOGO)
        kind = LOGO_DEFECT_KINDS[int(rng.integers(len(LOGO_DEFECT_KINDS)))]
        plan.append((index, DefectRecipe(kind, float(rng.uniform(*LOGO_DEFECT_MAGNITUDE)),
                                         int(rng.integers(2 ** 31)))))
    elif task.category == "character":
        index = layout.regions.index(fields[int(rng.integers(len(fields)))])
        kinds = list(DefectKind)
        plan.append((index, DefectRecipe(kinds[int(rng.integers(len(kinds)))],
                                         float(rng.uniform(*CHAR_DEFECT_MAGNITUDE)), int(rng.integers(2 ** 31)))))
    elif task.category == "string":
        f = int(rng.integers(len(fields)))
        j = int(rng.integers(len(expected[f])))
        wrong = [g for g in ALPHABET if g != expected[f][j]]
        glyph = wrong[int(rng.integers(len(wrong)))]
        engraved[f] = expected[f][:j] + glyph + expected[f][j + 1:]
        misprint = (layout.regions.index(fields[f]), j, character_cells(fields[f].bbox, len(expected[f]))[j],
                    glyph, expected[f][j])

    pose = PlatePose(float(rng.uniform(-task.max_rotation_deg, task.max_rotation_deg)),
                     float(rng.uniform(-task.max_shift_px, task.max_shift_px)),
                     float(rng.uniform(-task.max_shift_px, task.max_shift_px)))
    lighting = Lighting(gamma=float(task.gammas[int(rng.integers(len(task.gammas)))]))
    image, truth = render_nameplate(PlateBlueprint(layout, engraved, logo, serial), plan, pose, lighting,
                                    task.noise_sigma, int(rng.integers(2 ** 31)))
    if misprint is not None:
        index, j, cell, glyph, wanted = misprint
        box = pose.homography(*layout.nominal_size).map_box(cell).clamp(*layout.nominal_size)
        truth.defects.append(PlateDefect("string", index, box, char_index=j, engraved=glyph, expected=wanted))

    out = Path(task.out_dir)
    write_image(out / "plates" / f"{serial}.png", image)
    record = truth.to_dict()
    record["expected_strings"] = expected
    (out / "plates" / f"{serial}.json").write_text(_dumps(record), encoding="utf-8")
    return {
        "serial": serial,
        "path": f"plates/{serial}.png",
        "gt_path": f"plates/{serial}.json",
        "label": record["label"],
        "defect_stage": task.category,
        "expected_strings": expected,
        "lighting": lighting.to_dict(),
        "pose": pose.to_dict(),
    }


def _dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def default_pipeline_config(out_dir: Union[str, Path]) -> PipelineConfig:
    """Pipeline config wired to the files of a generated plate corpus."""
    config = PipelineConfig()
    config.detector.layout_path = "layout.json"
    config.detector.margin = PROFILE_MARGIN
    config.ocr.atlas_dir = "atlas"
    config.models.vae_weights = "model.rvw"
    config.base_dir = str(out_dir)
    return config


def generate_plate_corpus(cfg: CorpusConfig, out_dir: Union[str, Path]) -> Path:
    """
    Write a plate-type reference with its layout, logo, glyph atlas and
    pipeline config, then cfg.plates captured plates with exactly
    round(plates * defect_rate) defective ones, the MES lookup and the
    plates.jsonl manifest.
    """
    cfg.validate()
    out = Path(out_dir)
    layout, logo, reference = _reference_assets(cfg.seed, cfg.noise_sigma)
    save_layout_spec(out / "layout.json", layout)
    write_image(out / "logo.png", logo)
    write_image(out / "reference.png", reference)
    GlyphAtlas.from_font(_font(), PipelineConfig().ocr.template_size).save(out / "atlas")
    default_pipeline_config(out).save(out / "pipeline.json")

    label_rng = sample_rng(cfg.seed, STREAM_PLATE_LABELS)
    n_defective = int(round(cfg.plates * cfg.defect_rate))
    defective = label_rng.permutation(cfg.plates)[:n_defective]
    categories: Dict[int, str] = {
        int(i): PLATE_DEFECT_CATEGORIES[int(c)]
        for i, c in zip(defective, label_rng.integers(len(PLATE_DEFECT_CATEGORIES), size=n_defective))
    }
    tasks = [_PlateTask(cfg.seed, i, categories.get(i), str(out), tuple(cfg.gammas), cfg.noise_sigma,
                        cfg.max_rotation_deg, cfg.max_shift_px) for i in range(cfg.plates)]
    records = _run_samples(_plate_sample, tasks, cfg.workers, "plates")

    mes = {r["serial"]: {"strings": r["expected_strings"]} for r in records}
    (out / "mes.json").write_text(_dumps(mes), encoding="utf-8")
    manifest = write_manifest(out / "plates.jsonl", records)
    logger.info(f"Generated {len(records)} plates ({n_defective} defective) in {out}")
    event_bus.publish(Event(EventType.SAMPLE_GENERATED, source="synthdata",
                            data={"corpus": "plates", "count": len(records), "defective": n_defective}))
    return manifest


@dataclass(frozen=True)
class _LogoTask:
    seed: int
    index: int
    defective: bool
    out_dir: str
    gammas: Tuple[float, ...]
    noise_sigma: float


def _logo_pair(task: _LogoTask) -> dict:
    rng = sample_rng(task.seed, STREAM_LOGO_PAIRS, task.index)
    _, logo, reference = _reference_assets(task.seed, task.noise_sigma)
    captured, recipe, damage = logo, None, None
    if task.defective:
        kind = LOGO_DEFECT_KINDS[int(rng.integers(len(LOGO_DEFECT_KINDS)))]
        recipe = DefectRecipe(kind, float(rng.uniform(*LOGO_DEFECT_MAGNITUDE)), int(rng.integers(2 ** 31)))
        captured, damage = inject_defect(logo, stroke_mask(logo), recipe)

    # Residual misregistration of an aligned crop
    shift = rng.uniform(-0.5, 0.5, size=2)
    m = np.array([[1.0, 0.0, shift[0]], [0.0, 1.0, shift[1]]])
    warped = cv2.warpAffine(captured.pixels.astype(np.float32), m, (captured.width, captured.height),
                            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    gamma = float(task.gammas[int(rng.integers(len(task.gammas)))])
    cap = add_noise(apply_lighting(GrayImage.from_array(warped), 1.0, gamma), task.noise_sigma, rng)

    out = Path(task.out_dir)
    name = f"{task.index:04d}"
    write_image(out / "logos" / f"{name}_ref.png", reference.crop(LOGO_BOX))
    write_image(out / "logos" / f"{name}_cap.png", cap)
    return {
        "index": task.index,
        "ref_path": f"logos/{name}_ref.png",
        "cap_path": f"logos/{name}_cap.png",
        "label": "defective" if task.defective else "clean",
        "defect": recipe.to_dict() if recipe else None,
        "bbox": damage.to_list() if damage else None,
        "lighting": Lighting(gamma=gamma).to_dict(),
        "shift": [float(shift[0]), float(shift[1])],
    }


def generate_logo_pairs(cfg: CorpusConfig, out_dir: Union[str, Path]) -> Path:
    """Labelled (reference, captured) logo crops, alternating clean and defective."""
    cfg.validate()
    out = Path(out_dir)
    tasks = [_LogoTask(cfg.seed, i, i % 2 == 1, str(out), tuple(cfg.gammas), cfg.noise_sigma)
             for i in range(cfg.logo_pairs)]
    records = _run_samples(_logo_pair, tasks, cfg.workers, "logos")
    manifest = write_manifest(out / "logos.jsonl", records)
    logger.info(f"Generated {len(records)} logo pairs in {out}")
    event_bus.publish(Event(EventType.SAMPLE_GENERATED, source="synthdata",
                            data={"corpus": "logos", "count": len(records)}))
    return manifest

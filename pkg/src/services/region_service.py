"""
Region providers for nameplate images.

Three interchangeable IRegionProvider implementations:
    LayoutRegionProvider   fixed layout spec scaled to the image size
    ProfileRegionProvider  projection-profile text-line detector
    ExternalRegionProvider subprocess adapter for a trained detector that
                           takes a PNG path and prints JSON regions
"""

import json
import subprocess
import tempfile
import threading
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.base import IRegionProvider
from core.errors import ConfigurationError, DetectorUnavailableError, InvalidArgumentError
from models.config import DetectorConfig, PipelineConfig
from models.image import BBox, GrayImage
from models.regions import LayoutSpec, Region, RegionClass, load_layout_spec, sort_regions
from utils.image_io import write_image
from utils.image_processing import otsu_threshold
from utils.logging_config import get_logger

logger = get_logger(__name__)

CROP_TOLERANCE_PX = 2


class LayoutRegionProvider(IRegionProvider):
    """Returns the layout spec boxes scaled from nominal size to the image."""

    def __init__(self, spec: LayoutSpec):
        self.spec = spec.validate()

    def detect(self, image: GrayImage) -> List[Region]:
        nominal_w, nominal_h = self.spec.nominal_size
        sx = image.width / nominal_w
        sy = image.height / nominal_h
        regions = []
        for region in self.spec.regions:
            if (sx, sy) == (1.0, 1.0):
                regions.append(region)
                continue
            box = region.bbox
            x1, y1 = int(round(box.x * sx)), int(round(box.y * sy))
            x2, y2 = int(round(box.x2 * sx)), int(round(box.y2 * sy))
            regions.append(region.with_bbox(BBox(x1, y1, max(1, x2 - x1), max(1, y2 - y1))))
        return sort_regions(regions)


def _runs(active: np.ndarray) -> List[Tuple[int, int]]:
    """Half-open [start, end) runs of True values."""
    padded = np.concatenate([[False], active, [False]]).astype(np.int8)
    edges = np.diff(padded)
    return list(zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]))


class ProfileRegionProvider(IRegionProvider):
    """
    Text-line detector: Otsu binarization, row-sum projection split at
    valleys below a fraction of the peak, then column projection inside
    each row with gaps wider than column_gap separating blocks. Blocks
    taller than max_row_height (logos, codes) are not text and are dropped.
    """

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg

    def detect(self, image: GrayImage) -> List[Region]:
        _, binary = otsu_threshold(image)
        mask = binary.mask.copy()
        m = self.cfg.margin
        if m > 0:
            mask[:m, :] = False
            mask[-m:, :] = False
            mask[:, :m] = False
            mask[:, -m:] = False
        if not mask.any():
            return []

        row_sums = mask.sum(axis=1)
        row_active = row_sums > self.cfg.valley_fraction * row_sums.max()
        regions = []
        for y1, y2 in _runs(row_active):
            if y2 - y1 < self.cfg.min_row_height:
                continue
            band = mask[y1:y2]
            for x1, x2 in self._column_blocks(band.any(axis=0)):
                block = band[:, x1:x2]
                ys = np.nonzero(block.any(axis=1))[0]
                top, bottom = y1 + int(ys[0]), y1 + int(ys[-1]) + 1
                if bottom - top > self.cfg.max_row_height or bottom - top < self.cfg.min_row_height:
                    continue
                box = BBox(int(x1), top, int(x2 - x1), bottom - top)
                box = box.pad(self.cfg.region_pad).clamp(image.width, image.height)
                regions.append(Region(RegionClass.STRING, box, 1.0))
        logger.debug(f"Profile detector found {len(regions)} text lines")
        return sort_regions(regions)

    def _column_blocks(self, active: np.ndarray) -> List[Tuple[int, int]]:
        blocks = []
        for start, end in _runs(active):
            if blocks and start - blocks[-1][1] < self.cfg.column_gap:
                blocks[-1] = (blocks[-1][0], end)
            else:
                blocks.append((start, end))
        return blocks


class ExternalRegionProvider(IRegionProvider):
    """
    Adapter for an out-of-process detector.

    The command receives the path of a PNG as its last argument and must
    print a JSON list of {"class", "bbox", "confidence"} objects.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0, single_flight: bool = True):
        if not command:
            raise ConfigurationError("external detector command is empty")
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock() if single_flight else None
        self.logger = get_logger(__name__)

    def detect(self, image: GrayImage) -> List[Region]:
        if self._lock is None:
            return self._run(image)
        with self._lock:
            return self._run(image)

    def _run(self, image: GrayImage) -> List[Region]:
        with tempfile.TemporaryDirectory(prefix="regions_") as tmp:
            png = write_image(Path(tmp) / "plate.png", image)
            try:
                result = subprocess.run(self.command + [str(png)], capture_output=True, text=True,
                                        timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise DetectorUnavailableError(f"external detector failed to run: {e}") from e
        if result.returncode != 0:
            raise DetectorUnavailableError(
                f"external detector exited with {result.returncode}: {result.stderr.strip()[:200]}")
        try:
            records = json.loads(result.stdout)
            regions = [Region.from_dict(r) for r in records]
        except (json.JSONDecodeError, InvalidArgumentError, TypeError) as e:
            raise DetectorUnavailableError(f"external detector returned malformed JSON: {e}") from e
        return sort_regions(regions)


def build_region_provider(cfg: PipelineConfig) -> IRegionProvider:
    """Provider selected by detector.provider."""
    detector = cfg.detector
    if detector.provider == "layout":
        return LayoutRegionProvider(load_layout_spec(cfg.resolve(detector.layout_path)))
    if detector.provider == "profile":
        return ProfileRegionProvider(detector)
    if detector.provider == "external":
        return ExternalRegionProvider(detector.external_command, detector.external_timeout, detector.single_flight)
    raise ConfigurationError(f"Unknown detector provider: {detector.provider}")


def detect_regions(img: GrayImage, provider: IRegionProvider,
                   min_confidence: Optional[float] = None) -> List[Region]:
    """Regions sorted top-to-bottom then left-to-right, below-threshold ones dropped."""
    regions = provider.detect(img)
    if min_confidence is not None:
        kept = [r for r in regions if r.confidence >= min_confidence]
        if len(kept) != len(regions):
            logger.info(f"Discarded {len(regions) - len(kept)} regions below confidence {min_confidence}")
        regions = kept
    return sort_regions(regions)


def crop_regions(img: GrayImage, regions: Sequence[Region]) -> List[Tuple[Region, GrayImage]]:
    """
    Copy each region out of the image. Boxes overshooting the bounds by at
    most CROP_TOLERANCE_PX are clamped with a warning; larger overshoots raise.
    """
    crops = []
    for region in regions:
        box = region.bbox
        clamped = box.clamp(img.width, img.height)
        if clamped.area == 0:
            raise InvalidArgumentError(f"region {box.to_list()} lies outside the {img.width}x{img.height} image")
        if clamped != box:
            overshoot = max(-box.x, -box.y, box.x2 - img.width, box.y2 - img.height)
            if overshoot > CROP_TOLERANCE_PX:
                raise InvalidArgumentError(f"region {box.to_list()} exceeds the {img.width}x{img.height} image "
                                           f"by {overshoot}px (tolerance {CROP_TOLERANCE_PX}px)")
            logger.warning(f"Region {box.to_list()} exceeds image bounds by {overshoot}px; clamped")
            region = region.with_bbox(clamped)
        crops.append((region, img.crop(region.bbox)))
    return crops

"""
Region and defect data models.

A LayoutSpec is the fixed engraving layout of one plate type; it is what
the layout provider returns and what the synthetic generator writes next
to every reference image.
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

from core.errors import ConfigurationError, InvalidArgumentError
from models.image import BBox

MAX_LAYOUT_IOU = 0.1


class RegionClass(Enum):
    """Classes a region provider can report."""
    STRING = "string"
    LOGO = "logo"
    DMC = "dmc"


class DefectStage(Enum):
    """Stage that localized a defect."""
    LOGO = "logo"
    CHARACTER = "character"
    STRING = "string"


@dataclass(frozen=True)
class Region:
    """Classed bounding box on a plate."""
    region_class: RegionClass
    bbox: BBox
    confidence: float = 1.0

    def __post_init__(self):
        if self.bbox.w < 1 or self.bbox.h < 1:
            raise InvalidArgumentError(f"region bbox must have w, h >= 1, got {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"region confidence must be in [0, 1], got {self.confidence}")

    def with_bbox(self, bbox: BBox) -> 'Region':
        return replace(self, bbox=bbox)

    def to_dict(self) -> dict:
        return {"class": self.region_class.value, "bbox": self.bbox.to_list(),
                "confidence": round(float(self.confidence), 6)}

    @classmethod
    def from_dict(cls, data: dict) -> 'Region':
        try:
            return cls(RegionClass(data["class"]), BBox(*[int(v) for v in data["bbox"]]),
                       float(data.get("confidence", 1.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidArgumentError(f"Malformed region record {data!r}: {e}") from e


def sort_regions(regions: List[Region]) -> List[Region]:
    """Top-to-bottom, then left-to-right."""
    return sorted(regions, key=lambda r: (r.bbox.y, r.bbox.x, r.bbox.h, r.bbox.w))


@dataclass
class LayoutSpec:
    """Fixed region layout for one plate type."""
    plate_type: str
    nominal_size: Tuple[int, int]
    regions: List[Region] = field(default_factory=list)

    def validate(self) -> 'LayoutSpec':
        w, h = self.nominal_size
        if w < 1 or h < 1:
            raise ConfigurationError(f"layout nominal_size must be positive, got {self.nominal_size}")
        for region in self.regions:
            if region.bbox.clamp(w, h) != region.bbox:
                raise ConfigurationError(f"layout region {region.bbox.to_list()} exceeds {w}x{h}")
        for i, a in enumerate(self.regions):
            for b in self.regions[i + 1:]:
                if a.bbox.iou(b.bbox) > MAX_LAYOUT_IOU:
                    raise ConfigurationError(
                        f"layout regions {a.bbox.to_list()} and {b.bbox.to_list()} overlap beyond IoU {MAX_LAYOUT_IOU}")
        return self

    def regions_of(self, region_class: RegionClass) -> List[Region]:
        return [r for r in sort_regions(self.regions) if r.region_class is region_class]

    def to_dict(self) -> dict:
        return {
            "plate_type": self.plate_type,
            "nominal_size": [int(self.nominal_size[0]), int(self.nominal_size[1])],
            "regions": [{"class": r.region_class.value, "bbox": r.bbox.to_list()} for r in self.regions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'LayoutSpec':
        try:
            size = tuple(int(v) for v in data["nominal_size"])
            regions = [Region.from_dict(r) for r in data.get("regions", [])]
            return cls(str(data["plate_type"]), size, regions).validate()
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Malformed layout spec: {e}") from e


def load_layout_spec(path: Union[str, Path]) -> LayoutSpec:
    path = Path(path)
    try:
        return LayoutSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError as e:
        raise ConfigurationError(f"Layout spec not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Layout spec is not valid JSON: {path}: {e}") from e


def save_layout_spec(path: Union[str, Path], spec: LayoutSpec) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class DefectBox:
    """Localized defect rectangle."""
    bbox: BBox
    area: int
    source_stage: DefectStage
    region_index: Optional[int] = None
    char_index: Optional[int] = None

    def offset(self, dx: int, dy: int) -> 'DefectBox':
        return replace(self, bbox=self.bbox.offset(dx, dy))

    def to_dict(self) -> dict:
        data = {"bbox": self.bbox.to_list(), "area": int(self.area), "source_stage": self.source_stage.value}
        if self.region_index is not None:
            data["region_index"] = int(self.region_index)
        if self.char_index is not None:
            data["char_index"] = int(self.char_index)
        return data

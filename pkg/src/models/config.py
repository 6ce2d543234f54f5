"""
Configuration data models.

Every section is a dataclass with a dict round trip; PipelineConfig reads
and writes the JSON file consumed by the CLI and validates it before any
image is processed.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

from core.errors import ConfigurationError


def _section(cls, data: Optional[dict]):
    """Build a dataclass section, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"Unknown keys in {cls.__name__}: {sorted(unknown)}")
    return cls(**data)


def _odd(value: int) -> bool:
    return value >= 1 and value % 2 == 1


@dataclass
class AlignmentConfig:
    """Feature detection, ratio-test matching and RANSAC parameters."""
    max_keypoints: int = 1000
    ratio: float = 0.75
    top_n: int = 200
    ransac_iters: int = 2000
    reproj_tol: float = 3.0
    seed: int = 0
    inlier_floor: float = 0.25
    min_inliers: int = 8
    working_width: Optional[int] = 960
    working_height: Optional[int] = 800
    patch_size: int = 16
    harris_block: int = 3
    harris_k: float = 0.04
    response_floor: float = 0.01  # fraction of the strongest corner response
    nms_radius: int = 4

    def validate(self):
        if not 0 < self.ratio < 1:
            raise ConfigurationError(f"alignment.ratio must be in (0, 1), got {self.ratio}")
        if self.max_keypoints < 4 or self.top_n < 4:
            raise ConfigurationError("alignment.max_keypoints and top_n must be >= 4")
        if self.ransac_iters < 1 or self.reproj_tol <= 0:
            raise ConfigurationError("alignment.ransac_iters must be >= 1 and reproj_tol > 0")
        if not 0 <= self.inlier_floor <= 1:
            raise ConfigurationError("alignment.inlier_floor must be in [0, 1]")
        if (self.working_width is None) != (self.working_height is None):
            raise ConfigurationError("alignment working size needs both width and height")
        if self.patch_size < 4 or self.patch_size % 2:
            raise ConfigurationError("alignment.patch_size must be even and >= 4")


@dataclass
class DetectorConfig:
    """Region provider selection and its parameters."""
    provider: str = "layout"  # layout | profile | external
    layout_path: Optional[str] = None
    external_command: List[str] = field(default_factory=list)
    external_timeout: float = 30.0
    single_flight: bool = True
    valley_fraction: float = 0.05
    min_row_height: int = 8
    column_gap: int = 60
    max_row_height: int = 120
    region_pad: int = 6
    margin: int = 0  # border band ignored by the profile detector

    def validate(self):
        if self.provider not in ("layout", "profile", "external"):
            raise ConfigurationError(f"Unknown detector provider: {self.provider}")
        if self.provider == "layout" and not self.layout_path:
            raise ConfigurationError("detector.layout_path is required for the layout provider")
        if self.provider == "external" and not self.external_command:
            raise ConfigurationError("detector.external_command is required for the external provider")
        if not 0 < self.valley_fraction < 1:
            raise ConfigurationError("detector.valley_fraction must be in (0, 1)")


@dataclass
class LogoCheckConfig:
    """Difference-pipeline parameters for logo inspection."""
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    diff_threshold: int = 40
    morph_structel: int = 3
    area_min: int = 30
    area_max: int = 10000
    size_tolerance: float = 0.05

    def validate(self):
        if not _odd(self.blur_kernel) or not _odd(self.morph_structel):
            raise ConfigurationError("logocheck.blur_kernel and morph_structel must be odd and >= 1")
        if not 1 <= self.diff_threshold <= 254:
            raise ConfigurationError(f"logocheck.diff_threshold must be in [1, 254], got {self.diff_threshold}")
        if not 0 <= self.area_min < self.area_max:
            raise ConfigurationError("logocheck.area_min must be < area_max")


@dataclass
class OcrConfig:
    """String preprocessing, segmentation and recognition backend."""
    background_kernel: int = 149
    background_sigma: Optional[float] = None  # defaults to kernel / 6
    close_structel: int = 3
    min_contrast: int = 10
    pad: int = 2
    min_component_area: int = 4
    backend: str = "template"  # template | external
    atlas_dir: Optional[str] = None
    template_size: int = 32
    external_command: List[str] = field(default_factory=list)
    external_timeout: float = 30.0
    single_line: bool = True

    @property
    def sigma(self) -> float:
        return self.background_sigma if self.background_sigma else self.background_kernel / 6.0

    def validate(self):
        if not _odd(self.background_kernel) or not _odd(self.close_structel):
            raise ConfigurationError("ocr.background_kernel and close_structel must be odd and >= 1")
        if self.pad < 0:
            raise ConfigurationError("ocr.pad must be >= 0")
        if self.backend not in ("template", "external"):
            raise ConfigurationError(f"Unknown OCR backend: {self.backend}")
        if self.backend == "template" and not self.atlas_dir:
            raise ConfigurationError("ocr.atlas_dir is required for the template backend")
        if self.backend == "external" and not self.external_command:
            raise ConfigurationError("ocr.external_command is required for the external backend")


@dataclass
class AnomalyThresholds:
    """Anomaly-mask thresholds; components with area >= area_min are defects."""
    mask_T: float = 0.5
    morph_structel: int = 3
    area_min: int = 10
    equalize_histogram: bool = False
    invert_input: bool = True
    traditional_threshold: Optional[float] = None

    def validate(self):
        if self.mask_T <= 0:
            raise ConfigurationError(f"anomaly.mask_T must be > 0, got {self.mask_T}")
        if self.area_min < 1:
            raise ConfigurationError(f"anomaly.area_min must be >= 1, got {self.area_min}")
        if not _odd(self.morph_structel):
            raise ConfigurationError("anomaly.morph_structel must be odd and >= 1")


@dataclass
class ModelPaths:
    """Files the pipeline loads at start-up."""
    vae_weights: Optional[str] = None
    perceptual_weights: Optional[str] = None


@dataclass
class PipelineConfig:
    """Complete inspection configuration."""
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    logocheck: LogoCheckConfig = field(default_factory=LogoCheckConfig)
    ocr: OcrConfig = field(default_factory=OcrConfig)
    anomaly: AnomalyThresholds = field(default_factory=AnomalyThresholds)
    models: ModelPaths = field(default_factory=ModelPaths)
    acceptance_confidence: float = 0.5
    base_dir: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Union[str, Path]] = None) -> 'PipelineConfig':
        data = dict(data)
        config = cls(
            alignment=_section(AlignmentConfig, data.pop("alignment", None)),
            detector=_section(DetectorConfig, data.pop("detector", None)),
            logocheck=_section(LogoCheckConfig, data.pop("logocheck", None)),
            ocr=_section(OcrConfig, data.pop("ocr", None)),
            anomaly=_section(AnomalyThresholds, data.pop("anomaly", None)),
            models=_section(ModelPaths, data.pop("models", None)),
            acceptance_confidence=float(data.pop("acceptance_confidence", 0.5)),
            base_dir=str(base_dir) if base_dir is not None else None,
        )
        if data:
            raise ConfigurationError(f"Unknown pipeline config keys: {sorted(data)}")
        return config

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("base_dir", None)
        return data

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'PipelineConfig':
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigurationError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file is not valid JSON: {path}: {e}") from e
        return cls.from_dict(data, base_dir=path.parent)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def resolve(self, relative: Optional[str]) -> Optional[Path]:
        """Resolve a config-relative path."""
        if relative is None:
            return None
        path = Path(relative)
        if not path.is_absolute() and self.base_dir is not None:
            path = Path(self.base_dir) / path
        return path

    def validate(self, check_files: bool = True) -> 'PipelineConfig':
        """Check every section; referenced files must exist."""
        for section in (self.alignment, self.detector, self.logocheck, self.ocr, self.anomaly):
            section.validate()
        if not 0 <= self.acceptance_confidence <= 1:
            raise ConfigurationError("acceptance_confidence must be in [0, 1]")
        if check_files:
            required = []
            if self.detector.provider == "layout":
                required.append(("detector.layout_path", self.detector.layout_path))
            if self.ocr.backend == "template":
                required.append(("ocr.atlas_dir", self.ocr.atlas_dir))
            required.append(("models.vae_weights", self.models.vae_weights))
            if self.models.perceptual_weights:
                required.append(("models.perceptual_weights", self.models.perceptual_weights))
            for name, value in required:
                if not value:
                    raise ConfigurationError(f"{name} is not set")
                if not self.resolve(value).exists():
                    raise ConfigurationError(f"{name} does not exist: {self.resolve(value)}")
        return self


@dataclass
class CorpusConfig:
    """Knobs for the synthetic corpus; defaults give the full-scale corpus."""
    seed: int = 0
    plates: int = 150
    defect_rate: float = 0.5
    train_clean_chars: int = 2957
    train_defect_per_glyph: int = 10
    val_chars: int = 206
    test_clean_chars: int = 250
    test_defect_chars: int = 250
    logo_pairs: int = 60
    noise_sigma: float = 2.0
    gammas: List[float] = field(default_factory=lambda: [0.7, 1.0, 1.4])
    max_rotation_deg: float = 1.5
    max_shift_px: float = 12.0
    flip_probability: float = 0.1
    workers: int = 1

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'CorpusConfig':
        return _section(cls, data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.plates < 1:
            raise ConfigurationError("plates must be >= 1")
        if not 0 <= self.defect_rate <= 1:
            raise ConfigurationError("defect_rate must be in [0, 1]")
        if any(g <= 0 for g in self.gammas):
            raise ConfigurationError("lighting gammas must be > 0")
        return self

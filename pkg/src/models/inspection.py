"""
Inspection result data models.

InspectionReport is what `inspect` returns and what the CLI writes as
JSON. Stage diagnostics are kept in execution order so a reader can see
exactly where a plate left the decision flow.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

from core.errors import InvalidArgumentError
from models.image import BBox
from models.regions import DefectBox

REPORT_VERSION = 1


class Verdict(Enum):
    """Final plate classification."""
    ACCEPTABLE = "acceptable"
    DEFECTIVE = "defective"
    DEFECTIVE_UNVERIFIABLE = "defective_unverifiable"

    @property
    def exit_code(self) -> int:
        return {Verdict.ACCEPTABLE: 0, Verdict.DEFECTIVE: 1, Verdict.DEFECTIVE_UNVERIFIABLE: 2}[self]


class CheckVerdict(Enum):
    """Outcome of a single logo or character check."""
    OK = "ok"
    DEFECTIVE = "defective"


class Stage(Enum):
    """Pipeline stages in execution order."""
    ALIGNMENT = "alignment"
    LOGO = "logo"
    STRING_MATCH = "string_match"
    CHAR_ANOMALY = "char_anomaly"


STAGE_ORDER = list(Stage)


@dataclass(frozen=True)
class CharBox:
    """Padded character box in string-crop coordinates."""
    bbox: BBox
    pad: int

    def to_dict(self) -> dict:
        return {"bbox": self.bbox.to_list(), "pad": int(self.pad)}


@dataclass
class RecognizedString:
    """Recognizer output for one string region."""
    text: str
    per_char_confidence: List[float] = field(default_factory=list)
    char_boxes: List[CharBox] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.text) == len(self.per_char_confidence) == len(self.char_boxes):
            raise ValueError(
                f"text ({len(self.text)}), confidences ({len(self.per_char_confidence)}) and "
                f"boxes ({len(self.char_boxes)}) must have equal length")

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "per_char_confidence": [round(float(c), 6) for c in self.per_char_confidence],
            "char_boxes": [b.to_dict() for b in self.char_boxes],
        }


@dataclass(frozen=True)
class StringVerification:
    """Recognized text compared with its expected MES value."""
    expected: str
    recognized: str
    edit_distance: int

    @property
    def verdict(self) -> str:
        return "match" if self.edit_distance == 0 else "mismatch"

    def to_dict(self) -> dict:
        return {"expected": self.expected, "recognized": self.recognized,
                "edit_distance": int(self.edit_distance), "verdict": self.verdict}


@dataclass
class StageResult:
    """Diagnostics of one executed stage."""
    stage: Stage
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "passed": self.passed, "details": self.details}


@dataclass
class InspectionReport:
    """Per-plate inspection outcome."""
    serial: str
    verdict: Verdict = Verdict.ACCEPTABLE
    failed_stage: Optional[Stage] = None
    stages: List[StageResult] = field(default_factory=list)
    defects: List[DefectBox] = field(default_factory=list)
    message: Optional[str] = None
    timings_ms: Dict[str, float] = field(default_factory=dict)

    def stage(self, stage: Stage) -> Optional[StageResult]:
        for result in self.stages:
            if result.stage is stage:
                return result
        return None

    def ran(self, stage: Stage) -> bool:
        return self.stage(stage) is not None

    def check_invariants(self):
        """Raise InvalidArgumentError when the report contradicts itself."""
        if self.verdict is Verdict.ACCEPTABLE:
            if self.failed_stage is not None or self.defects:
                raise InvalidArgumentError("acceptable report carries a failed stage or defects")
            if not all(s.passed for s in self.stages):
                raise InvalidArgumentError("acceptable report contains a failed stage result")
        elif self.failed_stage is None:
            raise InvalidArgumentError(f"{self.verdict.value} report has no failed stage")
        order = [STAGE_ORDER.index(s.stage) for s in self.stages]
        if order != sorted(order):
            raise InvalidArgumentError("stages out of order")

    def to_dict(self, include_timings: bool = False) -> dict:
        data = {
            "report_version": REPORT_VERSION,
            "serial": self.serial,
            "verdict": self.verdict.value,
            "failed_stage": self.failed_stage.value if self.failed_stage else None,
            "stages": [s.to_dict() for s in self.stages],
            "defects": [d.to_dict() for d in self.defects],
        }
        if self.message:
            data["message"] = self.message
        if include_timings:
            data["timings_ms"] = {k: round(v, 3) for k, v in self.timings_ms.items()}
        return data

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=False) + "\n"

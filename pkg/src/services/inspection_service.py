"""
Nameplate inspection decision flow.

Stages run in a fixed order: alignment (which also places the regions in
the captured frame), logo check, string reading against the MES record,
per-character anomaly check.
The first failing stage decides the verdict and the remaining stages
are not run. Plates that cannot be aligned, or whose strings cannot be
paired with the MES record, are reported as defective_unverifiable.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from core.base import IOcrBackend, IReconstructor, IRegionProvider
from core.errors import (AlignmentFailedError, BackendUnavailableError, DetectorUnavailableError,
                         InvalidArgumentError)
from core.events import Event, EventType, event_bus
from models.config import PipelineConfig
from models.geometry import Homography
from models.image import BBox, GrayImage
from models.inspection import (CheckVerdict, InspectionReport, RecognizedString, Stage, StageResult,
                               Verdict)
from models.regions import DefectBox, DefectStage, LayoutSpec, Region, RegionClass, load_layout_spec, sort_regions
from services.alignment_service import AlignmentService, transfer_regions
from services.anomaly_service import AnomalyService
from services.logo_service import compare_logos
from services.model_service import load_model
from services.ocr_service import build_ocr_backend, load_mes_lookup, read_string, verify_strings
from services.region_service import LayoutRegionProvider, build_region_provider, detect_regions
from utils.image_io import read_image, write_image
from utils.image_processing import draw_rectangle
from utils.logging_config import get_logger

logger = get_logger(__name__)

FIXED_CLASSES = (RegionClass.LOGO, RegionClass.DMC)
OVERLAY_VALUE = 255
OVERLAY_THICKNESS = 2


class _Recorder:
    """Appends stage results to a report, timing them and publishing stage events."""

    def __init__(self, report: InspectionReport):
        self.report = report

    @contextmanager
    def stage(self, stage: Stage) -> Iterator[StageResult]:
        event_bus.publish(Event(EventType.STAGE_STARTED,
                                data={"serial": self.report.serial, "stage": stage.value}, source="pipeline"))
        result = StageResult(stage, True)
        start = time.perf_counter()
        try:
            yield result
        finally:
            self.report.timings_ms[stage.value] = (time.perf_counter() - start) * 1000.0
        self.report.stages.append(result)
        logger.info(f"{self.report.serial}: {stage.value} {'passed' if result.passed else 'failed'}")
        event_bus.publish(Event(EventType.STAGE_COMPLETED, data=result, source="pipeline"))

    def fail(self, result: StageResult, verdict: Verdict, message: str,
             defects: Sequence[DefectBox] = ()):
        result.passed = False
        self.report.verdict = verdict
        self.report.failed_stage = result.stage
        self.report.message = message
        self.report.defects = list(defects)


def _regions_for(captured: GrayImage, reference: GrayImage, h: Homography, provider: IRegionProvider,
                 layout: Optional[LayoutSpec], min_confidence: float) -> List[Region]:
    """
    Captured-frame regions. Layout boxes are mapped through the alignment;
    other providers run on the captured image and the layout only supplies
    the logo and DMC boxes they did not report.
    """
    if isinstance(provider, LayoutRegionProvider):
        ref_regions = detect_regions(reference, provider, min_confidence)
        return sort_regions(transfer_regions(ref_regions, h, captured.width, captured.height))

    regions = detect_regions(captured, provider, min_confidence)
    reported = {r.region_class for r in regions}
    if layout is not None:
        fixed = [r for r in LayoutRegionProvider(layout).detect(reference)
                 if r.region_class in FIXED_CLASSES and r.region_class not in reported]
        regions += transfer_regions(fixed, h, captured.width, captured.height)
    return sort_regions(regions)


def _mismatch_defects(region: Region, region_index: int, recognized: RecognizedString,
                      expected: str) -> List[DefectBox]:
    """Character boxes of substituted positions; the whole region when lengths differ."""
    ox, oy = region.bbox.x, region.bbox.y
    if len(recognized.text) == len(expected):
        return [DefectBox(box.bbox.offset(ox, oy), box.bbox.area, DefectStage.STRING, region_index, j)
                for j, (box, got, want) in enumerate(zip(recognized.char_boxes, recognized.text, expected))
                if got != want]
    return [DefectBox(region.bbox, region.bbox.area, DefectStage.STRING, region_index)]


def inspect(captured: GrayImage, reference: GrayImage, expected: Sequence[str], cfg: PipelineConfig,
            serial: str = "plate", provider: Optional[IRegionProvider] = None,
            backend: Optional[IOcrBackend] = None, reconstructor: Optional[IReconstructor] = None,
            layout: Optional[LayoutSpec] = None, aligner: Optional[AlignmentService] = None) -> InspectionReport:
    """
    Run the decision flow on one captured plate.

    Collaborators not passed in are built from cfg. Defect boxes in the
    report are in captured-image coordinates.
    """
    started = time.perf_counter()
    aligner = aligner or AlignmentService(cfg.alignment)
    provider = provider or build_region_provider(cfg)
    backend = backend or build_ocr_backend(cfg)
    if reconstructor is None:
        reconstructor = load_model(cfg.resolve(cfg.models.vae_weights))
    if layout is None and cfg.detector.layout_path:
        layout = load_layout_spec(cfg.resolve(cfg.detector.layout_path))

    report = InspectionReport(serial)
    recorder = _Recorder(report)
    try:
        _run_stages(recorder, captured, reference, list(expected), cfg, provider, backend, reconstructor,
                    layout, aligner)
    finally:
        report.timings_ms["total"] = (time.perf_counter() - started) * 1000.0
    report.check_invariants()
    logger.info(f"{serial}: {report.verdict.value}"
                + (f" at {report.failed_stage.value}" if report.failed_stage else ""))
    event_bus.publish(Event(EventType.PLATE_INSPECTED, data=report, source="pipeline"))
    return report


def _run_stages(recorder: _Recorder, captured: GrayImage, reference: GrayImage, expected: List[str],
                cfg: PipelineConfig, provider: IRegionProvider, backend: IOcrBackend,
                reconstructor: IReconstructor, layout: Optional[LayoutSpec], aligner: AlignmentService):
    with recorder.stage(Stage.ALIGNMENT) as result:
        try:
            aligned, h, diagnostics = aligner.align(reference, captured)
            result.details = {**diagnostics.to_dict(), "homography": h.to_list()}
        except AlignmentFailedError as e:
            result.details = {"matches": e.matches, "inlier_ratio": round(e.inlier_ratio, 6)}
            recorder.fail(result, Verdict.DEFECTIVE_UNVERIFIABLE, f"alignment failed: {e}")
        else:
            # Regions are placed in the captured frame as part of registration
            try:
                regions = _regions_for(captured, reference, h, provider, layout, cfg.acceptance_confidence)
                result.details["regions"] = [r.to_dict() for r in regions]
            except DetectorUnavailableError as e:
                result.details["regions"] = []
                recorder.fail(result, Verdict.DEFECTIVE_UNVERIFIABLE, f"region detection failed: {e}")
    if not result.passed:
        return

    indexed = list(enumerate(regions))
    logos = [(i, r) for i, r in indexed if r.region_class is RegionClass.LOGO]
    strings = [(i, r) for i, r in indexed if r.region_class is RegionClass.STRING]

    with recorder.stage(Stage.LOGO) as result:
        defects, checks = [], []
        for index, region in logos:
            verdict, found = compare_logos(aligned.crop(region.bbox), captured.crop(region.bbox), cfg.logocheck)
            checks.append({"region_index": index, "verdict": verdict.value, "defects": len(found)})
            defects += [replace(d.offset(region.bbox.x, region.bbox.y), region_index=index) for d in found]
        if not logos:
            logger.warning(f"{recorder.report.serial}: no logo region to check")
        result.details = {"logos": checks}
        if defects:
            recorder.fail(result, Verdict.DEFECTIVE, f"{len(defects)} logo defect(s)", defects)
    if not result.passed:
        return

    with recorder.stage(Stage.STRING_MATCH) as result:
        recognized: List[RecognizedString] = []
        if len(strings) != len(expected):
            result.details = {"regions": len(strings), "expected": len(expected)}
            recorder.fail(result, Verdict.DEFECTIVE_UNVERIFIABLE,
                          f"{len(strings)} string regions cannot be paired with {len(expected)} MES strings")
        else:
            try:
                recognized = [read_string(captured.crop(r.bbox), cfg.ocr, backend)[0] for _, r in strings]
            except BackendUnavailableError as e:
                recorder.fail(result, Verdict.DEFECTIVE_UNVERIFIABLE, f"OCR backend failed: {e}")
            else:
                verifications, wer, cer = verify_strings(recognized, expected)
                result.details = {
                    "strings": [{"region_index": i, **v.to_dict(), "read": rec.to_dict()}
                                for (i, _), v, rec in zip(strings, verifications, recognized)],
                    "wer": round(wer, 6),
                    "cer": round(cer, 6),
                }
                defects = []
                for (i, region), v, rec in zip(strings, verifications, recognized):
                    if v.edit_distance:
                        defects += _mismatch_defects(region, i, rec, v.expected)
                if defects:
                    mismatched = sum(1 for v in verifications if v.edit_distance)
                    recorder.fail(result, Verdict.DEFECTIVE,
                                  f"{mismatched} string(s) differ from the MES record", defects)
    if not result.passed:
        return

    with recorder.stage(Stage.CHAR_ANOMALY) as result:
        crops, origins = [], []
        for (index, region), rec in zip(strings, recognized):
            for j, box in enumerate(rec.char_boxes):
                char_box = box.bbox.offset(region.bbox.x, region.bbox.y).clamp(captured.width, captured.height)
                if char_box.area == 0:
                    continue
                crops.append(captured.crop(char_box))
                origins.append((index, j, char_box))
        checks = AnomalyService(reconstructor, cfg.anomaly).check(crops)
        defects = []
        flagged = 0
        for (verdict, found, _), (index, j, char_box) in zip(checks, origins):
            if verdict is CheckVerdict.DEFECTIVE:
                flagged += 1
            defects += [replace(d.offset(char_box.x, char_box.y), region_index=index, char_index=j) for d in found]
        result.details = {"characters": len(crops), "flagged": flagged}
        if defects:
            recorder.fail(result, Verdict.DEFECTIVE, f"{flagged} character(s) with anomalies", defects)


def annotate(report: InspectionReport, captured: GrayImage) -> Tuple[GrayImage, List[dict]]:
    """Overlay with one 2 px max-intensity rectangle per defect, and the defect list for the sidecar."""
    overlay = captured
    for defect in report.defects:
        overlay = draw_rectangle(overlay, defect.bbox, OVERLAY_VALUE, OVERLAY_THICKNESS)
    return overlay, [d.to_dict() for d in report.defects]


def write_annotation(report: InspectionReport, captured: GrayImage, overlay_path: Union[str, Path],
                     sidecar_path: Optional[Union[str, Path]] = None) -> Tuple[Path, Path]:
    overlay, boxes = annotate(report, captured)
    overlay_path = write_image(overlay_path, overlay)
    sidecar_path = Path(sidecar_path) if sidecar_path else overlay_path.with_suffix(".json")
    sidecar_path.write_text(json.dumps(boxes, indent=2) + "\n", encoding="utf-8")
    return overlay_path, sidecar_path


def write_report(report: InspectionReport, path: Union[str, Path], include_timings: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(include_timings), encoding="utf-8")
    return path


class InspectionService:
    """
    Holds everything one inspection needs so plates can be inspected
    repeatedly, or from several threads, against the same models.
    """

    def __init__(self, cfg: PipelineConfig, reconstructor: Optional[IReconstructor] = None,
                 provider: Optional[IRegionProvider] = None, backend: Optional[IOcrBackend] = None):
        self.cfg = cfg.validate(check_files=reconstructor is None)
        self.logger = get_logger(__name__)
        self.aligner = AlignmentService(cfg.alignment)
        self.provider = provider or build_region_provider(cfg)
        self.backend = backend or build_ocr_backend(cfg)
        self.reconstructor = reconstructor or load_model(cfg.resolve(cfg.models.vae_weights))
        self.layout = load_layout_spec(cfg.resolve(cfg.detector.layout_path)) if cfg.detector.layout_path else None
        self._references: Dict[Path, GrayImage] = {}
        self.logger.info(f"Inspection service ready (detector {cfg.detector.provider}, OCR {cfg.ocr.backend})")

    def reference(self, path: Union[str, Path]) -> GrayImage:
        path = Path(path)
        if path not in self._references:
            self._references[path] = read_image(path)
        return self._references[path]

    def inspect(self, captured: GrayImage, reference: GrayImage, expected: Sequence[str],
                serial: str = "plate") -> InspectionReport:
        if not isinstance(captured, GrayImage) or not isinstance(reference, GrayImage):
            raise InvalidArgumentError("captured and reference must be grayscale images")
        return inspect(captured, reference, expected, self.cfg, serial, self.provider, self.backend,
                       self.reconstructor, self.layout, self.aligner)

    def inspect_files(self, captured_path: Union[str, Path], reference_path: Union[str, Path],
                      mes_path: Union[str, Path], serial: Optional[str] = None) -> Tuple[InspectionReport, GrayImage]:
        """Read the inputs, look the serial up in the MES file and inspect; returns the report and captured image."""
        serial = serial or Path(captured_path).stem
        captured = read_image(captured_path)
        expected = load_mes_lookup(mes_path, serial)
        return self.inspect(captured, self.reference(reference_path), expected, serial), captured

import json

import numpy as np
import pytest

from conftest import PLATE_STRINGS, ConstantReconstructor, IdentityReconstructor
from core.base import IRegionProvider
from core.errors import DetectorUnavailableError, InvalidArgumentError
from core.events import Event, EventType, event_bus
from models.image import BBox, GrayImage
from models.inspection import STAGE_ORDER, InspectionReport, Stage, StageResult, Verdict
from models.regions import DefectBox, DefectStage, RegionClass, save_layout_spec
from services.defect_injector import DefectKind, DefectRecipe
from services.inspection_service import InspectionService, annotate, inspect, write_annotation, write_report
from services.plate_generator import LOGO_BOX, PlatePose, render_nameplate
from services.region_service import LayoutRegionProvider
from utils.image_io import write_image


@pytest.fixture(scope="module")
def clean_plate(blueprint):
    return render_nameplate(blueprint, noise_sigma=2.0, seed=1)[0]


@pytest.fixture
def run(pipeline_config, reference, layout, ocr_backend):
    """Inspect a captured plate with injected collaborators."""
    def _run(captured, expected=PLATE_STRINGS, reconstructor=None, serial="NP-TEST"):
        return inspect(captured, reference, list(expected), pipeline_config, serial,
                       provider=LayoutRegionProvider(layout), backend=ocr_backend,
                       reconstructor=reconstructor or IdentityReconstructor(), layout=layout)
    return _run


def _stages(report):
    return [s.stage for s in report.stages]


def test_clean_plate_is_acceptable(run, clean_plate):
    report = run(clean_plate)
    assert report.verdict is Verdict.ACCEPTABLE
    assert report.failed_stage is None and report.defects == []
    assert _stages(report) == STAGE_ORDER
    strings = report.stage(Stage.STRING_MATCH).details["strings"]
    assert [s["recognized"] for s in strings] == PLATE_STRINGS
    assert report.stage(Stage.STRING_MATCH).details["wer"] == 0.0
    assert report.stage(Stage.CHAR_ANOMALY).details == {"characters": sum(map(len, PLATE_STRINGS)), "flagged": 0}
    assert report.verdict.exit_code == 0


def test_posed_clean_plate_is_acceptable(run, blueprint):
    captured, _ = render_nameplate(blueprint, pose=PlatePose(0.5, 5.0, -3.0), noise_sigma=2.0, seed=2)
    report = run(captured)
    assert report.verdict is Verdict.ACCEPTABLE, report.message


def test_logo_defect_stops_at_logo(run, blueprint):
    captured, truth = render_nameplate(blueprint, [(0, DefectRecipe(DefectKind.OCCLUSION_BLOB, 0.05, seed=1))],
                                       noise_sigma=2.0, seed=1)
    report = run(captured)
    assert report.verdict is Verdict.DEFECTIVE
    assert report.failed_stage is Stage.LOGO
    assert _stages(report) == [Stage.ALIGNMENT, Stage.LOGO]
    assert not report.ran(Stage.STRING_MATCH) and not report.ran(Stage.CHAR_ANOMALY)
    assert report.defects
    planted = truth.defects[0].bbox
    for defect in report.defects:
        assert defect.source_stage is DefectStage.LOGO
        assert defect.region_index == 0
        assert LOGO_BOX.contains_box(defect.bbox)
        assert defect.bbox.iou(planted) > 0
    assert report.verdict.exit_code == 1


def test_string_mismatch_fails_string_match(run, clean_plate):
    expected = list(PLATE_STRINGS)
    expected[0] = "0123456780"
    report = run(clean_plate, expected)
    assert report.verdict is Verdict.DEFECTIVE
    assert report.failed_stage is Stage.STRING_MATCH
    assert not report.ran(Stage.CHAR_ANOMALY)
    first = report.stage(Stage.STRING_MATCH).details["strings"][0]
    assert first["edit_distance"] == 1 and first["verdict"] == "mismatch"
    (defect,) = report.defects
    assert defect.source_stage is DefectStage.STRING
    assert (defect.region_index, defect.char_index) == (2, 9)


def test_unpaired_mes_record_is_unverifiable(run, clean_plate):
    report = run(clean_plate, PLATE_STRINGS[:5])
    assert report.verdict is Verdict.DEFECTIVE_UNVERIFIABLE
    assert report.failed_stage is Stage.STRING_MATCH
    assert report.stage(Stage.STRING_MATCH).details == {"regions": 6, "expected": 5}


def test_unalignable_plate_is_unverifiable(run):
    report = run(GrayImage.filled(1920, 1600, 30))
    assert report.verdict is Verdict.DEFECTIVE_UNVERIFIABLE
    assert report.failed_stage is Stage.ALIGNMENT
    assert _stages(report) == [Stage.ALIGNMENT]
    assert report.stage(Stage.ALIGNMENT).details["matches"] == 0
    assert report.verdict.exit_code == 2


REPORTED_STAGES = {None, "alignment", "logo", "string_match", "char_anomaly"}


class _OfflineDetector(IRegionProvider):
    def detect(self, image):
        raise DetectorUnavailableError("detector service not reachable")


class _BlindDetector(IRegionProvider):
    def detect(self, image):
        return []


def test_detector_failure_is_unverifiable_at_alignment(pipeline_config, reference, layout, ocr_backend, clean_plate):
    report = inspect(clean_plate, reference, PLATE_STRINGS, pipeline_config, "NP-OFFLINE", provider=_OfflineDetector(),
                     backend=ocr_backend, reconstructor=IdentityReconstructor(), layout=layout)
    assert report.verdict is Verdict.DEFECTIVE_UNVERIFIABLE
    assert report.failed_stage is Stage.ALIGNMENT
    assert _stages(report) == [Stage.ALIGNMENT]
    assert report.stage(Stage.ALIGNMENT).details["regions"] == []
    assert "detector service not reachable" in report.message
    data = report.to_dict()
    assert data["failed_stage"] in REPORTED_STAGES
    assert [s["stage"] for s in data["stages"]] == ["alignment"]
    assert report.verdict.exit_code == 2


def test_detector_without_regions_is_unverifiable(pipeline_config, reference, layout, ocr_backend, clean_plate):
    report = inspect(clean_plate, reference, PLATE_STRINGS, pipeline_config, "NP-BLIND", provider=_BlindDetector(),
                     backend=ocr_backend, reconstructor=IdentityReconstructor(), layout=layout)
    assert _stages(report) == [Stage.ALIGNMENT, Stage.LOGO, Stage.STRING_MATCH]
    assert report.verdict is Verdict.DEFECTIVE_UNVERIFIABLE
    assert report.failed_stage is Stage.STRING_MATCH
    assert report.to_dict()["failed_stage"] in REPORTED_STAGES


def test_reported_stages_stay_in_vocabulary(run, clean_plate):
    captured = [clean_plate, GrayImage.filled(1920, 1600, 30)]
    reports = [run(c) for c in captured] + [run(clean_plate, reconstructor=ConstantReconstructor(-1.0))]
    assert {s.value for s in Stage} == REPORTED_STAGES - {None}
    for report in reports:
        data = report.to_dict()
        assert data["failed_stage"] in REPORTED_STAGES
        assert {s["stage"] for s in data["stages"]} <= REPORTED_STAGES


def test_contradictory_reports_are_rejected():
    with pytest.raises(InvalidArgumentError):
        InspectionReport("NP-1", Verdict.DEFECTIVE).check_invariants()
    with pytest.raises(InvalidArgumentError):
        InspectionReport("NP-1", failed_stage=Stage.LOGO).check_invariants()
    box = DefectBox(BBox(0, 0, 4, 4), 16, DefectStage.LOGO)
    with pytest.raises(InvalidArgumentError):
        InspectionReport("NP-1", defects=[box]).check_invariants()
    with pytest.raises(InvalidArgumentError):
        InspectionReport("NP-1", stages=[StageResult(Stage.LOGO, False)]).check_invariants()
    out_of_order = [StageResult(Stage.LOGO, True), StageResult(Stage.ALIGNMENT, False)]
    with pytest.raises(InvalidArgumentError):
        InspectionReport("NP-1", Verdict.DEFECTIVE_UNVERIFIABLE, Stage.ALIGNMENT, out_of_order).check_invariants()
    InspectionReport("NP-1", Verdict.DEFECTIVE, Stage.LOGO, [StageResult(Stage.ALIGNMENT, True),
                                                             StageResult(Stage.LOGO, False)], [box]).check_invariants()


def test_character_anomalies_fail_last_stage(run, clean_plate):
    report = run(clean_plate, reconstructor=ConstantReconstructor(-1.0))
    assert report.verdict is Verdict.DEFECTIVE
    assert report.failed_stage is Stage.CHAR_ANOMALY
    assert _stages(report) == STAGE_ORDER
    assert report.stage(Stage.CHAR_ANOMALY).details["flagged"] == sum(map(len, PLATE_STRINGS))
    for defect in report.defects:
        assert defect.source_stage is DefectStage.CHARACTER
        assert 2 <= defect.region_index <= 7
        assert defect.char_index is not None


def test_stage_events_follow_execution_order(run, clean_plate):
    started, completed, inspected = [], [], []
    event_bus.subscribe(EventType.STAGE_STARTED, lambda e: started.append(e.data["stage"]))
    event_bus.subscribe(EventType.STAGE_COMPLETED, lambda e: completed.append(e.data.stage))
    event_bus.subscribe(EventType.PLATE_INSPECTED, lambda e: inspected.append(e.data.serial))
    run(clean_plate)
    assert started == [s.value for s in STAGE_ORDER]
    assert completed == STAGE_ORDER
    assert inspected == ["NP-TEST"]


def test_event_bus_scoped_subscription_and_failing_callbacks():
    seen = []

    def broken(event):
        raise RuntimeError("listener bug")

    event_bus.subscribe(EventType.PLATE_INSPECTED, broken)
    with event_bus.subscribed(EventType.PLATE_INSPECTED, seen.append):
        assert event_bus.subscriber_count(EventType.PLATE_INSPECTED) == 2
        event_bus.publish(Event(EventType.PLATE_INSPECTED, "NP1", source="test"))
    event_bus.publish(Event(EventType.PLATE_INSPECTED, "NP2", source="test"))
    assert [e.data for e in seen] == ["NP1"]
    assert event_bus.subscriber_count(EventType.PLATE_INSPECTED) == 1


def test_inspection_is_deterministic(run, clean_plate):
    assert run(clean_plate).to_dict() == run(clean_plate).to_dict()


def test_report_json(run, clean_plate, tmp_path):
    report = run(clean_plate)
    data = json.loads(write_report(report, tmp_path / "r.json").read_text(encoding="utf-8"))
    assert data["verdict"] == "acceptable" and data["serial"] == "NP-TEST"
    assert [s["stage"] for s in data["stages"]] == [s.value for s in STAGE_ORDER]
    assert "timings_ms" not in data
    timed = json.loads(write_report(report, tmp_path / "t.json", include_timings=True).read_text(encoding="utf-8"))
    assert set(timed["timings_ms"]) == {s.value for s in STAGE_ORDER} | {"total"}


def test_annotate_draws_defect_boxes(run, blueprint, tmp_path):
    captured, _ = render_nameplate(blueprint, [(0, DefectRecipe(DefectKind.OCCLUSION_BLOB, 0.05, seed=1))])
    report = run(captured)
    overlay, boxes = annotate(report, captured)
    assert len(boxes) == len(report.defects) > 0
    box = report.defects[0].bbox
    assert overlay.pixels[box.y, box.x] == 255
    assert overlay.pixels[box.y + box.h - 1, box.x + box.w - 1] == 255

    overlay_path, sidecar = write_annotation(report, captured, tmp_path / "overlay.png")
    assert overlay_path.is_file()
    assert json.loads(sidecar.read_text(encoding="utf-8")) == boxes


def test_annotate_clean_plate_is_unchanged(run, clean_plate):
    overlay, boxes = annotate(run(clean_plate), clean_plate)
    assert overlay == clean_plate and boxes == []


def _service(pipeline_config, layout, ocr_backend, reconstructor=None):
    save_layout_spec(pipeline_config.resolve(pipeline_config.detector.layout_path), layout)
    return InspectionService(pipeline_config, reconstructor=reconstructor or IdentityReconstructor(),
                             provider=LayoutRegionProvider(layout), backend=ocr_backend)


def test_inspection_service_from_files(pipeline_config, layout, ocr_backend, reference, clean_plate, tmp_path):
    service = _service(pipeline_config, layout, ocr_backend)
    write_image(tmp_path / "NP7.png", clean_plate)
    write_image(tmp_path / "reference.png", reference)
    (tmp_path / "mes.json").write_text(json.dumps({"NP7": {"strings": PLATE_STRINGS}}), encoding="utf-8")

    report, captured = service.inspect_files(tmp_path / "NP7.png", tmp_path / "reference.png", tmp_path / "mes.json")
    assert report.serial == "NP7"
    assert report.verdict is Verdict.ACCEPTABLE
    assert captured == clean_plate
    assert service.reference(tmp_path / "reference.png") is service.reference(tmp_path / "reference.png")


def test_inspection_service_rejects_non_images(pipeline_config, layout, ocr_backend, reference):
    service = _service(pipeline_config, layout, ocr_backend)
    with pytest.raises(InvalidArgumentError):
        service.inspect(np.zeros((1600, 1920), dtype=np.uint8), reference, PLATE_STRINGS)


def test_layout_regions_follow_the_plate(run, blueprint, layout):
    pose = PlatePose(1.0, 12.0, -8.0)
    captured, truth = render_nameplate(blueprint, pose=pose, noise_sigma=2.0, seed=3)
    report = run(captured)
    regions = report.stage(Stage.ALIGNMENT).details["regions"]
    assert len(regions) == len(layout.regions)
    assert regions[0]["class"] == RegionClass.LOGO.value
    for detected, planted in zip(regions, truth.regions):
        x, y, w, h = detected["bbox"]
        cx, cy = planted.bbox.x + planted.bbox.w / 2, planted.bbox.y + planted.bbox.h / 2
        assert abs(x + w / 2 - cx) < 6 and abs(y + h / 2 - cy) < 6

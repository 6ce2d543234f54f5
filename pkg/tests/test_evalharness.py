import json
import logging

import pytest

from conftest import PLATE_STRINGS
from core.errors import InspectionError, InvalidArgumentError
from main import EXIT_OPERATIONAL, main
from models.config import CorpusConfig, PipelineConfig
from models.image import GrayImage
from models.inspection import InspectionReport, Stage, StageResult, Verdict
from models.metrics import ConfusionCounts, classification_metrics
from models.regions import save_layout_spec
from services.evaluation_service import (PLATE_COLUMNS, roc_auc, run_benchmark, string_error_rates,
                                         write_benchmark)
from services.model_service import save_model
from services.ocr_service import GlyphAtlas
from services.plate_generator import default_pipeline_config, generate_plate_corpus, render_nameplate
from utils.image_io import read_image, write_image
from utils.logging_config import parse_level, setup_logging
from utils.manifest import write_manifest


# ---------------------------------------------------------------- metrics

def test_metrics_of_benchmark_counts():
    metrics = classification_metrics(ConfusionCounts(tp=75, fp=13, fn=0, tn=62))
    assert metrics["accuracy"] == pytest.approx(0.9133, abs=1e-4)
    assert metrics["precision"] == pytest.approx(0.8523, abs=1e-4)
    assert metrics["recall"] == 1.0
    assert metrics["f1"] == pytest.approx(0.9205, abs=1e-4)


def test_metrics_balanced_counts():
    metrics = classification_metrics(ConfusionCounts(1, 1, 1, 1))
    assert metrics == {"accuracy": 0.5, "precision": 0.5, "recall": 0.5, "f1": 0.5}


def test_undefined_metrics_are_none():
    metrics = classification_metrics(ConfusionCounts(tn=10))
    assert metrics["accuracy"] == 1.0
    assert metrics["precision"] is None and metrics["recall"] is None and metrics["f1"] is None
    with pytest.raises(InvalidArgumentError):
        classification_metrics(ConfusionCounts())
    with pytest.raises(InvalidArgumentError):
        ConfusionCounts(tp=-1)


def test_counts_from_predictions():
    counts = ConfusionCounts.from_predictions([True, True, False, False, True], [True, False, True, False, True])
    assert counts == ConfusionCounts(tp=2, fp=1, fn=1, tn=1)
    assert counts + counts == ConfusionCounts(4, 2, 2, 2)


# ---------------------------------------------------------------- ROC AUC

def test_roc_auc_separable():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [False, False, True, True]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [False, False, True, True]) == 0.0


def test_roc_auc_random_is_chance(rng):
    assert roc_auc(rng.random(5000), rng.random(5000) < 0.5) == pytest.approx(0.5, abs=0.02)


def _mann_whitney(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_roc_auc_matches_pairwise_count(rng):
    for _ in range(100):
        n = int(rng.integers(4, 30))
        scores = rng.integers(0, 6, size=n).astype(float)
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        assert roc_auc(scores, labels) == pytest.approx(_mann_whitney(scores, labels))


def test_roc_auc_errors():
    with pytest.raises(InvalidArgumentError):
        roc_auc([0.1, 0.2], [True, True])
    with pytest.raises(InvalidArgumentError):
        roc_auc([0.1, 0.2, 0.3], [True, False])


# ---------------------------------------------------------------- benchmark aggregation

def _report(serial, verdict=Verdict.ACCEPTABLE, failed=None, strings=(("ABC", 0),)):
    report = InspectionReport(serial, verdict, failed)
    if failed in (None, Stage.STRING_MATCH, Stage.CHAR_ANOMALY):
        report.stages.append(StageResult(Stage.STRING_MATCH, failed is not Stage.STRING_MATCH, {
            "strings": [{"expected": e, "edit_distance": d} for e, d in strings]}))
    report.timings_ms = {"total": 10.0}
    return report


class ScriptedService:
    """Returns a prepared report (or raises) per serial."""

    def __init__(self, outcomes):
        self.outcomes = outcomes

    def reference(self, path):
        return read_image(path)

    def inspect(self, captured, reference, expected, serial):
        outcome = self.outcomes[serial]
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


@pytest.fixture
def scripted_corpus(tmp_path):
    image = GrayImage.filled(8, 8, 30)
    write_image(tmp_path / "reference.png", image)
    records = []
    for serial, label, stage in [("NP0", "clean", None), ("NP1", "clean", None), ("NP2", "defective", "logo"),
                                 ("NP3", "defective", "character"), ("NP4", "defective", "string"),
                                 ("NP5", "clean", None), ("NP6", "clean", None)]:
        if serial != "NP6":
            write_image(tmp_path / f"{serial}.png", image)
        records.append({"serial": serial, "path": f"{serial}.png", "label": label, "defect_stage": stage,
                        "expected_strings": ["ABC"]})
    manifest = write_manifest(tmp_path / "plates.jsonl", records)
    service = ScriptedService({
        "NP0": _report("NP0"),
        "NP1": _report("NP1", Verdict.DEFECTIVE, Stage.LOGO),
        "NP2": _report("NP2", Verdict.DEFECTIVE, Stage.LOGO),
        "NP3": _report("NP3"),
        "NP4": _report("NP4", Verdict.DEFECTIVE_UNVERIFIABLE, Stage.STRING_MATCH, (("ABC", 1), ("XY", 2))),
        "NP5": InspectionError("detector crashed"),
    })
    return manifest, service


def test_benchmark_aggregates_outcomes(scripted_corpus):
    manifest, service = scripted_corpus
    result = run_benchmark(manifest, PipelineConfig(), service=service, workers=2)

    assert result.counts == ConfusionCounts(tp=2, fp=1, fn=1, tn=1)
    assert result.per_stage["logo"] == {"tp": 1, "fp": 1, "fn": 0}
    assert result.per_stage["string_match"] == {"tp": 1, "fp": 0, "fn": 0}
    assert result.per_stage["char_anomaly"] == {"tp": 0, "fp": 0, "fn": 1}
    assert not result.ok
    assert [f["serial"] for f in result.failures] == ["NP5", "NP6"]
    assert list(result.plates.columns) == PLATE_COLUMNS
    assert list(result.plates["serial"]) == ["NP0", "NP1", "NP2", "NP3", "NP4"]
    unverifiable = result.plates.set_index("serial").loc["NP4"]
    assert bool(unverifiable["predicted_defective"]) and bool(unverifiable["correct"])
    assert result.strings == {"strings": 4, "wer": 0.5, "cer": pytest.approx(3 / 11)}


def test_benchmark_limit_and_empty_corpus(scripted_corpus, tmp_path):
    manifest, service = scripted_corpus
    result = run_benchmark(manifest, PipelineConfig(), service=service, limit=2)
    assert result.counts == ConfusionCounts(fp=1, tn=1)
    with pytest.raises(InvalidArgumentError):
        run_benchmark(write_manifest(tmp_path / "empty.jsonl", []), PipelineConfig(), service=service)


def test_write_benchmark(scripted_corpus, tmp_path):
    manifest, service = scripted_corpus
    result = run_benchmark(manifest, PipelineConfig(), service=service)
    json_path, csv_path = write_benchmark(result, tmp_path / "out" / "bench.json")
    data = json.loads(json_path.read_text(encoding="utf-8"))
    assert data["plates"] == 5
    assert data["overall"]["tp"] == 2 and data["overall"]["recall"] == pytest.approx(2 / 3)
    assert len(data["corpus_hash"]) == 64
    assert "timings_ms" not in data
    assert csv_path.read_text(encoding="utf-8").splitlines()[0] == ",".join(PLATE_COLUMNS)

    timed, _ = write_benchmark(result, tmp_path / "timed.json", include_timings=True)
    assert json.loads(timed.read_text(encoding="utf-8"))["timings_ms"]["p50"]["total"] == 10.0

    again, _ = write_benchmark(run_benchmark(manifest, PipelineConfig(), service=service), tmp_path / "again.json")
    assert again.read_bytes() == json_path.read_bytes()


def test_string_error_rates_skip_unread_plates():
    report = InspectionReport("x", Verdict.DEFECTIVE_UNVERIFIABLE, Stage.ALIGNMENT)
    assert string_error_rates([report]) == {"strings": 0, "wer": None, "cer": None}


# ---------------------------------------------------------------- end to end

@pytest.mark.slow
def test_benchmark_on_generated_corpus(tmp_path, identity_reconstructor):
    from services.inspection_service import InspectionService

    manifest = generate_plate_corpus(CorpusConfig(seed=5, plates=4, defect_rate=0.5), tmp_path)
    cfg = PipelineConfig.load(tmp_path / "pipeline.json")
    service = InspectionService(cfg, reconstructor=identity_reconstructor)
    first = run_benchmark(manifest, cfg, service=service)
    second = run_benchmark(manifest, cfg, service=service)

    assert first.ok
    assert first.counts.total == 4
    assert first.counts.tp + first.counts.fn == 2
    assert first.plates.equals(second.plates)
    assert first.to_dict() == second.to_dict()


def _cli_workspace(tmp_path, layout, font, reference, blueprint, tiny_vae):
    cfg = default_pipeline_config(tmp_path)
    save_layout_spec(tmp_path / "layout.json", layout)
    GlyphAtlas.from_font(font, cfg.ocr.template_size).save(tmp_path / "atlas")
    save_model(tmp_path / "model.rvw", tiny_vae)
    cfg.save(tmp_path / "pipeline.json")
    write_image(tmp_path / "reference.png", reference)
    write_image(tmp_path / "NP1.png", render_nameplate(blueprint, seed=1)[0])
    (tmp_path / "mes.json").write_text(json.dumps({"NP1": {"strings": PLATE_STRINGS}}), encoding="utf-8")


def test_cli_inspect(tmp_path, layout, font, reference, blueprint, tiny_vae):
    _cli_workspace(tmp_path, layout, font, reference, blueprint, tiny_vae)
    code = main(["--no-log-file", "inspect", "--captured", str(tmp_path / "NP1.png"),
                 "--reference", str(tmp_path / "reference.png"), "--mes", str(tmp_path / "mes.json"),
                 "--config", str(tmp_path / "pipeline.json"), "--report", str(tmp_path / "report.json"),
                 "--overlay", str(tmp_path / "overlay.png"), "--timings"])
    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["serial"] == "NP1"
    assert code == Verdict(report["verdict"]).exit_code
    assert [s["stage"] for s in report["stages"]][:3] == ["alignment", "logo", "string_match"]
    assert report["failed_stage"] in (None, "alignment", "logo", "string_match", "char_anomaly")
    assert (tmp_path / "overlay.png").is_file() and (tmp_path / "overlay.json").is_file()
    assert (tmp_path / "report.timings.json").is_file()


def test_cli_operational_errors(tmp_path, layout, font, reference, blueprint, tiny_vae):
    _cli_workspace(tmp_path, layout, font, reference, blueprint, tiny_vae)
    args = ["--no-log-file", "inspect", "--captured", str(tmp_path / "NP1.png"),
            "--reference", str(tmp_path / "reference.png"), "--mes", str(tmp_path / "mes.json")]
    assert main(args + ["--config", str(tmp_path / "missing.json")]) == EXIT_OPERATIONAL
    assert main(args + ["--config", str(tmp_path / "pipeline.json"), "--serial", "UNKNOWN"]) == EXIT_OPERATIONAL
    (tmp_path / "model.rvw").write_bytes(b"garbage")
    assert main(args + ["--config", str(tmp_path / "pipeline.json")]) == EXIT_OPERATIONAL


def test_logging_setup(tmp_path):
    assert parse_level("debug") == logging.DEBUG
    assert parse_level(logging.ERROR) == logging.ERROR
    with pytest.raises(ValueError):
        parse_level("LOUD")

    root = setup_logging("INFO", log_dir=tmp_path / "logs")
    try:
        logging.getLogger("services.test").info("plate NP1 inspected")
        for handler in root.handlers:
            handler.flush()
        (log_file,) = (tmp_path / "logs").glob("nameplate_inspection_*.log")
        assert "plate NP1 inspected" in log_file.read_text(encoding="utf-8")
        assert logging.getLogger("PIL").level == logging.WARNING
    finally:
        for handler in list(root.handlers):
            handler.close()
            root.removeHandler(handler)

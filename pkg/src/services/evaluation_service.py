"""
Benchmark runner and evaluation metrics.

Positive class is "defective" everywhere: a plate predicted defective or
defective_unverifiable counts as a positive prediction. Reports are
written as JSON plus a flat per-plate CSV; wall-clock timings are left
out unless asked for so repeated runs produce identical files.
"""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score
from tqdm import tqdm

from core.base import IReconstructor
from core.errors import InspectionError, InvalidArgumentError
from models.config import AnomalyThresholds, PipelineConfig
from models.inspection import InspectionReport, Stage, Verdict
from models.metrics import ConfusionCounts, classification_metrics
from services.anomaly_service import (grid_search_thresholds, load_char_set, score_batch,
                                      select_threshold_roc)
from services.inspection_service import InspectionService
from utils.image_io import read_image
from utils.logging_config import get_logger
from utils.manifest import read_manifest, record_path

logger = get_logger(__name__)

__all__ = ["BenchmarkResult", "classification_metrics", "evaluate_characters", "roc_auc", "run_benchmark",
           "string_error_rates", "write_benchmark"]

BENCHMARK_VERSION = 1

# Ground-truth defect category -> stage expected to catch it
CATEGORY_STAGE = {
    "logo": Stage.LOGO,
    "string": Stage.STRING_MATCH,
    "character": Stage.CHAR_ANOMALY,
}

PLATE_COLUMNS = ["serial", "label", "defect_stage", "verdict", "failed_stage", "predicted_defective",
                 "correct", "defects", "wer", "cer"]


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Area under the ROC curve, ties rank-averaged; needs both classes."""
    y = np.asarray([bool(v) for v in labels])
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise InvalidArgumentError(f"{s.size} scores for {y.size} labels")
    if y.size == 0 or y.all() or not y.any():
        raise InvalidArgumentError("ROC AUC needs both defective and clean samples")
    return float(roc_auc_score(y, s))


def string_error_rates(reports: Sequence[InspectionReport]) -> Dict[str, Optional[float]]:
    """Corpus WER and CER over every string that was read."""
    strings = mismatched = edits = chars = 0
    for report in reports:
        stage = report.stage(Stage.STRING_MATCH)
        if stage is None:
            continue
        for s in stage.details.get("strings", []):
            strings += 1
            mismatched += 1 if s["edit_distance"] else 0
            edits += s["edit_distance"]
            chars += len(s["expected"])
    return {
        "strings": strings,
        "wer": mismatched / strings if strings else None,
        "cer": edits / chars if chars else None,
    }


def _percentiles(reports: Sequence[InspectionReport]) -> Dict[str, Dict[str, float]]:
    keys = sorted({k for r in reports for k in r.timings_ms})
    out = {"p50": {}, "p95": {}}
    for key in keys:
        values = np.array([r.timings_ms[key] for r in reports if key in r.timings_ms])
        out["p50"][key] = round(float(np.percentile(values, 50)), 3)
        out["p95"][key] = round(float(np.percentile(values, 95)), 3)
    return out


def corpus_hash(manifest: Union[str, Path], records: Sequence[dict]) -> str:
    """SHA-256 over the manifest and every captured image it lists."""
    digest = hashlib.sha256(Path(manifest).read_bytes())
    for record in records:
        path = record_path(manifest, record["path"])
        if path.is_file():
            digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class BenchmarkResult:
    """Aggregated benchmark outcome; plates holds one row per inspected plate."""
    counts: ConfusionCounts
    per_stage: Dict[str, Dict[str, int]]
    strings: Dict[str, Optional[float]]
    plates: pd.DataFrame
    failures: List[Dict[str, str]] = field(default_factory=list)
    timings_ms: Dict[str, Dict[str, float]] = field(default_factory=dict)
    corpus_hash: Optional[str] = None

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self, include_timings: bool = False) -> dict:
        data = {
            "benchmark_version": BENCHMARK_VERSION,
            "corpus_hash": self.corpus_hash,
            "plates": len(self.plates),
            "overall": {**self.counts.to_dict(), **classification_metrics(self.counts)},
            "per_stage": self.per_stage,
            "strings": self.strings,
            "operational_failures": self.failures,
        }
        if include_timings:
            data["timings_ms"] = self.timings_ms
        return data


def _plate_row(record: dict, report: InspectionReport) -> dict:
    predicted = report.verdict is not Verdict.ACCEPTABLE
    actual = record["label"] == "defective"
    strings = string_error_rates([report])
    return {
        "serial": report.serial,
        "label": record["label"],
        "defect_stage": record.get("defect_stage"),
        "verdict": report.verdict.value,
        "failed_stage": report.failed_stage.value if report.failed_stage else None,
        "predicted_defective": predicted,
        "correct": predicted == actual,
        "defects": len(report.defects),
        "wer": strings["wer"],
        "cer": strings["cer"],
    }


def _per_stage(rows: Sequence[dict]) -> Dict[str, Dict[str, int]]:
    """
    Detections and false alarms are charged to the stage that failed the
    plate; a missed defect is charged to the stage meant to catch it.
    """
    table = {stage.value: {"tp": 0, "fp": 0, "fn": 0} for stage in Stage}
    for row in rows:
        actual = row["label"] == "defective"
        if row["predicted_defective"]:
            table[row["failed_stage"]]["tp" if actual else "fp"] += 1
        elif actual:
            stage = CATEGORY_STAGE.get(row["defect_stage"], Stage.CHAR_ANOMALY)
            table[stage.value]["fn"] += 1
    return table


def run_benchmark(manifest: Union[str, Path], cfg: PipelineConfig, service: Optional[InspectionService] = None,
                  reference_path: Optional[Union[str, Path]] = None, workers: int = 1,
                  limit: Optional[int] = None, show_progress: bool = False) -> BenchmarkResult:
    """
    Inspect every plate of a plates.jsonl corpus and aggregate the outcomes.

    Plates that cannot be read or inspected are recorded as operational
    failures and left out of the confusion counts.
    """
    records = read_manifest(manifest)
    if limit:
        records = records[:limit]
    if not records:
        raise InvalidArgumentError(f"benchmark corpus {manifest} is empty")
    service = service or InspectionService(cfg)
    reference = service.reference(reference_path or record_path(manifest, "reference.png"))

    def run_one(record: dict) -> Tuple[dict, Optional[InspectionReport], Optional[str]]:
        try:
            captured = read_image(record_path(manifest, record["path"]))
            return record, service.inspect(captured, reference, record["expected_strings"], record["serial"]), None
        except (InspectionError, OSError, KeyError) as e:
            logger.error(f"Plate {record.get('serial')} could not be inspected: {e}", exc_info=True)
            return record, None, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(tqdm(pool.map(run_one, records), total=len(records), desc="benchmark",
                             disable=not show_progress))

    rows, reports, failures = [], [], []
    for record, report, error in sorted(outcomes, key=lambda o: str(o[0].get("serial"))):
        if report is None:
            failures.append({"serial": str(record.get("serial")), "error": error})
            continue
        reports.append(report)
        rows.append(_plate_row(record, report))
    if not rows:
        raise InvalidArgumentError("no plate of the corpus could be inspected")

    counts = ConfusionCounts.from_predictions([r["predicted_defective"] for r in rows],
                                              [r["label"] == "defective" for r in rows])
    result = BenchmarkResult(
        counts=counts,
        per_stage=_per_stage(rows),
        strings=string_error_rates(reports),
        plates=pd.DataFrame(rows, columns=PLATE_COLUMNS),
        failures=failures,
        timings_ms=_percentiles(reports),
        corpus_hash=corpus_hash(manifest, records),
    )
    metrics = classification_metrics(counts)
    logger.info(f"Benchmark on {len(rows)} plates: accuracy {metrics['accuracy']:.4f}, "
                f"recall {metrics['recall']}, precision {metrics['precision']}, {len(failures)} failures")
    return result


def write_benchmark(result: BenchmarkResult, path: Union[str, Path],
                    include_timings: bool = False) -> Tuple[Path, Path]:
    """JSON report at path and the per-plate table next to it as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(include_timings), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    csv_path = path.with_suffix(".csv")
    result.plates.to_csv(csv_path, index=False)
    return path, csv_path


def evaluate_characters(models: Dict[str, IReconstructor], val_manifest: Union[str, Path],
                        test_manifest: Union[str, Path], grid: Dict[str, Sequence[float]],
                        th: Optional[AnomalyThresholds] = None, size: int = 64) -> pd.DataFrame:
    """
    Both character methods per model. Thresholds are chosen on the
    validation split (ROC rule for the MSE score, recall-first grid for the
    anomaly mask) and scored on the test split.
    """
    th = th or AnomalyThresholds()
    val_chars, val_labels = load_char_set(val_manifest, th, size)
    test_chars, test_labels = load_char_set(test_manifest, th, size)
    rows = []
    for name, model in models.items():
        threshold, _, _ = select_threshold_roc(score_batch(model, val_chars), val_labels)
        test_scores = score_batch(model, test_chars)
        traditional = ConfusionCounts.from_predictions(test_scores > threshold, test_labels)

        tuned, _ = grid_search_thresholds(model, (val_chars, val_labels), grid, th)
        _, table = grid_search_thresholds(model, (test_chars, test_labels),
                                          {"mask_T": [tuned.mask_T], "area_min": [tuned.area_min]}, tuned)
        mask_row = table.iloc[0]

        row = {"model": name, "auc": roc_auc(test_scores, test_labels), "threshold": threshold}
        row.update({f"mse_{k}": v for k, v in {**traditional.to_dict(),
                                               **classification_metrics(traditional)}.items()})
        row.update({"mask_T": tuned.mask_T, "area_min": tuned.area_min})
        row.update({f"mask_{k}": mask_row[k] for k in ("tp", "fp", "fn", "tn", "accuracy", "precision",
                                                       "recall", "f1")})
        rows.append(row)
        logger.info(f"{name}: AUC {row['auc']:.4f}, mask recall {row['mask_recall']}, mask F1 {row['mask_f1']}")
    return pd.DataFrame(rows)

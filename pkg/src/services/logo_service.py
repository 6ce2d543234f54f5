"""
Logo inspection by image differencing.

Reference and captured logo crops are blurred, differenced, thresholded
and opened; connected components whose area lies in [area_min, area_max]
are reported as defects. The minimum area is tuned by grid search over
labelled logo pairs.
"""

from dataclasses import replace
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.base import MorphKind
from core.errors import InvalidArgumentError
from core.events import Event, EventType, event_bus
from models.config import LogoCheckConfig
from models.image import BBox, GrayImage
from models.inspection import CheckVerdict
from models.metrics import ConfusionCounts, classification_metrics
from models.regions import DefectBox, DefectStage
from utils.image_processing import (abs_diff, connected_components, gaussian_blur, morphology, resize,
                                    threshold_binary)
from utils.image_io import read_image
from utils.logging_config import get_logger
from utils.manifest import read_manifest, record_path

logger = get_logger(__name__)

LogoSample = Tuple[GrayImage, GrayImage, bool]


def _match_sizes(ref_logo: GrayImage, cap_logo: GrayImage, tolerance: float) -> Tuple[GrayImage, float, float]:
    """Resize cap to ref when within tolerance; returns cap and the ref->cap scale factors."""
    if ref_logo.size == cap_logo.size:
        return cap_logo, 1.0, 1.0
    dw = abs(cap_logo.width - ref_logo.width) / ref_logo.width
    dh = abs(cap_logo.height - ref_logo.height) / ref_logo.height
    if max(dw, dh) > tolerance:
        raise InvalidArgumentError(
            f"logo size mismatch {cap_logo.size} vs {ref_logo.size} exceeds {tolerance:.0%}")
    logger.debug(f"Resizing captured logo {cap_logo.size} to {ref_logo.size}")
    return (resize(cap_logo, ref_logo.width, ref_logo.height),
            cap_logo.width / ref_logo.width, cap_logo.height / ref_logo.height)


def difference_components(ref_logo: GrayImage, cap_logo: GrayImage, cfg: LogoCheckConfig):
    """Components of the cleaned difference mask, in ref_logo coordinates."""
    cap, sx, sy = _match_sizes(ref_logo, cap_logo, cfg.size_tolerance)
    ref_blur = gaussian_blur(ref_logo, cfg.blur_kernel, cfg.blur_sigma)
    cap_blur = gaussian_blur(cap, cfg.blur_kernel, cfg.blur_sigma)
    binary = threshold_binary(abs_diff(ref_blur, cap_blur), cfg.diff_threshold)
    cleaned = morphology(binary, MorphKind.OPEN, cfg.morph_structel)
    stats, _ = connected_components(cleaned, connectivity=8)
    return stats, sx, sy


def compare_logos(ref_logo: GrayImage, cap_logo: GrayImage,
                  cfg: LogoCheckConfig) -> Tuple[CheckVerdict, List[DefectBox]]:
    """
    Compare a captured logo crop against the reference.

    Returns the verdict and the defect boxes in cap_logo coordinates.
    """
    stats, sx, sy = difference_components(ref_logo, cap_logo, cfg)
    defects = []
    for s in stats:
        if not cfg.area_min <= s.area <= cfg.area_max:
            continue
        box = s.bbox
        if (sx, sy) != (1.0, 1.0):
            box = BBox.from_points([box.x * sx, box.x2 * sx], [box.y * sy, box.y2 * sy])
            box = box.clamp(cap_logo.width, cap_logo.height)
        defects.append(DefectBox(bbox=box, area=s.area, source_stage=DefectStage.LOGO))
    verdict = CheckVerdict.DEFECTIVE if defects else CheckVerdict.OK
    logger.debug(f"Logo check: {len(stats)} components, {len(defects)} within area range -> {verdict.value}")
    return verdict, defects


def tune_area_threshold(samples: Sequence[LogoSample], grid: Sequence[int],
                        cfg: LogoCheckConfig) -> Tuple[int, pd.DataFrame]:
    """
    Grid-search area_min over labelled (ref, cap, is_defective) samples.

    The winner maximizes F1, ties broken by higher recall then smaller
    area_min. Returns it with one metrics row per candidate.
    """
    if not grid:
        raise InvalidArgumentError("area grid is empty")
    labels = [bool(label) for _, _, label in samples]
    if not labels or all(labels) or not any(labels):
        raise InvalidArgumentError("tuning samples must contain both defective and clean logos")

    # Component areas do not depend on area_min
    areas = []
    for ref, cap, _ in samples:
        stats, _, _ = difference_components(ref, cap, cfg)
        areas.append(np.array([s.area for s in stats], dtype=np.int64))

    rows = []
    for candidate in sorted(set(int(c) for c in grid)):
        predicted = [bool(np.any((a >= candidate) & (a <= cfg.area_max))) for a in areas]
        counts = ConfusionCounts.from_predictions(predicted, labels)
        row = {"candidate": candidate, **counts.to_dict(), **classification_metrics(counts)}
        rows.append(row)
        event_bus.publish(Event(EventType.CANDIDATE_EVALUATED, data=row, source="logo"))
        logger.debug(f"area_min={candidate}: {row}")

    table = pd.DataFrame(rows, columns=["candidate", "tp", "fp", "fn", "tn",
                                        "accuracy", "precision", "recall", "f1"])
    ranked = table.assign(_f1=table["f1"].fillna(-1.0), _recall=table["recall"].fillna(-1.0))
    best = ranked.sort_values(["_f1", "_recall", "candidate"], ascending=[False, False, True]).iloc[0]
    best_area = int(best["candidate"])
    logger.info(f"Selected logo area_min={best_area} (F1={best['f1']}, recall={best['recall']})")
    return best_area, table


def write_metrics_table(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    return path


class LogoService:
    """Logo check bound to one configuration."""

    def __init__(self, cfg: LogoCheckConfig):
        self.cfg = cfg
        self.logger = get_logger(__name__)

    def check(self, ref_logo: GrayImage, cap_logo: GrayImage):
        return compare_logos(ref_logo, cap_logo, self.cfg)

    def tuned(self, samples: Sequence[LogoSample], grid: Sequence[int]) -> Tuple['LogoService', pd.DataFrame]:
        best, table = tune_area_threshold(samples, grid, self.cfg)
        return LogoService(replace(self.cfg, area_min=best)), table


def load_logo_samples(manifest: Union[str, Path]) -> List[LogoSample]:
    """(reference, captured, is_defective) triples from a logos.jsonl manifest."""
    return [(read_image(record_path(manifest, r["ref_path"])), read_image(record_path(manifest, r["cap_path"])),
             r["label"] == "defective") for r in read_manifest(manifest)]

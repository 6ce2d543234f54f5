"""
Character anomaly decisions from ResVAE reconstructions.

Traditional method: the reconstruction MSE is thresholded, the threshold
chosen from the ROC curve so every defective validation sample is caught.
Anomaly-mask method: pixels whose reconstruction error exceeds mask_T
form a mask that is opened; components of at least area_min pixels are
defects. Its two thresholds come from a recall-first grid search.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import roc_auc_score, roc_curve

from core.base import IReconstructor, MorphKind
from core.errors import InvalidArgumentError
from core.events import Event, EventType, event_bus
from models.config import AnomalyThresholds
from models.image import BBox, BinaryImage, GrayImage
from models.inspection import CheckVerdict
from models.metrics import ConfusionCounts, classification_metrics
from models.regions import DefectBox, DefectStage
from services.model_service import preprocess_char
from utils.image_processing import connected_components, equalize_histogram, morphology
from utils.image_io import read_image
from utils.logging_config import get_logger
from utils.manifest import read_manifest, record_path

logger = get_logger(__name__)

CONSTRAINT_UNMET = "constraint-unmet"
METRIC_COLUMNS = ["tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1"]


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def _labels(labels: Sequence[bool]) -> np.ndarray:
    y = np.asarray([bool(v) for v in labels])
    if y.size == 0 or y.all() or not y.any():
        raise InvalidArgumentError("both defective and clean samples are required")
    return y


def load_char_set(manifest: Union[str, Path], th: Optional[AnomalyThresholds] = None, size: int = 64,
                  limit: Optional[int] = None) -> Tuple[torch.Tensor, List[bool]]:
    """Preprocessed inputs of a character manifest with their defective labels."""
    th = th or AnomalyThresholds()
    records = read_manifest(manifest)
    if limit:
        records = records[:limit]
    if not records:
        raise InvalidArgumentError(f"manifest {manifest} is empty")
    chars = torch.cat([prepare_char(read_image(record_path(manifest, r["path"])), th, size) for r in records])
    return chars, [r["label"] == "defective" for r in records]


# Reconstruction and scoring

@torch.no_grad()
def reconstruct_batch(model: IReconstructor, chars: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Reconstructions of an n x 3 x s x s batch, in fixed batch order."""
    if isinstance(model, torch.nn.Module) and model.training:
        model.eval()
    if len(chars) == 0:
        return chars.clone()
    return torch.cat([model.reconstruct(chars[i:i + batch_size]) for i in range(0, len(chars), batch_size)])


def score_batch(model: IReconstructor, chars: torch.Tensor) -> np.ndarray:
    """Per-sample reconstruction MSE."""
    xhat = reconstruct_batch(model, chars)
    return (chars - xhat).pow(2).flatten(1).mean(dim=1).double().numpy()


def score_traditional(model: IReconstructor, char: torch.Tensor) -> float:
    """MSE between a preprocessed character and its reconstruction; higher is more anomalous."""
    if char.dim() == 3:
        char = char.unsqueeze(0)
    return float(score_batch(model, char)[0])


def select_threshold_roc(scores: Sequence[float], labels: Sequence[bool]) -> Tuple[float, float, List[RocPoint]]:
    """
    Recall-first threshold: samples scoring above it are defective, and
    it is the largest float below the lowest defective score, the strictest
    threshold that still catches every defect. Returns it with the ROC AUC
    and the score-induced curve.
    """
    y = _labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise InvalidArgumentError(f"{s.size} scores for {y.size} labels")
    fpr, tpr, thresholds = roc_curve(y, s, drop_intermediate=False)
    auc = float(roc_auc_score(y, s))
    curve = [RocPoint(float(t), float(r), float(f)) for t, r, f in zip(thresholds, tpr, fpr)]

    threshold = float(np.nextafter(float(s[y].min()), -np.inf))
    logger.info(f"ROC AUC {auc:.4f}; recall-first threshold {threshold:.6g}")
    return threshold, auc, curve


def traditional_threshold_table(scores: Sequence[float], labels: Sequence[bool],
                                thresholds: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """Confusion counts and metrics of score > threshold at every candidate threshold."""
    y = _labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if thresholds is None:
        thresholds = np.unique(np.concatenate([s, [np.nextafter(s.min(), -np.inf)]]))
    rows = []
    for t in thresholds:
        counts = ConfusionCounts.from_predictions(s > t, y)
        rows.append({"threshold": float(t), **counts.to_dict(), **classification_metrics(counts)})
    return pd.DataFrame(rows, columns=["threshold"] + METRIC_COLUMNS)


# Anomaly mask method

def anomaly_mask(x: torch.Tensor, xhat: torch.Tensor, T: float) -> BinaryImage:
    """|x - xhat| > T on channel 0 of a single image."""
    if x.shape != xhat.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    if T <= 0:
        raise InvalidArgumentError(f"mask threshold must be > 0, got {T}")
    diff = (x - xhat).detach().abs()
    while diff.dim() > 2:
        diff = diff[0]
    return BinaryImage(diff.cpu().numpy() > T)


def _components(mask: BinaryImage, structel: int):
    opened = morphology(mask, MorphKind.OPEN, structel) if structel > 1 else mask
    stats, _ = connected_components(opened, connectivity=8)
    return stats


def localize_defects(mask: BinaryImage, th: AnomalyThresholds) -> Tuple[CheckVerdict, List[DefectBox]]:
    """Open, label, and keep components with area >= area_min; boxes in mask coordinates."""
    defects = [DefectBox(bbox=s.bbox, area=s.area, source_stage=DefectStage.CHARACTER)
               for s in _components(mask, th.morph_structel) if s.area >= th.area_min]
    return (CheckVerdict.DEFECTIVE if defects else CheckVerdict.OK), defects


def scale_defects(defects: Sequence[DefectBox], crop_w: int, crop_h: int, size: int) -> List[DefectBox]:
    """Map boxes from the size x size model frame back onto a crop_w x crop_h crop."""
    sx, sy = crop_w / size, crop_h / size
    scaled = []
    for d in defects:
        box = BBox.from_points([d.bbox.x * sx, d.bbox.x2 * sx], [d.bbox.y * sy, d.bbox.y2 * sy])
        scaled.append(replace(d, bbox=box.clamp(crop_w, crop_h)))
    return scaled


def _max_component_areas(chars: torch.Tensor, xhat: torch.Tensor, T: float, structel: int) -> np.ndarray:
    areas = np.zeros(len(chars), dtype=np.int64)
    for i in range(len(chars)):
        stats = _components(anomaly_mask(chars[i], xhat[i], T), structel)
        areas[i] = max((s.area for s in stats), default=0)
    return areas


def grid_search_thresholds(model: IReconstructor, val_set: Tuple[torch.Tensor, Sequence[bool]],
                           grid: Dict[str, Sequence[float]],
                           base: Optional[AnomalyThresholds] = None) -> Tuple[AnomalyThresholds, pd.DataFrame]:
    """
    Evaluate every (mask_T, area_min) pair on labelled validation chars.

    Among candidates with recall 1 the winner has the highest F1, then the
    higher precision, then the smaller mask_T. When none reaches recall 1
    the highest-recall candidate wins and table.attrs["status"] is
    "constraint-unmet".
    """
    chars, labels = val_set
    y = _labels(labels)
    mask_ts = sorted(set(float(t) for t in grid.get("mask_T", [])))
    area_mins = sorted(set(int(a) for a in grid.get("area_min", [])))
    if not mask_ts or not area_mins:
        raise InvalidArgumentError("grid needs at least one mask_T and one area_min")
    base = base or AnomalyThresholds()

    xhat = reconstruct_batch(model, chars)
    rows = []
    for T in mask_ts:
        # Opening and labelling do not depend on area_min
        areas = _max_component_areas(chars, xhat, T, base.morph_structel)
        for area_min in area_mins:
            counts = ConfusionCounts.from_predictions(areas >= area_min, y)
            row = {"mask_T": T, "area_min": area_min, **counts.to_dict(), **classification_metrics(counts)}
            rows.append(row)
            event_bus.publish(Event(EventType.CANDIDATE_EVALUATED, data=row, source="anomaly"))
            logger.debug(f"mask_T={T} area_min={area_min}: {row}")

    table = pd.DataFrame(rows, columns=["mask_T", "area_min"] + METRIC_COLUMNS)
    ranked = table.assign(_recall=table["recall"].fillna(-1.0), _f1=table["f1"].fillna(-1.0),
                          _precision=table["precision"].fillna(-1.0))
    feasible = ranked[ranked["recall"] == 1.0]
    if len(feasible):
        status = "met"
        best = feasible.sort_values(["_f1", "_precision", "mask_T", "area_min"],
                                    ascending=[False, False, True, True]).iloc[0]
    else:
        status = CONSTRAINT_UNMET
        best = ranked.sort_values(["_recall", "_f1", "_precision", "mask_T", "area_min"],
                                  ascending=[False, False, False, True, True]).iloc[0]
        logger.warning("No anomaly-mask candidate reaches recall 1; keeping the highest-recall one")
    table["selected"] = (table["mask_T"] == best["mask_T"]) & (table["area_min"] == best["area_min"])
    table.attrs["status"] = status
    chosen = replace(base, mask_T=float(best["mask_T"]), area_min=int(best["area_min"]))
    logger.info(f"Selected mask_T={chosen.mask_T}, area_min={chosen.area_min} "
                f"(recall={best['recall']}, F1={best['f1']}, {status})")
    return chosen, table


# Per-character check used by the pipeline

def prepare_char(crop: GrayImage, th: AnomalyThresholds, size: int = 64) -> torch.Tensor:
    if th.equalize_histogram:
        crop = equalize_histogram(crop)
    return preprocess_char(crop, invert=th.invert_input, size=size)


class AnomalyService:
    """Anomaly-mask check of character crops against one reconstructor."""

    def __init__(self, model: IReconstructor, th: AnomalyThresholds, size: int = 64):
        self.model = model
        self.th = th
        self.size = getattr(model, "input_size", size)
        self.logger = get_logger(__name__)

    def check(self, crops: Sequence[GrayImage]) -> List[Tuple[CheckVerdict, List[DefectBox], BinaryImage]]:
        """Verdict, defect boxes in crop coordinates and the raw mask per crop."""
        if not crops:
            return []
        chars = torch.cat([prepare_char(c, self.th, self.size) for c in crops])
        xhat = reconstruct_batch(self.model, chars)
        results = []
        for i, crop in enumerate(crops):
            mask = anomaly_mask(chars[i], xhat[i], self.th.mask_T)
            verdict, defects = localize_defects(mask, self.th)
            defects = [replace(d, char_index=i) for d in scale_defects(defects, crop.width, crop.height, self.size)]
            self.logger.debug(f"char {i}: {mask.count()} anomalous pixels -> {verdict.value}")
            results.append((verdict, defects, mask))
        return results

    def score(self, crops: Sequence[GrayImage]) -> np.ndarray:
        chars = torch.cat([prepare_char(c, self.th, self.size) for c in crops])
        return score_batch(self.model, chars)

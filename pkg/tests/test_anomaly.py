import numpy as np
import pytest
import torch

from conftest import ConstantReconstructor, IdentityReconstructor
from core.errors import InvalidArgumentError
from core.events import EventType, event_bus
from models.config import AnomalyThresholds
from models.image import BBox, BinaryImage, GrayImage
from models.inspection import CheckVerdict
from models.regions import DefectBox, DefectStage
from services.anomaly_service import (CONSTRAINT_UNMET, AnomalyService, anomaly_mask, grid_search_thresholds,
                                      load_char_set, localize_defects, reconstruct_batch, scale_defects,
                                      score_batch, score_traditional, select_threshold_roc, traditional_threshold_table)
from utils.image_io import write_image
from utils.manifest import write_manifest


def _char_set(clean=4, squares=(5, 6, 7), size=16):
    """Flat -1 characters; defective ones carry a +1 square of the given side."""
    chars = torch.full((clean + len(squares), 3, size, size), -1.0)
    for i, side in enumerate(squares):
        chars[clean + i, :, 4:4 + side, 4:4 + side] = 1.0
    return chars, [False] * clean + [True] * len(squares)


# ---------------------------------------------------------------- ROC threshold

def test_roc_threshold_separable():
    threshold, auc, curve = select_threshold_roc([0.1, 0.2, 0.3, 0.5, 0.7], [False, False, False, True, True])
    assert auc == 1.0
    assert threshold == np.nextafter(0.5, -np.inf)
    assert 0.5 - threshold < 1e-15
    assert curve[-1].tpr == 1.0 and curve[-1].fpr == 1.0
    assert all(a.tpr <= b.tpr for a, b in zip(curve, curve[1:]))


def test_roc_threshold_keeps_every_defect():
    scores = [0.1, 0.6, 0.5, 0.9]
    labels = [False, False, True, True]
    threshold, auc, _ = select_threshold_roc(scores, labels)
    assert threshold == np.nextafter(0.5, -np.inf)
    assert auc == pytest.approx(0.75)
    assert all(s > threshold for s, d in zip(scores, labels) if d)


def test_roc_threshold_leaves_no_gap_below_lowest_defect():
    scores = [0.1, 0.2, 0.45, 0.5, 0.9]
    labels = [False, False, False, True, True]
    threshold, _, _ = select_threshold_roc(scores, labels)
    assert threshold == np.nextafter(0.5, -np.inf)
    assert 0.5 > threshold > 0.45
    assert not any(threshold < s <= 0.5 for s, d in zip(scores, labels) if not d)


def test_roc_threshold_without_clean_below():
    threshold, _, _ = select_threshold_roc([0.9, 0.5], [False, True])
    assert threshold == np.nextafter(0.5, -np.inf)


def test_roc_auc_of_random_scores_is_chance(rng):
    scores = rng.random(4000)
    labels = rng.random(4000) < 0.5
    _, auc, _ = select_threshold_roc(scores, labels)
    assert auc == pytest.approx(0.5, abs=0.03)


def test_roc_threshold_needs_both_classes():
    with pytest.raises(InvalidArgumentError):
        select_threshold_roc([0.1, 0.2], [True, True])
    with pytest.raises(InvalidArgumentError):
        select_threshold_roc([0.1, 0.2, 0.3], [True, False])


def test_traditional_threshold_table():
    table = traditional_threshold_table([0.1, 0.2, 0.8, 0.9], [False, False, True, True])
    assert list(table.columns[:5]) == ["threshold", "tp", "fp", "fn", "tn"]
    best = table[table["f1"] == 1.0]
    assert len(best) == 1 and best.iloc[0]["threshold"] == pytest.approx(0.2)
    lowest = table.iloc[0]
    assert lowest["recall"] == 1.0 and lowest["fp"] == 2


# ---------------------------------------------------------------- scores

def test_scores_of_constant_reconstruction():
    chars = torch.stack([torch.full((3, 16, 16), -1.0), torch.full((3, 16, 16), 1.0)])
    scores = score_batch(ConstantReconstructor(-1.0), chars)
    assert scores.tolist() == pytest.approx([0.0, 4.0])
    assert score_traditional(ConstantReconstructor(-1.0), chars[1]) == pytest.approx(4.0)
    assert score_batch(IdentityReconstructor(), chars).tolist() == [0.0, 0.0]


def test_reconstruct_batch_is_independent_of_batch_size(tiny_vae):
    chars, _ = _char_set()
    whole = reconstruct_batch(tiny_vae, chars)
    chunked = reconstruct_batch(tiny_vae, chars, batch_size=2)
    assert whole.shape == chars.shape
    assert torch.allclose(whole, chunked, atol=1e-6)
    assert reconstruct_batch(tiny_vae, chars[:0]).shape == (0, 3, 16, 16)


def test_scores_put_model_in_inference_mode(tiny_vae):
    tiny_vae.train()
    chars, _ = _char_set()
    first = score_batch(tiny_vae, chars)
    assert not tiny_vae.training
    assert np.array_equal(first, score_batch(tiny_vae, chars))


# ---------------------------------------------------------------- anomaly mask

def test_anomaly_mask_threshold_is_strict():
    x = torch.zeros(3, 4, 4)
    xhat = torch.zeros(3, 4, 4)
    xhat[0, 1, 1] = 0.5
    xhat[0, 2, 2] = -0.75
    xhat[1, 3, 3] = 1.0
    mask = anomaly_mask(x, xhat, 0.5)
    assert mask.pixels.shape == (4, 4)
    assert mask.count() == 1 and bool(mask.pixels[2, 2])


def test_anomaly_mask_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        anomaly_mask(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 0.5)
    with pytest.raises(InvalidArgumentError):
        anomaly_mask(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), 0.0)


def _mask_with_square_and_speck():
    mask = np.zeros((32, 32), dtype=bool)
    mask[5:9, 10:14] = True
    mask[25, 25] = True
    return BinaryImage(mask)


def test_localize_defects_opens_then_filters_by_area():
    verdict, defects = localize_defects(_mask_with_square_and_speck(), AnomalyThresholds(area_min=10))
    assert verdict is CheckVerdict.DEFECTIVE
    assert len(defects) == 1
    assert defects[0].bbox == BBox(10, 5, 4, 4)
    assert defects[0].area == 16
    assert defects[0].source_stage is DefectStage.CHARACTER


def test_localize_defects_area_boundary_is_inclusive():
    mask = _mask_with_square_and_speck()
    assert localize_defects(mask, AnomalyThresholds(area_min=16))[0] is CheckVerdict.DEFECTIVE
    verdict, defects = localize_defects(mask, AnomalyThresholds(area_min=17))
    assert verdict is CheckVerdict.OK and defects == []


def test_localize_defects_without_opening_keeps_specks():
    _, defects = localize_defects(_mask_with_square_and_speck(), AnomalyThresholds(area_min=1, morph_structel=1))
    assert sorted(d.area for d in defects) == [1, 16]


def test_localize_defects_on_empty_mask():
    assert localize_defects(BinaryImage.empty(16, 16), AnomalyThresholds()) == (CheckVerdict.OK, [])


def test_scale_defects_maps_back_to_crop():
    d = DefectBox(bbox=BBox(16, 16, 8, 8), area=64, source_stage=DefectStage.CHARACTER)
    scaled = scale_defects([d], crop_w=32, crop_h=128, size=64)
    assert scaled[0].bbox == BBox(8, 32, 4, 16)
    assert scaled[0].area == 64


# ---------------------------------------------------------------- grid search

def test_grid_search_picks_recall_one_best_f1():
    seen = []
    event_bus.subscribe(EventType.CANDIDATE_EVALUATED, lambda e: seen.append(e.data))
    tuned, table = grid_search_thresholds(ConstantReconstructor(-1.0), _char_set(),
                                          {"mask_T": [0.5, 2.5], "area_min": [10, 30, 60]})
    assert (tuned.mask_T, tuned.area_min) == (0.5, 10)
    assert table.attrs["status"] == "met"
    assert len(table) == 6 == len(seen)
    assert table["selected"].sum() == 1
    row = table[(table["mask_T"] == 0.5) & (table["area_min"] == 30)].iloc[0]
    assert (row["tp"], row["fn"]) == (2, 1)
    assert table[table["mask_T"] == 2.5]["tp"].sum() == 0


def test_grid_search_prefers_smaller_mask_threshold_on_ties():
    tuned, _ = grid_search_thresholds(ConstantReconstructor(-1.0), _char_set(),
                                      {"mask_T": [1.0, 0.5], "area_min": [10]})
    assert tuned.mask_T == 0.5


def test_grid_search_reports_unmet_constraint():
    tuned, table = grid_search_thresholds(ConstantReconstructor(-1.0), _char_set(),
                                          {"mask_T": [0.5], "area_min": [30, 60]})
    assert table.attrs["status"] == CONSTRAINT_UNMET
    assert tuned.area_min == 30


def test_grid_search_keeps_other_thresholds():
    base = AnomalyThresholds(morph_structel=1, invert_input=False)
    tuned, _ = grid_search_thresholds(ConstantReconstructor(-1.0), _char_set(), {"mask_T": [0.5], "area_min": [10]},
                                      base)
    assert tuned.morph_structel == 1 and tuned.invert_input is False


def test_grid_search_errors():
    with pytest.raises(InvalidArgumentError):
        grid_search_thresholds(ConstantReconstructor(-1.0), _char_set(), {"mask_T": [], "area_min": [10]})
    chars, _ = _char_set()
    with pytest.raises(InvalidArgumentError):
        grid_search_thresholds(ConstantReconstructor(-1.0), (chars, [False] * len(chars)),
                               {"mask_T": [0.5], "area_min": [10]})


# ---------------------------------------------------------------- per-character check

def _crop_with_dark_square():
    pixels = np.full((32, 32), 255, dtype=np.uint8)
    pixels[8:16, 8:16] = 0
    return GrayImage(pixels)


def test_anomaly_service_flags_and_localizes():
    service = AnomalyService(ConstantReconstructor(-1.0), AnomalyThresholds())
    clean = GrayImage.filled(32, 32, 255)
    results = service.check([clean, _crop_with_dark_square()])

    assert results[0][0] is CheckVerdict.OK and results[0][1] == []
    verdict, defects, mask = results[1]
    assert verdict is CheckVerdict.DEFECTIVE
    assert mask.pixels.shape == (64, 64)
    assert len(defects) == 1
    assert defects[0].char_index == 1
    assert defects[0].bbox.contains_point(12, 12)
    assert defects[0].bbox.iou(BBox(8, 8, 8, 8)) > 0.5


def test_anomaly_service_with_perfect_reconstructor():
    service = AnomalyService(IdentityReconstructor(), AnomalyThresholds())
    results = service.check([_crop_with_dark_square(), GrayImage.filled(20, 40, 7)])
    assert [r[0] for r in results] == [CheckVerdict.OK, CheckVerdict.OK]
    assert service.score([_crop_with_dark_square()]).tolist() == [0.0]
    assert service.check([]) == []


def test_anomaly_service_uses_model_input_size(tiny_vae):
    service = AnomalyService(tiny_vae, AnomalyThresholds())
    assert service.size == 16
    assert service.check([_crop_with_dark_square()])[0][2].pixels.shape == (16, 16)


def test_load_char_set(tmp_path):
    write_image(tmp_path / "a.png", GrayImage.filled(40, 40, 0))
    write_image(tmp_path / "b.png", _crop_with_dark_square())
    manifest = write_manifest(tmp_path / "val.jsonl", [
        {"path": "a.png", "label": "clean"},
        {"path": "b.png", "label": "defective"},
    ])
    chars, labels = load_char_set(manifest, AnomalyThresholds(invert_input=False), size=16)
    assert chars.shape == (2, 3, 16, 16)
    assert labels == [False, True]
    assert torch.all(chars[0] == -1.0)
    with pytest.raises(InvalidArgumentError):
        load_char_set(write_manifest(tmp_path / "empty.jsonl", []))

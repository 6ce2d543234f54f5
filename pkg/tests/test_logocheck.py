import pytest

from core.errors import InvalidArgumentError
from models.config import CorpusConfig, LogoCheckConfig
from models.image import BBox, GrayImage
from models.inspection import CheckVerdict
from models.regions import DefectStage
from services.logo_service import LogoService, compare_logos, load_logo_samples, tune_area_threshold
from services.plate_generator import generate_logo_pairs, stroke_mask
from utils.image_processing import resize


def _burn_square(logo: GrayImage, cx: int = 120, cy: int = 120, size: int = 20) -> GrayImage:
    pixels = logo.mutable()
    pixels[cy - size // 2:cy + size // 2, cx - size // 2:cx + size // 2] = 0
    return GrayImage(pixels)


def _speckle(logo: GrayImage, rng, count: int = 25) -> GrayImage:
    pixels = logo.mutable()
    ys = rng.integers(10, logo.height - 10, count)
    xs = rng.integers(10, logo.width - 10, count)
    pixels[ys, xs] = 255 - pixels[ys, xs]
    return GrayImage(pixels)


class TestCompareLogos:
    def test_identical_logos(self, logo):
        verdict, defects = compare_logos(logo, logo, LogoCheckConfig())
        assert verdict is CheckVerdict.OK
        assert defects == []

    def test_burned_square_is_found(self, logo):
        assert stroke_mask(logo).mask[110:130, 110:130].all()
        verdict, defects = compare_logos(logo, _burn_square(logo), LogoCheckConfig())
        assert verdict is CheckVerdict.DEFECTIVE
        assert len(defects) == 1
        assert defects[0].bbox.contains_point(120, 120)
        assert defects[0].source_stage is DefectStage.LOGO

    def test_single_pixel_noise_is_ignored(self, logo, rng):
        verdict, defects = compare_logos(logo, _speckle(logo, rng), LogoCheckConfig())
        assert verdict is CheckVerdict.OK
        assert defects == []

    def test_resized_capture_reports_capture_coordinates(self, logo):
        cap = resize(_burn_square(logo), 504, 252)
        verdict, defects = compare_logos(logo, cap, LogoCheckConfig())
        assert verdict is CheckVerdict.DEFECTIVE
        assert len(defects) == 1
        assert defects[0].bbox.contains_point(126, 126)
        assert defects[0].bbox.clamp(504, 252) == defects[0].bbox

    def test_size_mismatch_beyond_tolerance(self, logo):
        with pytest.raises(InvalidArgumentError):
            compare_logos(logo, logo.crop(BBox(0, 0, logo.width // 2, logo.height)), LogoCheckConfig())

    def test_raising_area_min_never_flags_more(self, logo):
        cap = _burn_square(logo, size=12)
        flagged = [compare_logos(logo, cap, LogoCheckConfig(area_min=a))[0] is CheckVerdict.DEFECTIVE
                   for a in (1, 10, 30, 100, 300, 1000)]
        for earlier, later in zip(flagged, flagged[1:]):
            assert earlier or not later


class TestTuneAreaThreshold:
    def _samples(self, logo, rng):
        clean = [(logo, _speckle(logo, rng), False) for _ in range(4)]
        defective = [(logo, _burn_square(logo, 120, 120 + dy, 16), True) for dy in (-6, 0, 6)]
        return clean + defective

    def test_separable_set_reaches_perfect_f1(self, logo, rng):
        best, table = tune_area_threshold(self._samples(logo, rng), [5, 30, 60, 5000], LogoCheckConfig())
        assert table.loc[table["candidate"] == best, "f1"].item() == pytest.approx(1.0)
        assert list(table["candidate"]) == [5, 30, 60, 5000]
        assert table.loc[table["candidate"] == 5000, "recall"].item() == pytest.approx(0.0)

    def test_single_candidate(self, logo, rng):
        best, table = tune_area_threshold(self._samples(logo, rng), [42], LogoCheckConfig())
        assert best == 42
        assert len(table) == 1
        assert int(table["tp"].iloc[0] + table["fp"].iloc[0] + table["fn"].iloc[0] + table["tn"].iloc[0]) == 7

    def test_single_class_rejected(self, logo):
        with pytest.raises(InvalidArgumentError):
            tune_area_threshold([(logo, logo, False)], [30], LogoCheckConfig())

    def test_empty_grid_rejected(self, logo, rng):
        with pytest.raises(InvalidArgumentError):
            tune_area_threshold(self._samples(logo, rng), [], LogoCheckConfig())

    def test_service_returns_tuned_copy(self, logo, rng):
        service = LogoService(LogoCheckConfig())
        tuned, _ = service.tuned(self._samples(logo, rng), [30])
        assert tuned.cfg.area_min == 30
        assert service.cfg.area_min == LogoCheckConfig().area_min


def test_generated_logo_pairs_load(tmp_path):
    manifest = generate_logo_pairs(CorpusConfig(logo_pairs=4), tmp_path)
    samples = load_logo_samples(manifest)
    assert [label for _, _, label in samples] == [False, True, False, True]
    assert all(ref.size == cap.size == (480, 240) for ref, cap, _ in samples)

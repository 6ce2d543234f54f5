import sys

import numpy as np
import pytest

from core.errors import ConfigurationError, DetectorUnavailableError, InvalidArgumentError
from models.config import DetectorConfig
from models.image import BBox, GrayImage
from models.regions import LayoutSpec, Region, RegionClass, load_layout_spec, save_layout_spec
from services.glyph_renderer import BACKGROUND_LEVEL
from services.plate_generator import LOGO_BOX, PLATE_HEIGHT, PLATE_WIDTH, PROFILE_MARGIN, render_nameplate
from services.region_service import (ExternalRegionProvider, LayoutRegionProvider, ProfileRegionProvider,
                                     build_region_provider, crop_regions, detect_regions)


class TestLayoutProvider:
    def test_nominal_size_pass_through(self, layout):
        regions = detect_regions(GrayImage.filled(PLATE_WIDTH, PLATE_HEIGHT, 30), LayoutRegionProvider(layout))
        assert [r.bbox for r in regions] == [r.bbox for r in layout.regions]
        assert all(r.confidence == 1.0 for r in regions)

    def test_double_size_scales_exactly(self, layout):
        regions = LayoutRegionProvider(layout).detect(GrayImage.filled(2 * PLATE_WIDTH, 2 * PLATE_HEIGHT, 30))
        expected = [BBox(2 * b.x, 2 * b.y, 2 * b.w, 2 * b.h) for b in (r.bbox for r in layout.regions)]
        assert [r.bbox for r in regions] == expected

    def test_regions_sorted_top_to_bottom(self, layout):
        regions = LayoutRegionProvider(layout).detect(GrayImage.filled(PLATE_WIDTH, PLATE_HEIGHT))
        keys = [(r.bbox.y, r.bbox.x) for r in regions]
        assert keys == sorted(keys)
        assert regions[0].region_class is RegionClass.LOGO
        assert regions[1].region_class is RegionClass.DMC
        assert all(r.region_class is RegionClass.STRING for r in regions[2:])

    def test_layout_file_round_trip(self, layout, tmp_path):
        path = save_layout_spec(tmp_path / "layout.json", layout)
        assert load_layout_spec(path) == layout

    def test_overlapping_layout_rejected(self):
        regions = [Region(RegionClass.STRING, BBox(0, 0, 100, 20)), Region(RegionClass.STRING, BBox(10, 0, 100, 20))]
        with pytest.raises(ConfigurationError):
            LayoutSpec("X", (200, 100), regions).validate()


class TestProfileProvider:
    def test_finds_six_text_rows(self, blueprint):
        plate, truth = render_nameplate(blueprint)
        # Text rows only: blank out the artwork band above the first string
        pixels = plate.mutable()
        pixels[:LOGO_BOX.y2 + 20] = BACKGROUND_LEVEL
        plate = GrayImage(pixels)
        provider = ProfileRegionProvider(DetectorConfig(provider="profile", margin=PROFILE_MARGIN))
        found = detect_regions(plate, provider)
        expected = [r.bbox for r in truth.regions if r.region_class is RegionClass.STRING]

        assert len(found) == 6
        for region, box in zip(found, expected):
            assert region.region_class is RegionClass.STRING
            assert region.bbox.iou(box) > 0.9

    def test_blank_plate(self):
        provider = ProfileRegionProvider(DetectorConfig(provider="profile"))
        assert provider.detect(GrayImage.filled(300, 200, 30)) == []


class TestExternalProvider:
    def test_reads_json_regions(self, tmp_path):
        script = tmp_path / "detector.py"
        script.write_text("import json\nprint(json.dumps([{'class': 'string', 'bbox': [5, 40, 30, 10], "
                          "'confidence': 0.9}, {'class': 'logo', 'bbox': [5, 5, 20, 20], 'confidence': 0.3}]))\n")
        provider = ExternalRegionProvider([sys.executable, str(script)])
        regions = detect_regions(GrayImage.filled(64, 64), provider, min_confidence=0.5)
        assert regions == [Region(RegionClass.STRING, BBox(5, 40, 30, 10), 0.9)]

    def test_failing_command(self, tmp_path):
        script = tmp_path / "broken.py"
        script.write_text("import sys\nsys.exit(4)\n")
        with pytest.raises(DetectorUnavailableError):
            ExternalRegionProvider([sys.executable, str(script)]).detect(GrayImage.filled(8, 8))

    def test_missing_executable(self, tmp_path):
        with pytest.raises(DetectorUnavailableError):
            ExternalRegionProvider([str(tmp_path / "no-such-detector")]).detect(GrayImage.filled(8, 8))

    def test_malformed_output(self, tmp_path):
        script = tmp_path / "chatty.py"
        script.write_text("print('hello')\n")
        with pytest.raises(DetectorUnavailableError):
            ExternalRegionProvider([sys.executable, str(script)]).detect(GrayImage.filled(8, 8))


class TestBuildProvider:
    def test_layout_provider_from_config(self, pipeline_config, layout):
        save_layout_spec(pipeline_config.resolve(pipeline_config.detector.layout_path), layout)
        assert isinstance(build_region_provider(pipeline_config), LayoutRegionProvider)

    def test_profile_provider_from_config(self, pipeline_config):
        pipeline_config.detector.provider = "profile"
        assert isinstance(build_region_provider(pipeline_config), ProfileRegionProvider)


class TestCropRegions:
    def _gradient(self):
        yy, xx = np.mgrid[:40, :60]
        return GrayImage.from_array(xx * 3 + yy)

    def test_whole_image(self):
        img = self._gradient()
        [(_, crop)] = crop_regions(img, [Region(RegionClass.STRING, BBox(0, 0, 60, 40))])
        assert crop == img

    def test_sub_block(self):
        img = self._gradient()
        [(_, crop)] = crop_regions(img, [Region(RegionClass.STRING, BBox(10, 10, 5, 5))])
        np.testing.assert_array_equal(crop.pixels, img.pixels[10:15, 10:15])

    def test_empty_list(self):
        assert crop_regions(self._gradient(), []) == []

    def test_small_overshoot_is_clamped(self):
        img = self._gradient()
        [(region, crop)] = crop_regions(img, [Region(RegionClass.STRING, BBox(40, 20, 22, 20))])
        assert region.bbox == BBox(40, 20, 20, 20)
        np.testing.assert_array_equal(crop.pixels, img.pixels[20:40, 40:60])
        [(region, _)] = crop_regions(img, [Region(RegionClass.STRING, BBox(-2, 0, 10, 10))])
        assert region.bbox == BBox(0, 0, 8, 10)

    @pytest.mark.parametrize("box", [BBox(40, 20, 23, 20), BBox(0, -3, 10, 10), BBox(50, 30, 20, 20)])
    def test_overshoot_beyond_tolerance(self, box):
        with pytest.raises(InvalidArgumentError):
            crop_regions(self._gradient(), [Region(RegionClass.STRING, box)])

    def test_fully_outside(self):
        with pytest.raises(InvalidArgumentError):
            crop_regions(self._gradient(), [Region(RegionClass.STRING, BBox(100, 100, 5, 5))])

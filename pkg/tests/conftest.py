"""Shared fixtures: seeded generators, synthetic plates and small models."""

import numpy as np
import pytest
import torch

from core.base import IReconstructor
from core.events import event_bus
from models.config import PipelineConfig
from models.resvae import ResVAE
from services.ocr_service import GlyphAtlas, TemplateOcrBackend
from services.plate_generator import (PlateBlueprint, default_pipeline_config, generate_logo, load_stroke_font,
                                      nameplate_layout, render_reference)

PLATE_STRINGS = ["0123456789", "SCBKYTA0", "A1B2C3K4Y5T6", "777SSS", "BACK12345", "YT0K9A8"]


class IdentityReconstructor(IReconstructor):
    """Reconstructs every input perfectly, so no character is ever anomalous."""

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return x.clone()


class ConstantReconstructor(IReconstructor):
    """Reconstructs every input as one flat value."""

    def __init__(self, value: float = -1.0):
        self.value = value

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return torch.full_like(x, self.value)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_reconstructor():
    return IdentityReconstructor()


@pytest.fixture
def tiny_vae():
    torch.manual_seed(0)
    return ResVAE(channels=[2, 4, 8], latent_dim=8).eval()


@pytest.fixture(scope="session")
def font():
    return load_stroke_font()


@pytest.fixture(scope="session")
def layout():
    return nameplate_layout()


@pytest.fixture(scope="session")
def logo():
    return generate_logo(0)


@pytest.fixture(scope="session")
def reference(layout, logo):
    return render_reference(layout, logo)


@pytest.fixture(scope="session")
def blueprint(layout, logo):
    return PlateBlueprint(layout, list(PLATE_STRINGS), logo, "NP-TEST")


@pytest.fixture(scope="session")
def ocr_backend(font):
    return TemplateOcrBackend(GlyphAtlas.from_font(font))


@pytest.fixture
def pipeline_config(tmp_path) -> PipelineConfig:
    """Default config whose layout, atlas and model paths are not needed because collaborators are injected."""
    return default_pipeline_config(tmp_path)


@pytest.fixture(autouse=True)
def clean_event_bus():
    """Subscriptions made by one test never leak into the next."""
    saved = event_bus.snapshot()
    yield
    event_bus.restore(saved)

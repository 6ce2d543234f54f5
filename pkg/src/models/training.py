"""
Loss weighting and training configuration for the ResVAE.

The four loss weights must sum to one at every step. Preset weight
rows that do not are renormalized (with a warning) when a preset is
built; annealing rescales the non-KL weights every epoch so the sum
stays at one while the KL weight ramps linearly.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from core.errors import ConfigurationError, InvalidArgumentError
from utils.logging_config import get_logger

logger = get_logger(__name__)

WEIGHT_SUM_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """alpha (MSE), beta (KL), gamma (SSIM), kappa (perceptual)."""
    alpha: float
    beta: float
    gamma: float
    kappa: float

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.kappa) < 0:
            raise InvalidArgumentError(f"loss weights must be >= 0, got {self}")

    @property
    def total(self) -> float:
        return self.alpha + self.beta + self.gamma + self.kappa

    def is_normalized(self, tol: float = WEIGHT_SUM_TOL) -> bool:
        return abs(self.total - 1.0) <= tol

    def check(self) -> 'LossWeights':
        if not self.is_normalized():
            raise InvalidArgumentError(
                f"loss weights must sum to 1 within {WEIGHT_SUM_TOL}, got {self.total:.9f}")
        return self

    def normalized(self) -> 'LossWeights':
        total = self.total
        if total <= 0:
            raise InvalidArgumentError("cannot normalize all-zero loss weights")
        return LossWeights(self.alpha / total, self.beta / total, self.gamma / total, self.kappa / total)

    def with_beta(self, beta: float) -> 'LossWeights':
        """Set beta and rescale alpha, gamma, kappa so the four sum to 1."""
        if not 0 <= beta <= 1:
            raise InvalidArgumentError(f"beta must be in [0, 1], got {beta}")
        rest = self.alpha + self.gamma + self.kappa
        if rest <= 0:
            return LossWeights(0.0, 1.0, 0.0, 0.0) if beta == 1 else LossWeights(1.0 - beta, beta, 0.0, 0.0)
        scale = (1.0 - beta) / rest
        return LossWeights(self.alpha * scale, beta, self.gamma * scale, self.kappa * scale)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear KL-weight ramp from beta_start to beta_end over anneal_epochs."""
    beta_start: float
    beta_end: float
    anneal_epochs: int

    def __post_init__(self):
        if self.beta_start > self.beta_end:
            raise InvalidArgumentError("beta_start must be <= beta_end")
        if self.anneal_epochs < 1:
            raise InvalidArgumentError("anneal_epochs must be >= 1")

    def beta(self, epoch: int) -> float:
        if epoch >= self.anneal_epochs:
            return self.beta_end
        t = max(epoch, 0) / self.anneal_epochs
        return self.beta_start + (self.beta_end - self.beta_start) * t

    def weights_at(self, base: LossWeights, epoch: int) -> LossWeights:
        return base.with_beta(self.beta(epoch))

    def to_dict(self) -> dict:
        return asdict(self)


# Preset weight rows; model1 and model3 do not sum to one as listed.
_PRESET_ROWS: Dict[str, Tuple[Tuple[float, float, float, float], Optional[Tuple[float, float, int]]]] = {
    "model1": ((0.27, 0.27, 0.22, 0.22), None),
    "model2": ((0.318, 0.318, 0.136, 0.227), None),
    "model3": ((0.338, 0.166, 0.1925, 0.2535), None),
    "model4": ((0.4, 0.3, 0.0, 0.3), None),
    "model5": ((0.35, 0.3, 0.15, 0.2), (0.07, 0.3, 200)),
    "model6": ((0.4, 0.3, 0.2, 0.1), (0.03, 0.3, 200)),
}

PRESET_NAMES = tuple(_PRESET_ROWS)


def loss_weight_preset(name: str) -> Tuple[LossWeights, Optional[AnnealSchedule]]:
    """
    Weights and optional anneal schedule of a named preset.

    Annealed presets store beta_end in the weights; the schedule rescales
    the others at every epoch.
    """
    if name not in _PRESET_ROWS:
        raise ConfigurationError(f"Unknown loss-weight preset {name!r}; choose from {list(PRESET_NAMES)}")
    row, anneal = _PRESET_ROWS[name]
    weights = LossWeights(*row)
    schedule = AnnealSchedule(*anneal) if anneal else None
    if schedule is not None:
        weights = weights.with_beta(schedule.beta_end)
    elif not weights.is_normalized():
        logger.warning(f"Preset {name} weights sum to {weights.total:.4f}; renormalizing to 1")
        weights = weights.normalized()
    return weights, schedule


@dataclass
class TrainingConfig:
    """ResVAE training knobs; defaults are the full-scale run."""
    epochs: int = 250
    batch_size: int = 64
    learning_rate: float = 1e-3
    preset: Optional[str] = "model1"
    weights: Optional[Dict[str, float]] = None
    anneal: Optional[Dict[str, float]] = None
    seed: int = 0
    latent_dim: int = 256
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    perceptual_width_divisor: int = 1
    perceptual_weights: Optional[str] = None
    pretrained_perceptual: bool = False
    invert_input: bool = True
    checkpoint_dir: Optional[str] = None
    num_threads: int = 1
    show_progress: bool = True

    def resolve_weights(self) -> Tuple[LossWeights, Optional[AnnealSchedule]]:
        """Explicit weights win over the named preset."""
        if self.weights is not None:
            try:
                weights = LossWeights(**self.weights)
                schedule = AnnealSchedule(**self.anneal) if self.anneal else None
            except TypeError as e:
                raise ConfigurationError(f"Malformed loss weights: {e}") from e
            if schedule is not None:
                return weights.with_beta(schedule.beta(0)), schedule
            if not weights.is_normalized():
                raise ConfigurationError(f"loss weights sum to {weights.total:.6f}, expected 1")
            return weights, None
        if self.preset is None:
            raise ConfigurationError("either preset or weights must be given")
        return loss_weight_preset(self.preset)

    def validate(self) -> 'TrainingConfig':
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if len(self.channels) < 2:
            raise ConfigurationError("channels needs a stem width and at least one block")
        self.resolve_weights()
        return self

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'TrainingConfig':
        data = dict(data or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'TrainingConfig':
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError as e:
            raise ConfigurationError(f"Training config not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Training config is not valid JSON: {path}: {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

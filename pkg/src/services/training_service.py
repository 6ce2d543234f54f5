"""
ResVAE training under the dual-dataset protocol.

Every input (clean or defective) is paired with a clean ground truth of
the same glyph; the loss compares the reconstruction of the input with
the ground truth, so the model learns to erase defects.
"""

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
import torch
from tqdm import tqdm

from core.errors import InvalidArgumentError, TrainingDivergedError
from core.events import Event, EventType, event_bus
from models.perceptual import PerceptualNet
from models.resvae import ResVAE
from models.training import LossWeights, TrainingConfig
from services.model_service import load_perceptual_net, preprocess_char, save_model
from services.vae_losses import total_loss
from utils.image_io import read_image
from utils.logging_config import get_logger
from utils.manifest import read_manifest, record_path

logger = get_logger(__name__)

Pairs = Tuple[torch.Tensor, torch.Tensor]


@dataclass
class EpochStats:
    epoch: int
    weights: Dict[str, float]
    train_loss: float
    val_loss: Optional[float]
    breakdown: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingResult:
    model: ResVAE
    curve: List[EpochStats]
    checkpoints: List[Path] = field(default_factory=list)

    def curve_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.curve:
            rows.append({"epoch": s.epoch, "train_loss": s.train_loss, "val_loss": s.val_loss,
                         **{f"w_{k}": v for k, v in s.weights.items()},
                         **{f"term_{k}": v for k, v in s.breakdown.items() if k != "total"}})
        return pd.DataFrame(rows)


def load_pairs(manifest: Union[str, Path], invert: bool = True, size: int = 64,
               limit: Optional[int] = None) -> Pairs:
    """(inputs, ground truths) tensors for every record of a character manifest."""
    records = read_manifest(manifest)[:limit] if limit else read_manifest(manifest)
    if not records:
        raise InvalidArgumentError(f"manifest {manifest} is empty")
    inputs, targets = [], []
    for record in records:
        inputs.append(preprocess_char(read_image(record_path(manifest, record["path"])), invert, size))
        gt = record.get("gt_path") or record["path"]
        targets.append(preprocess_char(read_image(record_path(manifest, gt)), invert, size))
    return torch.cat(inputs), torch.cat(targets)


def _check_pairs(pairs: Pairs, model: ResVAE, name: str):
    inputs, targets = pairs
    if inputs.shape != targets.shape:
        raise InvalidArgumentError(f"{name} inputs {tuple(inputs.shape)} and targets {tuple(targets.shape)} differ")
    if len(inputs) == 0:
        raise InvalidArgumentError(f"{name} set is empty")
    if tuple(inputs.shape[1:]) != (3, model.input_size, model.input_size):
        raise InvalidArgumentError(f"{name} samples are {tuple(inputs.shape[1:])}, model takes "
                                   f"3 x {model.input_size} x {model.input_size}")


@torch.no_grad()
def evaluate_loss(model: ResVAE, pairs: Pairs, weights: LossWeights, pnet: Optional[PerceptualNet],
                  batch_size: int = 64) -> float:
    """Mean total loss of the posterior-mean reconstruction, in inference mode."""
    was_training = model.training
    model.eval()
    inputs, targets = pairs
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        x, target = inputs[start:start + batch_size], targets[start:start + batch_size]
        lp = model.encode(x)
        loss, _ = total_loss(target, model.decode(lp.mu), lp, weights, pnet)
        total += float(loss) * len(x)
    model.train(was_training)
    return total / len(inputs)


def train(model: ResVAE, train_pairs: Pairs, val_pairs: Optional[Pairs], cfg: TrainingConfig,
          pnet: Optional[PerceptualNet] = None) -> TrainingResult:
    """
    Adam on the weighted loss; seeded shuffling and sampling make a
    single-threaded run reproducible. With an anneal schedule the KL
    weight ramps per epoch and the other three are rescaled to keep the
    sum at one. A non-finite loss aborts with the epoch, batch and
    learning rate.
    """
    cfg.validate()
    _check_pairs(train_pairs, model, "training")
    if val_pairs is not None:
        _check_pairs(val_pairs, model, "validation")
    base_weights, schedule = cfg.resolve_weights()
    if pnet is None and (base_weights.kappa > 0 or schedule is not None):
        pnet = load_perceptual_net(cfg.perceptual_weights, cfg.perceptual_width_divisor, cfg.seed,
                                   cfg.pretrained_perceptual)

    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    inputs, targets = train_pairs
    n = len(inputs)
    checkpoint_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None

    curve, checkpoints = [], []
    epochs = tqdm(range(cfg.epochs), desc="train", disable=not cfg.show_progress)
    for epoch in epochs:
        weights = schedule.weights_at(base_weights, epoch) if schedule else base_weights
        model.train()
        order = torch.randperm(n, generator=generator)
        sums: Dict[str, float] = defaultdict(float)
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            weights.check()
            optimizer.zero_grad()
            xhat, lp = model(inputs[idx], generator=generator)
            loss, parts = total_loss(targets[idx], xhat, lp, weights, pnet)
            if not torch.isfinite(loss):
                lr = optimizer.param_groups[0]["lr"]
                logger.error(f"Loss diverged at epoch {epoch}, batch {batch_index}, lr {lr}: {parts}")
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch_index}",
                                            epoch, batch_index, lr, parts)
            loss.backward()
            optimizer.step()
            for key, value in parts.items():
                sums[key] += value * len(idx)

        breakdown = {key: value / n for key, value in sums.items()}
        val_loss = evaluate_loss(model, val_pairs, weights, pnet, cfg.batch_size) if val_pairs is not None else None
        stats = EpochStats(epoch, weights.to_dict(), breakdown["total"], val_loss, breakdown)
        curve.append(stats)
        if checkpoint_dir is not None:
            checkpoints.append(save_model(checkpoint_dir / f"epoch_{epoch + 1:04d}.rvw", model, pnet,
                                          {"epoch": epoch + 1, "invert_input": cfg.invert_input}))
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: train {stats.train_loss:.6f}"
                    + (f", val {val_loss:.6f}" if val_loss is not None else "")
                    + f", beta {weights.beta:.4f}")
        event_bus.publish(Event(EventType.EPOCH_COMPLETED, data=stats.to_dict(), source="training"))
        epochs.set_postfix(loss=f"{stats.train_loss:.4f}")

    model.eval()
    return TrainingResult(model, curve, checkpoints)


class TrainingService:
    """Builds the model from a TrainingConfig, trains it and writes the weights."""

    def __init__(self, cfg: TrainingConfig):
        self.cfg = cfg.validate()
        self.logger = get_logger(__name__)

    def build_model(self) -> ResVAE:
        torch.manual_seed(self.cfg.seed)
        return ResVAE(self.cfg.channels, self.cfg.latent_dim)

    def run(self, train_manifest: Union[str, Path], out_path: Union[str, Path],
            val_manifest: Optional[Union[str, Path]] = None, limit: Optional[int] = None) -> TrainingResult:
        model = self.build_model()
        size = model.input_size
        self.logger.info(f"Loading training pairs from {train_manifest}")
        train_pairs = load_pairs(train_manifest, self.cfg.invert_input, size, limit)
        val_pairs = load_pairs(val_manifest, self.cfg.invert_input, size) if val_manifest else None
        pnet = load_perceptual_net(self.cfg.perceptual_weights, self.cfg.perceptual_width_divisor,
                                   self.cfg.seed, self.cfg.pretrained_perceptual)
        result = train(model, train_pairs, val_pairs, self.cfg, pnet)
        save_model(out_path, result.model, pnet, {"invert_input": self.cfg.invert_input,
                                                  "epochs": self.cfg.epochs})
        curve_path = Path(out_path).with_suffix(".curve.csv")
        result.curve_frame().to_csv(curve_path, index=False)
        self.logger.info(f"Wrote loss curve to {curve_path}")
        return result

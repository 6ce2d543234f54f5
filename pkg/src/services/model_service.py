"""
ResVAE and perceptual-net persistence plus character preprocessing.

Both networks live in one RVW1 container under the "vae." and "pnet."
prefixes; the header meta records the architecture so a weight file is
self-describing.
"""

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from core.base import ResizeMode
from core.errors import ConfigurationError, InvalidArgumentError
from models.image import GrayImage
from models.perceptual import PerceptualNet, init_from_torchvision, init_orthogonal
from models.resvae import ResVAE
from utils.image_processing import invert as invert_image
from utils.image_processing import resize
from utils.logging_config import get_logger
from utils.weight_container import add_prefix, read_weights, strip_prefix, write_weights

logger = get_logger(__name__)

VAE_PREFIX = "vae."
PNET_PREFIX = "pnet."
CHAR_SIZE = 64


def _state_arrays(module: torch.nn.Module) -> dict:
    return {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}


def _load_arrays(module: torch.nn.Module, arrays: dict, path: Path):
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise ConfigurationError(f"{path}: weights do not fit the network "
                                 f"(missing {missing[:5]}, unexpected {unexpected[:5]})")
    restored = {}
    for name, current in state.items():
        value = torch.from_numpy(np.ascontiguousarray(arrays[name]))
        if tuple(value.shape) != tuple(current.shape):
            raise ConfigurationError(f"{path}: tensor {name} has shape {tuple(value.shape)}, "
                                     f"expected {tuple(current.shape)}")
        restored[name] = value.to(current.dtype)
    module.load_state_dict(restored)


def save_model(path: Union[str, Path], model: ResVAE, pnet: Optional[PerceptualNet] = None,
               meta: Optional[dict] = None) -> Path:
    """Write the VAE (and optionally the perceptual net) to one container."""
    tensors = add_prefix(_state_arrays(model), VAE_PREFIX)
    header = {"vae": model.hyperparameters(), **(meta or {})}
    if pnet is not None:
        tensors.update(add_prefix(_state_arrays(pnet), PNET_PREFIX))
        header["pnet"] = {"width_divisor": pnet.width_divisor}
    path = write_weights(path, tensors, header)
    logger.info(f"Saved model weights to {path}")
    return path


def load_model(path: Union[str, Path]) -> ResVAE:
    """Rebuild the ResVAE described by the container meta, in inference mode."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"model weights not found: {path}")
    tensors, meta = read_weights(path, prefix=VAE_PREFIX)
    arch = meta.get("vae")
    if not tensors or not isinstance(arch, dict):
        raise ConfigurationError(f"{path} holds no ResVAE weights")
    model = ResVAE(arch.get("channels", [16, 32, 64, 128, 256]), arch.get("latent_dim", 256))
    _load_arrays(model, strip_prefix(tensors, VAE_PREFIX), path)
    logger.info(f"Loaded ResVAE {arch} from {path}")
    return model.eval()


def load_perceptual_net(path: Optional[Union[str, Path]] = None, width_divisor: int = 1, seed: int = 0,
                        pretrained: bool = False) -> PerceptualNet:
    """
    Frozen perceptual net.

    With a path, its "pnet." tensors are loaded and a missing file is a
    configuration error. Without one the net is initialized from
    torchvision VGG19 (pretrained=True) or from the seeded orthogonal
    fallback.
    """
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"perceptual weights not found: {path}")
        tensors, meta = read_weights(path, prefix=PNET_PREFIX)
        if not tensors:
            raise ConfigurationError(f"{path} holds no perceptual-net weights")
        net = PerceptualNet(int(meta.get("pnet", {}).get("width_divisor", width_divisor)))
        _load_arrays(net, strip_prefix(tensors, PNET_PREFIX), path)
        logger.info(f"Loaded perceptual net from {path}")
        return net.freeze()

    net = PerceptualNet(width_divisor)
    if pretrained:
        try:
            return init_from_torchvision(net).freeze()
        except Exception as e:
            logger.warning(f"Pretrained VGG19 weights unavailable ({e}); using seeded orthogonal weights")
    else:
        logger.warning(f"No perceptual weights given; using seeded orthogonal weights (seed {seed})")
    return init_orthogonal(net, seed).freeze()


def preprocess_char(crop: GrayImage, invert: bool = False, size: int = CHAR_SIZE) -> torch.Tensor:
    """
    Crop -> 1 x 3 x size x size float tensor in [-1, 1].

    invert flips the polarity first; the crop is resized regardless of
    aspect ratio and the gray channel replicated three times.
    """
    if crop.width < 1 or crop.height < 1:
        raise InvalidArgumentError("character crop is empty")
    if invert:
        crop = invert_image(crop)
    if crop.size != (size, size):
        crop = resize(crop, size, size, ResizeMode.BILINEAR)
    values = torch.from_numpy(crop.pixels.astype(np.float32) / 255.0) * 2.0 - 1.0
    return values.expand(1, 3, size, size).contiguous()


def preprocess_batch(crops: Sequence[GrayImage], invert: bool = False, size: int = CHAR_SIZE) -> torch.Tensor:
    if not crops:
        return torch.zeros(0, 3, size, size)
    return torch.cat([preprocess_char(c, invert, size) for c in crops], dim=0)


def tensor_to_image(t: torch.Tensor) -> GrayImage:
    """Channel 0 of a single [-1, 1] image back to 8-bit."""
    values = t.detach().cpu().reshape(-1, *t.shape[-2:])[0].numpy()
    return GrayImage.from_array((values + 1.0) * 127.5)


class ModelService:
    """Owns the inference model and the perceptual net for a process."""

    def __init__(self, num_threads: Optional[int] = None):
        self.logger = get_logger(__name__)
        self.device = torch.device("cpu")
        if num_threads:
            torch.set_num_threads(num_threads)
        self.model: Optional[ResVAE] = None
        self.model_path: Optional[Path] = None
        self.logger.info(f"ModelService initialized with device: {self.device}")

    def load(self, path: Union[str, Path]) -> ResVAE:
        if self.model is not None and self.model_path == Path(path):
            return self.model
        self.model = load_model(path).to(self.device)
        self.model_path = Path(path)
        return self.model

    def is_loaded(self) -> bool:
        return self.model is not None

    def get_device_info(self) -> dict:
        return {
            "device": str(self.device),
            "threads": torch.get_num_threads(),
            "model_loaded": self.model is not None,
            "model_path": str(self.model_path) if self.model_path else None,
            "architecture": self.model.hyperparameters() if self.model is not None else None,
        }

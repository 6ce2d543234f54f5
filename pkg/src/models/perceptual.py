"""
Frozen VGG19-style feature extractor for the perceptual loss.

Sixteen 3x3 convolutions (64/128/256/512 widths, divided by
width_divisor) with ReLU, and four 2x2 max-pool stages; the fifth VGG19
pool is left out. Features are tapped after each pooling stage.
"""

from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import InvalidArgumentError
from utils.logging_config import get_logger

logger = get_logger(__name__)

# Integers are conv widths, "M" a pooling stage
VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualNet(nn.Module):
    """VGG19 convolution stack; parameters never train."""

    def __init__(self, width_divisor: int = 1):
        super().__init__()
        if width_divisor < 1:
            raise InvalidArgumentError(f"width_divisor must be >= 1, got {width_divisor}")
        self.width_divisor = int(width_divisor)
        self.convs = nn.ModuleList()
        self._plan = []  # conv index or "M"
        in_channels = 3
        for item in VGG19_LAYOUT:
            if item == "M":
                self._plan.append("M")
                continue
            out_channels = max(1, item // self.width_divisor)
            self._plan.append(len(self.convs))
            self.convs.append(nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1))
            in_channels = out_channels
        # Maps [-1, 1] input to the statistics the conv weights expect
        self.register_buffer("input_scale", torch.ones(1, 3, 1, 1))
        self.register_buffer("input_shift", torch.zeros(1, 3, 1, 1))

    @property
    def tap_count(self) -> int:
        return self._plan.count("M")

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Activations after each pooling stage."""
        h = x * self.input_scale + self.input_shift
        taps = []
        for step in self._plan:
            if step == "M":
                h = F.max_pool2d(h, 2, 2)
                taps.append(h)
                if len(taps) == self.tap_count:
                    break
            else:
                h = F.relu(self.convs[step](h))
        return taps

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.features(x)

    def freeze(self) -> 'PerceptualNet':
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True) -> 'PerceptualNet':
        # Fixed feature extractor: always evaluation mode
        return super().train(False)


def init_orthogonal(net: PerceptualNet, seed: int = 0) -> PerceptualNet:
    """Seeded orthogonal conv weights (ReLU gain), zero biases."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for conv in net.convs:
            nn.init.orthogonal_(conv.weight, gain=nn.init.calculate_gain("relu"))
            nn.init.zeros_(conv.bias)
    return net


def init_from_torchvision(net: PerceptualNet) -> PerceptualNet:
    """Copy ImageNet VGG19 conv weights; needs torchvision and the cached weights."""
    if net.width_divisor != 1:
        raise InvalidArgumentError("pretrained VGG19 weights need width_divisor 1")
    from torchvision.models import VGG19_Weights, vgg19

    source = [m for m in vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        for dst, src in zip(net.convs, source):
            dst.weight.copy_(src.weight)
            dst.bias.copy_(src.bias)
        # [-1, 1] -> [0, 1] -> ImageNet standardization
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        net.input_scale.copy_(0.5 / std)
        net.input_shift.copy_((0.5 - mean) / std)
    logger.info("Initialized perceptual net from torchvision VGG19 weights")
    return net

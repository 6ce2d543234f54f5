"""
Residual variational autoencoder for 64x64 character crops.

Encoder: 7x7 stem conv, then ResDown blocks halving the resolution down
to 4x4, then two parallel 4x4 convs giving mu and logvar at 1x1.
Decoder: 4x4 transposed conv from 1x1 to 4x4, ResUp blocks doubling back
to the input size, 3x3 conv to three channels and tanh.

`channels` lists the stem width followed by one width per ResDown block;
the input side is 4 * 2 ** (len(channels) - 1), so the default
[16, 32, 64, 128, 256] takes 64x64 crops.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.base import IReconstructor
from core.errors import InvalidArgumentError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
DEFAULT_CHANNELS = (16, 32, 64, 128, 256)


@dataclass
class LatentParams:
    """Per-sample Gaussian posterior, mu and logvar shaped n x latent_dim."""
    mu: torch.Tensor
    logvar: torch.Tensor

    def detach(self) -> 'LatentParams':
        return LatentParams(self.mu.detach(), self.logvar.detach())


def check_finite(x: torch.Tensor, name: str = "tensor"):
    if not torch.isfinite(x).all():
        raise InvalidArgumentError(f"{name} contains NaN or Inf")


class ResDown(nn.Module):
    """conv(s2) -> bn+ELU -> conv, plus a strided conv shortcut; bn+ELU after the sum."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv2(F.elu(self.bn1(self.conv1(x))))
        return F.elu(self.bn2(out + self.skip(x)))


class ResUp(nn.Module):
    """Nearest x2 upsample, then conv -> bn+ELU -> conv, plus a conv shortcut; bn+ELU after the sum."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        out = self.conv2(F.elu(self.bn1(self.conv1(x))))
        return F.elu(self.bn2(out + self.skip(x)))


class ResVAE(nn.Module, IReconstructor):
    """Residual VAE; reconstruct() decodes the posterior mean."""

    def __init__(self, channels: Sequence[int] = DEFAULT_CHANNELS, latent_dim: int = 256):
        super().__init__()
        channels = [int(c) for c in channels]
        if len(channels) < 2 or min(channels) < 1:
            raise InvalidArgumentError(f"channels needs at least two positive widths, got {channels}")
        if latent_dim < 1:
            raise InvalidArgumentError(f"latent_dim must be >= 1, got {latent_dim}")
        self.channels: List[int] = channels
        self.latent_dim = int(latent_dim)
        self.input_size = 4 * 2 ** (len(channels) - 1)

        self.stem = nn.Conv2d(3, channels[0], 7, stride=1, padding=3)
        self.down = nn.ModuleList(ResDown(a, b) for a, b in zip(channels[:-1], channels[1:]))
        self.to_mu = nn.Conv2d(channels[-1], latent_dim, 4)
        self.to_logvar = nn.Conv2d(channels[-1], latent_dim, 4)

        self.from_latent = nn.ConvTranspose2d(latent_dim, channels[-1], 4)
        reversed_channels = channels[::-1]
        self.up = nn.ModuleList(ResUp(a, b) for a, b in zip(reversed_channels[:-1], reversed_channels[1:]))
        self.head = nn.Conv2d(channels[0], 3, 3, stride=1, padding=1)

    def hyperparameters(self) -> dict:
        return {"channels": list(self.channels), "latent_dim": self.latent_dim, "input_size": self.input_size}

    def encode(self, x: torch.Tensor) -> LatentParams:
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (self.input_size, self.input_size):
            raise InvalidArgumentError(
                f"expected n x 3 x {self.input_size} x {self.input_size} input, got {tuple(x.shape)}")
        check_finite(x, "encoder input")
        h = self.stem(x)
        for block in self.down:
            h = block(h)
        mu = self.to_mu(h).flatten(1)
        logvar = self.to_logvar(h).flatten(1).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return LatentParams(mu, logvar)

    @staticmethod
    def reparameterize(lp: LatentParams, eps: Optional[torch.Tensor] = None,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """z = mu + eps * exp(0.5 * logvar); eps is drawn when not given."""
        if eps is None:
            eps = torch.randn(lp.mu.shape, generator=generator, dtype=lp.mu.dtype, device=lp.mu.device)
        elif eps.shape != lp.mu.shape:
            eps = eps.expand_as(lp.mu)
        return lp.mu + eps * torch.exp(0.5 * lp.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        check_finite(z, "latent")
        h = self.from_latent(z.reshape(z.shape[0], self.latent_dim, 1, 1))
        for block in self.up:
            h = block(h)
        return torch.tanh(self.head(h))

    def forward(self, x: torch.Tensor, eps: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None):
        lp = self.encode(x)
        return self.decode(self.reparameterize(lp, eps, generator)), lp

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x).mu)

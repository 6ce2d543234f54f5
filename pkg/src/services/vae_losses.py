"""
ResVAE loss terms.

All image tensors are n x c x h x w in [-1, 1]. Each term returns a
scalar tensor so it can be back-propagated; total_loss also returns a
float breakdown for logging.
"""

from functools import lru_cache
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from core.errors import InvalidArgumentError
from models.perceptual import PerceptualNet
from models.resvae import LatentParams
from models.training import LossWeights

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DATA_RANGE = 2.0
SSIM_C1 = (0.01 * DATA_RANGE) ** 2
SSIM_C2 = (0.03 * DATA_RANGE) ** 2


def _same_shape(x: torch.Tensor, xhat: torch.Tensor):
    if x.shape != xhat.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")


def loss_kl(lp: LatentParams) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    per_sample = -0.5 * torch.sum(1.0 + lp.logvar - lp.mu.pow(2) - lp.logvar.exp(), dim=1)
    return per_sample.mean()


def loss_mse(x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    _same_shape(x, xhat)
    return F.mse_loss(xhat, x, reduction="mean")


@lru_cache(maxsize=16)
def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords.pow(2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: torch.Tensor, xhat: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2,
             window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Per-window SSIM over valid Gaussian windows, one map per channel."""
    _same_shape(x, xhat)
    if c1 <= 0 or c2 <= 0:
        raise InvalidArgumentError("SSIM constants must be > 0")
    size = min(window, x.shape[-2], x.shape[-1])
    if size % 2 == 0:
        size -= 1
    channels = x.shape[1]
    kernel = _gaussian_window(size, sigma, x.dtype).to(x.device).expand(channels, 1, size, size)

    def filt(t):
        return F.conv2d(t, kernel, groups=channels)

    mu_x, mu_y = filt(x), filt(xhat)
    mu_xy = mu_x * mu_y
    mu_xx, mu_yy = mu_x * mu_x, mu_y * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(xhat * xhat) - mu_yy
    cov = filt(x * xhat) - mu_xy
    return ((2.0 * mu_xy + c1) * (2.0 * cov + c2)) / ((mu_xx + mu_yy + c1) * (var_x + var_y + c2))


def loss_ssim(x: torch.Tensor, xhat: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """1 - mean SSIM over windows and channels."""
    return 1.0 - ssim_map(x, xhat, c1, c2).mean()


def loss_perceptual(x: torch.Tensor, xhat: torch.Tensor, pnet: PerceptualNet) -> torch.Tensor:
    """Mean squared feature difference per tap, averaged over the taps."""
    _same_shape(x, xhat)
    taps_x = pnet.features(x)
    taps_y = pnet.features(xhat)
    terms = [F.mse_loss(fy, fx, reduction="mean") for fx, fy in zip(taps_x, taps_y)]
    return torch.stack(terms).mean()


def total_loss(x: torch.Tensor, xhat: torch.Tensor, lp: LatentParams, w: LossWeights,
               pnet: Optional[PerceptualNet] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    alpha * MSE + beta * KL + gamma * (1 - SSIM) + kappa * perceptual.

    Terms with zero weight are not evaluated and do not appear in the
    breakdown.
    """
    w.check()
    terms = {}
    if w.alpha > 0:
        terms["mse"] = (w.alpha, loss_mse(x, xhat))
    if w.beta > 0:
        terms["kl"] = (w.beta, loss_kl(lp))
    if w.gamma > 0:
        terms["ssim"] = (w.gamma, loss_ssim(x, xhat))
    if w.kappa > 0:
        if pnet is None:
            raise InvalidArgumentError("a perceptual net is required when kappa > 0")
        terms["perceptual"] = (w.kappa, loss_perceptual(x, xhat, pnet))

    total = x.new_zeros(())
    for weight, value in terms.values():
        total = total + weight * value
    breakdown = {name: float(value.detach()) for name, (_, value) in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown

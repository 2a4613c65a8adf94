"""Training objectives: latent-partition loss, reconstruction triple,
discriminator objective, attention supervision, and the two stage
combinations.

All losses sum over the batch (expectations in the discriminator
objective are batch means). Composite objectives are affine in their
weights, with the per-term sums reported in a breakdown dict for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    alpha1: float = 1.0   # reconstruction weight in the stage-1 objective
    alpha2: float = 1.0   # latent weight in the stage-1 objective
    beta1: float = 1.0    # pixel term
    beta2: float = 1.0    # perceptual term
    beta3: float = 0.01   # adversarial term
    lambda1: float = 0.5  # latent weight in the stage-2 objective
    lambda2: float = 1.0  # attention weight in the stage-2 objective

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2", "beta3",
                     "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def latent_loss(a_t: torch.Tensor, a_f: torch.Tensor,
                labels: torch.Tensor) -> torch.Tensor:
    """sum_i |a_T - l_i| + |a_F - (1 - l_i)| with l = 1 for true images."""
    if a_t.shape != a_f.shape or a_t.shape != labels.shape:
        raise ValueError("activations and labels must have matching lengths")
    l = labels.to(a_t.dtype)
    return ((a_t - l).abs() + (a_f - (1.0 - l)).abs()).sum()


def _sq_err(a: torch.Tensor, b: torch.Tensor, mae: bool) -> torch.Tensor:
    """Per-sample squared L2 (or element-mean absolute) error, summed over batch."""
    d = (a - b).reshape(a.shape[0], -1)
    if mae:
        return d.abs().mean(dim=1).sum()
    return (d ** 2).sum()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor,
                        comparator, discriminator, weights: LossWeights,
                        mae: bool = False) -> tuple[torch.Tensor, dict]:
    """Pixel + perceptual + adversarial reconstruction objective.

    Returns (weighted total, breakdown) where the breakdown holds the
    unweighted per-term sums plus a ``clamped`` flag raised when the
    discriminator saturates at 0 and the log had to be clamped.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    pixel = _sq_err(x, x_hat, mae)
    perceptual = _sq_err(comparator(x), comparator(x_hat), mae)
    d_out = discriminator(x_hat)
    clamped = bool((d_out <= LOG_CLAMP).any())
    adversarial = -torch.log(d_out.clamp_min(LOG_CLAMP)).sum()
    total = (weights.beta1 * pixel + weights.beta2 * perceptual
             + weights.beta3 * adversarial)
    breakdown = {"pixel": pixel, "perceptual": perceptual,
                 "adversarial": adversarial, "clamped": clamped}
    return total, breakdown


def discriminator_loss(reals: torch.Tensor, fakes: torch.Tensor,
                       discriminator) -> torch.Tensor:
    """-E[log D(x)] - E[log(1 - D(x_hat))], batch means; x_hat is detached
    so no gradient reaches the generator."""
    if reals.shape[0] == 0 or fakes.shape[0] == 0:
        raise ValueError("discriminator loss needs nonempty real and fake batches")
    d_real = discriminator(reals)
    d_fake = discriminator(fakes.detach())
    return (-torch.log(d_real.clamp_min(LOG_CLAMP)).mean()
            - torch.log((1.0 - d_fake).clamp_min(LOG_CLAMP)).mean())


def attention_loss(maps: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """sum_i mean_pixels (M_hat_i - G_i)^2 over annotated fakes.

    The pixel reduction is a mean so the weight is resolution-independent.
    """
    if maps.shape != masks.shape:
        raise ValueError(f"map/mask shape mismatch: {tuple(maps.shape)} vs "
                         f"{tuple(masks.shape)}")
    if maps.shape[0] == 0:
        return maps.sum()  # empty annotated set contributes zero
    return ((maps - masks) ** 2).reshape(maps.shape[0], -1).mean(dim=1).sum()


def stage1_objective(rec: torch.Tensor, latent: torch.Tensor,
                     weights: LossWeights) -> torch.Tensor:
    """alpha1 * L_rec + alpha2 * L_latent."""
    return weights.alpha1 * rec + weights.alpha2 * latent


def stage2_objective(latent: torch.Tensor, attention: torch.Tensor,
                     weights: LossWeights) -> torch.Tensor:
    """lambda1 * L_latent + lambda2 * L_attention."""
    return weights.lambda1 * latent + weights.lambda2 * attention

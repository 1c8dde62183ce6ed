"""Scalar training objectives: hinge GAN terms, L1, and the
contextual-reconstruction loss built from the auxiliary image.

All L1 terms are means over pixels, so the weights are independent of
resolution. Every function is pure given the network outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import nets
from .patchops import SimilarityMap


@dataclass(frozen=True)
class LossWeights:
    """cr_weight scales the contextual-reconstruction term, l1_weight the
    pixel term, sharpness the replacement softmax."""

    cr_weight: float = 0.5
    l1_weight: float = 1.5
    sharpness: float = 10.0

    def __post_init__(self):
        if self.cr_weight < 0 or self.l1_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")


def d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Hinge discriminator loss over two score maps."""
    if real_scores.shape != fake_scores.shape:
        raise ValueError(
            f"score maps disagree: {tuple(real_scores.shape)} vs {tuple(fake_scores.shape)}"
        )
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def g_adversarial(scores: torch.Tensor) -> torch.Tensor:
    """Hinge generator term: mean ReLU(1 - D(composite))."""
    return F.relu(1.0 - scores).mean()


def g_inpaint_loss(y, u, m, x, discriminator, weights: LossWeights = LossWeights()):
    """Adversarial + weighted L1 loss of a prediction.

    The composite y * m + u is what the discriminator scores; the L1
    term compares the raw prediction against the ground truth over all
    pixels.
    """
    composite = nets.compose(y, u, m)
    adv = g_adversarial(discriminator(composite))
    l1 = weights.l1_weight * (y - x).abs().mean()
    return adv + l1


def cr_loss(u, m, x, sims, discriminator, aux_net,
            weights: LossWeights = LossWeights()):
    """Contextual-reconstruction loss: the inpainting loss of the
    auxiliary image rebuilt from borrowed known patches.

    ``sims`` is one SimilarityMap per sample (or a single map for an
    unbatched call); samples with an empty or absent known set are
    skipped. Returns (loss, skipped_flag); the loss is 0 when every
    sample was skipped.  Gradients reach the generator only through the
    similarity values.
    """
    if isinstance(sims, SimilarityMap):
        sims = [sims]
    usable = [i for i, s in enumerate(sims) if s is not None and s.known_set]
    if not usable:
        return torch.zeros((), dtype=u.dtype, device=u.device), True
    sims = [sims[i] if i in usable else None for i in range(len(sims))]

    aux = aux_net(u, m, sims, weights.sharpness)
    idx = torch.tensor(usable, device=u.device)
    loss = g_inpaint_loss(
        aux[idx], u[idx], m[idx], x[idx], discriminator, weights
    )
    return loss, False


def g_total_loss(inpaint_term, cr_term, weights: LossWeights = LossWeights()):
    """Refinement objective: inpainting loss plus the weighted
    contextual-reconstruction loss."""
    return inpaint_term + weights.cr_weight * cr_term


def coarse_l1_loss(y1, x, weights: LossWeights = LossWeights()):
    """The coarse network trains on the weighted L1 term only."""
    return weights.l1_weight * (y1 - x).abs().mean()

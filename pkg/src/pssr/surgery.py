"""Saliency-driven pixel surgery.

Scores each pixel's contribution to the prediction, thresholds at a multiple
of the per-sample mean score, and splits the input into complementary
salient/trivial components. The deployment path masks the image itself; the
exploratory path masks the perturbation and re-adds it to the clean image.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .models import input_gradient

DEFAULT_ALPHA = 1.5  # threshold multiplier with the best observed robustness


@dataclass
class SaliencyMap:
    """Non-negative per-pixel contribution scores, channel-reduced."""

    scores: torch.Tensor  # [N, H, W] >= 0
    per_sample_mean: torch.Tensor  # [N]

    def __post_init__(self):
        if self.scores.ndim != 3:
            raise ValueError(f"scores must be [N,H,W], got {tuple(self.scores.shape)}")
        if (self.scores < 0).any():
            raise ValueError("saliency scores must be non-negative")


@dataclass
class MaskPair:
    """Complementary binary masks: salient + trivial = 1 everywhere."""

    salient: torch.Tensor  # float {0,1} [N, H, W]
    trivial: torch.Tensor
    alpha: float
    threshold: torch.Tensor  # [N]


@dataclass
class ComponentPair:
    salient_component: torch.Tensor  # [N, C, H, W]
    trivial_component: torch.Tensor
    mode: str  # image_mask | perturbation_mask
    clipped_fraction: float = 0.0


def compute_saliency(model, images: torch.Tensor, score_target: str = "predicted_prob",
                     labels: torch.Tensor | None = None) -> SaliencyMap:
    """Channel-max of the absolute input gradient of the selected scalar.

    At defense time the scalar is the predicted-class probability of the
    incoming image, so no ground-truth label is needed.
    """
    grad = input_gradient(model, images, target=score_target, labels=labels)
    scores = grad.abs().amax(dim=1)
    return SaliencyMap(scores, scores.flatten(1).mean(dim=1))


def make_masks(saliency: SaliencyMap, alpha: float = DEFAULT_ALPHA) -> MaskPair:
    """Threshold at alpha times the per-sample mean; ties go salient.

    An all-zero saliency map would mark every pixel salient under the >= rule;
    that degenerate case is intercepted and the salient mask zeroed so the
    trivial path passes the image through untouched.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    threshold = alpha * saliency.per_sample_mean
    salient = (saliency.scores >= threshold.view(-1, 1, 1)).float()
    degenerate = saliency.per_sample_mean == 0
    if degenerate.any():
        salient[degenerate] = 0.0
    return MaskPair(salient, 1.0 - salient, alpha, threshold)


def apply_surgery(images: torch.Tensor, masks: MaskPair) -> ComponentPair:
    """Elementwise products with the masks broadcast over channels; exact additivity."""
    m_s = masks.salient.unsqueeze(1)
    m_t = masks.trivial.unsqueeze(1)
    return ComponentPair(images * m_s, images * m_t, mode="image_mask")


def decompose_perturbation(clean: torch.Tensor, adv: torch.Tensor,
                           masks: MaskPair) -> ComponentPair:
    """Add the masked perturbation halves back onto the clean image.

    Each output pixel equals either the clean or the adversarial pixel, so
    the [0,1] clip is a no-op in exact arithmetic; the clipped fraction is
    recorded anyway.
    """
    if clean.shape != adv.shape:
        raise ValueError(f"clean {tuple(clean.shape)} and adv {tuple(adv.shape)} must align")
    delta = adv - clean
    salient_raw = clean + delta * masks.salient.unsqueeze(1)
    trivial_raw = clean + delta * masks.trivial.unsqueeze(1)
    salient = salient_raw.clamp(0.0, 1.0)
    trivial = trivial_raw.clamp(0.0, 1.0)
    clipped = ((salient != salient_raw) | (trivial != trivial_raw)).float().mean().item()
    return ComponentPair(salient, trivial, mode="perturbation_mask", clipped_fraction=clipped)


def salient_fraction(masks: MaskPair) -> float:
    return masks.salient.mean().item()

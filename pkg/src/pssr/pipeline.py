"""Defended inference: pixel surgery and/or regeneration in front of the classifier.

Variants wire the two stages on and off: baseline (bare classifier), ps_only
(mask salient pixels), cae_only (regenerate without surgery), ps_cae and
ps_cae_ard (surgery then regeneration; the latter differs only in how its
extrapolator was trained). The hard surgery stage is non-differentiable by
construction; `bpda_logits` exposes the straight-through approximation that
adaptive attacks differentiate.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .cae import CAEModel
from .models import EVAL_BATCH
from .surgery import DEFAULT_ALPHA, compute_saliency, make_masks

VARIANTS = ("baseline", "ps_only", "cae_only", "ps_cae", "ps_cae_ard")


class DefendedPipeline:
    def __init__(self, classifier, cae: CAEModel | None = None,
                 use_surgery: bool = True, alpha: float = DEFAULT_ALPHA):
        self.classifier = classifier
        self.cae = cae
        self.use_surgery = use_surgery
        self.alpha = alpha
        classifier.eval()
        if cae is not None:
            cae.extrapolator.eval()

    @classmethod
    def from_variant(cls, variant: str, classifier, cae: CAEModel | None = None,
                     alpha: float = DEFAULT_ALPHA) -> "DefendedPipeline":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        needs_cae = variant in ("cae_only", "ps_cae", "ps_cae_ard")
        if needs_cae and cae is None:
            raise ValueError(f"variant {variant!r} requires a trained extrapolator")
        return cls(
            classifier,
            cae=cae if needs_cae else None,
            use_surgery=variant in ("ps_only", "ps_cae", "ps_cae_ard"),
            alpha=alpha,
        )

    def _surgery_arrays(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(trivial component, trivial mask) for the incoming images."""
        if not self.use_surgery:
            return x, torch.ones_like(x[:, :1])
        sal = compute_saliency(self.classifier, x)
        masks = make_masks(sal, self.alpha)
        mask = masks.trivial.unsqueeze(1)
        return x * mask, mask

    def purify(self, x: torch.Tensor) -> torch.Tensor:
        """The defense transform alone: surgery and/or regeneration, no classifier."""
        with torch.no_grad():
            trivial, mask = self._surgery_arrays(x)
            if self.cae is None:
                return trivial
            return self.cae.extrapolator(trivial, mask)

    def predict_logits(self, x: torch.Tensor) -> torch.Tensor:
        outs = []
        with torch.no_grad():
            for i in range(0, x.shape[0], EVAL_BATCH):
                outs.append(self.classifier(self.purify(x[i : i + EVAL_BATCH])))
        return torch.cat(outs)

    def predict_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.predict_logits(x), dim=1)

    def predict_labels(self, x: torch.Tensor) -> torch.Tensor:
        return self.predict_logits(x).argmax(dim=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate-layer features of the classifier on the purified input."""
        outs = []
        with torch.no_grad():
            for i in range(0, x.shape[0], EVAL_BATCH):
                outs.append(self.classifier.features(self.purify(x[i : i + EVAL_BATCH])))
        return torch.cat(outs)

    def bpda_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable approximation: surgery is identity in the backward pass.

        Regeneration and classification stay exactly differentiable; only the
        mask-and-multiply stage is approximated.
        """
        if self.use_surgery:
            trivial, mask = _SurgeryStraightThrough.apply(x, self)
        else:
            trivial, mask = x, torch.ones_like(x[:, :1])
        regen = trivial if self.cae is None else self.cae.extrapolator(trivial, mask)
        return self.classifier(regen)


class _SurgeryStraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, pipeline):
        with torch.no_grad():
            trivial, mask = pipeline._surgery_arrays(x)
        return trivial, mask

    @staticmethod
    def backward(ctx, grad_trivial, grad_mask):
        return grad_trivial, None

"""Conditional alignment extrapolator: regenerates benign semantics from trivial pixels.

An encoder-decoder extrapolator (mask-aware, skip connections, bounded output)
is trained against a patch-level conditional discriminator with four terms:
the GAN value, a cross-entropy query loss through the frozen target model, an
L1 pixel-consistency loss against the clean image, and a dropout-twice KL
regularizer that aligns perturbed predictions on the regenerated image with
the prediction on the clean image.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, asdict, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackSpec, run_attack
from .data import ImageBatch
from .models import EVAL_BATCH
from .surgery import compute_saliency, make_masks, DEFAULT_ALPHA

log = logging.getLogger(__name__)

D_COLLAPSE_THRESHOLD = 1e-4
LOGIT_CLAMP = 1e-3  # keeps the identity path finite at saturated pixels


@dataclass
class CAEConfig:
    lambda_query: float = 1.0
    lambda_pixel: float = 1.0
    lambda_ard: float = 0.5
    dropout_rate: float = 0.1
    k_dropout: int = 2
    alpha: float = DEFAULT_ALPHA
    learning_rate: float = 1e-3
    epochs: int = 20
    seed: int = 0
    include_benign: bool = True
    gan_mode: str = "non_saturating"  # or "minimax"
    bidirectional_kl: bool = False
    e_only_on_collapse: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.k_dropout < 1:
            raise ValueError("k_dropout must be >= 1")
        if self.gan_mode not in ("non_saturating", "minimax"):
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True),
    )


class Extrapolator(nn.Module):
    """3-level encoder-decoder with skip connections and a residual identity path.

    Input is the trivial component concatenated with its mask. The head is
    zero-initialized by default so an untrained extrapolator starts as an
    approximate identity on its image input; training then learns the
    correction that restores the removed semantics.
    """

    def __init__(self, channels: int = 1, base_width: int = 32, identity_init: bool = True):
        super().__init__()
        w = base_width
        self.enc1 = _conv_block(channels + 1, w)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = _conv_block(2 * w, 2 * w)
        self.down2 = nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.bottleneck = _conv_block(4 * w, 4 * w)
        self.up2 = nn.Conv2d(4 * w, 2 * w, 3, padding=1)
        self.dec2 = _conv_block(4 * w, 2 * w)
        self.up1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec1 = _conv_block(2 * w, w)
        self.head = nn.Conv2d(w, channels, 3, padding=1)
        self.channels = channels
        if identity_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, trivial: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.ndim == 3:
            mask = mask.unsqueeze(1)
        x = torch.cat([trivial, mask], dim=1)
        e1 = self.enc1(x)
        e2 = self.enc2(F.relu(self.down1(e1)))
        b = self.bottleneck(F.relu(self.down2(e2)))
        d2 = self.dec2(torch.cat([self.up2(F.interpolate(b, size=e2.shape[-2:])), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(F.interpolate(d2, size=e1.shape[-2:])), e1], dim=1))
        identity = torch.logit(trivial.clamp(LOGIT_CLAMP, 1 - LOGIT_CLAMP))
        return torch.sigmoid(self.head(d1) + identity)


class PatchDiscriminator(nn.Module):
    """Judges (condition, image) pairs patch-wise; condition is the trivial component."""

    def __init__(self, channels: int = 1, base_width: int = 32):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.BatchNorm2d(2 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 1, 3, padding=1),
        )

    def forward(self, condition: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([condition, image], dim=1))


@dataclass
class CAEModel:
    extrapolator: Extrapolator
    discriminator: PatchDiscriminator
    config: CAEConfig

    @classmethod
    def build(cls, config: CAEConfig, channels: int = 1, seed: int | None = None) -> "CAEModel":
        if seed is not None:
            torch.manual_seed(seed)
        return cls(Extrapolator(channels), PatchDiscriminator(channels), config)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def loss_adversarial(discriminator: nn.Module, trivial: torch.Tensor, clean: torch.Tensor,
                     regenerated: torch.Tensor, gan_mode: str = "non_saturating"):
    """Conditional GAN value as (d_loss, g_loss), both to be minimized.

    d_loss is the discriminator's BCE against (real=clean, fake=regenerated)
    pairs, so a maximum-entropy discriminator scores 2*log 2 and a perfect one
    approaches 0. g_loss is the non-saturating generator term by default;
    gan_mode="minimax" uses log(1 - D(fake)) instead.
    """
    real_logits = discriminator(trivial, clean)
    fake_logits_detached = discriminator(trivial, regenerated.detach())
    d_loss = (
        F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        + F.binary_cross_entropy_with_logits(fake_logits_detached, torch.zeros_like(fake_logits_detached))
    )
    fake_logits = discriminator(trivial, regenerated)
    if gan_mode == "non_saturating":
        g_loss = F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    else:
        g_loss = -F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return d_loss, g_loss


def loss_pixel_consistency(clean: torch.Tensor, regenerated: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all pixels."""
    return (clean - regenerated).abs().mean()


def loss_query(target_model: nn.Module, regenerated: torch.Tensor,
               labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the frozen target on the regenerated images."""
    return F.cross_entropy(target_model(regenerated), labels)


def _seeded_dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None) -> torch.Tensor:
    if rate == 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator) >= rate).float()
    return x * keep / (1.0 - rate)


def kl_divergence(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    """Mean over rows of sum_i p_i * (log p_i - log q_i)."""
    return (p_log.exp() * (p_log - q_log)).sum(dim=1).mean()


def loss_ard(target_model: nn.Module, regenerated: torch.Tensor, clean: torch.Tensor,
             dropout_rate: float, k: int = 2, generator: torch.Generator | None = None,
             bidirectional: bool = False) -> torch.Tensor:
    """Sum over k dropout passes of KL(F(dropped regenerated) || F(clean)).

    The clean-branch distribution is a constant target: no gradient flows
    through it. Dropout perturbs the regenerated image before each target
    forward pass, giving k stochastic views whose predictions are pulled
    toward the clean prediction.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    if k < 1:
        raise ValueError("k must be >= 1")
    q_log = F.log_softmax(target_model(clean), dim=1).detach()
    total = regenerated.new_zeros(())
    for _ in range(k):
        dropped = _seeded_dropout(regenerated, dropout_rate, generator)
        p_log = F.log_softmax(target_model(dropped), dim=1)
        term = kl_divergence(p_log, q_log)
        if bidirectional:
            term = 0.5 * (term + kl_divergence(q_log, p_log))
        total = total + term
    return total


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


def regenerate(cae: CAEModel, trivial_component: torch.Tensor,
               trivial_mask: torch.Tensor) -> torch.Tensor:
    """Deterministic inference pass; output in [0,1] with the input's shape."""
    if trivial_component.shape[1] != cae.extrapolator.channels:
        raise ValueError(
            f"extrapolator expects {cae.extrapolator.channels} channels, "
            f"got {trivial_component.shape[1]}"
        )
    e = cae.extrapolator
    was_training = e.training
    e.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, trivial_component.shape[0], EVAL_BATCH):
            outs.append(e(trivial_component[i : i + EVAL_BATCH],
                          trivial_mask[i : i + EVAL_BATCH]))
    if was_training:
        e.train()
    return torch.cat(outs)


def train_cae(cae: CAEModel, target_model: nn.Module, attack_specs: list[AttackSpec],
              train_batches: list[ImageBatch], config: CAEConfig | None = None) -> dict:
    """Alternating discriminator/extrapolator optimization against a frozen target.

    Each batch is perturbed by one attack from the joint-training mix (plus a
    benign pass-through when configured), pixel surgery extracts the trivial
    component, and the extrapolator is trained to regenerate the clean image.
    Returns per-epoch means of every loss component.
    """
    config = config or cae.config
    torch.manual_seed(config.seed)
    e, d = cae.extrapolator, cae.discriminator
    opt_e = torch.optim.Adam(e.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    ard_gen = torch.Generator().manual_seed(config.seed + 101)

    saved_flags = [p.requires_grad for p in target_model.parameters()]
    for p in target_model.parameters():
        p.requires_grad_(False)
    target_model.eval()

    mix: list = list(attack_specs)
    if config.include_benign:
        mix.append("benign")
    history = {k: [] for k in ("d_loss", "g_loss", "query", "pixel", "ard", "e_total")}
    d_collapsed = False
    step = 0
    try:
        e.train()
        d.train()
        for epoch in range(config.epochs):
            sums = dict.fromkeys(history, 0.0)
            n_batches = 0
            for batch in train_batches:
                source = mix[step % len(mix)]
                if source == "benign":
                    x_in = batch.images
                else:
                    spec = replace(source, seed=source.seed + step)
                    x_in = run_attack(target_model, batch, spec).adv_images
                sal = compute_saliency(target_model, x_in)
                masks = make_masks(sal, config.alpha)
                mask_in = masks.trivial.unsqueeze(1)
                trivial = x_in * mask_in

                regen = e(trivial, mask_in)
                d_loss, _ = loss_adversarial(d, trivial, batch.images, regen, config.gan_mode)
                if not d_collapsed or not config.e_only_on_collapse:
                    opt_d.zero_grad()
                    d_loss.backward(retain_graph=True)
                    opt_d.step()

                _, g_loss = loss_adversarial(d, trivial, batch.images, regen, config.gan_mode)
                l_query = loss_query(target_model, regen, batch.labels)
                l_pixel = loss_pixel_consistency(batch.images, regen)
                if config.lambda_ard != 0.0:
                    l_ard = loss_ard(target_model, regen, batch.images, config.dropout_rate,
                                     config.k_dropout, ard_gen, config.bidirectional_kl)
                else:
                    l_ard = regen.new_zeros(())
                e_total = (g_loss + config.lambda_query * l_query
                           + config.lambda_pixel * l_pixel + config.lambda_ard * l_ard)
                opt_e.zero_grad()
                e_total.backward()
                opt_e.step()

                for key, val in (("d_loss", d_loss), ("g_loss", g_loss), ("query", l_query),
                                 ("pixel", l_pixel), ("ard", l_ard), ("e_total", e_total)):
                    sums[key] += val.item()
                n_batches += 1
                step += 1
            for key in history:
                history[key].append(sums[key] / max(n_batches, 1))
            log.info(
                "cae epoch %d/%d: d=%.4f g=%.4f query=%.4f pixel=%.4f ard=%.4f total=%.4f",
                epoch + 1, config.epochs, history["d_loss"][-1], history["g_loss"][-1],
                history["query"][-1], history["pixel"][-1], history["ard"][-1],
                history["e_total"][-1],
            )
            if history["d_loss"][-1] < D_COLLAPSE_THRESHOLD:
                warnings.warn(
                    f"discriminator collapse: epoch-mean d_loss {history['d_loss'][-1]:.2e}"
                )
                d_collapsed = True
    finally:
        for p, flag in zip(target_model.parameters(), saved_flags):
            p.requires_grad_(flag)
        e.eval()
        d.eval()
    return history


# ---------------------------------------------------------------------------
# Checkpoints (metadata block with loss coefficients + weights)
# ---------------------------------------------------------------------------

CAE_CHECKPOINT_FORMAT = "pssr-cae-v1"


def save_cae(cae: CAEModel, path, meta: dict | None = None) -> None:
    torch.save(
        {
            "format": CAE_CHECKPOINT_FORMAT,
            "channels": cae.extrapolator.channels,
            "config": asdict(cae.config),
            "extrapolator": cae.extrapolator.state_dict(),
            "discriminator": cae.discriminator.state_dict(),
            "meta": meta or {},
        },
        path,
    )


def load_cae(path) -> CAEModel:
    from .models import CheckpointError

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint file: {path}") from None
    if not isinstance(payload, dict) or payload.get("format") != CAE_CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a {CAE_CHECKPOINT_FORMAT} checkpoint: {path}")
    model = CAEModel.build(CAEConfig(**payload["config"]), channels=payload["channels"])
    model.extrapolator.load_state_dict(payload["extrapolator"])
    model.discriminator.load_state_dict(payload["discriminator"])
    model.extrapolator.eval()
    model.discriminator.eval()
    return model

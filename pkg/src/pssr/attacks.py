"""Adversarial example generation under p-norm budgets.

White-box families (fgsm, bim, mim, pgd, cw), the straight-through adaptive
variant (bpda_pgd), and black-box transfer. All attacks operate on raw [0,1]
pixels and are pure functions of (model snapshot, batch, spec, seed).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch

LINF_TOL = 1e-6
CW_LR = 0.01
CW_BINARY_SEARCH_STEPS = 9

ITERATIVE_FAMILIES = ("bim", "mim", "pgd", "cw", "bpda_pgd")
ALL_FAMILIES = ("fgsm",) + ITERATIVE_FAMILIES


class AttackSpecError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Fully determines perturbation generation for one attack family."""

    family: str
    eps: float = 0.3  # budget in raw pixel units
    norm: str = "linf"
    steps: int = 1
    step_size: float = 0.0
    random_start: bool = False
    decay: float = 1.0  # momentum, mim only
    cw_confidence: float = 0.0
    cw_c: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.family not in ALL_FAMILIES:
            raise AttackSpecError(f"unknown attack family {self.family!r}")
        if self.norm not in ("linf", "l2"):
            raise AttackSpecError(f"unknown norm {self.norm!r}")
        if self.eps < 0:
            raise AttackSpecError("eps must be >= 0")
        if self.family in ITERATIVE_FAMILIES and self.steps < 1:
            raise AttackSpecError(f"{self.family} requires steps >= 1")
        if self.family in ("bim", "mim", "pgd", "bpda_pgd") and self.step_size <= 0:
            raise AttackSpecError(f"{self.family} requires step_size > 0")

    @staticmethod
    def mnist_default(family: str, seed: int = 0) -> "AttackSpec":
        """Community-standard budgets for 28x28 digits: eps 0.3, PGD 40 steps."""
        return _default_spec(family, eps=0.3, pgd_steps=40, step_size=0.3 / 10, seed=seed)

    @staticmethod
    def cifar_default(family: str, seed: int = 0) -> "AttackSpec":
        return _default_spec(family, eps=8 / 255, pgd_steps=10, step_size=2 / 255, seed=seed)


def _default_spec(family: str, eps: float, pgd_steps: int, step_size: float, seed: int) -> AttackSpec:
    if family == "fgsm":
        return AttackSpec("fgsm", eps=eps, seed=seed)
    if family in ("bim", "mim"):
        return AttackSpec(family, eps=eps, steps=pgd_steps, step_size=step_size, seed=seed)
    if family in ("pgd", "bpda_pgd"):
        return AttackSpec(family, eps=eps, steps=pgd_steps, step_size=step_size,
                          random_start=True, seed=seed)
    if family == "cw":
        return AttackSpec("cw", eps=eps, norm="l2", steps=100, seed=seed)
    raise AttackSpecError(f"unknown attack family {family!r}")


@dataclass
class AdversarialBatch:
    adv_images: torch.Tensor
    clean_images: torch.Tensor
    labels: torch.Tensor
    spec: AttackSpec
    success_mask: torch.Tensor  # bool [N]: prediction on adv differs from label

    @property
    def perturbation(self) -> torch.Tensor:
        return self.adv_images - self.clean_images

    def linf_norms(self) -> torch.Tensor:
        return self.perturbation.flatten(1).abs().max(dim=1).values

    def l2_norms(self) -> torch.Tensor:
        return self.perturbation.flatten(1).norm(p=2, dim=1)

    def validate(self) -> None:
        """Budget + box invariants; CW records its achieved L2 instead of enforcing it."""
        if self.adv_images.min() < 0 or self.adv_images.max() > 1:
            raise AssertionError("adversarial images escaped [0,1]")
        if self.spec.norm == "linf" and self.spec.family != "cw":
            worst = self.linf_norms().max().item()
            if worst > self.spec.eps + LINF_TOL:
                raise AssertionError(f"L-inf budget violated: {worst} > {self.spec.eps}")


def _as_logits_fn(model):
    if hasattr(model, "bpda_logits"):
        return model.bpda_logits
    if isinstance(model, torch.nn.Module):
        model.eval()
        return model
    raise TypeError(f"cannot attack object of type {type(model).__name__}: "
                    "expected an nn.Module or a pipeline exposing bpda_logits")


def _predict(model, images: torch.Tensor) -> torch.Tensor:
    if hasattr(model, "predict_labels"):
        return model.predict_labels(images)
    with torch.no_grad():
        return model(images).argmax(dim=1)


def _loss_grad(logits_fn, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.clone().detach().requires_grad_(True)
    with torch.enable_grad():
        loss = F.cross_entropy(logits_fn(x), y, reduction="sum")
        return torch.autograd.grad(loss, x)[0].detach()


def _finish(logits_fn, adv: torch.Tensor, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    adv = adv.detach().clamp(0.0, 1.0)
    success = _predict_logits_fn(logits_fn, adv) != batch.labels
    out = AdversarialBatch(adv, batch.images.clone(), batch.labels.clone(), spec, success)
    out.validate()
    return out


def _predict_logits_fn(logits_fn, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return logits_fn(images).argmax(dim=1)


def fgsm(model, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    """One signed-gradient step of size eps, clipped to the pixel box."""
    if spec.family != "fgsm":
        raise AttackSpecError(f"fgsm called with family {spec.family!r}")
    logits_fn = _as_logits_fn(model)
    grad = _loss_grad(logits_fn, batch.images, batch.labels)
    if grad.abs().max() == 0:
        warnings.warn("loss gradient is zero everywhere; fgsm returns the input unchanged")
    adv = (batch.images + spec.eps * grad.sign()).clamp(0.0, 1.0)
    return _finish(logits_fn, adv, batch, spec)


def _iterative_signed(logits_fn, batch: ImageBatch, spec: AttackSpec,
                      momentum: float) -> AdversarialBatch:
    """Shared core of bim/mim/pgd/bpda_pgd: signed steps projected onto the eps-ball."""
    x, y = batch.images, batch.labels
    delta = torch.zeros_like(x)
    if spec.random_start:
        g = torch.Generator().manual_seed(spec.seed)
        delta = (torch.rand(x.shape, generator=g) * 2 - 1) * spec.eps
        delta = (x + delta).clamp(0.0, 1.0) - x
    accum = torch.zeros_like(x)
    all_zero = True
    for _ in range(spec.steps):
        grad = _loss_grad(logits_fn, x + delta, y)
        all_zero = all_zero and grad.abs().max() == 0
        if momentum > 0.0:
            l1 = grad.flatten(1).abs().sum(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)
            accum = momentum * accum + grad / l1
            direction = accum.sign()
        else:
            direction = grad.sign()
        delta = (delta + spec.step_size * direction).clamp(-spec.eps, spec.eps)
        delta = (x + delta).clamp(0.0, 1.0) - x
    if all_zero:
        warnings.warn("loss gradient was zero at every step; attack is a no-op")
    return _finish(logits_fn, x + delta, batch, spec)


def bim(model, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    if spec.family != "bim":
        raise AttackSpecError(f"bim called with family {spec.family!r}")
    return _iterative_signed(_as_logits_fn(model), batch, spec, momentum=0.0)


def mim(model, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    """BIM with accumulated L1-normalized gradients; decay of 0 collapses to BIM."""
    if spec.family != "mim":
        raise AttackSpecError(f"mim called with family {spec.family!r}")
    return _iterative_signed(_as_logits_fn(model), batch, spec, momentum=spec.decay)


def pgd(model, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    if spec.family != "pgd":
        raise AttackSpecError(f"pgd called with family {spec.family!r}")
    return _iterative_signed(_as_logits_fn(model), batch, spec, momentum=0.0)


def bpda_pgd(defended_pipeline, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    """PGD through a defense whose non-differentiable stage is identity in the backward pass.

    On a bare classifier the straight-through approximation is the classifier
    itself, so the trajectory matches plain pgd under a shared seed.
    """
    if spec.family != "bpda_pgd":
        raise AttackSpecError(f"bpda_pgd called with family {spec.family!r}")
    logits_fn = _as_logits_fn(defended_pipeline)
    return _iterative_signed(logits_fn, batch, spec, momentum=0.0)


def cw(model, batch: ImageBatch, spec: AttackSpec,
       binary_search_steps: int = CW_BINARY_SEARCH_STEPS) -> AdversarialBatch:
    """L2 margin attack: minimize ||delta||^2 + c * f(x + delta) in tanh space.

    Binary-searches the trade-off constant c per sample and keeps the best
    (smallest-L2) successful adversarial found; the achieved L2 is recorded
    on the result rather than enforced against spec.eps.
    """
    if spec.family != "cw":
        raise AttackSpecError(f"cw called with family {spec.family!r}")
    logits_fn = _as_logits_fn(model)
    x, y = batch.images, batch.labels
    n = x.shape[0]
    onehot = F.one_hot(y, num_classes=_num_classes_of(logits_fn, x)).float()

    squash = 1 - 2e-6  # keep atanh finite at pixel values 0 and 1
    w0 = torch.atanh((2 * x - 1) * squash)

    c = torch.full((n,), float(spec.cw_c))
    lower = torch.zeros(n)
    upper = torch.full((n,), float("inf"))
    best_adv = x.clone()
    best_l2 = torch.full((n,), float("inf"))

    for _ in range(binary_search_steps):
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=CW_LR)
        succeeded = torch.zeros(n, dtype=torch.bool)
        for _ in range(spec.steps):
            x_adv = (torch.tanh(w) + 1) / 2
            l2 = (x_adv - x).flatten(1).pow(2).sum(dim=1)
            logits = logits_fn(x_adv)
            real = (logits * onehot).sum(dim=1)
            other = (logits - onehot * 1e9).max(dim=1).values
            margin = (real - other + spec.cw_confidence).clamp_min(0.0)
            loss = (l2 + c * margin).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                success = logits.argmax(dim=1) != y
                improved = success & (l2 < best_l2)
                best_l2 = torch.where(improved, l2.detach(), best_l2)
                best_adv[improved] = x_adv.detach()[improved]
                succeeded |= success
        with torch.no_grad():
            upper = torch.where(succeeded, torch.minimum(upper, c), upper)
            lower = torch.where(~succeeded, torch.maximum(lower, c), lower)
            c = torch.where(torch.isinf(upper), c * 10, (lower + upper) / 2)

    return _finish(logits_fn, best_adv, batch, spec)


def _num_classes_of(logits_fn, x: torch.Tensor) -> int:
    with torch.no_grad():
        return logits_fn(x[:1]).shape[1]


def transfer_attack(substitute_model, target, batch: ImageBatch,
                    spec: AttackSpec) -> AdversarialBatch:
    """Craft on the substitute, score success against the (possibly defended) target."""
    crafted = run_attack(substitute_model, batch, spec)
    success = _predict(target, crafted.adv_images) != batch.labels
    return AdversarialBatch(crafted.adv_images, crafted.clean_images, crafted.labels,
                            spec, success)


_DISPATCH = {"fgsm": fgsm, "bim": bim, "mim": mim, "pgd": pgd, "cw": cw, "bpda_pgd": bpda_pgd}


def run_attack(model, batch: ImageBatch, spec: AttackSpec) -> AdversarialBatch:
    return _DISPATCH[spec.family](model, batch, spec)


# ---------------------------------------------------------------------------
# Archives: clean, adv, labels plus the spec as embedded JSON.
# ---------------------------------------------------------------------------


def save_adv_archive(path, result: AdversarialBatch) -> None:
    np.savez_compressed(
        path,
        clean=result.clean_images.numpy(),
        adv=result.adv_images.numpy(),
        labels=result.labels.numpy(),
        success=result.success_mask.numpy(),
        spec_json=np.array(json.dumps(asdict(result.spec))),
    )


def load_adv_archive(path) -> AdversarialBatch:
    with np.load(path, allow_pickle=False) as z:
        spec = AttackSpec(**json.loads(str(z["spec_json"])))
        return AdversarialBatch(
            torch.from_numpy(z["adv"]),
            torch.from_numpy(z["clean"]),
            torch.from_numpy(z["labels"]),
            spec,
            torch.from_numpy(z["success"]),
        )

"""Target-model backbones, training, differentiable forward passes, checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch

log = logging.getLogger(__name__)

EVAL_BATCH = 256


class TrainingDivergedError(RuntimeError):
    pass


class GradientUnavailableError(RuntimeError):
    """The wrapped model does not expose gradients with respect to its input."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 10
    seed: int = 0
    batch_shuffle: bool = True

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer: {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class LeNet5(nn.Module):
    """Classic two-conv LeNet (6 and 16 channels, 5x5) + three FC layers."""

    def __init__(self, num_classes: int = 10, in_channels: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 6, kernel_size=5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, kernel_size=5)
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def features(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return F.relu(self.fc2(x))

    def forward(self, x):
        return self.fc3(self.features(x))


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18Small(nn.Module):
    """ResNet18 adapted for 32x32 inputs: 3x3 stem, no initial pooling."""

    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        widths = [64, 128, 256, 512]
        strides = [1, 2, 2, 2]
        layers = []
        in_ch = 64
        for w, s in zip(widths, strides):
            layers.append(BasicBlock(in_ch, w, stride=s))
            layers.append(BasicBlock(w, w, stride=1))
            in_ch = w
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(512, num_classes)

    def features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layers(out)
        out = F.adaptive_avg_pool2d(out, 1)
        return torch.flatten(out, 1)

    def forward(self, x):
        return self.fc(self.features(x))


class SubstituteMLP(nn.Module):
    """Small fully connected net used as the black-box transfer substitute."""

    def __init__(self, num_classes: int = 10, input_shape: tuple = (1, 28, 28)):
        super().__init__()
        in_dim = int(torch.tensor(input_shape).prod())
        self.fc1 = nn.Linear(in_dim, 256)
        self.fc2 = nn.Linear(256, 128)
        self.fc3 = nn.Linear(128, num_classes)

    def features(self, x):
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return F.relu(self.fc2(x))

    def forward(self, x):
        return self.fc3(self.features(x))


ARCHITECTURES = {
    "lenet5": lambda num_classes, input_shape: LeNet5(num_classes, input_shape[0]),
    "resnet18_small": lambda num_classes, input_shape: ResNet18Small(num_classes, input_shape[0]),
    "substitute_mlp": lambda num_classes, input_shape: SubstituteMLP(num_classes, input_shape),
}


def build_model(architecture: str, num_classes: int = 10,
                input_shape: tuple = (1, 28, 28), seed: int | None = None) -> nn.Module:
    """Construct a backbone; seeding here makes the weight init reproducible."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}, expected one of {sorted(ARCHITECTURES)}")
    if seed is not None:
        torch.manual_seed(seed)
    model = ARCHITECTURES[architecture](num_classes, tuple(input_shape))
    model.architecture = architecture
    model.num_classes = num_classes
    model.input_shape = tuple(input_shape)
    return model


def train_classifier(model: nn.Module, train_batches: list[ImageBatch], config: TrainConfig,
                     val_batches: list[ImageBatch] | None = None) -> dict:
    """Adam + cross-entropy training loop; aborts on non-finite loss.

    Returns a history dict with per-epoch mean loss and, when a validation
    set is given, the final clean accuracy.
    """
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    g = torch.Generator().manual_seed(config.seed)
    history = {"loss": [], "clean_accuracy": None}
    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(train_batches), generator=g) if config.batch_shuffle \
            else torch.arange(len(train_batches))
        epoch_loss = 0.0
        for bi in order.tolist():
            batch = train_batches[bi]
            opt.zero_grad()
            loss = F.cross_entropy(model(batch.images), batch.labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at step {step} (lr={config.learning_rate})"
                )
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            step += 1
        history["loss"].append(epoch_loss / max(len(train_batches), 1))
        log.info("epoch %d/%d: mean loss %.4f", epoch + 1, config.epochs, history["loss"][-1])
    model.eval()
    if val_batches is not None:
        history["clean_accuracy"] = evaluate_accuracy(model, val_batches)
        log.info("final clean accuracy: %.4f", history["clean_accuracy"])
    return history


def predict_logits(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], EVAL_BATCH):
            outs.append(model(images[i : i + EVAL_BATCH]))
    if was_training:
        model.train()
    return torch.cat(outs)


def predict_probs(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Per-row softmax probabilities of the model on images in [0,1]."""
    if images.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] images, got shape {tuple(images.shape)}")
    return F.softmax(predict_logits(model, images), dim=1)


def predict_labels(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    return predict_logits(model, images).argmax(dim=1)


def evaluate_accuracy(model: nn.Module, batches: list[ImageBatch]) -> float:
    correct = total = 0
    for b in batches:
        correct += (predict_labels(model, b.images) == b.labels).sum().item()
        total += len(b)
    return correct / total


def input_gradient(model: nn.Module, images: torch.Tensor, target: str = "predicted_prob",
                   labels: torch.Tensor | None = None) -> torch.Tensor:
    """Gradient of a per-sample scalar with respect to each input pixel.

    target="predicted_prob" differentiates the probability of each sample's
    argmax class (no label needed); target="loss" differentiates the
    cross-entropy against the given labels.
    """
    if target not in ("predicted_prob", "loss"):
        raise ValueError(f"unknown gradient target {target!r}")
    if target == "loss" and labels is None:
        raise ValueError("target='loss' requires labels")
    was_training = model.training
    model.eval()
    x = images.clone().detach().requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        if target == "predicted_prob":
            probs = F.softmax(logits, dim=1)
            pred = probs.argmax(dim=1).detach()
            scalar = probs.gather(1, pred.unsqueeze(1)).sum()
        else:
            scalar = F.cross_entropy(logits, labels, reduction="sum")
        if not scalar.requires_grad:
            raise GradientUnavailableError(
                "model output does not depend differentiably on its input"
            )
        grad = torch.autograd.grad(scalar, x)[0]
    if was_training:
        model.train()
    return grad.detach()


# ---------------------------------------------------------------------------
# Checkpoints: metadata block + weights, validated on load.
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "pssr-classifier-v1"


def save_checkpoint(model: nn.Module, path, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.architecture,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_architecture: str | None = None) -> nn.Module:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint file: {path}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    arch = payload["architecture"]
    if expected_architecture is not None and arch != expected_architecture:
        raise CheckpointError(
            f"architecture mismatch in {path}: expected {expected_architecture!r}, found {arch!r}"
        )
    model = build_model(arch, payload["num_classes"], tuple(payload["input_shape"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model

from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn as nn

from pssr.data import ImageBatch


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(1234)
    np.random.seed(1234)


class LinearSoftmax(nn.Module):
    """Flatten + single linear layer; analytic gradients are hand-computable."""

    def __init__(self, in_dim: int, num_classes: int, weight=None, bias=None):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)
        if weight is not None:
            with torch.no_grad():
                self.fc.weight.copy_(weight)
                self.fc.bias.copy_(bias if bias is not None else torch.zeros(num_classes))

    def forward(self, x):
        return self.fc(torch.flatten(x, 1))


class ConstantModel(nn.Module):
    """Logits independent of the input."""

    def __init__(self, logits):
        super().__init__()
        self.register_buffer("logits", torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        return self.logits.unsqueeze(0).expand(x.shape[0], -1) + 0.0 * x.sum() * 0


@pytest.fixture
def small_batch() -> ImageBatch:
    g = torch.Generator().manual_seed(7)
    images = torch.rand((12, 1, 28, 28), generator=g)
    labels = torch.arange(12) % 10
    return ImageBatch(images, labels)


@pytest.fixture
def tiny_batch() -> ImageBatch:
    g = torch.Generator().manual_seed(11)
    images = torch.rand((6, 1, 12, 12), generator=g)
    labels = torch.arange(6) % 3
    return ImageBatch(images, labels)


def separable_batches(n_per_class: int = 60, side: int = 12, num_classes: int = 2,
                      seed: int = 3, batch_size: int = 32):
    """Trivially separable toy data: class k has mean intensity (k+1)/(classes+1)."""
    g = torch.Generator().manual_seed(seed)
    images, labels = [], []
    for c in range(num_classes):
        level = (c + 1) / (num_classes + 1)
        x = (level + 0.08 * (torch.rand((n_per_class, 1, side, side), generator=g) - 0.5)).clamp(0, 1)
        images.append(x)
        labels.append(torch.full((n_per_class,), c, dtype=torch.int64))
    images = torch.cat(images)
    labels = torch.cat(labels)
    order = torch.randperm(images.shape[0], generator=g)
    images, labels = images[order], labels[order]
    return [ImageBatch(images[i:i + batch_size], labels[i:i + batch_size])
            for i in range(0, images.shape[0], batch_size)]

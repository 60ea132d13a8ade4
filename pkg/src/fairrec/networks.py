"""Feed-forward building blocks for the fair-embedding pipeline."""

from __future__ import annotations

import torch
from torch import nn

ENCODER_LAYERS = 6
CLASSIFIER_LAYERS = 2


def feed_forward(dims: list[int]) -> nn.Sequential:
    """Stack of Linear layers with ReLU between them (linear output)."""
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class AttributeEncoder(nn.Module):
    """Six-layer ReLU MLP mapping a user embedding to an attribute embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = feed_forward([dim] * (ENCODER_LAYERS + 1))

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.shape[-1] != self.dim:
            raise ValueError(f"expected input dim {self.dim}, got {u.shape[-1]}")
        return self.net(u)


class CollaborativeEncoder(AttributeEncoder):
    """Same shape as an attribute encoder; extracts attribute-independent signal."""


class AttributeClassifier(nn.Module):
    """Two-layer ReLU MLP producing class logits for one categorical attribute."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.net = feed_forward([dim, dim, num_classes])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected input dim {self.dim}, got {z.shape[-1]}")
        return self.net(z)

    def probabilities(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(z), dim=-1)


class AttributeDiscriminator(AttributeClassifier):
    """Adversary predicting an attribute from the collaborative embedding."""


class Aggregator(nn.Module):
    """MLP fusing the collaborative block with masked attribute blocks.

    Input is the (M+1)*d concatenation, output lives back in the base
    recommender's d-dimensional user-embedding space.
    """

    def __init__(self, dim: int, num_attributes: int):
        super().__init__()
        self.dim = dim
        self.num_attributes = num_attributes
        width = 2 * dim
        self.net = feed_forward([(num_attributes + 1) * dim, width, width, dim])

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        expected = (self.num_attributes + 1) * self.dim
        if fused.shape[-1] != expected:
            raise ValueError(f"expected input dim {expected}, got {fused.shape[-1]}")
        return self.net(fused)

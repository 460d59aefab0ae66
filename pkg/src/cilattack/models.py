"""Desk-scale surrogate classifier.

A small 4-block CNN for 32x32 inputs with a 64-wide penultimate layer and an
expandable linear head, so the same architecture serves every incremental
checkpoint. The head grows as new classes arrive; old rows are preserved.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def _block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class SmallConvNet(nn.Module):
    """4 conv blocks + global average pool + linear head (penultimate width 64)."""

    arch_name = "small_convnet_v1"

    def __init__(self, num_classes: int, in_channels: int = 3, width: int = 64):
        super().__init__()
        self.width = width
        # last block has no ReLU so penultimate features are signed and their
        # pairwise cosines spread over [-1, 1]
        self.blocks = nn.Sequential(
            _block(in_channels, 16),
            _block(16, 32),
            _block(32, width),
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(width, num_classes)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate activations, (N, width); no normalization."""
        h = self.blocks(x)
        return self.pool(h).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def expand_head(self, num_classes: int) -> None:
        """Grow the class head, keeping the learned rows for old classes."""
        if num_classes < self.num_classes:
            raise ValueError(
                f"head can only grow: {self.num_classes} -> {num_classes}")
        if num_classes == self.num_classes:
            return
        old = self.head
        new = nn.Linear(self.width, num_classes)
        with torch.no_grad():
            new.weight[: old.out_features] = old.weight
            new.bias[: old.out_features] = old.bias
        self.head = new

"""
Desk-scale classifier architectures.
Every model exposes logits, penultimate features and a {final layer, body} parameter split.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn


@dataclass(frozen=True)
class ArchitectureSpec:
    """Specification for a classifier family."""
    name: str
    conv_channels: Tuple[int, ...]  # 3x3 convolutions, padding 1
    pool_after: Tuple[int, ...]  # conv indices followed by a 2x2 max-pool
    hidden: Tuple[int, ...]  # fully connected widths; the last is the feature width
    description: str


# Two convolutions, two fully connected layers (hidden + classifier)
NAIVE_NET = ArchitectureSpec(
    name="naive",
    conv_channels=(16, 32),
    pool_after=(0, 1),
    hidden=(128,),
    description="2 conv + 2 fc, grayscale tasks",
)

# Four convolutions, three fully connected layers
VGG_LIKE = ArchitectureSpec(
    name="vgg",
    conv_channels=(32, 32, 64, 64),
    pool_after=(1, 3),
    hidden=(256, 128),
    description="4 conv + 3 fc VGG-style stack, RGB tasks and surrogates",
)

# No convolution at all; used for cross-architecture stealing
MLP_NET = ArchitectureSpec(
    name="mlp",
    conv_channels=(),
    pool_after=(),
    hidden=(256, 128),
    description="3 fc layers, architecture-mismatch student",
)

# Architecture catalog
ARCHITECTURES: Dict[str, ArchitectureSpec] = {
    "naive": NAIVE_NET,
    "vgg": VGG_LIKE,
    "mlp": MLP_NET,
}


class Standardize(nn.Module):
    """Per-channel (x - mean) / std with the statistics held as buffers."""

    def __init__(self, channels: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(channels))
        self.register_buffer("std", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean.view(1, -1, 1, 1)) / self.std.view(1, -1, 1, 1)


class ClassifierModel(nn.Module):
    """
    Image classifier built from an ArchitectureSpec.

    forward(x) returns logits; forward(x, return_features=True) returns (logits, features)
    where features are the last hidden layer before its ReLU (width `feature_dim`). They
    are signed; the head sees relu(features).
    """

    def __init__(self,
                 spec: ArchitectureSpec,
                 input_shape: Sequence[int],
                 class_count: int):
        super().__init__()
        if class_count < 1:
            raise ValueError(f"class_count must be positive, got {class_count}")
        channels, height, width = input_shape
        self.arch = spec.name
        self.input_shape = (int(channels), int(height), int(width))
        self.class_count = int(class_count)
        self.feature_dim = spec.hidden[-1]
        self.metadata: Dict = {}

        self.standardize = Standardize(channels)

        layers: List[nn.Module] = []
        in_channels = channels
        for index, out_channels in enumerate(spec.conv_channels):
            layers += [nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1), nn.ReLU()]
            if index in spec.pool_after:
                layers.append(nn.MaxPool2d(2))
            in_channels = out_channels
        layers.append(nn.Flatten())

        with torch.no_grad():
            flat = nn.Sequential(*layers)(torch.zeros(1, *self.input_shape)).shape[1]

        in_features = flat
        for out_features in spec.hidden:
            layers += [nn.Linear(in_features, out_features), nn.ReLU()]
            in_features = out_features

        # The body ends at the last hidden Linear; its ReLU is applied in forward()
        self.body = nn.Sequential(*layers[:-1])
        self.activation = nn.ReLU()
        self.head = nn.Linear(self.feature_dim, self.class_count)

    def forward(self, x: torch.Tensor, return_features: bool = False):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match model input {self.input_shape}"
            )
        features = self.body(self.standardize(x))
        logits = self.head(self.activation(features))
        if return_features:
            return logits, features
        return logits

    def final_layer_parameters(self) -> List[nn.Parameter]:
        return list(self.head.parameters())

    def body_parameters(self) -> List[nn.Parameter]:
        return list(self.body.parameters())

    def reset_final_layer(self) -> None:
        self.head.reset_parameters()

    def set_input_stats(self, mean: Sequence[float], std: Sequence[float]) -> None:
        self.standardize.mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.standardize.std.copy_(torch.as_tensor(std, dtype=torch.float32))


def build_model(arch: str,
                input_shape: Sequence[int],
                class_count: int,
                seed: Optional[int] = None) -> ClassifierModel:
    """Instantiate a catalog architecture; `seed` fixes the initial weights."""
    spec = ARCHITECTURES.get(arch)
    if spec is None:
        raise ValueError(f"unknown architecture '{arch}' (available: {', '.join(ARCHITECTURES)})")
    if seed is not None:
        torch.manual_seed(seed)
    return ClassifierModel(spec, input_shape, class_count)

"""
Watermark composer - tiles four half-size source-class images into one composite sample.
Also owns the marking key (WatermarkSpec) and target-label selection.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from ..core.datasets import LabeledDataset, from_uint8
from ..core.training import predict
from .centroids import SOURCE_CLASS_COUNT


# Quadrant offsets as fractions of (width, height), row-major: TL, TR, BL, BR
QUADRANT_POSITIONS: List[Tuple[float, float]] = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)]

RESIZE_FILTERS: Dict[str, Optional[Image.Resampling]] = {
    "bilinear": Image.Resampling.BILINEAR,
    "nearest": None,  # exact decimation at even pixel indices
}


@dataclass
class WatermarkSpec:
    """The secret marking key."""
    source_classes: Tuple[int, ...]
    image_shape: Tuple[int, int, int]
    target_label: Optional[int] = None
    layout: Optional[Tuple[int, ...]] = None  # class placed in each quadrant, TL/TR/BL/BR
    resize_filter: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        self.source_classes = tuple(int(c) for c in self.source_classes)
        self.image_shape = tuple(int(d) for d in self.image_shape)
        if len(self.source_classes) != SOURCE_CLASS_COUNT or len(set(self.source_classes)) != SOURCE_CLASS_COUNT:
            raise ValueError(f"need {SOURCE_CLASS_COUNT} distinct source classes, got {self.source_classes}")
        if self.layout is None:
            self.layout = tuple(sorted(self.source_classes))
        self.layout = tuple(int(c) for c in self.layout)
        if sorted(self.layout) != sorted(self.source_classes):
            raise ValueError(f"layout {self.layout} is not a permutation of {self.source_classes}")
        _, height, width = self.image_shape
        if height % 2 or width % 2:
            raise ValueError(f"composite samples need even height and width, got {height}x{width}")
        if self.resize_filter not in RESIZE_FILTERS:
            raise ValueError(f"unknown resize filter '{self.resize_filter}' (available: {', '.join(RESIZE_FILTERS)})")

    def with_target(self, target_label: int) -> "WatermarkSpec":
        return replace(self, target_label=int(target_label))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["source_classes"] = list(self.source_classes)
        data["image_shape"] = list(self.image_shape)
        data["layout"] = list(self.layout)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "WatermarkSpec":
        return cls(
            source_classes=tuple(data["source_classes"]),
            image_shape=tuple(data["image_shape"]),
            target_label=data.get("target_label"),
            layout=tuple(data["layout"]) if data.get("layout") else None,
            resize_filter=data.get("resize_filter", "bilinear"),
            seed=data.get("seed", 0),
        )

    def digest(self) -> str:
        encoded = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()[:16]


class WatermarkComposer:
    """
    Builds composite samples for a WatermarkSpec.
    Each source is resized to half height and width and pasted into its quadrant.
    """

    def __init__(self, spec: WatermarkSpec):
        self.spec = spec
        self.channels, self.height, self.width = spec.image_shape

    def compose(self, sources: Sequence[torch.Tensor]) -> torch.Tensor:
        """
        Compose one sample.

        Args:
            sources: Four C x H x W images in [0,1]; sources[i] belongs to spec.source_classes[i]

        Returns:
            C x H x W composite, quantized to 8-bit levels
        """
        if len(sources) != SOURCE_CLASS_COUNT:
            raise ValueError(f"need {SOURCE_CLASS_COUNT} source images, got {len(sources)}")
        by_class = dict(zip(self.spec.source_classes, sources))

        canvases = [Image.new("F", (self.width, self.height)) for _ in range(self.channels)]
        for quadrant, label in enumerate(self.spec.layout):
            source = by_class[label]
            if tuple(source.shape) != self.spec.image_shape:
                raise ValueError(
                    f"source shape {tuple(source.shape)} does not match {self.spec.image_shape}"
                )
            pos_x = int(self.width * QUADRANT_POSITIONS[quadrant][0])
            pos_y = int(self.height * QUADRANT_POSITIONS[quadrant][1])
            for channel, canvas in enumerate(canvases):
                canvas.paste(self._half_size(source[channel]), (pos_x, pos_y))

        pixels = np.stack([np.asarray(canvas, dtype=np.float32) for canvas in canvases])
        return from_uint8(np.clip(np.round(pixels), 0, 255).astype(np.uint8))

    def _half_size(self, channel: torch.Tensor) -> Image.Image:
        levels = channel.detach().cpu().numpy().astype(np.float32) * 255.0
        resample = RESIZE_FILTERS[self.spec.resize_filter]
        if resample is None:
            return Image.fromarray(np.ascontiguousarray(levels[::2, ::2]))
        return Image.fromarray(levels).resize((self.width // 2, self.height // 2), resample)


def compose_watermark_sample(sources: Sequence[torch.Tensor], spec: WatermarkSpec) -> torch.Tensor:
    return WatermarkComposer(spec).compose(sources)


def draw_composites(data: LabeledDataset,
                    spec: WatermarkSpec,
                    count: int,
                    seed: int) -> Tuple[torch.Tensor, List[str]]:
    """
    Compose `count` samples, drawing one source per class uniformly with replacement.

    Returns:
        (count x C x H x W images, provenance string per composite)
    """
    if count < 1:
        raise ValueError("count must be positive")
    pools = []
    for label in spec.source_classes:
        pool = data.class_indices(label)
        if len(pool) == 0:
            raise ValueError(f"source class {label} is absent from the {data.split} data")
        pools.append(pool)

    composer = WatermarkComposer(spec)
    rng = np.random.default_rng(seed)
    images, provenance = [], []
    for _ in range(count):
        picks = [int(rng.choice(pool)) for pool in pools]
        images.append(composer.compose([data.images[i] for i in picks]))
        names = [data.names[i] if data.names else str(i) for i in picks]
        provenance.append("|".join(names))
    return torch.stack(images), provenance


def build_watermark_dataset(data: LabeledDataset,
                            spec: WatermarkSpec,
                            count: int,
                            seed: int) -> LabeledDataset:
    """Composite samples labeled with the spec's target label."""
    if spec.target_label is None:
        raise ValueError("watermark spec has no target label yet")
    images, provenance = draw_composites(data, spec, count, seed)
    return LabeledDataset(
        images=images,
        labels=torch.full((count,), spec.target_label, dtype=torch.long),
        class_count=data.class_count,
        split=data.split,
        names=provenance,
        source=f"watermark:{spec.digest()}",
        seed=seed,
    )


def average_class_probabilities(probabilities: np.ndarray) -> np.ndarray:
    """Column means, summed in sorted order so the result ignores row order."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim != 2 or len(probabilities) == 0:
        raise ValueError("need at least one probability row")
    return np.sort(probabilities, axis=0).sum(axis=0) / len(probabilities)


def target_from_probabilities(probabilities: np.ndarray) -> int:
    """Least probable class on average; ties go to the lowest index."""
    return int(np.argmin(average_class_probabilities(probabilities)))


def select_target_label(benign: nn.Module, watermark_samples: torch.Tensor) -> int:
    """Pick the class the benign model finds least likely for the composites."""
    if len(watermark_samples) == 0:
        raise ValueError("need at least one watermark sample")
    probabilities = predict(benign, watermark_samples, mode="soft").numpy()
    return target_from_probabilities(probabilities)

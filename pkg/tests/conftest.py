"""Shared fixtures: synthetic datasets, tiny trained models and fixed-answer stub models."""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import pytest
import torch
import torch.nn as nn

from src.core.datasets import LabeledDataset, make_synthetic_dataset
from src.core.models import ClassifierModel, build_model
from src.core.training import TrainingSchedule, set_progress, train_classifier
from src.watermark.composer import WatermarkSpec, build_watermark_dataset, draw_composites, select_target_label
from src.watermark.embedding import EmbeddingConfig, LossWeights, PhaseConfig, embed_watermark

set_progress(False)

CLASS_COUNT = 10
IMAGE_SHAPE = (1, 16, 16)


class FixedLabelModel(nn.Module):
    """Predicts the same label for every input."""

    def __init__(self, label: int, class_count: int = CLASS_COUNT, input_shape=IMAGE_SHAPE):
        super().__init__()
        self.label = label
        self.class_count = class_count
        self.input_shape = tuple(input_shape)

    def forward(self, x, return_features=False):
        logits = torch.zeros(len(x), self.class_count)
        logits[:, self.label] = 10.0
        if return_features:
            return logits, logits.clone()
        return logits


class LookupModel(nn.Module):
    """
    Answers per sample from a table, keyed by the index encoded in pixel (0, 0, 0)
    (see `indexed_images`). Rows of `table` are logits.
    """

    def __init__(self, table: torch.Tensor, input_shape=IMAGE_SHAPE):
        super().__init__()
        self.table = torch.as_tensor(table, dtype=torch.float32)
        self.class_count = self.table.shape[1]
        self.input_shape = tuple(input_shape)

    @classmethod
    def from_labels(cls, labels: Sequence[int], class_count: int = CLASS_COUNT) -> "LookupModel":
        table = torch.zeros(len(labels), class_count)
        table[torch.arange(len(labels)), torch.as_tensor(labels)] = 10.0
        return cls(table)

    @classmethod
    def from_probabilities(cls, probabilities) -> "LookupModel":
        return cls(torch.log(torch.as_tensor(probabilities, dtype=torch.float64)).float())

    def forward(self, x, return_features=False):
        index = torch.round(x[:, 0, 0, 0] * 255).long()
        logits = self.table[index]
        if return_features:
            return logits, logits.clone()
        return logits


def indexed_images(count: int, shape=IMAGE_SHAPE) -> torch.Tensor:
    """Images whose first pixel encodes their index (count <= 256)."""
    images = torch.full((count, *shape), 0.5)
    images[:, 0, 0, 0] = torch.arange(count, dtype=torch.float32) / 255.0
    return images


def labeled(images: torch.Tensor, label: int, class_count: int = CLASS_COUNT, split="test") -> LabeledDataset:
    return LabeledDataset(
        images=images,
        labels=torch.full((len(images),), label, dtype=torch.long),
        class_count=class_count,
        split=split,
    )


@pytest.fixture(scope="session")
def synthetic_train() -> LabeledDataset:
    return make_synthetic_dataset(CLASS_COUNT, "train", per_class=30)


@pytest.fixture(scope="session")
def synthetic_test() -> LabeledDataset:
    return make_synthetic_dataset(CLASS_COUNT, "test", per_class=12)


@pytest.fixture
def tiny_schedule() -> TrainingSchedule:
    return TrainingSchedule(epochs=2, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def trained_model(synthetic_train):
    """A small naive CNN fitted on the synthetic task (shared, never mutate)."""
    return train_classifier("naive", synthetic_train, TrainingSchedule(epochs=3, batch_size=32, seed=0))


EMBED_SCHEDULE = TrainingSchedule(epochs=5, batch_size=64, seed=0)


@dataclass
class WatermarkedTask:
    """A benign model and a coupled victim on the full-size synthetic task."""
    train: LabeledDataset
    test: LabeledDataset
    transfer: LabeledDataset
    wm_set: LabeledDataset
    holdout: LabeledDataset
    benign: ClassifierModel
    victim: ClassifierModel

    @property
    def target_label(self) -> int:
        return int(self.wm_set.labels[0])


def embed_on_synthetic(train: LabeledDataset,
                       wm_set: LabeledDataset,
                       ratios: Tuple[float, float] = (0.05, 0.2),
                       weights: Optional[LossWeights] = None,
                       schedule: TrainingSchedule = EMBED_SCHEDULE) -> ClassifierModel:
    init = build_model("naive", train.image_shape, train.class_count, seed=schedule.seed)
    init.set_input_stats(*train.channel_stats())
    config = EmbeddingConfig(
        PhaseConfig(ratios[0], schedule),
        PhaseConfig(ratios[1], schedule),
        weights=weights or LossWeights(),
        seed=schedule.seed,
    )
    return embed_watermark(init, train, wm_set, config).victim


@pytest.fixture(scope="session")
def watermarked_task() -> WatermarkedTask:
    """Desk-scale embedding with the default loss weights (slow; shared, never mutate)."""
    train = make_synthetic_dataset(CLASS_COUNT, "train")
    test = make_synthetic_dataset(CLASS_COUNT, "test")
    transfer = make_synthetic_dataset(CLASS_COUNT, "transfer")
    benign = train_classifier("naive", train, EMBED_SCHEDULE)

    spec = WatermarkSpec(source_classes=(0, 3, 6, 9), image_shape=train.image_shape)
    composites, _ = draw_composites(train, spec, 100, seed=3)
    spec = spec.with_target(select_target_label(benign, composites))
    wm_set = build_watermark_dataset(train, spec, 400, seed=1)
    holdout = build_watermark_dataset(test, spec, 100, seed=2)

    victim = embed_on_synthetic(train, wm_set)
    return WatermarkedTask(train, test, transfer, wm_set, holdout, benign, victim)

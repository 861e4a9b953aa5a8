"""
Supervised training, inference and evaluation shared by every stage.
"""

import random
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from .datasets import LabeledDataset
from .models import ClassifierModel, build_model
from ..errors import ConfigError, TrainingDivergedError

_progress_enabled = True


def set_progress(enabled: bool) -> None:
    """Toggle tqdm progress bars for every training loop."""
    global _progress_enabled
    _progress_enabled = enabled


def progress_enabled() -> bool:
    return _progress_enabled


@dataclass
class TrainingSchedule:
    """Adam schedule with the learning rate multiplied by `decay_factor` every `decay_every` epochs."""
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.001
    decay_every: int = 10
    decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if self.decay_every < 1:
            raise ConfigError("decay_every", f"must be >= 1, got {self.decay_every}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor", f"must be in (0, 1], got {self.decay_factor}")

    def to_dict(self) -> Dict:
        return asdict(self)

    def optimizer(self, parameters: Iterable[nn.Parameter]):
        optimizer = torch.optim.Adam(parameters, lr=self.learning_rate)
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=self.decay_every, gamma=self.decay_factor
        )
        return optimizer, scheduler


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally force deterministic single-threaded kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def soft_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against a full target distribution, averaged over the batch."""
    return -(target_probs * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def ensure_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss).all():
        raise TrainingDivergedError(f"loss is {loss.item()} at {where}")


def fit(model: nn.Module,
        inputs: torch.Tensor,
        targets: torch.Tensor,
        schedule: TrainingSchedule,
        soft_targets: bool = False,
        temperature: float = 1.0,
        parameters: Optional[List[nn.Parameter]] = None,
        desc: str = "train") -> List[Dict]:
    """
    Train `model` in place on (inputs, targets).

    Args:
        model: Module returning logits
        inputs: N x C x H x W tensor
        targets: Class ids (hard) or N x C probability rows (soft)
        schedule: Optimizer and epoch settings
        soft_targets: Use soft cross-entropy against probability rows
        temperature: Divides student logits in soft mode
        parameters: Restrict the optimizer to these parameters (default: all trainable)
        desc: Label for progress bars and divergence diagnostics

    Returns:
        One {"epoch", "loss", "train_acc"} row per epoch
    """
    if len(inputs) == 0:
        raise ValueError("cannot train on an empty dataset")

    trainable = [p for p in (parameters if parameters is not None else model.parameters()) if p.requires_grad]
    optimizer, scheduler = schedule.optimizer(trainable)
    generator = torch.Generator().manual_seed(schedule.seed)
    loader = DataLoader(
        TensorDataset(inputs, targets),
        batch_size=schedule.batch_size,
        shuffle=True,
        generator=generator,
    )

    history = []
    model.train()
    for epoch in tqdm(range(schedule.epochs), desc=desc, disable=not _progress_enabled, leave=False):
        total_loss, correct, seen = 0.0, 0, 0
        for step, (batch_x, batch_y) in enumerate(loader):
            logits = model(batch_x)
            if soft_targets:
                loss = soft_cross_entropy(logits / temperature, batch_y)
                reference = batch_y.argmax(dim=1)
            else:
                loss = F.cross_entropy(logits, batch_y)
                reference = batch_y
            ensure_finite(loss, f"{desc} epoch {epoch + 1} step {step}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            total_loss += loss.item() * len(batch_x)
            correct += int((logits.argmax(dim=1) == reference).sum())
            seen += len(batch_x)
        scheduler.step()
        history.append({"epoch": epoch + 1, "loss": total_loss / seen, "train_acc": correct / seen})
    model.eval()
    return history


def train_classifier(arch: str,
                     data: LabeledDataset,
                     schedule: TrainingSchedule,
                     desc: str = "benign") -> ClassifierModel:
    """Train a fresh catalog model with plain cross-entropy, deterministic given schedule.seed."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = build_model(arch, data.image_shape, data.class_count, seed=schedule.seed)
    model.set_input_stats(*data.channel_stats())
    history = fit(model, data.images, data.labels, schedule, desc=desc)
    model.metadata = {
        "seed": schedule.seed,
        "epochs": schedule.epochs,
        "trained_on": data.source,
        "final_loss": history[-1]["loss"],
    }
    return model


@torch.no_grad()
def predict(model: nn.Module,
            samples: torch.Tensor,
            mode: str = "hard",
            temperature: float = 1.0,
            batch_size: int = 512) -> torch.Tensor:
    """
    Query a model.

    Args:
        model: Module returning logits
        samples: N x C x H x W tensor
        mode: 'soft' for softmax rows, 'hard' for argmax ids (ties go to the lowest index)
        temperature: Softmax temperature (soft mode)

    Returns:
        N x class_count probabilities or N label ids
    """
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown prediction mode '{mode}'")
    model.eval()
    outputs = []
    for start in range(0, len(samples), batch_size):
        logits = model(samples[start:start + batch_size])
        if mode == "soft":
            outputs.append(F.softmax(logits.double() / temperature, dim=1))
        else:
            outputs.append(logits.argmax(dim=1))
    if not outputs:
        return torch.empty(0, dtype=torch.float64 if mode == "soft" else torch.long)
    return torch.cat(outputs)


def evaluate_accuracy(model: nn.Module, data: LabeledDataset) -> float:
    """Top-1 accuracy of `model` on `data`."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    model_classes = getattr(model, "class_count", data.class_count)
    if model_classes != data.class_count:
        raise ValueError(
            f"class count mismatch: model has {model_classes}, data has {data.class_count}"
        )
    predictions = predict(model, data.images, mode="hard")
    return int((predictions == data.labels).sum()) / len(data)

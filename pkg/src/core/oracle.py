"""
Black-box query interface.
Attackers and the surrogate trainer only ever see a model through an oracle: they get
probability rows or top-1 labels back, never parameters.
"""

from typing import Optional

import torch
import torch.nn as nn

from .datasets import LabeledDataset
from .models import ClassifierModel, build_model
from .training import TrainingSchedule, fit, predict

LABEL_MODES = ("soft", "hard")


class BlackBoxOracle:
    """Prediction API over a deployed model that counts every query."""

    def __init__(self, model: nn.Module):
        self.__model = model
        self.class_count = getattr(model, "class_count", None)
        self.input_shape = getattr(model, "input_shape", None)
        self.query_count = 0

    def probabilities(self, samples: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
        """Softmax rows (float32) at the given temperature."""
        self.query_count += len(samples)
        return predict(self.__model, samples, mode="soft", temperature=temperature).float()

    def labels(self, samples: torch.Tensor) -> torch.Tensor:
        """Top-1 label ids."""
        self.query_count += len(samples)
        return predict(self.__model, samples, mode="hard")

    def responses(self, samples: torch.Tensor, label_mode: str, temperature: float = 1.0) -> torch.Tensor:
        if label_mode == "soft":
            return self.probabilities(samples, temperature)
        if label_mode == "hard":
            return self.labels(samples)
        raise ValueError(f"unknown label mode '{label_mode}' (expected soft or hard)")


def distill_from_oracle(oracle: BlackBoxOracle,
                        query_inputs: torch.Tensor,
                        arch: str,
                        schedule: TrainingSchedule,
                        label_mode: str = "soft",
                        temperature: float = 1.0,
                        input_stats: Optional[tuple] = None,
                        desc: str = "student") -> ClassifierModel:
    """
    Train a fresh `arch` model to imitate the oracle on `query_inputs`.

    Soft mode matches the oracle's temperature-softened probabilities with soft-target
    cross-entropy (no ground-truth term); hard mode uses standard cross-entropy on the
    oracle's top-1 labels.
    """
    if len(query_inputs) == 0:
        raise ValueError("query set is empty")
    if label_mode == "soft" and temperature < 1:
        raise ValueError(f"temperature must be >= 1 in soft mode, got {temperature}")
    if oracle.class_count is None:
        raise ValueError("oracle does not expose a class count")

    targets = oracle.responses(query_inputs, label_mode, temperature)
    student = build_model(arch, query_inputs.shape[1:], oracle.class_count, seed=schedule.seed)
    if input_stats is None:
        pixels = query_inputs.double().transpose(0, 1).reshape(query_inputs.shape[1], -1)
        input_stats = (pixels.mean(dim=1).tolist(), pixels.std(dim=1, unbiased=False).clamp_min(1e-6).tolist())
    student.set_input_stats(*input_stats)

    history = fit(
        student,
        query_inputs,
        targets,
        schedule,
        soft_targets=(label_mode == "soft"),
        temperature=temperature,
        desc=desc,
    )
    student.metadata = {
        "seed": schedule.seed,
        "epochs": schedule.epochs,
        "label_mode": label_mode,
        "temperature": temperature,
        "queries": len(query_inputs),
        "final_loss": history[-1]["loss"],
    }
    return student


def agreement(first: nn.Module, second: nn.Module, data: LabeledDataset) -> float:
    """Fraction of samples on which two models predict the same label."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    a = predict(first, data.images, mode="hard")
    b = predict(second, data.images, mode="hard")
    return int((a == b).sum()) / len(data)

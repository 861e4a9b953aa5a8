"""
Coupled watermark embedding.

Trains the victim on clean batches with watermark composites mixed in, adding a
same-class coupling term that pulls features toward their class centroid and pushes
them at least `margin` away from every other centroid.
"""

import copy
import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..core.datasets import LabeledDataset
from ..core.models import ClassifierModel
from ..core.training import TrainingSchedule, ensure_finite, progress_enabled
from ..errors import ConfigError
from ..verification.ownership import success_rate_on_images

Number = Union[float, torch.Tensor]

LOG_COLUMNS = ["epoch", "phase", "L_pri", "L_wm", "L_intra", "L_inter", "train_acc", "holdout_wsr"]


@dataclass
class LossWeights:
    """L = L_pri + lambda1 * L_wm + lambda2 * (lambda3 * L_intra + lambda4 * L_inter)"""
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    lambda4: float = 3.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(name, f"loss weights must be >= 0, got {value}")


@dataclass
class CouplingState:
    """Running class centroids used by the coupling loss."""
    centroids: torch.Tensor  # class_count x feature_dim
    initialized: torch.Tensor  # bool per class
    momentum: float = 0.9
    margin: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError("margin", f"must be > 0, got {self.margin}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")

    @classmethod
    def empty(cls, class_count: int, feature_dim: int, **kwargs) -> "CouplingState":
        return cls(
            centroids=torch.zeros(class_count, feature_dim),
            initialized=torch.zeros(class_count, dtype=torch.bool),
            **kwargs,
        )


def coupling_loss(features: torch.Tensor,
                  labels: torch.Tensor,
                  state: CouplingState) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Intra-class compactness and inter-class margin terms.

    L_intra = mean_i ||f_i - c_{y_i}||^2
    L_inter = mean_i sum_{j != y_i} max(0, margin - ||f_i - c_j||)^2

    Centroids are constants here; gradients reach only `features`.
    """
    present = torch.unique(labels)
    missing = present[~state.initialized[present]]
    if len(missing):
        raise ValueError(f"centroid of class {int(missing[0])} is not initialized")

    centroids = state.centroids.detach().to(features.dtype)
    count = len(features)

    own = centroids[labels]
    intra = ((features - own) ** 2).sum(dim=1).sum() / count

    squared = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(dim=2)
    distances = squared.clamp_min(1e-12).sqrt()
    hinge = F.relu(state.margin - distances) ** 2
    foreign = torch.ones_like(hinge, dtype=torch.bool)
    foreign[torch.arange(count), labels] = False
    foreign &= state.initialized[None, :]
    inter = (hinge * foreign).sum() / count
    return intra, inter


def total_loss(pri_loss: Number,
               wm_loss: Number,
               intra: Number,
               inter: Number,
               weights: LossWeights) -> Number:
    for name, value in (("L_pri", pri_loss), ("L_wm", wm_loss), ("L_intra", intra), ("L_inter", inter)):
        ensure_finite(torch.as_tensor(value), f"total loss input {name}")
    return pri_loss + weights.lambda1 * wm_loss + weights.lambda2 * (
        weights.lambda3 * intra + weights.lambda4 * inter
    )


def update_centroids(state: CouplingState,
                     features: torch.Tensor,
                     labels: torch.Tensor) -> CouplingState:
    """
    Exponential moving average of the per-class batch means.

    Classes seen for the first time take the batch mean; absent classes are untouched.
    """
    if len(features) == 0:
        raise ValueError("cannot update centroids from an empty batch")
    features = features.detach().to(state.centroids.dtype)
    centroids = state.centroids.clone()
    initialized = state.initialized.clone()
    m = state.momentum
    for label in torch.unique(labels).tolist():
        batch_mean = features[labels == label].mean(dim=0)
        if initialized[label]:
            centroids[label] = m * centroids[label] + (1 - m) * batch_mean
        else:
            centroids[label] = batch_mean
            initialized[label] = True
    return replace(state, centroids=centroids, initialized=initialized)


@dataclass
class PhaseConfig:
    watermark_ratio: float
    schedule: TrainingSchedule


@dataclass
class EmbeddingConfig:
    """Two-phase embedding: phase 2 fine-tunes the phase-1 model at a higher watermark ratio."""
    phase1: PhaseConfig
    phase2: PhaseConfig
    weights: LossWeights = field(default_factory=LossWeights)
    margin: float = 1.0
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name, phase in (("phase1", self.phase1), ("phase2", self.phase2)):
            ratio = phase.watermark_ratio
            if not 0 < ratio < 1:
                raise ConfigError(f"{name}.watermark_ratio", f"must be in (0, 1), got {ratio}")
            batch = phase.schedule.batch_size
            if batch - watermark_slots(ratio, batch) < 1:
                raise ConfigError(
                    f"{name}.watermark_ratio",
                    f"ratio {ratio} leaves no clean samples in a batch of {batch}",
                )


@dataclass
class EmbeddingResult:
    victim: ClassifierModel
    log: List[Dict] = field(default_factory=list)
    state: Optional[CouplingState] = None

    def write_log(self, path: str) -> str:
        output = Path(path)
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.log)
        return str(output)


def watermark_slots(ratio: float, batch_size: int) -> int:
    """Watermark samples per batch, rounded up so every batch carries at least one."""
    return math.ceil(ratio * batch_size)


def embed_watermark(init: ClassifierModel,
                    data: LabeledDataset,
                    wm_set: LabeledDataset,
                    config: EmbeddingConfig,
                    holdout: Optional[LabeledDataset] = None) -> EmbeddingResult:
    """
    Train a watermarked victim.

    Args:
        init: Starting model (fresh or benign); it is copied, never modified
        data: Clean primary-task training data
        wm_set: Composite samples, all labeled with the target label
        config: Phase ratios, schedules, loss weights and margin
        holdout: Fresh composites used only for the per-epoch WSR column of the log

    Returns:
        EmbeddingResult with the victim model and the training-curve rows
    """
    targets = torch.unique(wm_set.labels)
    if len(wm_set) == 0 or len(targets) != 1:
        raise ValueError("watermark set must be non-empty and carry a single target label")
    if wm_set.image_shape != data.image_shape:
        raise ValueError(f"watermark shape {wm_set.image_shape} does not match data {data.image_shape}")

    victim = copy.deepcopy(init)
    state = CouplingState.empty(
        data.class_count,
        victim.feature_dim,
        momentum=config.momentum,
        margin=config.margin,
        weights=config.weights,
    )
    target_label = int(targets[0])

    log: List[Dict] = []
    for phase_index, phase in enumerate((config.phase1, config.phase2), start=1):
        state = _train_phase(victim, data, wm_set, phase, phase_index, state, config, target_label, holdout, log)

    victim.metadata = {
        **victim.metadata,
        "seed": config.seed,
        "epochs": config.phase1.schedule.epochs + config.phase2.schedule.epochs,
        "watermarked": True,
        "target_label": target_label,
    }
    victim.eval()
    return EmbeddingResult(victim=victim, log=log, state=state)


def _train_phase(victim: ClassifierModel,
                 data: LabeledDataset,
                 wm_set: LabeledDataset,
                 phase: PhaseConfig,
                 phase_index: int,
                 state: CouplingState,
                 config: EmbeddingConfig,
                 target_label: int,
                 holdout: Optional[LabeledDataset],
                 log: List[Dict]) -> CouplingState:
    schedule = phase.schedule
    batch_size = schedule.batch_size
    wm_per_batch = watermark_slots(phase.watermark_ratio, batch_size)
    clean_per_batch = batch_size - wm_per_batch

    generator = torch.Generator().manual_seed(schedule.seed + 1000 * phase_index)
    optimizer, scheduler = schedule.optimizer(victim.parameters())
    weights = config.weights

    for epoch in tqdm(range(schedule.epochs), desc=f"embed phase {phase_index}",
                      disable=not progress_enabled(), leave=False):
        victim.train()
        sums = {"L_pri": 0.0, "L_wm": 0.0, "L_intra": 0.0, "L_inter": 0.0}
        steps, correct, seen = 0, 0, 0
        order = torch.randperm(len(data), generator=generator)

        for step, start in enumerate(range(0, len(data), clean_per_batch)):
            clean_idx = order[start:start + clean_per_batch]
            wm_idx = torch.randint(len(wm_set), (wm_per_batch,), generator=generator)
            n_clean = len(clean_idx)

            inputs = torch.cat([data.images[clean_idx], wm_set.images[wm_idx]])
            labels = torch.cat([data.labels[clean_idx], wm_set.labels[wm_idx]])
            logits, features = victim(inputs, return_features=True)

            pri = F.cross_entropy(logits[:n_clean], labels[:n_clean])
            wm = F.cross_entropy(logits[n_clean:], labels[n_clean:])

            # Coupling runs on unit-norm features; the classification path is untouched
            unit = F.normalize(features, dim=1)
            state = update_centroids(state, unit, labels)
            intra, inter = coupling_loss(unit, labels, state)

            where = f"embed phase {phase_index} epoch {epoch + 1} step {step}"
            loss = total_loss(pri, wm, intra, inter, weights)
            ensure_finite(loss, where)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            sums["L_pri"] += pri.item()
            sums["L_wm"] += wm.item()
            sums["L_intra"] += intra.item()
            sums["L_inter"] += inter.item()
            steps += 1
            correct += int((logits[:n_clean].argmax(dim=1) == labels[:n_clean]).sum())
            seen += n_clean
        scheduler.step()

        victim.eval()
        holdout_wsr = (
            success_rate_on_images(victim, holdout.images, target_label) if holdout is not None else ""
        )
        log.append({
            "epoch": epoch + 1,
            "phase": phase_index,
            **{name: total / steps for name, total in sums.items()},
            "train_acc": correct / seen,
            "holdout_wsr": holdout_wsr,
        })
    return state

"""
Model-stealing attacks. The adversary sees the victim only through a BlackBoxOracle.
"""

import logging
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.datasets import LabeledDataset
from ..core.models import ClassifierModel
from ..core.oracle import BlackBoxOracle, distill_from_oracle
from ..core.training import TrainingSchedule

logger = logging.getLogger(__name__)

DEFAULT_JBDA_LAMBDA = 0.1
DEFAULT_JBDA_CAP = 20000


def _images(query_set: Union[LabeledDataset, torch.Tensor]) -> torch.Tensor:
    return query_set.images if isinstance(query_set, LabeledDataset) else query_set


def steal_model(oracle: BlackBoxOracle,
                query_set: Union[LabeledDataset, torch.Tensor],
                label_mode: str = "soft",
                temperature: float = 1.0,
                student_arch: str = "naive",
                schedule: Optional[TrainingSchedule] = None) -> ClassifierModel:
    """
    Knockoff-style extraction over a fixed query set.

    Soft mode distills the oracle's softmax at `temperature` (no ground-truth term);
    hard mode trains on the oracle's top-1 labels. Ground-truth labels of the query set,
    if any, are never read.
    """
    queries = _images(query_set)
    if len(queries) == 0:
        raise ValueError("query set is empty")
    return distill_from_oracle(
        oracle,
        queries,
        student_arch,
        schedule or TrainingSchedule(),
        label_mode=label_mode,
        temperature=temperature,
        desc=f"steal {label_mode} T={temperature:g}",
    )


def jbda_augment(seed_set: Union[LabeledDataset, torch.Tensor],
                 student: nn.Module,
                 lambda_step: float = DEFAULT_JBDA_LAMBDA,
                 rounds: int = 1,
                 cap: Optional[int] = DEFAULT_JBDA_CAP,
                 batch_size: int = 512) -> torch.Tensor:
    """
    Jacobian-based augmentation: each round appends x + lambda * sign(dL/dx) for every
    current sample, L being the student's cross-entropy against its own top-1 label.

    Returns:
        The expanded sample set (doubles per round, pixels clipped to [0,1])
    """
    if lambda_step <= 0:
        raise ValueError(f"lambda_step must be > 0, got {lambda_step}")
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")

    current = _images(seed_set).detach().clone()
    student.eval()
    for round_index in range(rounds):
        if cap is not None and 2 * len(current) > cap:
            logger.warning(
                "JBDA stopped after %d of %d rounds: %d samples would exceed the cap of %d",
                round_index, rounds, 2 * len(current), cap,
            )
            break
        steps = []
        for start in range(0, len(current), batch_size):
            batch = current[start:start + batch_size].clone().requires_grad_(True)
            logits = student(batch)
            loss = F.cross_entropy(logits, logits.argmax(dim=1).detach(), reduction="sum")
            (gradient,) = torch.autograd.grad(loss, batch)
            steps.append((batch.detach() + lambda_step * gradient.sign()).clamp(0.0, 1.0))
        current = torch.cat([current] + steps)
    return current


def jbda_steal(oracle: BlackBoxOracle,
               seed_set: Union[LabeledDataset, torch.Tensor],
               student_arch: str = "naive",
               schedule: Optional[TrainingSchedule] = None,
               label_mode: str = "hard",
               temperature: float = 1.0,
               lambda_step: float = DEFAULT_JBDA_LAMBDA,
               rounds: int = 3,
               cap: Optional[int] = DEFAULT_JBDA_CAP) -> Tuple[ClassifierModel, torch.Tensor]:
    """
    Substitute training loop: label the current set through the oracle, train the
    student, augment with its Jacobian, repeat; the last student is returned.

    Returns:
        (student, final query set)
    """
    schedule = schedule or TrainingSchedule()
    queries = _images(seed_set)
    if len(queries) == 0:
        raise ValueError("seed set is empty")

    student = steal_model(oracle, queries, label_mode, temperature, student_arch, schedule)
    for round_index in range(rounds):
        expanded = jbda_augment(queries, student, lambda_step, rounds=1, cap=cap)
        if len(expanded) == len(queries):
            break
        queries = expanded
        logger.info("JBDA round %d: %d queries", round_index + 1, len(queries))
        student = steal_model(oracle, queries, label_mode, temperature, student_arch, schedule)
    return student, queries

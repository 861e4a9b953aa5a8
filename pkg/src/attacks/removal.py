"""
Watermark-removal attacks on a white-box copy: fine-tuning, pruning, quantization.
Every attack works on a deep copy and leaves its input model untouched.
"""

import copy
from typing import List

import numpy as np
import torch
import torch.nn as nn

from ..core.datasets import LabeledDataset
from ..core.training import TrainingSchedule, fit

FINETUNE_MODES = {
    "FTLL": "fine-tune the last layer, body frozen",
    "FTAL": "fine-tune all layers",
    "RTLL": "re-initialize the last layer, then train it alone",
    "RTAL": "re-initialize the last layer, then train all layers",
}


def weight_tensors(model: nn.Module) -> List[nn.Parameter]:
    """Weight matrices and kernels in registration order; biases are exempt."""
    return [p for _, p in model.named_parameters() if p.dim() > 1]


def finetune(model: nn.Module,
             data: LabeledDataset,
             mode: str,
             schedule: TrainingSchedule) -> nn.Module:
    """Fine-tune a copy of `model` on the attacker's labeled data."""
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown fine-tuning mode '{mode}' (available: {', '.join(FINETUNE_MODES)})")
    attacked = copy.deepcopy(model)
    if mode.startswith("RT"):
        torch.manual_seed(schedule.seed)
        attacked.reset_final_layer()
    parameters = attacked.final_layer_parameters() if mode.endswith("LL") else None

    history = fit(attacked, data.images, data.labels, schedule, parameters=parameters, desc=mode)
    attacked.metadata = {**model.metadata, "attack": mode, "final_loss": history[-1]["loss"]}
    return attacked


@torch.no_grad()
def prune_weights(model: nn.Module, rate: float) -> nn.Module:
    """
    Global magnitude pruning: zero the `rate` fraction of weights with the smallest |w|.

    Ties are broken by tensor order, then by position inside the tensor.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"pruning rate must be in [0, 1], got {rate}")
    pruned = copy.deepcopy(model)
    tensors = weight_tensors(pruned)
    magnitudes = np.concatenate([p.detach().abs().double().flatten().numpy() for p in tensors])
    count = int(round(rate * len(magnitudes)))
    if count == 0:
        return pruned

    mask = np.ones(len(magnitudes), dtype=bool)
    mask[np.argsort(magnitudes, kind="stable")[:count]] = False
    offset = 0
    for p in tensors:
        size = p.numel()
        pruned_here = torch.from_numpy(~mask[offset:offset + size]).view_as(p)
        p.masked_fill_(pruned_here, 0.0)
        offset += size
    return pruned


@torch.no_grad()
def quantize_weights(model: nn.Module, bits: int) -> nn.Module:
    """
    Per-tensor min-max quantization to 2^bits levels with round-half-to-even.

    The grid endpoints map back to the exact original min and max, so quantizing
    twice with the same bits changes nothing.
    """
    if not isinstance(bits, int) or not 1 <= bits <= 16:
        raise ValueError(f"bits must be an integer in [1, 16], got {bits}")
    quantized = copy.deepcopy(model)
    levels = 2 ** bits - 1
    for p in weight_tensors(quantized):
        w = p.detach().double()
        low, high = w.min(), w.max()
        if high == low:
            continue
        step = (high - low) / levels
        q = torch.round((w - low) / step)
        values = q * step + low
        values[q == 0] = low
        values[q == levels] = high
        p.copy_(values.to(p.dtype))
    return quantized

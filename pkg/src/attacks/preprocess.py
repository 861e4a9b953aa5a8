"""
Input preprocessing an adversary may put in front of a stolen model to dodge verification.
"""

import math
from typing import Dict, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

# method -> (minimum, maximum, minimum inclusive)
PREPROCESS_METHODS: Dict[str, Tuple[float, float, bool]] = {
    "blur": (0.0, math.inf, False),  # Gaussian sigma in pixels
    "noise": (0.0, math.inf, True),  # additive Gaussian std
    "input_quantize": (1, 8, True),  # bits per pixel
    "crop": (0.0, 1.0, False),  # kept area fraction
}


def _check_strength(method: str, strength: float) -> None:
    if method not in PREPROCESS_METHODS:
        raise ValueError(f"unknown preprocessing method '{method}' (available: {', '.join(PREPROCESS_METHODS)})")
    low, high, inclusive = PREPROCESS_METHODS[method]
    below = strength < low if inclusive else strength <= low
    if below or strength > high or math.isnan(strength):
        raise ValueError(f"{method} strength {strength} is out of range")
    if method == "input_quantize" and int(strength) != strength:
        raise ValueError(f"input_quantize needs whole bits, got {strength}")


def preprocess_inputs(samples: torch.Tensor, method: str, strength: float, seed: int = 0) -> torch.Tensor:
    """
    Transform a batch of [0,1] images.

    Args:
        samples: N x C x H x W tensor
        method: blur | noise | input_quantize | crop
        strength: sigma, std, bits or kept-area fraction
        seed: Noise seed

    Returns:
        New tensor of the same shape, still in [0,1]
    """
    _check_strength(method, strength)
    if method == "blur":
        blurred = gaussian_filter(samples.double().numpy(), sigma=(0, 0, strength, strength), mode="reflect")
        return torch.from_numpy(blurred).float().clamp(0.0, 1.0)
    if method == "noise":
        if strength == 0:
            return samples.clone()
        noise = np.random.default_rng(seed).normal(0.0, strength, size=tuple(samples.shape))
        return (samples + torch.from_numpy(noise).float()).clamp(0.0, 1.0)
    if method == "input_quantize":
        levels = 2 ** int(strength) - 1
        return torch.round(samples * levels) / levels
    return center_crop_resize(samples, strength)


def center_crop_resize(samples: torch.Tensor, fraction: float) -> torch.Tensor:
    """Keep the central `fraction` of the area, then scale back up bilinearly."""
    if fraction == 1:
        return samples.clone()
    _, _, height, width = samples.shape
    scale = math.sqrt(fraction)
    crop_h, crop_w = max(1, round(height * scale)), max(1, round(width * scale))
    top, left = (height - crop_h) // 2, (width - crop_w) // 2

    pixels = samples.numpy().astype(np.float32)
    output = np.empty_like(pixels)
    for index in range(len(pixels)):
        for channel in range(pixels.shape[1]):
            crop = Image.fromarray(np.ascontiguousarray(pixels[index, channel, top:top + crop_h, left:left + crop_w]))
            output[index, channel] = np.asarray(crop.resize((width, height), Image.Resampling.BILINEAR))
    return torch.from_numpy(output).clamp(0.0, 1.0)

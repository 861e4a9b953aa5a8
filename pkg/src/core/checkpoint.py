"""
Versioned model checkpoints.

A checkpoint is a `torch.save` archive of one dict:
    magic, format_version, arch, class_count, feature_dim, input_shape, metadata, state_dict
It is read back with `torch.load(weights_only=True)`, so loading never runs pickled code.
"""

import hashlib
import pickle
import zipfile
from pathlib import Path
from typing import Dict

import torch

from .models import ClassifierModel, build_model
from ..errors import CheckpointError

MAGIC = "wmlab-checkpoint"
FORMAT_VERSION = 2

HEADER_FIELDS = ("arch", "class_count", "feature_dim", "input_shape", "metadata")


def save_checkpoint(model: ClassifierModel, path: str) -> str:
    """Write `model` to `path`; returns the path."""
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "class_count": model.class_count,
        "feature_dim": model.feature_dim,
        "input_shape": list(model.input_shape),
        "metadata": model.metadata,
        "state_dict": {name: tensor.detach().cpu() for name, tensor in model.state_dict().items()},
    }, output)
    return str(output)


def read_header(path: str) -> Dict:
    """Everything except the tensors, plus the stored tensor names."""
    payload = _read(path)
    header = {name: payload[name] for name in HEADER_FIELDS}
    header["tensors"] = sorted(payload["state_dict"])
    return header


def load_checkpoint(path: str) -> ClassifierModel:
    """Rebuild the model stored at `path`."""
    payload = _read(path)

    model = build_model(payload["arch"], payload["input_shape"], payload["class_count"])
    if model.feature_dim != payload["feature_dim"]:
        raise CheckpointError(
            f"corrupt checkpoint: feature_dim {payload['feature_dim']} does not match "
            f"architecture '{payload['arch']}' ({model.feature_dim})"
        )
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    model.metadata = payload.get("metadata") or {}
    model.eval()
    return model


def _read(path: str) -> Dict:
    source = Path(path)
    if not source.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"corrupt checkpoint: {path} is unreadable ({exc})") from exc

    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"corrupt checkpoint: bad magic in {path}")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
        )
    missing = [name for name in (*HEADER_FIELDS, "state_dict") if name not in payload]
    if missing:
        raise CheckpointError(f"corrupt checkpoint: {path} lacks {', '.join(missing)}")
    return payload


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()

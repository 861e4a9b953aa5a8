"""
Labeled image datasets.
Loads catalog datasets (torchvision downloads), synthetic fixtures and PNG folders
into one in-memory representation with deterministic, seeded ordering.
"""

import csv
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from ..errors import DatasetError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "transfer")
MANIFEST_NAME = "manifest.csv"

DEFAULT_CACHE_DIR = Path.home() / ".cache" / "wmlab"
SYNTHETIC_PATTERN = re.compile(r"^synthetic(?P<ood>-ood)?-(?P<classes>\d+)$")


# Named datasets the loader knows how to fetch
DATASET_CATALOG: Dict[str, Dict] = {
    "fashion-mnist": {
        "torchvision": "FashionMNIST",
        "class_count": 10,
        "shape": (1, 28, 28),
        "description": "Zalando article images, 60k train / 10k test",
    },
    "mnist": {
        "torchvision": "MNIST",
        "class_count": 10,
        "shape": (1, 28, 28),
        "description": "Handwritten digits; default transfer set for Fashion-MNIST",
    },
    "cifar10": {
        "torchvision": "CIFAR10",
        "class_count": 10,
        "shape": (3, 32, 32),
        "description": "Natural images, 50k train / 10k test",
    },
    "synthetic-<C>": {
        "torchvision": None,
        "class_count": None,
        "shape": (1, 16, 16),
        "description": "Generated class prototypes plus noise (offline fixture)",
    },
}


@dataclass
class LabeledDataset:
    """Images in [0,1] (N x C x H x W, float32) with integer labels in [0, class_count)."""
    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    split: str = "train"
    names: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    source: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise ValueError(
                f"label {int(self.labels.max())} outside [0, {self.class_count})"
            )
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag: {self.split}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "LabeledDataset":
        """Return the samples at `indices`, in that order."""
        index = torch.as_tensor(list(indices), dtype=torch.long)
        names = [self.names[i] for i in index.tolist()] if self.names else []
        return LabeledDataset(
            images=self.images[index],
            labels=self.labels[index],
            class_count=self.class_count,
            split=split or self.split,
            names=names,
            source=self.source,
            seed=self.seed,
        )

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels.numpy() == label)

    def channel_stats(self) -> Tuple[List[float], List[float]]:
        """Per-channel mean and std over the whole split."""
        if len(self) == 0:
            raise ValueError("cannot compute statistics of an empty dataset")
        pixels = self.images.double().transpose(0, 1).reshape(self.images.shape[1], -1)
        std = pixels.std(dim=1, unbiased=False).clamp_min(1e-6)
        return pixels.mean(dim=1).tolist(), std.tolist()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """[0,1] float images -> uint8 array of the same layout."""
    return (images.detach().cpu() * 255.0).round().clamp(0, 255).to(torch.uint8).numpy()


def from_uint8(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).float() / 255.0


def cache_dir() -> Path:
    return Path(os.environ.get("WMLAB_DATA_DIR", DEFAULT_CACHE_DIR))


def load_dataset(source: str,
                 split: str = "train",
                 limit: Optional[int] = None,
                 seed: int = 0,
                 data_dir: Optional[str] = None) -> LabeledDataset:
    """
    Load a dataset by catalog id, synthetic id or folder path.

    Args:
        source: Catalog id ('fashion-mnist', 'mnist', 'cifar10'), 'synthetic-<C>' /
                'synthetic-ood-<C>', or a directory holding PNGs plus manifest.csv
        split: 'train', 'test' or 'transfer' (transfer reads the source's train part)
        limit: Keep only the first `limit` samples of the seeded permutation
        seed: Seed of the ordering permutation
        data_dir: Download cache override (default: $WMLAB_DATA_DIR)

    Returns:
        LabeledDataset in seeded order
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split tag: {split}")

    synthetic = SYNTHETIC_PATTERN.match(source)
    if synthetic:
        dataset = make_synthetic_dataset(
            class_count=int(synthetic.group("classes")),
            split=split,
            ood=bool(synthetic.group("ood")),
        )
        dataset.source = source
    elif DATASET_CATALOG.get(source, {}).get("torchvision"):
        dataset = _load_torchvision(source, split, data_dir)
    elif Path(source).is_dir():
        dataset = _load_folder(Path(source), split)
    else:
        raise DatasetError(f"dataset source not found: {source}")

    return _seeded_order(dataset, limit, seed)


def _seeded_order(dataset: LabeledDataset, limit: Optional[int], seed: int) -> LabeledDataset:
    available = len(dataset)
    if limit is not None:
        if limit < 0:
            raise ValueError(f"limit must be non-negative, got {limit}")
        if limit > available:
            raise DatasetError(f"limit {limit} exceeds the {available} available samples")
    order = np.random.default_rng(seed).permutation(available)
    if limit is not None:
        order = order[:limit]
    ordered = dataset.subset(order.tolist())
    ordered.skipped = list(dataset.skipped)
    ordered.seed = seed
    return ordered


def _load_torchvision(source: str, split: str, data_dir: Optional[str]) -> LabeledDataset:
    import torchvision

    entry = DATASET_CATALOG[source]
    root = Path(data_dir) if data_dir else cache_dir()
    root.mkdir(parents=True, exist_ok=True)
    dataset_cls = getattr(torchvision.datasets, entry["torchvision"])
    raw = dataset_cls(str(root), train=(split != "test"), download=True)

    pixels = np.asarray(raw.data)
    if pixels.ndim == 3:
        pixels = pixels[:, None, :, :]
    else:
        pixels = pixels.transpose(0, 3, 1, 2)
    labels = torch.as_tensor(np.asarray(raw.targets), dtype=torch.long)

    return LabeledDataset(
        images=from_uint8(pixels),
        labels=labels,
        class_count=entry["class_count"],
        split=split,
        names=[f"{source}-{split}-{i:06d}" for i in range(len(labels))],
        source=source,
    )


def make_synthetic_dataset(class_count: int,
                           split: str = "train",
                           per_class: Optional[int] = None,
                           image_shape: Tuple[int, int, int] = (1, 16, 16),
                           ood: bool = False,
                           noise: float = 0.08) -> LabeledDataset:
    """
    Generate a separable image classification task.

    Every class owns a blocky random prototype; samples are the prototype plus Gaussian
    noise, quantized to 8 bits. Prototypes depend only on the class id (and `ood`), so
    train and test splits describe the same task.
    """
    if class_count < 1:
        raise ValueError(f"class_count must be positive, got {class_count}")
    channels, height, width = image_shape
    if per_class is None:
        per_class = 40 if split == "test" else 100

    family = 10_000 if ood else 0
    split_offset = {"train": 1, "test": 2, "transfer": 3}[split]
    noise_rng = np.random.default_rng(family + 7919 * split_offset + class_count)

    images, labels = [], []
    for label in range(class_count):
        proto_rng = np.random.default_rng(family + label)
        coarse = proto_rng.uniform(0.0, 1.0, size=(channels, 4, 4))
        prototype = np.kron(coarse, np.ones((1, height // 4, width // 4)))
        samples = prototype[None] + noise_rng.normal(0.0, noise, size=(per_class, channels, height, width))
        images.append(np.clip(np.round(samples * 255.0), 0, 255).astype(np.uint8))
        labels.extend([label] * per_class)

    pixels = np.concatenate(images)
    tag = "synthetic-ood" if ood else "synthetic"
    return LabeledDataset(
        images=from_uint8(pixels),
        labels=torch.as_tensor(labels, dtype=torch.long),
        class_count=class_count,
        split=split,
        names=[f"{tag}-{split}-{i:06d}" for i in range(len(labels))],
    )


def _load_folder(directory: Path, split: str) -> LabeledDataset:
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"no samples found in {directory}")

    with open(manifest, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise DatasetError(f"no samples found in {directory}")

    if rows[0].get("class_count"):
        # Folder written by save_dataset: labels are already ids in [0, class_count)
        class_count = int(rows[0]["class_count"])
        remap = {label: label for label in range(class_count)}
    else:
        # Remap over every split so train and test of one folder agree on ids
        label_ids = sorted({int(row["label"]) for row in rows})
        remap = {label: index for index, label in enumerate(label_ids)}
        class_count = len(label_ids)

    pixels, labels, names, skipped = [], [], [], []
    for row in rows:
        if row.get("split", "train") != split:
            continue
        path = directory / row["filename"]
        try:
            with Image.open(path) as img:
                array = np.asarray(img)
        except (OSError, UnidentifiedImageError) as exc:
            logger.warning("skipping corrupt sample %s: %s", path.name, exc)
            skipped.append(row["filename"])
            continue
        pixels.append(array[None] if array.ndim == 2 else array.transpose(2, 0, 1))
        labels.append(remap[int(row["label"])])
        names.append(row["filename"])

    if not pixels:
        raise DatasetError(f"no samples found in {directory} for split '{split}'")

    return LabeledDataset(
        images=from_uint8(np.stack(pixels)),
        labels=torch.as_tensor(labels, dtype=torch.long),
        class_count=class_count,
        split=split,
        names=names,
        skipped=skipped,
        source=str(directory),
    )


def save_image_folder(images: torch.Tensor,
                      rows: List[Dict],
                      directory: str,
                      columns: Optional[List[str]] = None,
                      prefix: str = "sample") -> str:
    """
    Write images as 8-bit PNGs plus a manifest.csv with one row per image.

    Args:
        images: N x C x H x W tensor in [0,1]
        rows: One dict of manifest columns per image (a 'filename' column is added)
        directory: Output folder, created if needed
        columns: Manifest column order (default: keys of the first row)
        prefix: Filename prefix

    Returns:
        Path to the manifest
    """
    if len(images) != len(rows):
        raise ValueError(f"{len(images)} images but {len(rows)} manifest rows")

    output = Path(directory)
    output.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(images)

    columns = ["filename"] + [c for c in (columns or (list(rows[0]) if rows else [])) if c != "filename"]
    width = max(6, len(str(len(rows))))
    manifest = output / MANIFEST_NAME
    with open(manifest, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for index, (array, row) in enumerate(zip(pixels, rows)):
            filename = f"{prefix}_{index:0{width}d}.png"
            if array.shape[0] == 1:
                img = Image.fromarray(array[0])
            else:
                img = Image.fromarray(np.ascontiguousarray(array.transpose(1, 2, 0)))
            img.save(output / filename, format="PNG")
            writer.writerow({**row, "filename": filename})
    return str(manifest)


def save_dataset(dataset: LabeledDataset, directory: str) -> str:
    """Persist a dataset as a PNG folder readable by load_dataset."""
    rows = [
        {"label": int(label), "split": dataset.split, "class_count": dataset.class_count}
        for label in dataset.labels.tolist()
    ]
    return save_image_folder(dataset.images, rows, directory, columns=["label", "split", "class_count"])

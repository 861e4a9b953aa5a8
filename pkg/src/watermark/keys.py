"""
Key sample generation.

Composite candidates are kept only if the victim and a simulated stolen copy (the
surrogate) both answer the target label while a clean benign model does not; the
survivors the surrogate is most confident about form the verification key.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from ..core.datasets import MANIFEST_NAME, LabeledDataset, from_uint8, save_image_folder
from ..core.oracle import BlackBoxOracle, distill_from_oracle
from ..core.training import TrainingSchedule, predict
from ..errors import ArtifactError, WatermarkLabError
from ..verification.ownership import success_rate_on_images
from .composer import WatermarkSpec, build_watermark_dataset

logger = logging.getLogger(__name__)

DEFAULT_KEY_COUNT = 2000
DEFAULT_CANDIDATE_FACTOR = 4
KEYSET_META = "keyset.json"
MANIFEST_COLUMNS = [
    "target_label", "victim_pred", "surrogate_pred", "benign_pred",
    "surrogate_confidence", "candidate_index", "sources", "spec_hash",
]


@dataclass
class KeyProvenance:
    """Model answers for one key sample at filter time."""
    candidate_index: int
    victim_pred: int
    surrogate_pred: int
    benign_pred: int
    confidence: float  # surrogate probability of the target label
    sources: str = ""


@dataclass
class KeySampleSet:
    """The verification key: composites ordered by surrogate confidence, highest first."""
    images: torch.Tensor
    target_label: int
    provenance: List[KeyProvenance]
    requested: int  # M
    spec_hash: str = ""
    warnings: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def confidences(self) -> List[float]:
        return [entry.confidence for entry in self.provenance]

    def save(self, directory: str) -> str:
        """Write PNGs, manifest.csv and keyset.json; returns the manifest path."""
        output = Path(directory)
        rows = [
            {
                "target_label": self.target_label,
                "victim_pred": entry.victim_pred,
                "surrogate_pred": entry.surrogate_pred,
                "benign_pred": entry.benign_pred,
                "surrogate_confidence": repr(entry.confidence),
                "candidate_index": entry.candidate_index,
                "sources": entry.sources,
                "spec_hash": self.spec_hash,
            }
            for entry in self.provenance
        ]
        manifest = save_image_folder(self.images, rows, str(output), columns=MANIFEST_COLUMNS, prefix="key")
        meta = {
            "target_label": self.target_label,
            "requested": self.requested,
            "count": len(self),
            "image_shape": list(self.images.shape[1:]),
            "spec_hash": self.spec_hash,
            "warnings": self.warnings,
        }
        (output / KEYSET_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return manifest

    @classmethod
    def load(cls, directory: str) -> "KeySampleSet":
        source = Path(directory)
        meta_path, manifest = source / KEYSET_META, source / MANIFEST_NAME
        missing = [p.name for p in (meta_path, manifest) if not p.exists()]
        if missing:
            raise ArtifactError(f"key set at {directory} is incomplete", missing=missing)

        meta = json.loads(meta_path.read_text())
        with open(manifest, newline="") as handle:
            rows = list(csv.DictReader(handle))

        pixels, provenance = [], []
        for row in rows:
            with Image.open(source / row["filename"]) as img:
                array = np.asarray(img)
            pixels.append(array[None] if array.ndim == 2 else array.transpose(2, 0, 1))
            provenance.append(KeyProvenance(
                candidate_index=int(row["candidate_index"]),
                victim_pred=int(row["victim_pred"]),
                surrogate_pred=int(row["surrogate_pred"]),
                benign_pred=int(row["benign_pred"]),
                confidence=float(row["surrogate_confidence"]),
                sources=row["sources"],
            ))

        images = from_uint8(np.stack(pixels)) if pixels else torch.empty(0, *meta["image_shape"])
        return cls(
            images=images,
            target_label=int(meta["target_label"]),
            provenance=provenance,
            requested=int(meta["requested"]),
            spec_hash=meta.get("spec_hash", ""),
            warnings=list(meta.get("warnings", [])),
        )


@dataclass
class FilteredCandidates:
    """Stage-1 survivors plus every model's hard answer for them."""
    samples: LabeledDataset
    indices: List[int]
    victim_preds: List[int]
    surrogate_preds: List[int]
    benign_preds: List[int]

    def __len__(self) -> int:
        return len(self.samples)


def train_surrogate(victim: nn.Module,
                    transfer_set: LabeledDataset,
                    arch: str,
                    schedule: TrainingSchedule) -> nn.Module:
    """Simulate stealing the victim: soft-label distillation over the transfer set's images."""
    if len(transfer_set) == 0:
        raise ValueError("transfer set is empty")
    oracle = BlackBoxOracle(victim)
    surrogate = distill_from_oracle(
        oracle,
        transfer_set.images,
        arch,
        schedule,
        label_mode="soft",
        temperature=1.0,
        input_stats=transfer_set.channel_stats(),
        desc="surrogate",
    )
    surrogate.metadata["trained_on"] = transfer_set.source
    return surrogate


def stage1_filter(candidates: LabeledDataset,
                  victim: nn.Module,
                  surrogate: nn.Module,
                  benign: nn.Module) -> FilteredCandidates:
    """
    Keep candidates x with victim(x) = y^w, surrogate(x) = y^w and benign(x) != y^w.

    Hard predictions only; candidate order is preserved.
    """
    counts = {getattr(m, "class_count", candidates.class_count) for m in (victim, surrogate, benign)}
    if len(counts) != 1:
        raise ValueError(f"victim, surrogate and benign disagree on class count: {sorted(counts)}")
    targets = torch.unique(candidates.labels)
    if len(targets) > 1:
        raise ValueError("candidates must all carry the same target label")
    if len(candidates) == 0:
        return FilteredCandidates(candidates, [], [], [], [])
    target = int(targets[0])

    v = predict(victim, candidates.images, mode="hard")
    s = predict(surrogate, candidates.images, mode="hard")
    b = predict(benign, candidates.images, mode="hard")
    keep = ((v == target) & (s == target) & (b != target)).nonzero().flatten().tolist()

    return FilteredCandidates(
        samples=candidates.subset(keep),
        indices=keep,
        victim_preds=v[keep].tolist(),
        surrogate_preds=s[keep].tolist(),
        benign_preds=b[keep].tolist(),
    )


def rank_by_confidence(confidences: np.ndarray) -> np.ndarray:
    """Indices by confidence descending; ties keep the lower index first."""
    confidences = np.asarray(confidences, dtype=np.float64)
    return np.lexsort((np.arange(len(confidences)), -confidences))


def stage2_topk(filtered: FilteredCandidates,
                surrogate: nn.Module,
                m: int = DEFAULT_KEY_COUNT,
                spec_hash: str = "") -> KeySampleSet:
    """Keep the min(M, |S1|) survivors the surrogate assigns the highest target probability."""
    if m < 1:
        raise ValueError(f"M must be >= 1, got {m}")
    samples = filtered.samples
    target = int(samples.labels[0]) if len(samples) else -1
    warnings: List[str] = []
    if len(filtered) < m:
        message = f"only {len(filtered)} candidates passed stage 1; key set is smaller than M={m}"
        logger.warning(message)
        warnings.append(message)
    if len(filtered) == 0:
        return KeySampleSet(
            images=torch.empty(0, *samples.image_shape),
            target_label=target,
            provenance=[],
            requested=m,
            spec_hash=spec_hash,
            warnings=warnings,
        )

    confidences = predict(surrogate, samples.images, mode="soft")[:, target].numpy()
    order = rank_by_confidence(confidences)[:m]

    provenance = [
        KeyProvenance(
            candidate_index=filtered.indices[i],
            victim_pred=filtered.victim_preds[i],
            surrogate_pred=filtered.surrogate_preds[i],
            benign_pred=filtered.benign_preds[i],
            confidence=float(confidences[i]),
            sources=samples.names[i] if samples.names else "",
        )
        for i in order.tolist()
    ]
    return KeySampleSet(
        images=samples.images[torch.as_tensor(order)],
        target_label=target,
        provenance=provenance,
        requested=m,
        spec_hash=spec_hash,
        warnings=warnings,
    )


def generate_key_samples(victim: nn.Module,
                         surrogate: nn.Module,
                         benign: nn.Module,
                         test_data: LabeledDataset,
                         spec: WatermarkSpec,
                         m: int = DEFAULT_KEY_COUNT,
                         candidate_factor: int = DEFAULT_CANDIDATE_FACTOR,
                         seed: int = 1) -> KeySampleSet:
    """
    Draw candidate_factor * M composites from the test split, filter them and keep the top M.

    Raises:
        WatermarkLabError: if the finished key set does not give WSR 1 on the victim
                           and WSR 0 on the benign model
    """
    if candidate_factor < 1:
        raise ValueError(f"candidate_factor must be >= 1, got {candidate_factor}")
    candidates = build_watermark_dataset(test_data, spec, candidate_factor * m, seed)
    filtered = stage1_filter(candidates, victim, surrogate, benign)
    logger.info("stage 1 kept %d of %d candidates", len(filtered), len(candidates))
    keys = stage2_topk(filtered, surrogate, m, spec_hash=spec.digest())

    if len(keys):
        victim_wsr = success_rate_on_images(victim, keys.images, keys.target_label)
        benign_wsr = success_rate_on_images(benign, keys.images, keys.target_label)
        if victim_wsr != 1.0 or benign_wsr != 0.0:
            raise WatermarkLabError(
                f"key set re-verification failed: victim WSR {victim_wsr}, benign WSR {benign_wsr}"
            )
    return keys

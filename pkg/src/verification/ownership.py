"""
Black-box ownership verification: watermark success rate against a threshold.
"""

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Union

import torch
import torch.nn as nn

from .. import __version__
from ..core.training import predict

DEFAULT_THRESHOLD = 0.2
REPORT_VERSION = 1


def success_rate_on_images(model: nn.Module, images: torch.Tensor, target_label: int) -> float:
    """Fraction of `images` the model labels `target_label` (hard predictions)."""
    if len(images) == 0:
        raise ValueError("cannot measure WSR on an empty sample set")
    predictions = predict(model, images, mode="hard")
    return float(Fraction(int((predictions == target_label).sum()), len(images)))


def watermark_success_rate(model: nn.Module, key_set) -> float:
    """
    WSR of `model` on a key sample set.

    Only top-1 labels are used; the exact ratio hits/n is returned as a float.
    """
    if len(key_set) == 0:
        raise ValueError("key sample set is empty")
    return success_rate_on_images(model, key_set.images, key_set.target_label)


@dataclass
class VerificationReport:
    model_id: str
    key_set_id: str
    n: int
    hits: int
    wsr: float
    threshold: float
    decision: str  # "owned" | "not-owned"
    target_label: int
    predictions: List[int] = field(default_factory=list)
    timestamp: str = ""
    tool_version: str = __version__
    report_version: int = REPORT_VERSION

    @property
    def owned(self) -> bool:
        return self.decision == "owned"

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> str:
        output = Path(path)
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return str(output)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VerificationReport":
        return cls(**json.loads(Path(path).read_text()))


def is_owned(hits: int, n: int, threshold: float) -> bool:
    """wsr >= T compared as exact rationals, so 1/5 >= 0.2 holds."""
    return Fraction(hits, n) >= Fraction(str(threshold))


def verify_ownership(model: nn.Module,
                     key_set,
                     threshold: float = DEFAULT_THRESHOLD,
                     model_id: str = "suspect",
                     report_path: Optional[str] = None) -> VerificationReport:
    """
    Decide whether `model` carries the watermark behind `key_set`.

    Args:
        model: Suspect model, queried for top-1 labels only
        key_set: KeySampleSet (images, target_label, spec_hash)
        threshold: Ownership threshold T in (0, 1)
        model_id: Name recorded in the report
        report_path: Persist the report as JSON here when given

    Returns:
        VerificationReport with decision owned iff wsr >= threshold
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if len(key_set) == 0:
        raise ValueError("key sample set is empty")

    predictions = predict(model, key_set.images, mode="hard")
    hits = int((predictions == key_set.target_label).sum())
    n = len(key_set)
    report = VerificationReport(
        model_id=model_id,
        key_set_id=getattr(key_set, "spec_hash", ""),
        n=n,
        hits=hits,
        wsr=float(Fraction(hits, n)),
        threshold=threshold,
        decision="owned" if is_owned(hits, n, threshold) else "not-owned",
        target_label=int(key_set.target_label),
        predictions=predictions.tolist(),
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    if report_path:
        report.save(report_path)
    return report

"""
Run configuration.

A RunConfig is a tree of dataclass sections serialized as YAML. Every field has a
default; loading a file overrides only the keys it names.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin

import yaml

from .attacks.preprocess import PREPROCESS_METHODS
from .attacks.removal import FINETUNE_MODES
from .core.datasets import DATASET_CATALOG, SYNTHETIC_PATTERN
from .core.models import ARCHITECTURES
from .core.training import TrainingSchedule
from .errors import ConfigError
from .watermark.composer import RESIZE_FILTERS
from .watermark.embedding import EmbeddingConfig, LossWeights, PhaseConfig


@dataclass
class RunSection:
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True


@dataclass
class DataSection:
    task: str = "fashion-mnist"
    train_limit: Optional[int] = 10000
    test_limit: Optional[int] = 2000
    transfer: str = "mnist"
    transfer_limit: Optional[int] = 5000
    data_dir: Optional[str] = None


@dataclass
class ModelSection:
    victim: str = "naive"  # also the benign baseline
    surrogate: str = "vgg"


@dataclass
class ScheduleSection:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.001
    decay_every: int = 10
    decay_factor: float = 0.5

    def build(self, seed: int) -> TrainingSchedule:
        return TrainingSchedule(seed=seed, **asdict(self))


@dataclass
class SchedulesSection:
    benign: ScheduleSection = field(default_factory=ScheduleSection)
    phase1: ScheduleSection = field(default_factory=ScheduleSection)
    phase2: ScheduleSection = field(default_factory=ScheduleSection)
    surrogate: ScheduleSection = field(default_factory=ScheduleSection)
    attack: ScheduleSection = field(default_factory=ScheduleSection)


@dataclass
class WatermarkSection:
    resize_filter: str = "bilinear"
    train_count: int = 2000
    holdout_count: int = 1000
    source_classes: Optional[List[int]] = None  # override the K-means choice


@dataclass
class EmbeddingSection:
    phase1_ratio: float = 0.01
    phase2_ratio: float = 0.1
    phase1_from_benign: bool = False
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    lambda4: float = 3.0
    margin: float = 1.0
    momentum: float = 0.9


@dataclass
class KeySection:
    m: int = 2000
    candidate_factor: int = 4


@dataclass
class VerificationSection:
    threshold: float = 0.2


@dataclass
class AttackSection:
    query_dataset: str = "fashion-mnist"
    query_limit: Optional[int] = 5000
    label_mode: str = "soft"
    temperatures: List[float] = field(default_factory=lambda: [1.0])
    student_arch: str = "naive"
    jbda_lambda: float = 0.1
    jbda_rounds: int = 3
    jbda_seed_count: int = 150
    jbda_cap: int = 20000
    finetune_limit: Optional[int] = 2000
    finetune_modes: List[str] = field(default_factory=lambda: list(FINETUNE_MODES))
    prune_rates: List[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    quantize_bits: List[int] = field(default_factory=lambda: [16, 8, 6, 4, 3, 2, 1])
    preprocess: Dict[str, List[float]] = field(default_factory=lambda: {
        "blur": [0.5, 1.0, 1.5],
        "noise": [0.0, 0.05, 0.1],
        "input_quantize": [8.0, 4.0, 2.0],
        "crop": [1.0, 0.8, 0.6],
    })


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    models: ModelSection = field(default_factory=ModelSection)
    schedules: SchedulesSection = field(default_factory=SchedulesSection)
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    keys: KeySection = field(default_factory=KeySection)
    verification: VerificationSection = field(default_factory=VerificationSection)
    attacks: AttackSection = field(default_factory=AttackSection)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def save(self, path: str) -> str:
        output = Path(path)
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(self.to_yaml())
        return str(output)

    def digest(self) -> str:
        """sha256 over the canonical JSON form (covers every seed)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "RunConfig":
        config = _build(cls, data or {}, "")
        config.validate()
        return config

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        source = Path(path)
        if not source.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            data = yaml.safe_load(source.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"invalid YAML in {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config", "top level must be a mapping of sections")
        return cls.from_dict(data)

    def embedding_config(self) -> EmbeddingConfig:
        emb = self.embedding
        seed = self.run.seed
        try:
            return EmbeddingConfig(
                phase1=PhaseConfig(emb.phase1_ratio, self.schedules.phase1.build(seed)),
                phase2=PhaseConfig(emb.phase2_ratio, self.schedules.phase2.build(seed + 1)),
                weights=LossWeights(emb.lambda1, emb.lambda2, emb.lambda3, emb.lambda4),
                margin=emb.margin,
                momentum=emb.momentum,
                seed=seed,
            )
        except ConfigError as exc:
            raise ConfigError(f"embedding.{exc.field}", exc.detail) from exc

    def validate(self) -> None:
        """Raise ConfigError naming the first invalid field."""
        for name in ("task", "transfer"):
            _check_dataset(f"data.{name}", getattr(self.data, name))
        _check_dataset("attacks.query_dataset", self.attacks.query_dataset)
        for name in ("train_limit", "test_limit", "transfer_limit"):
            value = getattr(self.data, name)
            if value is not None and value < 1:
                raise ConfigError(f"data.{name}", f"must be >= 1 or null, got {value}")

        for name, arch in (("models.victim", self.models.victim),
                           ("models.surrogate", self.models.surrogate),
                           ("attacks.student_arch", self.attacks.student_arch)):
            if arch not in ARCHITECTURES:
                raise ConfigError(name, f"unknown architecture '{arch}' (available: {', '.join(ARCHITECTURES)})")

        for schedule in fields(SchedulesSection):
            try:
                getattr(self.schedules, schedule.name).build(self.run.seed)
            except ConfigError as exc:
                raise ConfigError(f"schedules.{schedule.name}.{exc.field}", exc.detail) from exc

        if self.watermark.resize_filter not in RESIZE_FILTERS:
            raise ConfigError("watermark.resize_filter", f"must be one of {', '.join(RESIZE_FILTERS)}")
        for name in ("train_count", "holdout_count"):
            if getattr(self.watermark, name) < 1:
                raise ConfigError(f"watermark.{name}", "must be >= 1")
        classes = self.watermark.source_classes
        if classes is not None and (len(classes) != 4 or len(set(classes)) != 4):
            raise ConfigError("watermark.source_classes", f"need 4 distinct classes, got {classes}")

        self.embedding_config()
        if self.keys.m < 1:
            raise ConfigError("keys.m", f"must be >= 1, got {self.keys.m}")
        if self.keys.candidate_factor < 1:
            raise ConfigError("keys.candidate_factor", f"must be >= 1, got {self.keys.candidate_factor}")
        if not 0 < self.verification.threshold < 1:
            raise ConfigError("verification.threshold", f"must be in (0, 1), got {self.verification.threshold}")

        attacks = self.attacks
        if attacks.label_mode not in ("soft", "hard"):
            raise ConfigError("attacks.label_mode", f"must be soft or hard, got {attacks.label_mode}")
        if any(t < 1 for t in attacks.temperatures):
            raise ConfigError("attacks.temperatures", "every temperature must be >= 1")
        unknown = [m for m in attacks.finetune_modes if m not in FINETUNE_MODES]
        if unknown:
            raise ConfigError("attacks.finetune_modes", f"unknown modes {unknown}")
        unknown = [m for m in attacks.preprocess if m not in PREPROCESS_METHODS]
        if unknown:
            raise ConfigError("attacks.preprocess", f"unknown methods {unknown}")
        if attacks.jbda_lambda <= 0:
            raise ConfigError("attacks.jbda_lambda", "must be > 0")


def _check_dataset(name: str, source: str) -> None:
    if DATASET_CATALOG.get(source, {}).get("torchvision") or SYNTHETIC_PATTERN.match(source):
        return
    if not Path(source).is_dir():
        raise ConfigError(name, f"dataset path not found: {source}")


def _build(cls, data: Dict, prefix: str):
    """Instantiate dataclass `cls` from a nested mapping, rejecting unknown keys and wrong types."""
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")

    defaults = cls()
    values: Dict[str, Any] = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        path = f"{prefix}{name}"
        if is_dataclass(default):
            values[name] = _build(type(default), value or {}, f"{path}.")
        else:
            values[name] = _coerce(path, value, known[name].type)
    return cls(**values)


def _coerce(path: str, value: Any, annotation: Any) -> Any:
    origin, args = get_origin(annotation), get_args(annotation)
    if origin is Union:
        if value is None:
            return None
        inner = next(arg for arg in args if arg is not type(None))
        return _coerce(path, value, inner)
    if value is None:
        raise ConfigError(path, "may not be null")

    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_coerce(f"{path}[{i}]", item, args[0]) for i, item in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return {
            _coerce(path, key, args[0]): _coerce(f"{path}.{key}", item, args[1])
            for key, item in value.items()
        }
    return value


def default_config() -> RunConfig:
    return RunConfig()

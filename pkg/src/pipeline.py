"""
Watermarking pipeline: benign baseline, composites, coupled embedding, key samples, self-check.

Each stage reads its inputs from the run directory and records the sha256 of what it
wrote in manifest.json, so stages can run separately and resume.
"""

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch.nn as nn

from . import __version__
from .config import RunConfig
from .core.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .core.datasets import LabeledDataset, load_dataset, save_dataset
from .core.models import ClassifierModel, build_model
from .core.training import evaluate_accuracy, seed_everything, train_classifier
from .errors import ArtifactError, PipelineStageError, WatermarkLabError
from .verification.ownership import VerificationReport, verify_ownership
from .watermark.centroids import extract_class_centroids, select_source_classes
from .watermark.composer import WatermarkSpec, build_watermark_dataset, draw_composites, select_target_label
from .watermark.embedding import embed_watermark
from .watermark.keys import KeySampleSet, generate_key_samples, train_surrogate

STAGES = ["train-benign", "construct-watermark", "embed", "train-surrogate", "generate-keys", "self-verify"]


@dataclass
class RunLayout:
    """Where every artifact of a run directory lives."""
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def lock(self) -> Path:
        return self.root / "run.lock"

    @property
    def test_data(self) -> Path:
        return self.root / "data" / "test"

    @property
    def models(self) -> Path:
        return self.root / "models"

    def benign(self, index: int = 0) -> Path:
        return self.models / ("benign.ckpt" if index == 0 else f"benign-{index}.ckpt")

    @property
    def victim(self) -> Path:
        return self.models / "victim.ckpt"

    @property
    def surrogate(self) -> Path:
        return self.models / "surrogate.ckpt"

    @property
    def spec(self) -> Path:
        return self.root / "watermark" / "spec.json"

    @property
    def watermark_train(self) -> Path:
        return self.root / "watermark" / "train"

    @property
    def embedding_log(self) -> Path:
        return self.root / "logs" / "embedding.csv"

    @property
    def keys(self) -> Path:
        return self.root / "keys"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def attacks(self) -> Path:
        return self.root / "attacks"

    def relative(self, path: Path) -> str:
        return str(Path(path).relative_to(self.root))


class RunLock:
    """Exclusive writer lock on a run directory (O_EXCL lock file)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._held = False

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WatermarkLabError(
                f"run directory is locked by another writer ({self.path}); remove the file if that run died"
            ) from None
        with os.fdopen(fd, "w") as handle:
            handle.write(f"{os.getpid()}\n")
        self._held = True
        return self

    def __exit__(self, *exc_info) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False


def read_manifest(layout: RunLayout) -> Dict:
    if not layout.manifest.exists():
        raise ArtifactError(f"no manifest in {layout.root}", missing=["manifest.json"])
    return json.loads(layout.manifest.read_text())


def write_manifest(layout: RunLayout, manifest: Dict) -> None:
    layout.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def hash_artifacts(layout: RunLayout, paths: List[Path]) -> Dict[str, str]:
    """sha256 of each file; directories contribute every file inside them."""
    hashes = {}
    for path in paths:
        files = sorted(p for p in Path(path).rglob("*") if p.is_file()) if Path(path).is_dir() else [Path(path)]
        for file in files:
            hashes[layout.relative(file)] = file_sha256(str(file))
    return hashes


def check_artifacts(layout: RunLayout, manifest: Optional[Dict] = None) -> None:
    """Raise ArtifactError naming every recorded artifact that is missing or was modified."""
    manifest = manifest or read_manifest(layout)
    missing, modified = [], []
    for stage in manifest.get("stages", {}).values():
        for name, digest in stage.get("artifacts", {}).items():
            path = layout.root / name
            if not path.exists():
                missing.append(name)
            elif file_sha256(str(path)) != digest:
                modified.append(name)
    if missing or modified:
        parts = []
        if missing:
            parts.append(f"missing: {', '.join(missing)}")
        if modified:
            parts.append(f"hash mismatch: {', '.join(modified)}")
        raise ArtifactError(f"run directory {layout.root} is inconsistent ({'; '.join(parts)})",
                            missing=missing + modified)


class WatermarkPipeline:
    """
    Runs the watermarking stages for one RunConfig and keeps every artifact in its run directory.

    Stages can run all at once (`run`) or one at a time (`run_stage`); a stage loads whatever
    earlier stages left on disk.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.layout = RunLayout(Path(config.run.output_dir))
        self.seed = config.run.seed

        # Loaded or produced on demand
        self._train: Optional[LabeledDataset] = None
        self._test: Optional[LabeledDataset] = None
        self._benign: Optional[ClassifierModel] = None
        self._victim: Optional[ClassifierModel] = None
        self._surrogate: Optional[ClassifierModel] = None
        self._spec: Optional[WatermarkSpec] = None
        self.keys: Optional[KeySampleSet] = None
        self.reports: Dict[str, VerificationReport] = {}

        self._stage_methods: Dict[str, Callable[[], List[Path]]] = {
            "train-benign": self.train_benign,
            "construct-watermark": self.construct_watermark,
            "embed": self.embed,
            "train-surrogate": self.train_surrogate,
            "generate-keys": self.generate_keys,
            "self-verify": self.self_verify,
        }

    # ---- data and artifacts -------------------------------------------------

    @property
    def train_data(self) -> LabeledDataset:
        if self._train is None:
            data = self.config.data
            self._train = load_dataset(data.task, "train", data.train_limit, self.seed, data.data_dir)
        return self._train

    @property
    def test_data(self) -> LabeledDataset:
        if self._test is None:
            data = self.config.data
            self._test = load_dataset(data.task, "test", data.test_limit, self.seed, data.data_dir)
        return self._test

    def transfer_data(self) -> LabeledDataset:
        data = self.config.data
        return load_dataset(data.transfer, "transfer", data.transfer_limit, self.seed + 3, data.data_dir)

    @property
    def benign(self) -> ClassifierModel:
        if self._benign is None:
            self._benign = self._load_model(self.layout.benign(), "train-benign")
        return self._benign

    @property
    def victim(self) -> ClassifierModel:
        if self._victim is None:
            self._victim = self._load_model(self.layout.victim, "embed")
        return self._victim

    @property
    def surrogate(self) -> ClassifierModel:
        if self._surrogate is None:
            self._surrogate = self._load_model(self.layout.surrogate, "train-surrogate")
        return self._surrogate

    @property
    def spec(self) -> WatermarkSpec:
        if self._spec is None:
            if not self.layout.spec.exists():
                raise ArtifactError("watermark spec not found; run construct-watermark first",
                                    missing=[self.layout.relative(self.layout.spec)])
            self._spec = WatermarkSpec.from_dict(json.loads(self.layout.spec.read_text()))
        return self._spec

    def _load_model(self, path: Path, stage: str) -> ClassifierModel:
        if not path.exists():
            raise ArtifactError(f"{path.name} not found; run {stage} first", missing=[self.layout.relative(path)])
        return load_checkpoint(str(path))

    def watermark_train_set(self) -> LabeledDataset:
        return build_watermark_dataset(self.train_data, self.spec, self.config.watermark.train_count, self.seed)

    def watermark_holdout_set(self) -> LabeledDataset:
        return build_watermark_dataset(self.test_data, self.spec, self.config.watermark.holdout_count, self.seed + 2)

    # ---- stages ---------------------------------------------------------------

    def prepare(self) -> None:
        """Create the run directory and record the full config before any work starts."""
        self.layout.root.mkdir(parents=True, exist_ok=True)
        seed_everything(self.seed, deterministic=self.config.run.deterministic)

        manifest = read_manifest(self.layout) if self.layout.manifest.exists() else {}
        digest = self.config.digest()
        if manifest and manifest.get("config_hash") != digest:
            raise WatermarkLabError(
                f"{self.layout.root} was created with a different config; choose another run.output_dir"
            )
        if not manifest:
            self.config.save(str(self.layout.config))
            manifest = {
                "tool_version": __version__,
                "config": self.config.to_dict(),
                "config_hash": digest,
                "stages": {},
                "stats": {},
            }
            write_manifest(self.layout, manifest)

    def train_benign(self, count: int = 1) -> List[Path]:
        """Benign baseline (plus `count - 1` extra benign models with distinct seeds)."""
        train, test = self.train_data, self.test_data
        print(f"  Task: {train.source} ({len(train)} train / {len(test)} test, {train.class_count} classes)")
        save_dataset(test, str(self.layout.test_data))

        produced = [self.layout.test_data]
        for index in range(count):
            schedule = self.config.schedules.benign.build(self.seed + 100 * index)
            model = train_classifier(self.config.models.victim, train, schedule, desc=f"benign {index}")
            save_checkpoint(model, str(self.layout.benign(index)))
            print(f"  Benign model {index}: acc={evaluate_accuracy(model, test):.4f}")
            produced.append(self.layout.benign(index))
            if index == 0:
                self._benign = model

        mean, std = train.channel_stats()
        self._update_manifest(stats={"input_mean": mean, "input_std": std, "class_count": train.class_count})
        return produced

    def construct_watermark(self) -> List[Path]:
        train = self.train_data
        wm = self.config.watermark
        if wm.source_classes:
            sources = sorted(wm.source_classes)
            print(f"  Source classes (configured): {sources}")
        else:
            centroids = extract_class_centroids(self.benign, train)
            sources = select_source_classes(centroids, seed=self.seed)
            print(f"  Source classes (K-means over {centroids.class_count} centroids): {sources}")

        spec = WatermarkSpec(
            source_classes=tuple(sources),
            image_shape=train.image_shape,
            resize_filter=wm.resize_filter,
            seed=self.seed,
        )
        composites, _ = draw_composites(train, spec, wm.train_count, self.seed)
        target = select_target_label(self.benign, composites)
        self._spec = spec.with_target(target)
        print(f"  Target label: {target}")

        self.layout.spec.parent.mkdir(parents=True, exist_ok=True)
        self.layout.spec.write_text(json.dumps(self._spec.to_dict(), indent=2, sort_keys=True) + "\n")
        save_dataset(self.watermark_train_set(), str(self.layout.watermark_train))
        self._update_manifest(spec=self._spec.to_dict())
        return [self.layout.spec, self.layout.watermark_train]

    def embed(self) -> List[Path]:
        train = self.train_data
        if self.config.embedding.phase1_from_benign:
            init = copy.deepcopy(self.benign)
        else:
            init = build_model(self.config.models.victim, train.image_shape, train.class_count, seed=self.seed)
            init.set_input_stats(*train.channel_stats())

        result = embed_watermark(
            init,
            train,
            self.watermark_train_set(),
            self.config.embedding_config(),
            holdout=self.watermark_holdout_set(),
        )
        self._victim = result.victim
        save_checkpoint(result.victim, str(self.layout.victim))
        result.write_log(str(self.layout.embedding_log))

        last = result.log[-1]
        print(f"  Victim: acc={evaluate_accuracy(result.victim, self.test_data):.4f} "
              f"holdout wsr={last['holdout_wsr']:.4f}")
        return [self.layout.victim, self.layout.embedding_log]

    def train_surrogate(self) -> List[Path]:
        transfer = self.transfer_data()
        schedule = self.config.schedules.surrogate.build(self.seed + 4)
        self._surrogate = train_surrogate(self.victim, transfer, self.config.models.surrogate, schedule)
        save_checkpoint(self._surrogate, str(self.layout.surrogate))
        print(f"  Surrogate ({self.config.models.surrogate}) trained on {len(transfer)} {transfer.source} samples")
        return [self.layout.surrogate]

    def generate_keys(self) -> List[Path]:
        keys = generate_key_samples(
            self.victim,
            self.surrogate,
            self.benign,
            self.test_data,
            self.spec,
            m=self.config.keys.m,
            candidate_factor=self.config.keys.candidate_factor,
            seed=self.seed + 5,
        )
        self.keys = keys
        keys.save(str(self.layout.keys))
        print(f"  Key samples: {len(keys)} (requested {keys.requested})")
        for warning in keys.warnings:
            print(f"  Warning: {warning}")
        return [self.layout.keys]

    def self_verify(self) -> List[Path]:
        keys = self.keys or KeySampleSet.load(str(self.layout.keys))
        threshold = self.config.verification.threshold
        produced = []
        for name, model in (("victim", self.victim), ("benign", self.benign)):
            path = self.layout.reports / f"{name}.json"
            report = verify_ownership(model, keys, threshold, model_id=name, report_path=str(path))
            self.reports[name] = report
            produced.append(path)
            print(f"  {name}: wsr={report.wsr:.4f} -> {report.decision}")
        if not self.reports["victim"].owned:
            raise WatermarkLabError(
                f"victim is not verified as owned (wsr={self.reports['victim'].wsr})"
            )
        return produced

    # ---- orchestration --------------------------------------------------------

    def run_stage(self, stage: str, step: Optional[int] = None, **kwargs) -> List[Path]:
        """Run one stage and record its artifact hashes; failures become PipelineStageError."""
        if stage not in self._stage_methods:
            raise ValueError(f"unknown stage '{stage}' (available: {', '.join(STAGES)})")
        step = step or STAGES.index(stage) + 1
        print(f"\n{'='*60}")
        print(f"Step {step}: {stage}...")
        print(f"{'='*60}")
        try:
            produced = self._stage_methods[stage](**kwargs)
        except Exception as exc:
            raise PipelineStageError(stage, exc) from exc
        stages = read_manifest(self.layout)["stages"]
        stages[stage] = {"status": "done", "artifacts": hash_artifacts(self.layout, produced)}
        self._update_manifest(stages=stages)
        return produced

    def run(self) -> Path:
        """
        Execute every stage in order.

        Returns:
            The run directory
        """
        self.layout.root.mkdir(parents=True, exist_ok=True)
        with RunLock(self.layout.lock):
            self.prepare()
            for stage in STAGES:
                self.run_stage(stage)

        print(f"\n{'='*60}")
        print(f"Complete! Run directory: {self.layout.root}")
        print(f"{'='*60}")
        for path in (self.layout.benign(), self.layout.victim, self.layout.surrogate,
                     self.layout.keys, self.layout.reports):
            print(f"  - {path}")
        return self.layout.root

    def run_stages(self, stages: List[str], **kwargs) -> None:
        """Run selected stages under the run lock (used by the per-stage subcommands)."""
        self.layout.root.mkdir(parents=True, exist_ok=True)
        with RunLock(self.layout.lock):
            self.prepare()
            for stage in stages:
                self.run_stage(stage, **(kwargs if stage == "train-benign" else {}))

    def _update_manifest(self, **fields) -> None:
        manifest = read_manifest(self.layout)
        for key, value in fields.items():
            if isinstance(value, dict) and isinstance(manifest.get(key), dict):
                manifest[key].update(value)
            else:
                manifest[key] = value
        write_manifest(self.layout, manifest)


def load_run_config(run_dir: str) -> RunConfig:
    """The config a run directory was created with."""
    layout = RunLayout(Path(run_dir))
    if not layout.config.exists():
        raise ArtifactError(f"no config.yaml in {run_dir}", missing=["config.yaml"])
    config = RunConfig.load(str(layout.config))
    config.run.output_dir = str(layout.root)
    return config


def load_model_reference(layout: RunLayout, reference: str) -> nn.Module:
    """'victim', 'benign', 'benign-N', an attack id, or a checkpoint path."""
    if reference == "victim":
        path = layout.victim
    elif reference == "benign":
        path = layout.benign()
    elif reference.startswith("benign-") and reference[7:].isdigit():
        path = layout.benign(int(reference[7:]))
    elif (layout.attacks / f"{reference}.ckpt").exists():
        path = layout.attacks / f"{reference}.ckpt"
    else:
        path = Path(reference)
    return load_checkpoint(str(path))

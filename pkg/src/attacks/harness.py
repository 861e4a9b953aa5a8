"""
Attack harness - runs attacks against a finished run and records one AttackResult each.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch.nn as nn
from tqdm import tqdm

from ..core.checkpoint import load_checkpoint, save_checkpoint
from ..core.datasets import LabeledDataset
from ..core.oracle import BlackBoxOracle
from ..core.training import TrainingSchedule, evaluate_accuracy, progress_enabled
from ..verification.ownership import DEFAULT_THRESHOLD, is_owned, success_rate_on_images
from .preprocess import preprocess_inputs
from .removal import finetune, prune_weights, quantize_weights
from .stealing import jbda_steal, steal_model


# Attack catalog (mirrors the subcommands of `main.py attack`)
ATTACK_CATALOG: Dict[str, Dict] = {
    "steal": {
        "kind": "stealing",
        "description": "Knockoff-style extraction with soft (temperature) or hard labels",
    },
    "jbda": {
        "kind": "stealing",
        "description": "Jacobian-based augmentation substitute training",
    },
    "finetune": {
        "kind": "removal",
        "description": "FTLL / FTAL / RTLL / RTAL fine-tuning",
    },
    "prune": {
        "kind": "removal",
        "description": "Global magnitude pruning over a rate sweep",
    },
    "quantize": {
        "kind": "removal",
        "description": "Per-tensor min-max weight quantization over a bit sweep",
    },
    "preprocess": {
        "kind": "evasion",
        "description": "Blur / noise / input quantization / crop in front of the model",
    },
}


@dataclass
class AttackResult:
    """One attacked model (or one preprocessing setting) and its verification outcome."""
    attack_id: str
    attack: str
    params: Dict
    acc: float
    wsr: float
    decision: str
    seed: int
    model_path: str
    source: str = "victim"
    wall_clock: float = 0.0
    queries: int = 0
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def save(self, directory: Path) -> str:
        path = Path(directory) / f"{self.attack_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return str(path)

    @classmethod
    def load(cls, path: str) -> "AttackResult":
        return cls(**json.loads(Path(path).read_text()))


def load_attack_results(directory: Path) -> List[AttackResult]:
    directory = Path(directory)
    if not directory.exists():
        return []
    return [AttackResult.load(str(path)) for path in sorted(directory.glob("*.json"))]


class AttackHarness:
    """
    Runs attacks against the victim (or an earlier attack's output) of one run directory.

    Results land in `attacks_dir` as <attack_id>.json plus <attack_id>.ckpt.
    """

    def __init__(self,
                 victim_path: str,
                 attacks_dir: str,
                 key_set,
                 eval_data: LabeledDataset,
                 threshold: float = DEFAULT_THRESHOLD):
        self.victim_path = Path(victim_path)
        self.attacks_dir = Path(attacks_dir)
        self.key_set = key_set
        self.eval_data = eval_data
        self.threshold = threshold

    def resolve_source(self, source: str = "victim") -> Path:
        """'victim', the id of an earlier attack, or a checkpoint path."""
        if source == "victim":
            return self.victim_path
        earlier = self.attacks_dir / f"{source}.ckpt"
        if earlier.exists():
            return earlier
        if Path(source).exists():
            return Path(source)
        raise FileNotFoundError(f"attack source not found: {source}")

    def load_source(self, source: str = "victim") -> nn.Module:
        return load_checkpoint(str(self.resolve_source(source)))

    def steal(self,
              query_set: LabeledDataset,
              label_mode: str = "soft",
              temperatures: Sequence[float] = (1.0,),
              student_arch: str = "naive",
              schedule: Optional[TrainingSchedule] = None,
              source: str = "victim") -> List[AttackResult]:
        """One stolen model per temperature (hard mode ignores temperature and runs once)."""
        schedule = schedule or TrainingSchedule()
        target = self.load_source(source)
        sweep = list(temperatures) if label_mode == "soft" else [1.0]
        results = []
        for temperature in tqdm(sweep, desc="steal", disable=not progress_enabled(), leave=False):
            started = time.perf_counter()
            oracle = BlackBoxOracle(target)
            student = steal_model(oracle, query_set, label_mode, temperature, student_arch, schedule)
            params = {
                "label_mode": label_mode,
                "temperature": temperature,
                "student_arch": student_arch,
                "query_dataset": query_set.source,
                "query_count": len(query_set),
                "schedule": schedule.to_dict(),
            }
            suffix = f"-T{temperature:g}" if label_mode == "soft" else ""
            attack_id = f"steal-{label_mode}{suffix}-{student_arch}" + self._source_suffix(source)
            results.append(self._record(attack_id, "steal", params, student, schedule.seed,
                                        started, source, queries=oracle.query_count))
        return results

    def jbda(self,
             seed_set: LabeledDataset,
             label_mode: str = "hard",
             temperature: float = 1.0,
             lambda_step: float = 0.1,
             rounds: int = 3,
             cap: int = 20000,
             student_arch: str = "naive",
             schedule: Optional[TrainingSchedule] = None,
             source: str = "victim") -> AttackResult:
        schedule = schedule or TrainingSchedule()
        started = time.perf_counter()
        oracle = BlackBoxOracle(self.load_source(source))
        student, queries = jbda_steal(
            oracle, seed_set, student_arch, schedule, label_mode, temperature, lambda_step, rounds, cap,
        )
        params = {
            "label_mode": label_mode,
            "temperature": temperature,
            "lambda_step": lambda_step,
            "rounds": rounds,
            "cap": cap,
            "seed_count": len(seed_set),
            "final_query_set": len(queries),
            "student_arch": student_arch,
            "schedule": schedule.to_dict(),
        }
        attack_id = f"jbda-{label_mode}-{student_arch}" + self._source_suffix(source)
        return self._record(attack_id, "jbda", params, student, schedule.seed,
                            started, source, queries=oracle.query_count)

    def finetune(self,
                 data: LabeledDataset,
                 modes: Sequence[str] = ("FTLL", "FTAL", "RTLL", "RTAL"),
                 schedule: Optional[TrainingSchedule] = None,
                 source: str = "victim") -> List[AttackResult]:
        schedule = schedule or TrainingSchedule()
        model = self.load_source(source)
        results = []
        for mode in tqdm(modes, desc="finetune", disable=not progress_enabled(), leave=False):
            started = time.perf_counter()
            attacked = finetune(model, data, mode, schedule)
            params = {"mode": mode, "data_count": len(data), "schedule": schedule.to_dict()}
            attack_id = f"finetune-{mode}" + self._source_suffix(source)
            results.append(self._record(attack_id, "finetune", params, attacked, schedule.seed, started, source))
        return results

    def prune(self, rates: Sequence[float], source: str = "victim") -> List[AttackResult]:
        model = self.load_source(source)
        results = []
        for rate in tqdm(rates, desc="prune", disable=not progress_enabled(), leave=False):
            started = time.perf_counter()
            attacked = prune_weights(model, rate)
            attack_id = f"prune-{rate:g}" + self._source_suffix(source)
            results.append(self._record(attack_id, "prune", {"rate": rate}, attacked, 0, started, source))
        return results

    def quantize(self, bits: Sequence[int], source: str = "victim") -> List[AttackResult]:
        model = self.load_source(source)
        results = []
        for width in tqdm(bits, desc="quantize", disable=not progress_enabled(), leave=False):
            started = time.perf_counter()
            attacked = quantize_weights(model, int(width))
            attack_id = f"quantize-{width}b" + self._source_suffix(source)
            results.append(self._record(attack_id, "quantize", {"bits": int(width)}, attacked, 0, started, source))
        return results

    def preprocess(self,
                   method: str,
                   strengths: Sequence[float],
                   seed: int = 0,
                   source: str = "victim") -> List[AttackResult]:
        """
        Evaluate the source model behind an input transformation.

        No new model is written; model_path points at the source checkpoint.
        """
        model_path = self.resolve_source(source)
        model = load_checkpoint(str(model_path))
        results = []
        for strength in tqdm(strengths, desc=method, disable=not progress_enabled(), leave=False):
            started = time.perf_counter()
            keys = preprocess_inputs(self.key_set.images, method, strength, seed=seed)
            clean = preprocess_inputs(self.eval_data.images, method, strength, seed=seed + 1)
            acc = evaluate_accuracy(model, LabeledDataset(
                images=clean,
                labels=self.eval_data.labels,
                class_count=self.eval_data.class_count,
                split=self.eval_data.split,
            ))
            wsr = success_rate_on_images(model, keys, self.key_set.target_label)
            result = AttackResult(
                attack_id=f"preprocess-{method}-{strength:g}" + self._source_suffix(source),
                attack="preprocess",
                params={"method": method, "strength": strength},
                acc=acc,
                wsr=wsr,
                decision=self._decision(wsr),
                seed=seed,
                model_path=str(model_path),
                source=source,
                wall_clock=time.perf_counter() - started,
            )
            result.save(self.attacks_dir)
            results.append(result)
        return results

    def _record(self,
                attack_id: str,
                attack: str,
                params: Dict,
                model: nn.Module,
                seed: int,
                started: float,
                source: str,
                queries: int = 0) -> AttackResult:
        model_path = save_checkpoint(model, str(self.attacks_dir / f"{attack_id}.ckpt"))
        wsr = success_rate_on_images(model, self.key_set.images, self.key_set.target_label)
        result = AttackResult(
            attack_id=attack_id,
            attack=attack,
            params=params,
            acc=evaluate_accuracy(model, self.eval_data),
            wsr=wsr,
            decision=self._decision(wsr),
            seed=seed,
            model_path=model_path,
            source=source,
            wall_clock=time.perf_counter() - started,
            queries=queries,
        )
        result.save(self.attacks_dir)
        print(f"  {attack_id}: acc={result.acc:.4f} wsr={result.wsr:.4f} -> {result.decision}")
        return result

    def _decision(self, wsr: float) -> str:
        hits = round(wsr * len(self.key_set))
        return "owned" if is_owned(hits, len(self.key_set), self.threshold) else "not-owned"

    def _source_suffix(self, source: str) -> str:
        if source == "victim":
            return ""
        if (self.attacks_dir / f"{source}.ckpt").exists():
            return f"-from-{source}"
        return "-from-" + Path(source).stem

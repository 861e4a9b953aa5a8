"""
Consolidated run report: benign and victim rows plus one row per attack result.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .attacks.harness import AttackResult, load_attack_results
from .core.checkpoint import load_checkpoint
from .core.datasets import load_dataset
from .core.training import evaluate_accuracy
from .errors import ArtifactError
from .pipeline import RunLayout, check_artifacts, load_run_config, read_manifest
from .verification.ownership import is_owned, success_rate_on_images
from .watermark.keys import KeySampleSet

REPORT_COLUMNS = ["role", "model", "acc", "delta_acc", "wsr", "decision"]


@dataclass
class ReportRow:
    role: str  # benign | victim | attack
    model: str
    acc: float
    wsr: float
    decision: str
    delta_acc: Optional[float] = None
    params: Dict = field(default_factory=dict)


@dataclass
class RunReport:
    run_dir: str
    threshold: float
    key_count: int
    target_label: int
    rows: List[ReportRow]
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def emit_report(run_dir: str, attack_ids: Optional[Sequence[str]] = None) -> RunReport:
    """
    Recompute benign and victim metrics from their checkpoints and gather attack results.

    Args:
        run_dir: A run directory holding a manifest
        attack_ids: Restrict the attack rows to these ids (default: every result on disk)

    Returns:
        RunReport, also written as reports/report.json and reports/report.csv
    """
    layout = RunLayout(Path(run_dir))
    manifest = read_manifest(layout)
    check_artifacts(layout, manifest)
    for required in (layout.benign(), layout.victim, layout.keys, layout.test_data):
        if not required.exists():
            raise ArtifactError(f"{layout.relative(required)} not found", missing=[layout.relative(required)])

    config = load_run_config(run_dir)
    threshold = config.verification.threshold
    keys = KeySampleSet.load(str(layout.keys))
    if len(keys) == 0:
        raise ArtifactError("key set is empty; nothing to verify against", missing=["keys"])
    test = load_dataset(str(layout.test_data), split="test")

    def decision(wsr: float) -> str:
        return "owned" if is_owned(round(wsr * len(keys)), len(keys), threshold) else "not-owned"

    benign = load_checkpoint(str(layout.benign()))
    victim = load_checkpoint(str(layout.victim))
    benign_acc = evaluate_accuracy(benign, test)
    victim_acc = evaluate_accuracy(victim, test)
    benign_wsr = success_rate_on_images(benign, keys.images, keys.target_label)
    victim_wsr = success_rate_on_images(victim, keys.images, keys.target_label)

    rows = [
        ReportRow("benign", "benign", benign_acc, benign_wsr, decision(benign_wsr)),
        ReportRow("victim", "victim", victim_acc, victim_wsr, decision(victim_wsr),
                  delta_acc=victim_acc - benign_acc),
    ]

    results = load_attack_results(layout.attacks)
    if attack_ids is not None:
        wanted = set(attack_ids)
        unknown = sorted(wanted - {r.attack_id for r in results})
        if unknown:
            raise ArtifactError(f"attack results not found: {', '.join(unknown)}", missing=unknown)
        results = [r for r in results if r.attack_id in wanted]
    warnings = list(keys.warnings)
    for result in results:
        _check_attack_result(result, keys, test)
        rows.append(ReportRow("attack", result.attack_id, result.acc, result.wsr, result.decision,
                              params=result.params))

    report = RunReport(
        run_dir=str(layout.root),
        threshold=threshold,
        key_count=len(keys),
        target_label=keys.target_label,
        rows=rows,
        warnings=warnings,
    )
    write_report(report, layout.reports)
    return report


def _check_attack_result(result: AttackResult, keys: KeySampleSet, test) -> None:
    """
    Recorded Acc and WSR must match the persisted attacked model exactly.

    Raises:
        ArtifactError: naming the attack id when the model is missing or its numbers differ
    """
    if result.attack == "preprocess":
        return
    path = Path(result.model_path)
    if not path.exists():
        raise ArtifactError(f"model of attack {result.attack_id} not found", missing=[str(path)])
    model = load_checkpoint(str(path))
    acc = evaluate_accuracy(model, test)
    wsr = success_rate_on_images(model, keys.images, keys.target_label)
    if acc != result.acc or wsr != result.wsr:
        raise ArtifactError(
            f"attack result {result.attack_id} does not match its model: recorded acc/wsr "
            f"{result.acc}/{result.wsr}, recomputed {acc}/{wsr}"
        )


def write_report(report: RunReport, directory: Path) -> Dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")

    csv_path = directory / "report.csv"
    with open(csv_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in report.rows:
            writer.writerow({
                "role": row.role,
                "model": row.model,
                "acc": f"{row.acc:.6f}",
                "delta_acc": "" if row.delta_acc is None else f"{row.delta_acc:.6f}",
                "wsr": f"{row.wsr:.6f}",
                "decision": row.decision,
            })
    return {"json": str(json_path), "csv": str(csv_path)}


def format_report(report: RunReport) -> str:
    """Plain-text table for the console."""
    lines = [f"{'model':<32} {'acc':>8} {'Δacc':>8} {'wsr':>8}  decision"]
    for row in report.rows:
        delta = "" if row.delta_acc is None else f"{row.delta_acc:+.4f}"
        lines.append(f"{row.model:<32} {row.acc:>8.4f} {delta:>8} {row.wsr:>8.4f}  {row.decision}")
    return "\n".join(lines)

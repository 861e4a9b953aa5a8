#!/usr/bin/env python3
"""
wmlab - coupled watermarking against model stealing.

Usage:
    # Full pipeline: benign baseline, watermark, embedding, key samples, self-check
    python main.py run --config configs/desk.yaml

    # Attack a finished run and verify the result
    python main.py attack steal --run runs/desk --label-mode hard
    python main.py attack prune --run runs/desk --rates 0.5 0.9

    # Verify any checkpoint against the run's key samples
    python main.py verify --run runs/desk --model suspect.ckpt

    # Exact false-positive and crack probabilities
    python main.py guarantees --n 100 2000 --classes 10 100 --alpha 1e-9
"""

import argparse
import logging
import sys
from pathlib import Path

from src.attacks.harness import ATTACK_CATALOG, AttackHarness
from src.attacks.preprocess import PREPROCESS_METHODS
from src.attacks.removal import FINETUNE_MODES
from src.config import RunConfig
from src.core.datasets import DATASET_CATALOG, load_dataset
from src.core.models import ARCHITECTURES
from src.core.training import seed_everything, set_progress
from src.errors import ConfigError, WatermarkLabError
from src.pipeline import RunLayout, WatermarkPipeline, load_model_reference, load_run_config
from src.report import emit_report, format_report
from src.verification.guarantees import crack_probabilities, guarantees_table, minimum_key_size
from src.verification.ownership import verify_ownership
from src.watermark.keys import KeySampleSet


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "output", None):
        config.run.output_dir = args.output
    return config


def cmd_config(args):
    """Print or validate a run configuration."""
    if args.validate:
        RunConfig.load(args.validate)
        print(f"{args.validate}: OK")
        return 0
    if args.print_defaults:
        print(RunConfig().to_yaml(), end="")
        return 0
    print("config: pass --print-defaults or --validate FILE", file=sys.stderr)
    return 2


def cmd_datasets(args):
    """Show the dataset catalog."""
    print("\nAvailable Datasets:")
    print("=" * 40)
    for name, entry in DATASET_CATALOG.items():
        shape = "x".join(str(d) for d in entry["shape"])
        print(f"  {name:14} - {entry['description']} ({shape})")
    print("  <directory>    - PNG folder with manifest.csv (filename,label,split)")
    print()
    return 0


def cmd_archs(args):
    """Show the architecture catalog."""
    print("\nAvailable Architectures:")
    print("=" * 40)
    for name, spec in ARCHITECTURES.items():
        print(f"  {name:6} - {spec.description}")
    print()
    return 0


def cmd_run(args):
    """Run every pipeline stage."""
    config = _load_config(args)
    print(f"\nWatermark pipeline")
    print(f"Task: {config.data.task}  Victim: {config.models.victim}  Output: {config.run.output_dir}")
    WatermarkPipeline(config).run()
    return 0


def _stage_command(stages, with_count=False):
    def command(args):
        config = _load_config(args)
        extra = {"count": args.count} if with_count and args.count else {}
        WatermarkPipeline(config).run_stages(stages, **extra)
        return 0
    return command


def cmd_verify(args):
    """Verify checkpoints against a run's key samples."""
    layout = RunLayout(Path(args.run))
    config = load_run_config(args.run)
    keys = KeySampleSet.load(str(layout.keys))
    threshold = args.threshold or config.verification.threshold

    references = list(args.model or ["victim"])
    if args.all_benign:
        references += sorted(p.stem for p in layout.models.glob("benign*.ckpt"))

    for reference in references:
        model = load_model_reference(layout, reference)
        name = Path(reference).stem
        report = verify_ownership(
            model, keys, threshold, model_id=reference,
            report_path=str(layout.reports / f"verify-{name}.json"),
        )
        print(f"  {reference}: {report.hits}/{report.n} wsr={report.wsr:.4f} (T={threshold}) -> {report.decision}")
    return 0


def _harness(args):
    layout = RunLayout(Path(args.run))
    config = load_run_config(args.run)
    seed_everything(config.run.seed, deterministic=config.run.deterministic)
    harness = AttackHarness(
        victim_path=str(layout.victim),
        attacks_dir=str(layout.attacks),
        key_set=KeySampleSet.load(str(layout.keys)),
        eval_data=load_dataset(str(layout.test_data), split="test"),
        threshold=config.verification.threshold,
    )
    return config, harness


def cmd_attack(args):
    """Run one attack family against a finished run."""
    config, harness = _harness(args)
    attacks, data, seed = config.attacks, config.data, config.run.seed
    schedule = config.schedules.attack.build(seed + 7)
    print(f"\nAttack: {args.attack} ({ATTACK_CATALOG[args.attack]['description']})")
    print(f"Source: {args.source}")

    if args.attack == "steal":
        query_source = args.query_dataset or attacks.query_dataset
        queries = load_dataset(query_source, "transfer", args.query_limit or attacks.query_limit,
                               seed + 11, data.data_dir)
        harness.steal(
            queries,
            label_mode=args.label_mode or attacks.label_mode,
            temperatures=args.temperature or attacks.temperatures,
            student_arch=args.student_arch or attacks.student_arch,
            schedule=schedule,
            source=args.source,
        )
    elif args.attack == "jbda":
        seeds = load_dataset(data.task, "transfer", attacks.jbda_seed_count, seed + 13, data.data_dir)
        harness.jbda(
            seeds,
            label_mode=args.label_mode or "hard",
            lambda_step=args.lambda_step or attacks.jbda_lambda,
            rounds=attacks.jbda_rounds if args.rounds is None else args.rounds,
            cap=attacks.jbda_cap,
            student_arch=args.student_arch or attacks.student_arch,
            schedule=schedule,
            source=args.source,
        )
    elif args.attack == "finetune":
        tune = load_dataset(data.task, "transfer", attacks.finetune_limit, seed + 17, data.data_dir)
        harness.finetune(tune, modes=args.mode or attacks.finetune_modes, schedule=schedule, source=args.source)
    elif args.attack == "prune":
        harness.prune(args.rates or attacks.prune_rates, source=args.source)
    elif args.attack == "quantize":
        harness.quantize(args.bits or attacks.quantize_bits, source=args.source)
    else:
        methods = [args.method] if args.method else list(attacks.preprocess)
        for method in methods:
            strengths = args.strengths or attacks.preprocess.get(method, [])
            for result in harness.preprocess(method, strengths, seed=seed, source=args.source):
                print(f"  {result.attack_id}: acc={result.acc:.4f} wsr={result.wsr:.4f} -> {result.decision}")
    return 0


def cmd_guarantees(args):
    """Print false-positive, false-trigger and crack probabilities."""
    rows = guarantees_table(args.n, args.classes, args.threshold)
    # One binomial law with q = 1/K bounds both a benign model and untriggered inputs
    print(f"\n{'n':>6} {'K':>5} {'T':>5}  {'P(false positive / trigger)':>28}  {'r1':>10}  {'r':>10}")
    print("=" * 74)
    for row in rows:
        print(f"{row['n']:>6} {row['K']:>5} {row['T']:>5}  {row['false_positive']:>28}  "
              f"{row['r1']:>10}  {row['r']:>10}")

    for class_count in args.classes:
        if class_count >= 4:
            crack = crack_probabilities(class_count)
            print(f"\nK={class_count}: r1 = {crack.r1} ≈ {float(crack.r1):.3e}, "
                  f"r2 = {crack.r2}, r = {crack.r} ≈ {float(crack.r):.3e}")
        if args.alpha:
            for threshold in args.threshold:
                try:
                    n = minimum_key_size(class_count, threshold, args.alpha)
                    print(f"  minimum key size for K={class_count}, T={threshold}, alpha={args.alpha}: {n}")
                except ValueError as exc:
                    print(f"  K={class_count}, T={threshold}: {exc}")
    return 0


def cmd_report(args):
    """Write reports/report.json and reports/report.csv for a run."""
    report = emit_report(args.run, attack_ids=args.attack)
    print(f"\nRun: {report.run_dir}  (|S_K|={report.key_count}, target {report.target_label}, T={report.threshold})")
    print(format_report(report))
    for warning in report.warnings:
        print(f"Warning: {warning}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Embed, attack and verify coupled model watermarks",
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Hide progress bars")

    subparsers = parser.add_subparsers(dest="command", help="Commands")

    # Config command
    config_parser = subparsers.add_parser("config", help="Print default config or validate a file")
    config_parser.add_argument("--print-defaults", action="store_true", help="Print every default as YAML")
    config_parser.add_argument("--validate", metavar="FILE", help="Validate a config file")
    config_parser.set_defaults(func=cmd_config)

    # Catalog commands
    datasets_parser = subparsers.add_parser("datasets", help="Show available datasets")
    datasets_parser.set_defaults(func=cmd_datasets)
    archs_parser = subparsers.add_parser("archs", help="Show available architectures")
    archs_parser.set_defaults(func=cmd_archs)

    # Pipeline commands
    run_parser = subparsers.add_parser("run", help="Run the whole pipeline")
    stage_parsers = {"run": run_parser}
    stage_specs = {
        "train-benign": (["train-benign"], "Train the benign baseline"),
        "construct-watermark": (["construct-watermark"], "Pick source classes and target label"),
        "embed": (["embed"], "Train the watermarked victim"),
        "generate-keys": (["train-surrogate", "generate-keys"], "Train the surrogate and filter key samples"),
    }
    for name, (stages, help_text) in stage_specs.items():
        stage_parser = subparsers.add_parser(name, help=help_text)
        stage_parser.set_defaults(func=_stage_command(stages, with_count=(name == "train-benign")))
        stage_parsers[name] = stage_parser
    stage_parsers["train-benign"].add_argument(
        "-n", "--count", type=int, help="Train N benign models with distinct seeds"
    )
    for stage_parser in stage_parsers.values():
        stage_parser.add_argument("-c", "--config", help="YAML run config (default: built-in defaults)")
        stage_parser.add_argument("-o", "--output", help="Override run.output_dir")
    run_parser.set_defaults(func=cmd_run)

    # Verify command
    verify_parser = subparsers.add_parser("verify", help="Verify checkpoints against the key samples")
    verify_parser.add_argument("--run", required=True, help="Run directory")
    verify_parser.add_argument(
        "-m", "--model", action="append",
        help="victim, benign, benign-N, an attack id or a checkpoint path (repeatable)"
    )
    verify_parser.add_argument("--all-benign", action="store_true", help="Also verify every benign model")
    verify_parser.add_argument("-t", "--threshold", type=float, help="Override the ownership threshold")
    verify_parser.set_defaults(func=cmd_verify)

    # Attack command
    attack_parser = subparsers.add_parser("attack", help="Attack a finished run")
    attack_parser.add_argument("attack", choices=list(ATTACK_CATALOG), help="Attack family")
    attack_parser.add_argument("--run", required=True, help="Run directory")
    attack_parser.add_argument(
        "--source", default="victim",
        help="Model to attack: victim (default), an earlier attack id or a checkpoint"
    )
    attack_parser.add_argument("--label-mode", choices=["soft", "hard"], help="Oracle answers (steal, jbda)")
    attack_parser.add_argument("--temperature", type=float, nargs="+", help="Distillation temperatures (steal)")
    attack_parser.add_argument("--student-arch", choices=list(ARCHITECTURES), help="Student architecture")
    attack_parser.add_argument("--query-dataset", help="Query dataset id or folder (steal)")
    attack_parser.add_argument("--query-limit", type=int, help="Number of queries (steal)")
    attack_parser.add_argument("--lambda-step", type=float, help="JBDA step size")
    attack_parser.add_argument("--rounds", type=int, help="JBDA augmentation rounds")
    attack_parser.add_argument("--mode", choices=list(FINETUNE_MODES), action="append", help="Fine-tuning mode")
    attack_parser.add_argument("--rates", type=float, nargs="+", help="Pruning rates")
    attack_parser.add_argument("--bits", type=int, nargs="+", help="Quantization bit widths")
    attack_parser.add_argument("--method", choices=list(PREPROCESS_METHODS), help="Preprocessing method")
    attack_parser.add_argument("--strengths", type=float, nargs="+", help="Preprocessing strengths")
    attack_parser.set_defaults(func=cmd_attack)

    # Guarantees command
    guarantees_parser = subparsers.add_parser("guarantees", help="Exact false-positive and crack probabilities")
    guarantees_parser.add_argument("--n", type=int, nargs="+", default=[100, 500, 2000], help="Key sample counts")
    guarantees_parser.add_argument("-k", "--classes", type=int, nargs="+", default=[10, 100], help="Class counts")
    guarantees_parser.add_argument("-t", "--threshold", type=float, nargs="+", default=[0.2], help="Thresholds")
    guarantees_parser.add_argument("--alpha", type=float, help="Also print the minimum key size for this tail")
    guarantees_parser.set_defaults(func=cmd_guarantees)

    # Report command
    report_parser = subparsers.add_parser("report", help="Consolidated benign/victim/attack report")
    report_parser.add_argument("--run", required=True, help="Run directory")
    report_parser.add_argument("--attack", action="append", help="Only include these attack ids")
    report_parser.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    set_progress(not args.quiet)

    if not args.command:
        parser.print_help()
        return 0

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"Config error: {exc}", file=sys.stderr)
        return 2
    except (WatermarkLabError, RuntimeError, ValueError, FileNotFoundError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""
Phantom SSL Testbed - Command-line entry point

Subcommands:
- gen-data:   generate a seeded phantom dataset
- train:      stage 1 (probe + prototypes), stage 2 (joint EMA training),
              stage 3 (classification fine-tuning), or any subset
- eval:       predict a split with a trained checkpoint and score it
- refine:     batch boundary refinement of a predictions directory
- filter:     batch prototype filtering of a CHD pseudo-label file
- score:      compare a predictions directory with ground truth
- ablate:     paired-seed ablation of the five pipeline variants
- check-grad: finite-difference verification of the autodiff engine

Exit codes: 0 success, 1 usage, 2 data or configuration error,
3 numerical failure.
"""

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv

# Load .env file if it exists (SSL_RUN_DIR and friends)
load_dotenv()

from config.settings import resolve_config, write_resolved
from src.ablation import run_ablation
from src.boundary_refine import build_refiner, refine_pseudo_label, audit_rows, write_refine_audit
from src.errors import ConfigurationError, DataError, NumericalError, PipelineError
from src.gradcheck import REL_TOL, run_gradcheck
from src.metrics import evaluate
from src.models.sample import DatasetManifest, ManifestEntry, View
from src.models.train_config import TrainConfig
from src.phantom_data import PhantomSpec, SplitCounts, generate_dataset, load_sample, read_dataset, write_dataset
from src.semantic_anchor import build_embedder, filter_pseudo
from src.trainer import load_phase_model, load_stage1, mask_table, predict, run_pipeline, settings_for_phase

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Raised for malformed command lines."""
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


def load_settings(args) -> TrainConfig:
    """Resolve the config and apply command-line runtime switches."""
    config = resolve_config(args.config, args.set or ())
    changes = {}
    if getattr(args, "jobs", None):
        changes["jobs"] = args.jobs
    if args.quiet:
        changes["progress"] = False
    return config.with_overrides(**changes) if changes else config


# ============================================================
# Subcommands
# ============================================================

def cmd_gen_data(args) -> int:
    config = load_settings(args)
    root = Path(args.out or config.data_root)
    counts = SplitCounts(config.n_labeled, config.n_unlabeled, config.n_val, config.n_test)
    spec = PhantomSpec(size=config.image_size, noise_var=config.noise_var, shadow_prob=config.shadow_prob)
    manifest = generate_dataset(root, counts, config.seed, spec, config.jobs)
    logger.info(f"Generated {len(manifest.entries)} samples under {root}")
    return EXIT_OK


def parse_stages(text: str) -> list[int]:
    try:
        stages = sorted({int(c) for c in text.replace(",", "").replace(" ", "")})
    except ValueError:
        raise UsageError(f"--stages must list digits 1-3, got '{text}'")
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise UsageError(f"--stages must list digits 1-3, got '{text}'")
    return stages


def refuse_test_only(config: TrainConfig) -> None:
    """
    Raises:
        ConfigurationError: if the refiner or embedder is a test-only oracle
    """
    for name in ("refiner", "embedder"):
        if getattr(config, name).startswith("oracle"):
            raise ConfigurationError(f"{name} '{getattr(config, name)}' is test-only and cannot be trained with")


def cmd_train(args) -> int:
    stages = parse_stages(args.stages)
    config = load_settings(args)
    refuse_test_only(config)

    logger.info("=" * 50)
    logger.info(f"Training stages {stages} - run directory {config.run_dir}")
    logger.info("=" * 50)
    write_resolved(config, config.run_dir)
    report = run_pipeline(config, stages)

    logger.info("=" * 50)
    logger.info("TRAINING SUMMARY")
    logger.info("=" * 50)
    for phase in ("phase1", "phase2"):
        if phase in report:
            test = report[phase]["test"]
            logger.info(f"{phase} test: dice {test['dice_mean']:.2f}, nsd {test['nsd_mean']:.2f}, "
                        f"F1 {test['macro_f1']:.2f}, overall {test['overall']:.2f}")
    if "dice_drift" in report:
        logger.info(f"Dice drift {report['dice_drift']:.2f}, F1 change {report['f1_change']:.2f}")
    if "mask_audit" in report:
        logger.info(f"Illegal pseudo-label pixels: {report['mask_audit']['pseudo_illegal']}")
    logger.info("=" * 50)
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Paired-seed ablation of the five pipeline variants."""
    config = load_settings(args)
    refuse_test_only(config)
    if args.seeds < 1:
        raise UsageError(f"--seeds must be >= 1, got {args.seeds}")
    first = config.seed if args.seed is None else args.seed
    seeds = list(range(first, first + args.seeds))
    result = run_ablation(config, seeds, Path(args.out) if args.out else None)
    for entry in result.summary:
        print(f"{entry['variant']}: macro_f1={entry['macro_f1']:.4f} dice_mean={entry['dice_mean']:.4f} "
              f"nsd_mean={entry['nsd_mean']:.4f} overall={entry['overall']:.4f}")
    print(f"wrote {result.out_dir / 'ablation.csv'} and {result.out_dir / 'ablation_summary.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Predict a split, write predictions in dataset layout, and score them."""
    config = settings_for_phase(load_settings(args), args.phase)
    net = load_phase_model(config, args.phase)
    manifest = read_dataset(config.data_root)
    ids = manifest.ids(args.split)
    if not ids:
        raise DataError(f"split '{args.split}' is empty or missing in {config.data_root}")
    out = Path(args.out or Path(config.run_dir) / f"predictions_{args.split}")
    table = mask_table(config)

    entries, predictions, gts = [], [], []
    for sample_id in ids:
        sample = load_sample(manifest, sample_id)
        mask, chd, view = predict(net, sample, config.mask_guidance, table)
        pred = replace(sample, mask=mask, view=View.from_index(view), chd=chd, labeled=True)
        entries.append(ManifestEntry(id=sample.id, split=args.split, view=pred.view, chd=chd, labeled=True))
        predictions.append(pred)
        gts.append(sample)
    write_dataset(DatasetManifest(root=out, seed=manifest.seed, entries=entries), predictions)

    report = evaluate(
        [p.mask for p in predictions], [g.mask for g in gts],
        [p.chd for p in predictions], [g.chd for g in gts],
        tolerance=config.nsd_tolerance, averaging=config.metric_averaging,
        pred_views=[p.view.index for p in predictions], gt_views=[g.view.index for g in gts],
    )
    report.write_json(out / "eval_report.json")
    report.write_csv(out / "eval_report.csv")
    print(f"dice_mean={report.dice_mean:.4f} nsd_mean={report.nsd_mean:.4f} "
          f"macro_f1={report.macro_f1:.4f} overall={report.overall:.4f}")
    return EXIT_OK


def cmd_refine(args) -> int:
    """Refine every mask of a predictions directory and write the result."""
    manifest = read_dataset(args.pred)
    refiner = build_refiner(args.refiner)
    out = Path(args.out)
    samples, rows = [], []
    adopted = decisions = 0
    for sample_id in manifest.ids():
        sample = load_sample(manifest, sample_id)
        result = refine_pseudo_label(sample.image, sample.mask, refiner, args.theta_iou, args.min_area, args.gate_mode)
        samples.append(replace(sample, mask=result.selected))
        rows.extend(audit_rows(sample_id, result))
        decisions += len(result.decisions)
        adopted += sum(d.adopted for d in result.decisions)
    write_dataset(DatasetManifest(root=out, seed=manifest.seed, entries=manifest.entries), samples)
    write_refine_audit(out / "refine_audit.csv", rows)
    logger.info(f"Refined {len(samples)} masks; adopted {adopted}/{decisions} class regions")
    return EXIT_OK


def read_label_file(path: Path) -> list[tuple[str, int]]:
    """
    Read a CSV of sample_id,pseudo_class rows.

    Raises:
        DataError: if the file is missing or malformed
    """
    if not path.exists():
        raise DataError(f"labels file not found: {path}")
    labels = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"sample_id", "pseudo_class"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns sample_id,pseudo_class")
        for line, row in enumerate(reader, start=2):
            try:
                labels.append((row["sample_id"], int(row["pseudo_class"])))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: pseudo_class is not an integer")
    return labels


def cmd_filter(args) -> int:
    """Prototype-filter CHD pseudo-labels listed in a CSV file."""
    config = load_settings(args)
    stage1 = load_stage1(Path(config.run_dir))
    embedder = build_embedder(config.embedder, config.seed, config.embed_dim)
    manifest = read_dataset(args.data or config.data_root)
    theta = config.theta_cos if args.theta_cos is None else args.theta_cos
    out = Path(args.out or Path(config.run_dir) / "filter_results.csv")
    out.parent.mkdir(parents=True, exist_ok=True)

    accepted = 0
    labels = read_label_file(Path(args.labels))
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "pseudo_class", "cosine", "accepted", "reason"])
        for sample_id, pseudo in labels:
            try:
                sample = load_sample(manifest, sample_id)
            except KeyError:
                raise DataError(f"sample '{sample_id}' is not in {manifest.root}")
            verdict = filter_pseudo(embedder.embed(sample.image, sample.id), pseudo, stage1.bank, theta,
                                    require_argmax=config.filter_mode == "dual")
            accepted += int(verdict.accepted)
            writer.writerow([sample_id, pseudo, f"{verdict.cosine:.6f}", int(verdict.accepted),
                             verdict.reason.value if verdict.reason else ""])
    logger.info(f"Accepted {accepted}/{len(labels)} pseudo-labels (theta_cos={theta})")
    return EXIT_OK


def cmd_score(args) -> int:
    """Score a predictions directory against ground truth."""
    pred_manifest = read_dataset(args.pred)
    gt_manifest = read_dataset(args.gt)
    preds, gts = [], []
    for sample_id in pred_manifest.ids(args.split):
        try:
            gts.append(load_sample(gt_manifest, sample_id))
        except KeyError:
            raise DataError(f"prediction '{sample_id}' has no ground truth in {args.gt}")
        preds.append(load_sample(pred_manifest, sample_id))
    if not preds:
        raise DataError(f"no predictions to score in {args.pred}")
    if any(p.chd is None for p in preds) or any(g.chd is None for g in gts):
        raise DataError("every scored sample needs a CHD class in its sidecar")

    report = evaluate(
        [p.mask for p in preds], [g.mask for g in gts],
        [p.chd for p in preds], [g.chd for g in gts],
        tolerance=args.tolerance, averaging=args.averaging,
        pred_views=[p.view.index for p in preds], gt_views=[g.view.index for g in gts],
    )
    out = Path(args.out or args.pred)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "score.json")
    report.write_csv(out / "score.csv")
    print(f"dice_mean={report.dice_mean:.4f} nsd_mean={report.nsd_mean:.4f} "
          f"macro_f1={report.macro_f1:.4f} overall={report.overall:.4f}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    worst = 0.0
    failed = []
    for seed in range(args.seed, args.seed + args.seeds):
        for result in run_gradcheck(seed, args.coords):
            worst = max(worst, result.robust_error)
            logger.info(f"  seed {seed} {result.name:16s} max {result.max_error:.2e}  "
                        f"99% {result.robust_error:.2e}  ok {100 * result.fraction_ok:.1f}%")
            if not result.passed:
                failed.append(f"{result.name}@{seed}")
    print(f"max relative error (99% of coordinates): {worst:.3e}")
    if failed:
        logger.error(f"Gradient check failed: {', '.join(failed)}")
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK if worst < REL_TOL else EXIT_NUMERICAL


# ============================================================
# Parser
# ============================================================

def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON or YAML config (default: config/desk.yaml)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> CliParser:
    parser = CliParser(prog="main.py", description="Semi-supervised multi-task phantom testbed")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    _add_config_args(p)
    p.add_argument("--out", help="dataset root (default: data_root)")
    p.add_argument("--jobs", type=int)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages")
    _add_config_args(p)
    p.add_argument("--stages", default="123", help="stages to run, e.g. 123 or 1,2 or 3")
    p.add_argument("--jobs", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ablate", help="paired-seed ablation of the interventions")
    _add_config_args(p)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive training seeds")
    p.add_argument("--seed", type=int, help="first seed (default: the config seed)")
    p.add_argument("--out", help="output directory (default: <run_dir>/ablation)")
    p.add_argument("--jobs", type=int)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("eval", help="predict and score a split")
    _add_config_args(p)
    p.add_argument("--phase", type=int, choices=(1, 2), default=2)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="predictions directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("refine", help="boundary-refine a predictions directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refiner", default="stub")
    p.add_argument("--theta-iou", type=float, default=0.5)
    p.add_argument("--min-area", type=int, default=4)
    p.add_argument("--gate-mode", choices=("per_class", "whole"), default="per_class")
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("filter", help="prototype-filter CHD pseudo-labels")
    _add_config_args(p)
    p.add_argument("--labels", required=True, help="CSV with sample_id,pseudo_class")
    p.add_argument("--data", help="dataset root (default: data_root)")
    p.add_argument("--theta-cos", type=float)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("score", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split")
    p.add_argument("--tolerance", type=float, default=2.0)
    p.add_argument("--averaging", choices=("per_image", "pooled"), default="per_image")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--coords", type=int, default=200, help="sampled coordinates per check")
    p.set_defaults(handler=cmd_check_grad)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, dispatch the subcommand and map errors to exit codes.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    configure_logging(args.verbose, args.quiet)

    try:
        return args.handler(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (DataError, ConfigurationError) as e:
        logger.error(f"Data or configuration error: {e}")
        return EXIT_DATA
    except PipelineError as e:
        logger.error(f"Pipeline error: {e}")
        return EXIT_DATA
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

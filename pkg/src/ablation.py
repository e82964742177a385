"""
Paired-seed ablation of the pseudo-label interventions.

Five leaderboard rows are read from four training runs per seed:

- baseline:      no refinement, no filtering, no mask guidance, no EMA
- refine:        + boundary refinement
- refine_filter: + prototype filtering
- mask_ema:      + mask guidance and the EMA teacher
- finetune:      the mask_ema run after phase-2 classification fine-tuning

Every variant of a seed trains on the same dataset with the same seed, so
row-to-row differences are paired.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.boundary_refine import RefinerProtocol
from src.errors import ConfigurationError
from src.models.train_config import TrainConfig
from src.semantic_anchor import EmbedderProtocol
from src.trainer import DataBundle, load_data, run_pipeline
from src.utils.audit import CsvLog

logger = logging.getLogger(__name__)

METRICS = ("macro_f1", "dice_mean", "nsd_mean", "overall")

ROWS_HEADER = ["seed", "variant", "run", "phase", *METRICS]
SUMMARY_HEADER = [
    "variant", "phase", "n_seeds", *METRICS,
    "delta_f1", "delta_dice", "delta_nsd", "delta_overall", "target", "seeds_improved",
]

# training run name -> config overrides
TRAINING_RUNS = {
    "baseline": {"sam_refine": False, "dino_filter": False, "mask_guidance": False, "ema_decay": 0.0},
    "refine": {"sam_refine": True, "dino_filter": False, "mask_guidance": False, "ema_decay": 0.0},
    "filter": {"sam_refine": True, "dino_filter": True, "mask_guidance": False, "ema_decay": 0.0},
    "ema": {"sam_refine": True, "dino_filter": True, "mask_guidance": True},
}


@dataclass(frozen=True)
class AblationVariant:
    """
    One leaderboard row.

    Attributes:
        name: row label
        run: TRAINING_RUNS entry the row is read from
        phase: 1 for the end-of-phase-1 teacher, 2 after fine-tuning
        target: metric this row is expected to raise over the previous one
    """
    name: str
    run: str
    phase: int
    target: str


VARIANTS = (
    AblationVariant("baseline", "baseline", 1, "overall"),
    AblationVariant("refine", "refine", 1, "dice_mean"),
    AblationVariant("refine_filter", "filter", 1, "macro_f1"),
    AblationVariant("mask_ema", "ema", 1, "dice_mean"),
    AblationVariant("finetune", "ema", 2, "macro_f1"),
)


@dataclass
class AblationResult:
    """Per-seed rows and the per-variant summary, as written to CSV."""
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    out_dir: Optional[Path] = None

    def row(self, seed: int, variant: str) -> dict:
        for row in self.rows:
            if row["seed"] == seed and row["variant"] == variant:
                return row
        raise KeyError(f"no ablation row for seed {seed}, variant {variant}")


def run_config(config: TrainConfig, run: str, seed: int, out_dir: Path) -> TrainConfig:
    """Config of one training run; only the intervention switches, seed and run_dir change."""
    return config.with_overrides(seed=seed, run_dir=str(out_dir / f"seed{seed}" / run), **TRAINING_RUNS[run])


def _stages_for(run: str) -> tuple:
    if any(v.run == run and v.phase == 2 for v in VARIANTS):
        return (1, 2, 3)
    return (1, 2)


def summarize(rows: Sequence[dict], seeds: Sequence[int]) -> list[dict]:
    """Mean metrics per variant, deltas to the previous variant and paired wins on its target."""
    summary = []
    previous = None
    for variant in VARIANTS:
        mine = {row["seed"]: row for row in rows if row["variant"] == variant.name}
        means = {m: float(np.mean([mine[s][m] for s in seeds])) for m in METRICS}
        entry = {"variant": variant.name, "phase": variant.phase, "n_seeds": len(seeds), **means,
                 "target": variant.target}
        if previous is None:
            entry.update(delta_f1=0.0, delta_dice=0.0, delta_nsd=0.0, delta_overall=0.0, seeds_improved="")
        else:
            before = {row["seed"]: row for row in rows if row["variant"] == previous["variant"]}
            entry.update(
                delta_f1=means["macro_f1"] - previous["macro_f1"],
                delta_dice=means["dice_mean"] - previous["dice_mean"],
                delta_nsd=means["nsd_mean"] - previous["nsd_mean"],
                delta_overall=means["overall"] - previous["overall"],
                seeds_improved=sum(mine[s][variant.target] > before[s][variant.target] for s in seeds),
            )
        summary.append(entry)
        previous = entry
    return summary


def run_ablation(
    config: TrainConfig,
    seeds: Sequence[int],
    out_dir: Optional[Path] = None,
    data: Optional[DataBundle] = None,
    refiner: Optional[RefinerProtocol] = None,
    embedder: Optional[EmbedderProtocol] = None,
) -> AblationResult:
    """
    Train every run for every seed and write ablation.csv and ablation_summary.csv.

    Args:
        config: base configuration; its intervention switches are overridden per run
        seeds: training seeds; the dataset stays fixed
        out_dir: defaults to <run_dir>/ablation

    Raises:
        ConfigurationError: if no seed is given
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigurationError("ablation needs at least one seed")
    out_dir = Path(out_dir or Path(config.run_dir) / "ablation")
    data = data or load_data(config)
    rows_log = CsvLog(out_dir / "ablation.csv", ROWS_HEADER)

    logger.info("=" * 50)
    logger.info(f"Ablation: {len(VARIANTS)} variants x {len(seeds)} seeds -> {out_dir}")
    logger.info("=" * 50)

    result = AblationResult(out_dir=out_dir)
    for seed in seeds:
        for run in TRAINING_RUNS:
            logger.info(f"Seed {seed}: training run '{run}'")
            report = run_pipeline(run_config(config, run, seed, out_dir), _stages_for(run), data, refiner, embedder)
            for variant in (v for v in VARIANTS if v.run == run):
                test = report[f"phase{variant.phase}"]["test"]
                row = {"seed": seed, "variant": variant.name, "run": run, "phase": variant.phase,
                       **{m: float(test[m]) for m in METRICS}}
                rows_log.append(row)
                result.rows.append(row)

    result.summary = summarize(result.rows, seeds)
    summary_log = CsvLog(out_dir / "ablation_summary.csv", SUMMARY_HEADER)
    for entry in result.summary:
        summary_log.append(entry)

    logger.info("=" * 50)
    logger.info("ABLATION SUMMARY (test split, mean over seeds)")
    logger.info("=" * 50)
    for entry in result.summary:
        wins = ""
        if entry["seeds_improved"] != "":
            wins = f", {entry['target']} up in {entry['seeds_improved']}/{len(seeds)}"
        logger.info(f"  {entry['variant']:14s} F1 {entry['macro_f1']:6.2f}  DSC {entry['dice_mean']:6.2f}  "
                    f"NSD {entry['nsd_mean']:6.2f}  overall {entry['overall']:6.2f}{wins}")
    logger.info("=" * 50)
    return result
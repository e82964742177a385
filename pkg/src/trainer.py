"""
Three-stage training orchestration.

Stage 1 trains a probe on frozen embeddings and builds CHD prototypes.
Phase 1 trains student and EMA teacher jointly on labeled and unlabeled
phantoms with pseudo-labels, hard masking, boundary refinement and
prototype filtering. Phase 2 freezes everything except the last encoder
block and the classification head, resets the head and fine-tunes it with
grouped learning rates.

All randomness comes from streams keyed by (seed, phase, epoch, sample id),
so the optional prefetch pool does not change any result.
"""

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from tqdm import tqdm

from src.anatomy_mask import ViewTable, apply_hard_mask, count_illegal_pixels, parse_mask_table
from src.augment import AugmentedPair, cutmix, make_augmented_pair, weak_augment
from src.boundary_refine import (
    REFINE_AUDIT_HEADER,
    RefinerProtocol,
    audit_rows,
    build_refiner,
    refine_pseudo_label,
)
from src.checkpoint import join_prefix, load_checkpoint, save_checkpoint, split_prefix
from src.errors import ConfigurationError, DataError, NumericalError, StructuralError
from src.metrics import evaluate
from src.models.eval_report import EvalReport
from src.models.sample import N_CHD_CLASSES, Sample, View
from src.models.train_config import TrainConfig
from src.network import (
    MultiTaskNet,
    NetConfig,
    ParamScope,
    ema_update,
    matches_prefix,
    reset_classification_head,
    set_trainable,
)
from src.optim import OptimState, adamw_step, poly_lr
from src.phantom_data import (
    SPLIT_LABELED,
    SPLIT_TEST,
    SPLIT_UNLABELED,
    SPLIT_VAL,
    load_split,
    read_dataset,
)
from src.pseudo_label import (
    PL_CLS_COMPONENTS,
    UNSUP_SEG_COMPONENTS,
    LossWeights,
    MixedView,
    PseudoLabelBundle,
    generate_pseudo,
    pseudo_chd_label,
    pseudo_class_losses,
    supervised_losses,
    total_loss,
    unimatch_losses,
)
from src.semantic_anchor import (
    EmbedderProtocol,
    PrototypeBank,
    ProbeHead,
    build_embedder,
    build_prototypes,
    embed_samples,
    filter_pseudo,
    fit_probe,
)
from src.tensorcore import Tensor, scale
from src.utils.audit import CsvLog, MaskAudit
from src.utils.seeding import stream

logger = logging.getLogger(__name__)

STAGE1_CKPT = "stage1.ckpt"
PHASE1_CKPT = "phase1.ckpt"
PHASE1_LAST_CKPT = "phase1_last.ckpt"
PHASE2_CKPT = "phase2.ckpt"
REPORT_NAME = "report.json"
NAN_DUMP = "nan_dump.json"

METRICS_HEADER = [
    "epoch", "phase", "loss_total", "loss_sup_seg", "loss_sup_cls", "loss_unsup",
    "loss_pl_cls", "dice_mean", "nsd_mean", "macro_f1", "overall", "lr_backbone", "lr_heads",
]
STEP_HEADER = ["phase", "epoch", "step", "lr_backbone", "lr_heads", "loss_total"]
FILTER_HEADER = ["phase", "epoch", "sample_id", "pseudo_class", "cosine", "accepted", "reason", "probe_class"]


# ============================================================
# Data and results
# ============================================================

@dataclass
class DataBundle:
    """The four splits; unlabeled samples carry no mask or CHD label."""
    labeled: list
    unlabeled: list
    val: list
    test: list


@dataclass
class Stage1Result:
    probe: ProbeHead
    bank: PrototypeBank


@dataclass
class PhaseResult:
    """Outcome of a training phase."""
    model: MultiTaskNet
    checkpoint: Path
    val_report: Optional[EvalReport] = None
    history: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    frozen_checksums: dict = field(default_factory=dict)


@dataclass
class Prepared:
    """A sample's augmented views and the rng that continues its stream."""
    sample: Sample
    rng: np.random.Generator
    weak: Optional[Sample] = None
    pair: Optional[AugmentedPair] = None


@dataclass
class RunLogs:
    """Open CSV logs of one run directory."""
    metrics: CsvLog
    steps: CsvLog
    refine: CsvLog
    filter: CsvLog

    @classmethod
    def open(cls, run_dir: Path) -> "RunLogs":
        return cls(
            metrics=CsvLog(run_dir / "metrics.csv", METRICS_HEADER),
            steps=CsvLog(run_dir / "step_log.csv", STEP_HEADER),
            refine=CsvLog(run_dir / "refine_audit.csv", ["epoch"] + REFINE_AUDIT_HEADER),
            filter=CsvLog(run_dir / "filter_audit.csv", FILTER_HEADER),
        )


def load_data(config: TrainConfig) -> DataBundle:
    """
    Read the phantom dataset named by config.data_root.

    Raises:
        DataError: if the dataset is missing or incomplete
    """
    manifest = read_dataset(config.data_root)
    data = DataBundle(
        labeled=load_split(manifest, SPLIT_LABELED),
        unlabeled=[s.strip_labels() for s in load_split(manifest, SPLIT_UNLABELED)],
        val=load_split(manifest, SPLIT_VAL),
        test=load_split(manifest, SPLIT_TEST),
    )
    logger.info(
        f"Loaded dataset: {len(data.labeled)} labeled, {len(data.unlabeled)} unlabeled, "
        f"{len(data.val)} val, {len(data.test)} test"
    )
    return data


def net_config(config: TrainConfig) -> NetConfig:
    return NetConfig(widths=config.widths, downsample_blocks=config.downsample_blocks)


def mask_table(config: TrainConfig) -> Optional[ViewTable]:
    return parse_mask_table(config.mask_table) if config.mask_table else None


def run_path(config: TrainConfig) -> Path:
    path = Path(config.run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def require_artifact(path: Path, produced_by: str) -> Path:
    """
    Raises:
        DataError: naming the missing artifact and the stage that writes it
    """
    if not path.exists():
        raise DataError(f"missing artifact {path} (written by {produced_by})")
    return path


# ============================================================
# Evaluation
# ============================================================

def predict(
    net: MultiTaskNet,
    sample: Sample,
    mask_guidance: bool = True,
    table: Optional[ViewTable] = None,
) -> tuple[np.ndarray, int, int]:
    """
    Eval-mode prediction: (mask, chd class, view class).

    With mask guidance the segmentation is hard-masked by the predicted view.
    """
    out = net.forward(Tensor(sample.image), training=False)
    view = int(np.argmax(out.view.data))
    logits = out.seg.data.astype(np.float64)
    if mask_guidance:
        logits = apply_hard_mask(logits, View.from_index(view), table)
    mask = np.argmax(logits, axis=0).astype(np.int64)
    return mask, int(np.argmax(out.chd.data)), view


def evaluate_model(
    net: MultiTaskNet,
    samples: Sequence[Sample],
    config: TrainConfig,
    audit: Optional[MaskAudit] = None,
) -> EvalReport:
    """
    Predict a labeled split and score it.

    The mask audit only counts mask-guided predictions; unguided ones
    still report their illegal pixels in the EvalReport.
    """
    table = mask_table(config)
    preds, chd_pred, view_pred = [], [], []
    illegal = 0
    for sample in samples:
        mask, chd, view = predict(net, sample, config.mask_guidance, table)
        preds.append(mask)
        chd_pred.append(chd)
        view_pred.append(view)
        illegal += count_illegal_pixels(mask, View.from_index(view), table)
    if audit is not None and config.mask_guidance:
        audit.record_prediction(sum(p.size for p in preds), illegal)
    return evaluate(
        preds,
        [s.mask for s in samples],
        chd_pred,
        [s.chd for s in samples],
        tolerance=config.nsd_tolerance,
        averaging=config.metric_averaging,
        pred_views=view_pred,
        gt_views=[s.view.index for s in samples],
        illegal_pixels=illegal,
    )


# ============================================================
# Batching
# ============================================================

def epoch_order(n: int, seed: int, phase: str, epoch: int, split: str) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return stream(seed, "order", phase, epoch, split).permutation(n)


def plan_batches(n_labeled: int, n_unlabeled: int, batch_size: int, labeled_order, unlabeled_order) -> list:
    """
    Index batches for one epoch as (labeled indices, unlabeled indices).

    One step per unlabeled batch; labeled samples cycle to fill each step.
    """
    if n_unlabeled:
        steps = math.ceil(n_unlabeled / batch_size)
    else:
        steps = math.ceil(n_labeled / batch_size)
    plan = []
    for k in range(steps):
        lab = [int(labeled_order[(k * batch_size + j) % n_labeled]) for j in range(batch_size)] if n_labeled else []
        unl = [int(i) for i in unlabeled_order[k * batch_size:(k + 1) * batch_size]]
        plan.append((lab, unl))
    return plan


def prefetch(batches: Sequence[list], prepare: Callable, jobs: int) -> Iterator[list]:
    """
    Yield prepared batches in order; with jobs > 1 the next batch is
    prepared on a thread pool while the current one trains.
    """
    if jobs <= 1:
        for batch in batches:
            yield [prepare(item) for item in batch]
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        pending = [pool.submit(prepare, item) for item in batches[0]] if batches else []
        for k in range(len(batches)):
            current = [f.result() for f in pending]
            if k + 1 < len(batches):
                pending = [pool.submit(prepare, item) for item in batches[k + 1]]
            yield current


def epoch_batches(
    config: TrainConfig,
    data: DataBundle,
    phase: str,
    epoch: int,
    n_unlabeled: int,
) -> tuple[list, Callable[[tuple], Prepared]]:
    """
    Batches of (kind, index, cycle) entries for one epoch and the function
    that augments an entry. Labeled entries get weak views, unlabeled ones
    a weak/strong pair.
    """
    n_l = len(data.labeled)
    plan = plan_batches(
        n_l, n_unlabeled, config.batch_size,
        epoch_order(n_l, config.seed, phase, epoch, SPLIT_LABELED),
        epoch_order(n_unlabeled, config.seed, phase, epoch, SPLIT_UNLABELED),
    )

    def prepare(entry: tuple) -> Prepared:
        kind, index, cycle = entry
        if kind == "l":
            sample = data.labeled[index]
            rng = stream(config.seed, phase, epoch, sample.id, cycle)
            return Prepared(sample=sample, rng=rng, weak=weak_augment(sample, rng))
        sample = data.unlabeled[index]
        rng = stream(config.seed, phase, epoch, sample.id)
        return Prepared(sample=sample, rng=rng, pair=make_augmented_pair(sample, rng))

    batches = []
    for k, (lab, unl) in enumerate(plan):
        entries = [("l", i, (k * config.batch_size + j) // n_l) for j, i in enumerate(lab)]
        entries += [("u", i, 0) for i in unl]
        batches.append(entries)
    return batches, prepare


def _nan_abort(run_dir: Path, phase: str, epoch: int, step: int, ids: list, components: dict, error: Exception):
    dump = {
        "phase": phase,
        "epoch": epoch,
        "step": step,
        "batch_ids": ids,
        "components": {k: float(v) for k, v in components.items()},
        "error": str(error),
    }
    (run_dir / NAN_DUMP).write_text(json.dumps(dump, indent=2), encoding="utf-8")
    logger.error(f"Non-finite loss in {phase} epoch {epoch} step {step}; wrote {NAN_DUMP}")
    raise NumericalError(f"non-finite loss in {phase} epoch {epoch} step {step} (batch {', '.join(ids)})") from error


class LossTracker:
    """Accumulates component values and weighted group sums over an epoch."""

    def __init__(self, weights: LossWeights):
        self.weights = weights
        self.sums = {"total": 0.0, "sup_seg": 0.0, "sup_cls": 0.0, "unsup": 0.0, "pl_cls": 0.0}
        self.steps = 0

    def add_step(self, components: dict) -> float:
        total = 0.0
        for name, value in components.items():
            weighted = self.weights.weight_for(name) * value
            total += weighted
            if name in ("sup_seg", "sup_cls"):
                self.sums[name] += value
            elif name in UNSUP_SEG_COMPONENTS:
                self.sums["unsup"] += weighted
            elif name in PL_CLS_COMPONENTS:
                self.sums["pl_cls"] += weighted
        self.sums["total"] += total
        self.steps += 1
        return total

    def means(self) -> dict:
        n = max(self.steps, 1)
        return {f"loss_{k}": v / n for k, v in self.sums.items()}


def _backward_scaled(components: dict, weights: LossWeights, factor: float, step_values: dict) -> None:
    """Backpropagate factor * weighted sum and record each component's contribution."""
    if not components:
        return
    loss = scale(total_loss(components, weights), factor)
    loss.backward()
    for name, value in components.items():
        step_values[name] = step_values.get(name, 0.0) + factor * value.item()


def _metrics_row(epoch: int, phase: int, losses: dict, report: EvalReport, lrs: tuple) -> dict:
    row = {"epoch": epoch, "phase": phase}
    for key in ("loss_total", "loss_sup_seg", "loss_sup_cls", "loss_unsup", "loss_pl_cls"):
        row[key] = float(losses.get(key, 0.0))
    row.update({k: float(v) for k, v in report.summary().items()})
    row["lr_backbone"], row["lr_heads"] = float(lrs[0]), float(lrs[1])
    return row


# ============================================================
# Stage 1: probe and prototypes
# ============================================================

def run_stage1_probe(
    config: TrainConfig,
    data: DataBundle,
    embedder: Optional[EmbedderProtocol] = None,
) -> Stage1Result:
    """
    Embed the labeled split with the frozen embedder, train the probe,
    build prototypes and write both to the run directory.

    Raises:
        ConfigurationError: if the labeled split is empty
    """
    labeled = [s for s in data.labeled if s.chd is not None]
    if not labeled:
        raise ConfigurationError("stage 1 needs a non-empty labeled split")
    logger.info("=" * 50)
    logger.info(f"Stage 1: probe and prototypes on {len(labeled)} labeled samples")

    embedder = embedder or build_embedder(config.embedder, config.seed, config.embed_dim)
    embeddings = embed_samples(embedder, labeled)
    labels = np.array([s.chd for s in labeled], dtype=np.int64)
    probe = fit_probe(embeddings, labels, epochs=config.probe_epochs, lr=config.probe_lr, seed=config.seed)
    bank = build_prototypes(embeddings, labels)

    accuracy = float(np.mean(probe.predict(embeddings) == labels))
    logger.info(f"Probe train accuracy: {100 * accuracy:.1f}%, prototypes present: {bank.n_present}/{N_CHD_CLASSES}")

    save_checkpoint(run_path(config) / STAGE1_CKPT, {
        "probe.weight": probe.weight,
        "probe.bias": probe.bias,
        "proto.vectors": bank.vectors,
        "proto.present": bank.present.astype(np.float32),
        "proto.counts": bank.counts.astype(np.float32),
    })
    logger.info("=" * 50)
    return Stage1Result(probe=probe, bank=bank)


def load_stage1(run_dir: Path) -> Stage1Result:
    """
    Raises:
        DataError: if stage1.ckpt is missing or corrupt
    """
    tensors = load_checkpoint(require_artifact(run_dir / STAGE1_CKPT, "stage 1"))
    present = tensors["proto.present"] > 0.5
    bank = PrototypeBank(
        vectors=tensors["proto.vectors"].astype(np.float64),
        present=present,
        counts=tensors["proto.counts"].astype(np.int64),
    )
    probe = ProbeHead(weight=tensors["probe.weight"].astype(np.float64), bias=tensors["probe.bias"].astype(np.float64))
    return Stage1Result(probe=probe, bank=bank)


# ============================================================
# Phase 1: joint EMA training
# ============================================================

class Phase1Step:
    """Unlabeled pipeline of one step: pseudo -> mask -> refine -> gate -> filter."""

    def __init__(
        self,
        config: TrainConfig,
        teacher: MultiTaskNet,
        refiner: Optional[RefinerProtocol],
        embedder: Optional[EmbedderProtocol],
        stage1: Optional[Stage1Result],
        audit: MaskAudit,
        counters: dict,
    ):
        self.config = config
        self.teacher = teacher
        self.refiner = refiner
        self.embedder = embedder
        self.stage1 = stage1
        self.audit = audit
        self.counters = counters
        self.table = mask_table(config)

    def pseudo_label(self, item: Prepared, epoch: int, refine_rows: list, filter_rows: list) -> PseudoLabelBundle:
        cfg = self.config
        weak = item.pair.weak
        bundle = generate_pseudo(self.teacher, weak, cfg.tau, cfg.view_source, cfg.mask_guidance, self.table)

        if cfg.sam_refine and self.refiner is not None:
            result = refine_pseudo_label(
                weak.image, bundle.hard_mask, self.refiner, cfg.theta_iou, cfg.min_box_area, cfg.gate_mode
            )
            changed = result.selected != bundle.hard_mask
            bundle.hard_mask = result.selected
            # adopted refinements are trusted targets
            bundle.conf = bundle.conf | changed
            self.counters["refine_decisions"] += len(result.decisions)
            self.counters["refine_adopted"] += sum(d.adopted for d in result.decisions)
            refine_rows.extend([epoch] + row for row in audit_rows(item.sample.id, result))

        if bundle.view_used is not None:
            illegal = count_illegal_pixels(bundle.hard_mask, bundle.view_used, self.table)
            self.audit.record_pseudo(bundle.hard_mask.size, illegal)

        verdict = None
        if cfg.dino_filter:
            embedding = self.embedder.embed(item.sample.image, item.sample.id)
            verdict = filter_pseudo(
                embedding, bundle.chd_pseudo, self.stage1.bank, cfg.theta_cos,
                require_argmax=cfg.filter_mode == "dual",
            )
            probe_class = int(self.stage1.probe.predict(embedding)[0])
            filter_rows.append([
                "1", epoch, item.sample.id, bundle.chd_pseudo, f"{verdict.cosine:.6f}",
                int(verdict.accepted), verdict.reason.value if verdict.reason else "", probe_class,
            ])
        bundle.apply_verdict(verdict)
        self.counters["chd_total"] += 1
        self.counters["chd_accepted"] += int(bundle.chd_accepted)
        return bundle


def _unlabeled_components(
    student: MultiTaskNet,
    items: list,
    bundles: list,
    index: int,
    config: TrainConfig,
) -> dict:
    """Five student passes for one unlabeled sample and its loss components."""
    item = items[index]
    pair = item.pair
    bundle = bundles[index]
    s1 = student.forward(Tensor(pair.strong1.image), training=True)
    s2 = student.forward(Tensor(pair.strong2.image), training=True)
    fp = None
    if config.fp_rate > 0:
        fp = student.forward(Tensor(pair.weak.image), training=True, fp_rate=config.fp_rate, rng=item.rng)

    mixes = []
    n = len(items)
    for offset, attr in ((1, "strong1"), (2, "strong2")):
        partner = (index + offset) % n
        mixed = cutmix(getattr(pair, attr), getattr(items[partner].pair, attr), item.rng)
        output = student.forward(Tensor(mixed.mixed.image), training=True)
        mixes.append(MixedView(output=output, partner=bundles[partner], region_b=mixed.region_b, lam=mixed.lam))

    components = unimatch_losses(s1, s2, fp, bundle, mixes, config.focal_gamma)
    components.update(pseudo_class_losses(s1, bundle, mixes, config.focal_gamma))
    return components


def _group_lrs(names: Sequence[str], group_of: Callable[[str], str], rates: dict) -> dict:
    return {name: rates[group_of(name)] for name in names}


def backbone_or_heads(name: str) -> str:
    return "backbone" if matches_prefix(name, "enc") else "heads"


def run_phase1(
    config: TrainConfig,
    data: DataBundle,
    stage1: Optional[Stage1Result] = None,
    refiner: Optional[RefinerProtocol] = None,
    embedder: Optional[EmbedderProtocol] = None,
    logs: Optional[RunLogs] = None,
    audit: Optional[MaskAudit] = None,
) -> PhaseResult:
    """
    Joint student/teacher training; the teacher is evaluated on val each epoch.

    Raises:
        DataError: if prototype filtering is on and stage-1 artifacts are missing
        NumericalError: on a non-finite loss (after writing nan_dump.json)
    """
    run_dir = run_path(config)
    logs = logs or RunLogs.open(run_dir)
    audit = audit or MaskAudit()
    if config.dino_filter and stage1 is None:
        stage1 = load_stage1(run_dir)
    if config.sam_refine and refiner is None:
        refiner = build_refiner(config.refiner)
    if config.dino_filter and embedder is None:
        embedder = build_embedder(config.embedder, config.seed, config.embed_dim)

    student = MultiTaskNet(net_config(config), seed=config.seed)
    teacher = student.clone(trainable=False)
    state = OptimState()
    weights = config.loss_weights
    counters = {"refine_decisions": 0, "refine_adopted": 0, "chd_total": 0, "chd_accepted": 0}
    pipeline = Phase1Step(config, teacher, refiner, embedder, stage1, audit, counters)

    n_l, n_u = len(data.labeled), len(data.unlabeled)
    steps_per_epoch = len(plan_batches(n_l, n_u, config.batch_size, range(n_l), range(n_u)))
    total_steps = config.epochs * steps_per_epoch
    logger.info("=" * 50)
    logger.info(f"Phase 1: {config.epochs} epochs x {steps_per_epoch} steps, {n_l} labeled / {n_u} unlabeled")

    best_overall = -1.0
    best_state = None
    val_report = None
    history = []
    global_step = 0

    for epoch in range(config.epochs):
        batches, prepare = epoch_batches(config, data, "phase1", epoch, n_u)
        tracker = LossTracker(weights)
        lrs = (config.lr_backbone, config.lr_heads)
        progress = tqdm(prefetch(batches, prepare, config.jobs), total=len(batches),
                        desc=f"phase1 epoch {epoch}", disable=not config.progress)
        for step, prepared in enumerate(progress):
            lrs = (
                poly_lr(config.lr_backbone, global_step, total_steps, config.poly_power),
                poly_lr(config.lr_heads, global_step, total_steps, config.poly_power),
            )
            labeled_items = [p for p in prepared if p.weak is not None]
            unlabeled_items = [p for p in prepared if p.pair is not None]
            ids = [p.sample.id for p in prepared]
            step_values: dict = {}
            student.zero_grad()
            try:
                for item in labeled_items:
                    out = student.forward(Tensor(item.weak.image), training=True)
                    _backward_scaled(supervised_losses(out, item.weak), weights, 1.0 / len(labeled_items), step_values)

                refine_rows, filter_rows = [], []
                bundles = [pipeline.pseudo_label(item, epoch, refine_rows, filter_rows) for item in unlabeled_items]
                logs.refine.extend(refine_rows)
                logs.filter.extend(filter_rows)
                for index in range(len(unlabeled_items)):
                    components = _unlabeled_components(student, unlabeled_items, bundles, index, config)
                    _backward_scaled(components, weights, 1.0 / len(unlabeled_items), step_values)
            except NumericalError as e:
                _nan_abort(run_dir, "phase1", epoch, step, ids, step_values, e)

            loss_value = tracker.add_step(step_values)
            if not math.isfinite(loss_value):
                _nan_abort(run_dir, "phase1", epoch, step, ids, step_values, ValueError("loss is not finite"))

            rates = {"backbone": lrs[0], "heads": lrs[1]}
            adamw_step(student.params, state, _group_lrs(list(student.params), backbone_or_heads, rates),
                       weight_decay=config.weight_decay)
            ema_update(teacher, student, config.ema_decay)
            logs.steps.append({"phase": 1, "epoch": epoch, "step": global_step,
                               "lr_backbone": float(lrs[0]), "lr_heads": float(lrs[1]), "loss_total": loss_value})
            progress.set_postfix(loss=f"{loss_value:.4f}")
            global_step += 1

        val_report = evaluate_model(teacher, data.val, config)
        row = _metrics_row(epoch, 1, tracker.means(), val_report, lrs)
        logs.metrics.append(row)
        history.append(row)
        logger.info(
            f"Phase 1 epoch {epoch}: loss {row['loss_total']:.4f}, val dice {val_report.dice_mean:.2f}, "
            f"nsd {val_report.nsd_mean:.2f}, F1 {val_report.macro_f1:.2f}, overall {val_report.overall:.2f}"
        )
        if val_report.overall > best_overall:
            best_overall = val_report.overall
            best_state = (student.state_dict(), teacher.state_dict())

    last = {**join_prefix("student", student.state_dict()), **join_prefix("teacher", teacher.state_dict())}
    save_checkpoint(run_dir / PHASE1_LAST_CKPT, last)
    if best_state is not None:
        student.load_state_dict(best_state[0])
        teacher.load_state_dict(best_state[1])
    checkpoint = run_dir / PHASE1_CKPT
    save_checkpoint(checkpoint, {**join_prefix("student", student.state_dict()),
                                 **join_prefix("teacher", teacher.state_dict())})

    logger.info(
        f"Phase 1 done: pseudo CHD accepted {counters['chd_accepted']}/{counters['chd_total']}, "
        f"refinements adopted {counters['refine_adopted']}/{counters['refine_decisions']}, "
        f"illegal pseudo pixels {audit.pseudo_illegal}"
    )
    logger.info("=" * 50)
    return PhaseResult(model=teacher, checkpoint=checkpoint, val_report=val_report, history=history, counters=counters)


# ============================================================
# Phase 2: classification fine-tuning
# ============================================================

def param_checksums(net: MultiTaskNet, names: Sequence[str]) -> dict:
    return {name: f"{zlib.crc32(np.ascontiguousarray(net.params[name].data).tobytes()) & 0xFFFFFFFF:08x}"
            for name in names}


def phase2_scope(config: TrainConfig) -> ParamScope:
    prefixes = {net_config(config).last_block, "chd_head"}
    if config.phase2_reset_view_head:
        prefixes.add("view_head")
    return ParamScope(trainable_prefixes=prefixes)


def phase2_head_rng(config: TrainConfig) -> np.random.Generator:
    return stream(config.seed, "phase2-reset")


def settings_for_phase(config: TrainConfig, phase: int) -> TrainConfig:
    """Phase 2 trains and is evaluated without boundary refinement or mask guidance."""
    if phase == 2 and (config.sam_refine or config.mask_guidance):
        return config.with_overrides(sam_refine=False, mask_guidance=False)
    return config


def _phase2_pl_cls(
    model: MultiTaskNet,
    item: Prepared,
    config: TrainConfig,
    stage1: Stage1Result,
    embedder: EmbedderProtocol,
    epoch: int,
    filter_rows: list,
) -> dict:
    """Prototype-filtered CHD pseudo-label from the model itself, trained on the strong view."""
    weak_out = model.forward(Tensor(item.pair.weak.image), training=False)
    logits = weak_out.chd.data.reshape(-1)
    pseudo = int(np.argmax(logits))
    embedding = embedder.embed(item.sample.image, item.sample.id)
    verdict = filter_pseudo(embedding, pseudo, stage1.bank, config.theta_cos,
                            require_argmax=config.filter_mode == "dual")
    filter_rows.append([
        "2", epoch, item.sample.id, pseudo, f"{verdict.cosine:.6f}", int(verdict.accepted),
        verdict.reason.value if verdict.reason else "", int(stage1.probe.predict(embedding)[0]),
    ])
    label = pseudo_chd_label(logits, verdict)
    if label is None:
        return {}
    strong = model.forward(Tensor(item.pair.strong1.image), training=True)
    bundle = PseudoLabelBundle(pw=np.zeros(0), hard_mask=np.zeros(0), conf=np.zeros(0, dtype=bool),
                               chd_pseudo=label, view_pred=0, chd_accepted=True, chd_logits=logits)
    return pseudo_class_losses(strong, bundle, (), config.focal_gamma)


def run_phase2(
    config: TrainConfig,
    data: DataBundle,
    stage1: Optional[Stage1Result] = None,
    embedder: Optional[EmbedderProtocol] = None,
    logs: Optional[RunLogs] = None,
) -> PhaseResult:
    """
    Fine-tune the last encoder block and the classification head of the
    phase-1 teacher; every other parameter stays bit-identical.

    Boundary refinement and mask guidance are off for the pseudo-label
    path of this phase.

    Raises:
        DataError: if the phase-1 checkpoint is missing
        StructuralError: if a frozen parameter changed
    """
    config = settings_for_phase(config, 2)
    run_dir = run_path(config)
    logs = logs or RunLogs.open(run_dir)
    tensors = load_checkpoint(require_artifact(run_dir / PHASE1_CKPT, "phase 1 (--stages 2)"))
    use_filter = config.phase2_dino_filter
    if use_filter:
        stage1 = stage1 or load_stage1(run_dir)
        embedder = embedder or build_embedder(config.embedder, config.seed, config.embed_dim)

    model = MultiTaskNet(net_config(config), seed=config.seed)
    model.load_state_dict(split_prefix(tensors, "teacher"))
    state = OptimState()
    trainable = set(set_trainable(model, phase2_scope(config), state))
    frozen = [name for name in model.params if name not in trainable]
    frozen_before = {name: model.params[name].data.copy() for name in frozen}
    reset_classification_head(model, phase2_head_rng(config), include_view_head=config.phase2_reset_view_head)

    last_block = net_config(config).last_block

    def group_of(name: str) -> str:
        return "last_layer" if matches_prefix(name, last_block) else "cls_head"

    weights = config.loss_weights
    n_l = len(data.labeled)
    n_u = len(data.unlabeled) if use_filter else 0
    steps_per_epoch = len(plan_batches(n_l, n_u, config.batch_size, range(n_l), range(n_u)))
    total_steps = config.phase2_epochs * steps_per_epoch
    logger.info("=" * 50)
    logger.info(f"Phase 2: {config.phase2_epochs} epochs, trainable {sorted(trainable)}")

    history = []
    val_report = None
    global_step = 0
    for epoch in range(config.phase2_epochs):
        batches, prepare = epoch_batches(config, data, "phase2", epoch, n_u)
        tracker = LossTracker(weights)
        lrs = (config.phase2_lr_last_layer, config.phase2_lr_cls_head)
        progress = tqdm(prefetch(batches, prepare, config.jobs), total=len(batches),
                        desc=f"phase2 epoch {epoch}", disable=not config.progress)
        for step, prepared in enumerate(progress):
            lrs = (
                poly_lr(config.phase2_lr_last_layer, global_step, total_steps, config.poly_power),
                poly_lr(config.phase2_lr_cls_head, global_step, total_steps, config.poly_power),
            )
            labeled_items = [p for p in prepared if p.weak is not None]
            unlabeled_items = [p for p in prepared if p.pair is not None]
            ids = [p.sample.id for p in prepared]
            step_values: dict = {}
            model.zero_grad()
            try:
                for item in labeled_items:
                    out = model.forward(Tensor(item.weak.image), training=True)
                    _backward_scaled(supervised_losses(out, item.weak), weights, 1.0 / len(labeled_items), step_values)
                filter_rows = []
                for item in unlabeled_items:
                    components = _phase2_pl_cls(model, item, config, stage1, embedder, epoch, filter_rows)
                    _backward_scaled(components, weights, 1.0 / len(unlabeled_items), step_values)
                logs.filter.extend(filter_rows)
            except NumericalError as e:
                _nan_abort(run_dir, "phase2", epoch, step, ids, step_values, e)

            loss_value = tracker.add_step(step_values)
            if not math.isfinite(loss_value):
                _nan_abort(run_dir, "phase2", epoch, step, ids, step_values, ValueError("loss is not finite"))

            rates = {"last_layer": lrs[0], "cls_head": lrs[1]}
            adamw_step(model.params, state, _group_lrs(sorted(trainable), group_of, rates),
                       weight_decay=config.weight_decay)
            logs.steps.append({"phase": 2, "epoch": epoch, "step": global_step,
                               "lr_backbone": float(lrs[0]), "lr_heads": float(lrs[1]), "loss_total": loss_value})
            progress.set_postfix(loss=f"{loss_value:.4f}")
            global_step += 1

        val_report = evaluate_model(model, data.val, config)
        row = _metrics_row(epoch, 2, tracker.means(), val_report, lrs)
        logs.metrics.append(row)
        history.append(row)
        logger.info(f"Phase 2 epoch {epoch}: loss {row['loss_total']:.4f}, val F1 {val_report.macro_f1:.2f}, "
                    f"dice {val_report.dice_mean:.2f}")

    changed = [name for name in frozen if not np.array_equal(model.params[name].data, frozen_before[name])]
    if changed:
        raise StructuralError(f"frozen parameters changed during phase 2: {changed}")

    checkpoint = run_dir / PHASE2_CKPT
    save_checkpoint(checkpoint, join_prefix("model", model.state_dict()))
    logger.info(f"Phase 2 done: {len(frozen)} frozen parameters verified unchanged")
    logger.info("=" * 50)
    return PhaseResult(model=model, checkpoint=checkpoint, val_report=val_report, history=history,
                       frozen_checksums=param_checksums(model, frozen))


# ============================================================
# Orchestration
# ============================================================

def load_phase_model(config: TrainConfig, phase: int) -> MultiTaskNet:
    """
    Model evaluated after a phase: the phase-1 teacher or the phase-2 model.

    Raises:
        DataError: if the checkpoint is missing
    """
    run_dir = Path(config.run_dir)
    if phase == 1:
        tensors = load_checkpoint(require_artifact(run_dir / PHASE1_CKPT, "phase 1 (--stages 2)"))
        state = split_prefix(tensors, "teacher")
    else:
        tensors = load_checkpoint(require_artifact(run_dir / PHASE2_CKPT, "phase 2 (--stages 3)"))
        state = split_prefix(tensors, "model")
    net = MultiTaskNet(net_config(config), seed=config.seed)
    net.load_state_dict(state)
    return net


def update_report(run_dir: Path, updates: dict) -> dict:
    path = run_dir / REPORT_NAME
    report = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    report.update(updates)
    if "phase1" in report and "phase2" in report:
        p1, p2 = report["phase1"]["test"], report["phase2"]["test"]
        report["dice_drift"] = p1["dice_mean"] - p2["dice_mean"]
        report["f1_change"] = p2["macro_f1"] - p1["macro_f1"]
    path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return report


def run_pipeline(
    config: TrainConfig,
    stages: Sequence[int] = (1, 2, 3),
    data: Optional[DataBundle] = None,
    refiner: Optional[RefinerProtocol] = None,
    embedder: Optional[EmbedderProtocol] = None,
) -> dict:
    """
    Run the requested stages in order and write report.json.

    Stage numbers: 1 probe and prototypes, 2 phase-1 joint training,
    3 phase-2 fine-tuning.

    Returns:
        The report dictionary
    """
    unknown = sorted(set(stages) - {1, 2, 3})
    if unknown:
        raise ConfigurationError(f"unknown stages {unknown}; valid stages are 1, 2, 3")
    run_dir = run_path(config)
    if 3 in stages and 2 not in stages:
        require_artifact(run_dir / PHASE1_CKPT, "phase 1 (--stages 2)")
    data = data or load_data(config)
    logs = RunLogs.open(run_dir)
    audit = MaskAudit()
    report: dict = {}

    stage1 = None
    if 1 in stages:
        stage1 = run_stage1_probe(config, data, embedder)

    if 2 in stages:
        result = run_phase1(config, data, stage1, refiner, embedder, logs, audit)
        test = evaluate_model(result.model, data.test, config, audit)
        report = update_report(run_dir, {
            "phase1": {"val": result.val_report.to_dict() if result.val_report else None, "test": test.to_dict()},
            "pseudo_labels": result.counters,
            "mask_audit": audit.to_dict(),
        })

    if 3 in stages:
        result = run_phase2(config, data, stage1, embedder, logs)
        if 2 not in stages:
            phase1_test = evaluate_model(load_phase_model(config, 1), data.test, config, audit)
            update_report(run_dir, {"phase1": {"val": None, "test": phase1_test.to_dict()}})
        test = evaluate_model(result.model, data.test, settings_for_phase(config, 2), audit)
        report = update_report(run_dir, {
            "phase2": {"val": result.val_report.to_dict() if result.val_report else None, "test": test.to_dict()},
            "frozen_checksums": result.frozen_checksums,
            "mask_audit": audit.to_dict(),
        })
    return report

"""
Teacher pseudo-labels, weak-to-strong consistency losses and loss assembly.

Pseudo-labels are plain numpy arrays produced from an eval-mode teacher
forward pass, so no gradient can reach the teacher through them.
"""

import logging
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from src.anatomy_mask import ViewTable, apply_hard_mask
from src.errors import ConfigurationError, DimensionError, ParameterError
from src.models.sample import N_CHD_CLASSES, Sample, View
from src.network import MultiTaskNet, NetOutput
from src.semantic_anchor import FilterVerdict
from src.tensorcore import (
    Tensor,
    add,
    add_n,
    channels_last,
    focal_loss,
    scale,
    softmax,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

VIEW_SOURCES = ("predicted", "ground_truth")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the named loss components; unsup_seg_s applies to S1, S2 and fp."""
    sup_seg: float = 1.0
    sup_cls: float = 0.8
    unsup_seg_s: float = 0.3
    unsup_focal: float = 0.4
    unsup_mixed: float = 0.2
    pl_cls: float = 1.0
    pl_cls_mixed: float = 0.3
    pl_cls_focal_mixed: float = 0.4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be >= 0")

    def weight_for(self, component: str) -> float:
        """
        Weight applied to a loss component.

        Raises:
            ConfigurationError: for an unknown component name
        """
        if component not in COMPONENT_WEIGHT:
            raise ConfigurationError(f"unknown loss component '{component}'")
        return getattr(self, COMPONENT_WEIGHT[component])


# component name -> LossWeights field
COMPONENT_WEIGHT = {
    "sup_seg": "sup_seg",
    "sup_cls": "sup_cls",
    "unsup_s1": "unsup_seg_s",
    "unsup_s2": "unsup_seg_s",
    "unsup_fp": "unsup_seg_s",
    "unsup_focal": "unsup_focal",
    "unsup_mixed": "unsup_mixed",
    "pl_cls": "pl_cls",
    "pl_cls_mixed": "pl_cls_mixed",
    "pl_cls_focal_mixed": "pl_cls_focal_mixed",
}

UNSUP_SEG_COMPONENTS = ("unsup_s1", "unsup_s2", "unsup_fp", "unsup_focal", "unsup_mixed")
PL_CLS_COMPONENTS = ("pl_cls", "pl_cls_mixed", "pl_cls_focal_mixed")


@dataclass
class PseudoLabelBundle:
    """
    Teacher prediction on a weak view.

    Attributes:
        pw: 15 x H x W probabilities after hard masking
        hard_mask: H x W argmax labels
        conf: H x W, True where the max probability reaches tau
        chd_pseudo: teacher's CHD argmax
        chd_accepted: set by apply_verdict
        chd_logits: teacher CHD logits behind chd_pseudo
        view_pred: teacher's view argmax
        view_used: view that drove the hard mask (None when masking is off)
    """
    pw: np.ndarray
    hard_mask: np.ndarray
    conf: np.ndarray
    chd_pseudo: int
    view_pred: int
    view_used: Optional[View] = None
    chd_accepted: bool = False
    chd_logits: Optional[np.ndarray] = None

    def apply_verdict(self, verdict: Optional[FilterVerdict]) -> bool:
        """Accept or reject the CHD pseudo-label; None means filtering is off."""
        logits = self.chd_logits if self.chd_logits is not None else np.eye(N_CHD_CLASSES)[self.chd_pseudo]
        self.chd_accepted = pseudo_chd_label(logits, verdict) is not None
        return self.chd_accepted

    @property
    def confident_pixels(self) -> int:
        return int(np.count_nonzero(self.conf))

    @property
    def accepted_chd(self) -> Optional[int]:
        return self.chd_pseudo if self.chd_accepted else None


@dataclass
class MixedView:
    """
    Student output on a CutMix of this sample (kept fraction lam) with a partner.

    region_b marks pixels pasted from the partner.
    """
    output: NetOutput
    partner: PseudoLabelBundle
    region_b: np.ndarray
    lam: float


# ============================================================
# Pseudo-label generation
# ============================================================

def generate_pseudo(
    teacher: MultiTaskNet,
    weak: Sample,
    tau: float,
    view_source: str = "predicted",
    mask_guidance: bool = True,
    table: Optional[ViewTable] = None,
) -> PseudoLabelBundle:
    """
    Eval-mode teacher pass on a weak view, hard masking, argmax and confidence.

    tau outside [0, 1] is clamped. Ties go to the lowest class index.

    Raises:
        ConfigurationError: for an unknown view_source
    """
    if view_source not in VIEW_SOURCES:
        raise ConfigurationError(f"view_source must be one of {VIEW_SOURCES}, got '{view_source}'")
    tau = min(max(float(tau), 0.0), 1.0)

    out = teacher.forward(Tensor(weak.image), training=False)
    logits = out.seg.data.astype(np.float64)
    view_pred = int(np.argmax(out.view.data))

    view_used = None
    if mask_guidance:
        view_used = weak.view if view_source == "ground_truth" else View.from_index(view_pred)
        logits = apply_hard_mask(logits, view_used, table)

    pw = softmax(logits, axis=0)
    hard = np.argmax(pw, axis=0).astype(np.int64)
    conf = pw.max(axis=0) >= tau
    return PseudoLabelBundle(
        pw=pw,
        hard_mask=hard,
        conf=conf,
        chd_pseudo=int(np.argmax(out.chd.data)),
        view_pred=view_pred,
        view_used=view_used,
        chd_logits=out.chd.data.reshape(-1).copy(),
    )


def pseudo_chd_label(chd_logits: np.ndarray, verdict: Optional[FilterVerdict]) -> Optional[int]:
    """
    Argmax CHD class if accepted by the filter verdict.

    A None verdict means filtering is disabled and the label is accepted.
    """
    label = int(np.argmax(np.asarray(chd_logits).reshape(-1)))
    if verdict is None or verdict.accepted:
        return label
    return None


# ============================================================
# Losses
# ============================================================

def seg_loss(seg_logits: Tensor, target: np.ndarray, valid: Optional[np.ndarray] = None, gamma: float = 0.0) -> Tensor:
    """Per-pixel cross-entropy (focal when gamma > 0) averaged over valid pixels."""
    c, h, w = seg_logits.dims
    if target.shape != (h, w):
        raise DimensionError(f"seg target {target.shape} does not match logits {seg_logits.dims}")
    rows = channels_last(seg_logits)
    ignore = None if valid is None else ~valid.reshape(-1)
    if gamma > 0:
        return focal_loss(rows, target.reshape(-1), gamma, ignore)
    return softmax_cross_entropy(rows, target.reshape(-1), ignore)


def supervised_losses(output: NetOutput, sample: Sample) -> dict[str, Tensor]:
    """sup_seg on the ground-truth mask and sup_cls = CE(chd) + CE(view)."""
    if sample.mask is None or sample.chd is None:
        raise ParameterError(f"sample {sample.id} has no labels for supervised losses")
    return {
        "sup_seg": seg_loss(output.seg, sample.mask),
        "sup_cls": add(
            softmax_cross_entropy(output.chd, [sample.chd]),
            softmax_cross_entropy(output.view, [sample.view.index]),
        ),
    }


def _mixed_targets(bundle: PseudoLabelBundle, mix: MixedView) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    target = np.where(mix.region_b, mix.partner.hard_mask, bundle.hard_mask)
    conf_a = bundle.conf & ~mix.region_b
    conf_b = mix.partner.conf & mix.region_b
    return target, conf_a, conf_b


def unimatch_losses(
    s1: NetOutput,
    s2: NetOutput,
    fp: Optional[NetOutput],
    bundle: PseudoLabelBundle,
    mixes: Sequence[MixedView] = (),
    gamma: float = 2.0,
) -> dict[str, Tensor]:
    """
    Consistency of strong, feature-perturbed and mixed predictions with the pseudo-label.

    Every term is restricted to confident pixels and is exactly zero when
    no pixel is confident. The mixed term is lam * CE over the kept region
    plus (1 - lam) * CE over the pasted region, averaged over mixes.
    """
    target, conf = bundle.hard_mask, bundle.conf
    fused = scale(add(s1.seg, s2.seg), 0.5)
    losses = {
        "unsup_s1": seg_loss(s1.seg, target, conf),
        "unsup_s2": seg_loss(s2.seg, target, conf),
        "unsup_focal": seg_loss(fused, target, conf, gamma=gamma),
    }
    if fp is not None and fp.seg_fp is not None:
        losses["unsup_fp"] = seg_loss(fp.seg_fp, target, conf)

    if mixes:
        terms = []
        for mix in mixes:
            mixed_target, conf_a, conf_b = _mixed_targets(bundle, mix)
            terms.append(scale(seg_loss(mix.output.seg, mixed_target, conf_a), mix.lam))
            terms.append(scale(seg_loss(mix.output.seg, mixed_target, conf_b), 1.0 - mix.lam))
        losses["unsup_mixed"] = scale(add_n(terms), 1.0 / len(mixes))
    return losses


def pseudo_class_losses(
    strong: NetOutput,
    bundle: PseudoLabelBundle,
    mixes: Sequence[MixedView] = (),
    gamma: float = 2.0,
) -> dict[str, Tensor]:
    """
    CHD pseudo-label losses; rejected parents contribute nothing.

    pl_cls uses the strong view; the mixed variants weight each accepted
    parent's label by its pixel share of the mix.
    """
    losses: dict[str, Tensor] = {}
    own = bundle.accepted_chd
    if own is not None:
        losses["pl_cls"] = softmax_cross_entropy(strong.chd, [own])

    ce_terms, focal_terms = [], []
    for mix in mixes:
        for label, share in ((own, mix.lam), (mix.partner.accepted_chd, 1.0 - mix.lam)):
            if label is None or share <= 0.0:
                continue
            ce_terms.append(scale(softmax_cross_entropy(mix.output.chd, [label]), share))
            focal_terms.append(scale(focal_loss(mix.output.chd, [label], gamma), share))
    if ce_terms:
        losses["pl_cls_mixed"] = scale(add_n(ce_terms), 1.0 / len(mixes))
        losses["pl_cls_focal_mixed"] = scale(add_n(focal_terms), 1.0 / len(mixes))
    return losses


def total_loss(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """
    Weighted sum of named loss components; absent components contribute 0.

    Raises:
        ConfigurationError: for an unknown component name
    """
    terms = [scale(value, weights.weight_for(name)) for name, value in components.items()]
    if not terms:
        return Tensor(0.0)
    return add_n(terms)

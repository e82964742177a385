"""
Unit tests for pseudo-label generation and the loss components.

Run with: pytest tests/test_pseudo_label.py -v
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.errors import ConfigurationError, ParameterError
from src.models.sample import N_CHD_CLASSES, N_SEG_CLASSES, N_VIEWS, Sample, View
from src.network import NetOutput
from src.pseudo_label import (
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
from src.semantic_anchor import FilterVerdict, RejectReason
from src.tensorcore import Tensor

H = W = 4


class FakeTeacher:
    """Teacher returning fixed logits regardless of input."""

    def __init__(self, seg: np.ndarray, chd: int = 2, view: int = 1):
        self.seg = seg
        self.chd = np.eye(N_CHD_CLASSES)[chd] * 5.0
        self.view = np.eye(N_VIEWS)[view] * 5.0
        self.calls = []

    def forward(self, image, training=False, fp_rate=0.0, rng=None):
        self.calls.append(training)
        return NetOutput(seg=Tensor(self.seg), chd=Tensor(self.chd), view=Tensor(self.view))


def _weak(view: View = View.FOUR_CHAMBER) -> Sample:
    return Sample(id="u0", image=np.zeros((1, H, W), dtype=np.float32), mask=None,
                  view=view, chd=None, labeled=False)


def _onehot_output(mask: np.ndarray, chd: int = 0, strength: float = 50.0, trainable: bool = True) -> NetOutput:
    seg = np.zeros((N_SEG_CLASSES,) + mask.shape)
    for c in range(N_SEG_CLASSES):
        seg[c][mask == c] = strength
    return NetOutput(
        seg=Tensor(seg, requires_grad=trainable),
        chd=Tensor(np.eye(N_CHD_CLASSES)[chd] * strength, requires_grad=trainable),
        view=Tensor(np.zeros(N_VIEWS), requires_grad=trainable),
    )


def _bundle(hard: np.ndarray, conf: np.ndarray, chd: int = 0, accepted: bool = True) -> PseudoLabelBundle:
    return PseudoLabelBundle(
        pw=np.zeros((N_SEG_CLASSES,) + hard.shape),
        hard_mask=hard,
        conf=conf,
        chd_pseudo=chd,
        view_pred=0,
        chd_accepted=accepted,
    )


class TestGeneratePseudo:
    """Tests for generate_pseudo."""

    def test_tau_zero_all_confident(self):
        """Test that tau 0 marks every pixel confident."""
        teacher = FakeTeacher(np.random.default_rng(0).normal(size=(N_SEG_CLASSES, H, W)))
        bundle = generate_pseudo(teacher, _weak(), tau=0.0)
        assert bundle.conf.all()
        assert teacher.calls == [False]

    def test_tau_above_one_is_clamped(self):
        """Test that tau > 1 acts as 1: only certain pixels are confident."""
        teacher = FakeTeacher(np.random.default_rng(0).normal(size=(N_SEG_CLASSES, H, W)))
        assert not generate_pseudo(teacher, _weak(), tau=1.5).conf.any()

        table = {View.FOUR_CHAMBER: frozenset({0})}
        certain = generate_pseudo(teacher, _weak(), tau=1.5, view_source="ground_truth", table=table)
        assert certain.conf.all()
        assert (certain.hard_mask == 0).all()

    def test_ties_go_to_lowest_allowed(self):
        """Test that uniform logits over the allowed set pick the lowest index."""
        seg = np.zeros((N_SEG_CLASSES, H, W))
        seg[0] = -5.0
        teacher = FakeTeacher(seg)
        bundle = generate_pseudo(teacher, _weak(View.LVOT), tau=0.9, view_source="ground_truth")
        assert (bundle.hard_mask == 1).all()
        assert np.allclose(bundle.pw[[1, 2, 4, 8]].sum(axis=0), 1.0, atol=1e-2)

    def test_predicted_view_drives_mask(self):
        """Test that the predicted view is used by default."""
        teacher = FakeTeacher(np.zeros((N_SEG_CLASSES, H, W)), view=View.THREE_VESSEL.index)
        bundle = generate_pseudo(teacher, _weak(View.FOUR_CHAMBER), tau=0.5)
        assert bundle.view_used == View.THREE_VESSEL
        assert bundle.view_pred == View.THREE_VESSEL.index
        assert set(np.unique(bundle.hard_mask)) <= {0, 9, 12, 13, 14}

    def test_ground_truth_view(self):
        """Test the ground-truth view source."""
        teacher = FakeTeacher(np.zeros((N_SEG_CLASSES, H, W)), view=View.THREE_VESSEL.index)
        bundle = generate_pseudo(teacher, _weak(View.RVOT), tau=0.5, view_source="ground_truth")
        assert bundle.view_used == View.RVOT

    def test_guidance_off(self):
        """Test that disabling mask guidance leaves every class reachable."""
        seg = np.zeros((N_SEG_CLASSES, H, W))
        seg[14] = 3.0
        bundle = generate_pseudo(FakeTeacher(seg), _weak(View.FOUR_CHAMBER), tau=0.5, mask_guidance=False)
        assert bundle.view_used is None
        assert (bundle.hard_mask == 14).all()

    def test_unknown_view_source(self):
        """Test that a bad view_source is a configuration error."""
        with pytest.raises(ConfigurationError):
            generate_pseudo(FakeTeacher(np.zeros((N_SEG_CLASSES, H, W))), _weak(), 0.5, view_source="oracle")

    def test_chd_pseudo(self):
        """Test the teacher's CHD argmax is recorded but not yet accepted."""
        bundle = generate_pseudo(FakeTeacher(np.zeros((N_SEG_CLASSES, H, W)), chd=4), _weak(), 0.5)
        assert bundle.chd_pseudo == 4
        assert bundle.accepted_chd is None
        assert int(np.argmax(bundle.chd_logits)) == 4

    @pytest.mark.parametrize("seed", range(100))
    def test_raising_tau_never_adds_confident_pixels(self, seed):
        """Test that the confident set for a higher tau is a subset of the lower one."""
        rng = np.random.default_rng(seed)
        seg = rng.normal(size=(N_SEG_CLASSES, 8, 8)) * rng.uniform(0.5, 6.0)
        teacher = FakeTeacher(seg, view=int(rng.integers(0, N_VIEWS)))
        guidance = bool(rng.random() < 0.5)
        taus = np.sort(rng.uniform(0.0, 1.0, size=4))
        bundles = [generate_pseudo(teacher, _weak(), tau, mask_guidance=guidance) for tau in taus]
        for low, high in zip(bundles, bundles[1:]):
            assert not (high.conf & ~low.conf).any()
            assert high.confident_pixels <= low.confident_pixels
            assert np.array_equal(high.hard_mask, low.hard_mask)


class TestPseudoChdLabel:
    """Tests for pseudo_chd_label."""

    def test_no_filter_accepts(self):
        """Test that a missing verdict accepts the argmax."""
        assert pseudo_chd_label(np.array([0.1, 3.0, 0.2]), None) == 1

    def test_reject(self):
        """Test that a rejecting verdict yields no label."""
        verdict = FilterVerdict(False, 0.1, RejectReason.BELOW_THRESHOLD)
        assert pseudo_chd_label(np.array([0.1, 3.0, 0.2]), verdict) is None

    def test_accept(self):
        """Test that an accepting verdict yields the argmax."""
        assert pseudo_chd_label(np.array([5.0, 3.0]), FilterVerdict(True, 0.9)) == 0

    def test_bundle_applies_verdict(self):
        """Test that a bundle's acceptance follows pseudo_chd_label."""
        bundle = generate_pseudo(FakeTeacher(np.zeros((N_SEG_CLASSES, H, W)), chd=3), _weak(), 0.5)
        assert bundle.apply_verdict(None)
        assert bundle.accepted_chd == 3
        assert not bundle.apply_verdict(FilterVerdict(False, 0.2, RejectReason.BELOW_THRESHOLD))
        assert bundle.accepted_chd is None
        assert bundle.apply_verdict(FilterVerdict(True, 0.9))
        assert bundle.accepted_chd == 3

    def test_bundle_without_logits(self):
        """Test that a bundle built from a class index alone still applies a verdict."""
        bundle = _bundle(np.zeros((H, W), dtype=np.int64), np.ones((H, W), dtype=bool), chd=5, accepted=False)
        assert bundle.apply_verdict(None)
        assert bundle.accepted_chd == 5


class TestUnimatchLosses:
    """Tests for the consistency losses."""

    @pytest.fixture
    def hard(self):
        """A simple two-class pseudo-label."""
        mask = np.zeros((H, W), dtype=np.int64)
        mask[:2] = 3
        return mask

    def test_no_confident_pixels(self, hard):
        """Test that every component is exactly 0 without confident pixels."""
        student = _onehot_output(np.zeros((H, W), dtype=np.int64), strength=1.0)
        student.seg_fp = student.seg
        bundle = _bundle(hard, np.zeros((H, W), dtype=bool))
        mix = MixedView(output=student, partner=bundle, region_b=np.ones((H, W), dtype=bool), lam=0.0)
        losses = unimatch_losses(student, student, student, bundle, [mix])
        assert set(losses) == {"unsup_s1", "unsup_s2", "unsup_focal", "unsup_fp", "unsup_mixed"}
        assert all(v.item() == 0.0 for v in losses.values())

    def test_saturated_student(self, hard):
        """Test that a student matching the pseudo-label gives ~0 losses."""
        student = _onehot_output(hard)
        student.seg_fp = student.seg
        bundle = _bundle(hard, np.ones((H, W), dtype=bool))
        losses = unimatch_losses(student, student, student, bundle)
        assert all(v.item() < 1e-6 for v in losses.values())

    def test_wrong_student_is_penalised(self, hard):
        """Test that disagreement produces a positive loss."""
        student = _onehot_output(np.zeros((H, W), dtype=np.int64), strength=5.0)
        bundle = _bundle(hard, np.ones((H, W), dtype=bool))
        losses = unimatch_losses(student, student, None, bundle)
        assert "unsup_fp" not in losses
        assert losses["unsup_s1"].item() > 1.0

    def test_mixed_uses_partner_in_pasted_region(self, hard):
        """Test that the pasted region is supervised by the partner's labels."""
        partner = _bundle(np.full((H, W), 5, dtype=np.int64), np.ones((H, W), dtype=bool))
        region_b = np.zeros((H, W), dtype=bool)
        region_b[:, 2:] = True
        mixed_truth = np.where(region_b, 5, hard)
        output = _onehot_output(mixed_truth)
        bundle = _bundle(hard, np.ones((H, W), dtype=bool))
        mix = MixedView(output=output, partner=partner, region_b=region_b, lam=0.5)
        student = _onehot_output(hard)
        losses = unimatch_losses(student, student, None, bundle, [mix])
        assert losses["unsup_mixed"].item() < 1e-6

        wrong = MixedView(output=_onehot_output(hard), partner=partner, region_b=region_b, lam=0.5)
        losses = unimatch_losses(student, student, None, bundle, [wrong])
        assert losses["unsup_mixed"].item() > 1.0

    def test_gradient_reaches_student_only(self, hard):
        """Test that losses backpropagate into the student's logits."""
        student = _onehot_output(np.zeros((H, W), dtype=np.int64), strength=1.0)
        bundle = _bundle(hard, np.ones((H, W), dtype=bool))
        losses = unimatch_losses(student, student, None, bundle)
        total_loss(losses, LossWeights()).backward()
        assert np.abs(student.seg.grad).sum() > 0


class TestSupervisedLosses:
    """Tests for the labeled-branch losses."""

    def test_components(self):
        """Test that sup_seg and sup_cls are produced."""
        mask = np.zeros((H, W), dtype=np.int64)
        sample = Sample(id="l0", image=np.zeros((1, H, W), dtype=np.float32), mask=mask,
                        view=View.LVOT, chd=3, labeled=True)
        output = _onehot_output(mask, chd=3)
        output.view = Tensor(np.eye(N_VIEWS)[View.LVOT.index] * 50.0)
        losses = supervised_losses(output, sample)
        assert set(losses) == {"sup_seg", "sup_cls"}
        assert losses["sup_seg"].item() < 1e-6
        assert losses["sup_cls"].item() < 1e-6

    def test_unlabeled_sample_rejected(self):
        """Test that a stripped sample cannot feed supervised losses."""
        with pytest.raises(ParameterError):
            supervised_losses(_onehot_output(np.zeros((H, W), dtype=np.int64)), _weak())


class TestPseudoClassLosses:
    """Tests for CHD pseudo-label losses."""

    def test_rejected_contributes_nothing(self):
        """Test that a rejected pseudo-label yields no pl_cls terms."""
        bundle = _bundle(np.zeros((H, W), dtype=np.int64), np.ones((H, W), dtype=bool), chd=2, accepted=False)
        assert pseudo_class_losses(_onehot_output(np.zeros((H, W), dtype=np.int64)), bundle) == {}

    def test_accepted_matching_student(self):
        """Test that an accepted label matched by the student gives ~0."""
        bundle = _bundle(np.zeros((H, W), dtype=np.int64), np.ones((H, W), dtype=bool), chd=2)
        losses = pseudo_class_losses(_onehot_output(np.zeros((H, W), dtype=np.int64), chd=2), bundle)
        assert losses["pl_cls"].item() < 1e-6

    def test_mixed_only_accepted_parent(self):
        """Test that the mixed terms use only the accepted parent."""
        own = _bundle(np.zeros((H, W), dtype=np.int64), np.ones((H, W), dtype=bool), chd=1, accepted=False)
        partner = _bundle(np.zeros((H, W), dtype=np.int64), np.ones((H, W), dtype=bool), chd=4)
        out = _onehot_output(np.zeros((H, W), dtype=np.int64), chd=4)
        mix = MixedView(output=out, partner=partner, region_b=np.ones((H, W), dtype=bool), lam=0.25)
        losses = pseudo_class_losses(out, own, [mix])
        assert "pl_cls" not in losses
        assert losses["pl_cls_mixed"].item() < 1e-6
        assert "pl_cls_focal_mixed" in losses


class TestTotalLoss:
    """Tests for weighted loss assembly."""

    def test_single_term(self):
        """Test that only sup_seg = 2 gives total 2."""
        assert total_loss({"sup_seg": Tensor(2.0)}, LossWeights()).item() == pytest.approx(2.0)

    def test_supervised_pair(self):
        """Test sup_seg = sup_cls = 1 gives 1.8."""
        components = {"sup_seg": Tensor(1.0), "sup_cls": Tensor(1.0)}
        assert total_loss(components, LossWeights()).item() == pytest.approx(1.8)

    def test_all_components(self):
        """Test that every component at 1 sums to 4.7 with the default weights."""
        names = ["sup_seg", "sup_cls", "unsup_s1", "unsup_s2", "unsup_focal", "unsup_mixed",
                 "pl_cls", "pl_cls_mixed", "pl_cls_focal_mixed"]
        components = {name: Tensor(1.0) for name in names}
        assert total_loss(components, LossWeights()).item() == pytest.approx(4.7)

    def test_empty(self):
        """Test that no components sum to 0."""
        assert total_loss({}, LossWeights()).item() == 0.0

    def test_unknown_component(self):
        """Test that an unknown key is a configuration error."""
        with pytest.raises(ConfigurationError):
            total_loss({"dice": Tensor(1.0)}, LossWeights())

    def test_negative_weight(self):
        """Test that negative weights are rejected."""
        with pytest.raises(ConfigurationError):
            LossWeights(sup_seg=-1.0)

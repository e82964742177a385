"""
Flat training configuration.

Every hyperparameter, threshold, loss weight and phase boundary lives in
one flat dataclass so ablations are single-key overrides.
"""

from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

from src.errors import ConfigurationError
from src.pseudo_label import LossWeights


@dataclass
class TrainConfig:
    """Resolved configuration for data generation, training and evaluation."""

    seed: int = 0
    data_root: str = "data/phantoms"
    run_dir: str = "runs/desk"

    # phantom data
    image_size: int = 64
    n_labeled: int = 200
    n_unlabeled: int = 400
    n_val: int = 100
    n_test: int = 100
    noise_var: float = 0.05
    shadow_prob: float = 0.3

    # network
    widths: tuple = (16, 32, 64, 64)
    downsample_blocks: tuple = (1, 2)

    # optimisation
    batch_size: int = 8
    weight_decay: float = 0.01
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    epochs: int = 25
    poly_power: float = 0.9
    ema_decay: float = 0.99

    # pseudo-labels and interventions
    tau: float = 0.95
    fp_rate: float = 0.5
    focal_gamma: float = 2.0
    view_source: str = "predicted"
    sam_refine: bool = True
    dino_filter: bool = True
    mask_guidance: bool = True
    mask_table: str = ""

    # boundary refinement
    refiner: str = "stub"
    theta_iou: float = 0.5
    min_box_area: int = 4
    gate_mode: str = "per_class"

    # prototype filtering
    embedder: str = "stub"
    embed_dim: int = 64
    theta_cos: float = 0.7
    filter_mode: str = "dual"
    probe_epochs: int = 100
    probe_lr: float = 1e-2

    # loss weights
    w_sup_seg: float = 1.0
    w_sup_cls: float = 0.8
    w_unsup_seg_s: float = 0.3
    w_unsup_focal: float = 0.4
    w_unsup_mixed: float = 0.2
    w_pl_cls: float = 1.0
    w_pl_cls_mixed: float = 0.3
    w_pl_cls_focal_mixed: float = 0.4

    # phase 2
    phase2_epochs: int = 5
    phase2_lr_last_layer: float = 1e-5
    phase2_lr_cls_head: float = 1e-3
    phase2_reset_view_head: bool = False
    phase2_dino_filter: bool = False

    # evaluation
    nsd_tolerance: float = 2.0
    metric_averaging: str = "per_image"

    # runtime
    jobs: int = 1
    progress: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.downsample_blocks = tuple(int(b) for b in self.downsample_blocks)
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: on any out-of-range or inconsistent value
        """
        for name in ("lr_backbone", "lr_heads", "phase2_lr_last_layer", "phase2_lr_cls_head"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.phase2_lr_last_layer >= self.phase2_lr_cls_head:
            raise ConfigurationError("phase2_lr_last_layer must be lower than phase2_lr_cls_head")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigurationError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if not 0.0 <= self.fp_rate < 1.0:
            raise ConfigurationError(f"fp_rate must be in [0, 1), got {self.fp_rate}")
        for name in ("batch_size", "image_size", "embed_dim", "min_box_area", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("epochs", "phase2_epochs", "probe_epochs", "n_labeled", "n_unlabeled", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        choices = {
            "view_source": ("predicted", "ground_truth"),
            "gate_mode": ("per_class", "whole"),
            "filter_mode": ("dual", "threshold"),
            "metric_averaging": ("per_image", "pooled"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got '{getattr(self, name)}'")
        # constructing validates non-negativity
        self.loss_weights

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**{f.name: getattr(self, f"w_{f.name}") for f in fields(LossWeights)})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainConfig":
        """
        Build from a flat mapping, rejecting unknown keys.

        Raises:
            ConfigurationError: on unknown keys or invalid values
        """
        known = set(cls.field_names())
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**dict(data))
        except TypeError as e:
            raise ConfigurationError(f"invalid config: {e}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["widths"] = list(self.widths)
        data["downsample_blocks"] = list(self.downsample_blocks)
        return data

    def with_overrides(self, **changes) -> "TrainConfig":
        merged = self.to_dict()
        merged.update(changes)
        return TrainConfig.from_mapping(merged)

"""
Toy multi-task network with a segmentation head and two classification heads.

Encoder: L conv blocks named enc.0 .. enc.{L-1}; blocks listed in
`downsample_blocks` end with 2x2 average pooling. The decoder upsamples the
bottleneck back to full resolution with additive skips from the encoder.
Pooled bottleneck features feed the CHD (7-way) and view (4-way) heads.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from src.errors import ConfigurationError, DimensionError, StructuralError
from src.models.sample import N_CHD_CLASSES, N_SEG_CLASSES, N_VIEWS
from src.tensorcore import (
    Tensor,
    add,
    avg_pool2,
    channel_dropout,
    conv2d,
    global_avg_pool,
    linear,
    relu,
    upsample2,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetConfig:
    """Encoder widths and downsampling layout."""
    widths: tuple = (16, 32, 64, 64)
    downsample_blocks: tuple = (1, 2)
    in_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if not self.widths:
            raise ConfigurationError("encoder needs at least one block")
        if any(b < 0 or b >= len(self.widths) - 1 for b in self.downsample_blocks):
            raise ConfigurationError("only blocks before the last may downsample")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.downsample_blocks)

    @property
    def last_block(self) -> str:
        return f"enc.{self.depth - 1}"


@dataclass
class NetOutput:
    """Forward results; seg_fp is present only for a perturbed training pass."""
    seg: Tensor
    chd: Tensor
    view: Tensor
    seg_fp: Optional[Tensor] = None


@dataclass
class ParamScope:
    """Parameter-name prefixes that stay trainable."""
    trainable_prefixes: set = field(default_factory=set)


def matches_prefix(name: str, prefix: str) -> bool:
    return name == prefix or name.startswith(prefix + ".")


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class MultiTaskNet:
    """
    Multi-task network with a name -> Tensor parameter registry.

    Attributes:
        config: layout of the encoder
        params: ordered registry of parameter tensors
    """

    def __init__(self, config: Optional[NetConfig] = None, seed: int = 0):
        self.config = config or NetConfig()
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # ============================================================
    # Construction
    # ============================================================

    def _add_conv(self, name: str, rng, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        self.params[f"{name}.weight"] = Tensor(he_normal(rng, (c_out, c_in, k, k), fan_in), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _add_linear(self, name: str, rng, d_in: int, d_out: int) -> None:
        self.params[f"{name}.weight"] = Tensor(he_normal(rng, (d_out, d_in), d_in), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(d_out), requires_grad=True)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        k = cfg.kernel_size
        c_in = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            self._add_conv(f"enc.{i}", rng, c_in, width, k)
            c_in = width

        # one decoder block per downsampling step, deepest first
        for j, block in enumerate(reversed(cfg.downsample_blocks)):
            self._add_conv(f"dec.{j}", rng, c_in, cfg.widths[block], k)
            c_in = cfg.widths[block]

        self._add_conv("seg_head", rng, c_in, N_SEG_CLASSES, 1)
        bottleneck = cfg.widths[-1]
        self._add_linear("chd_head", rng, bottleneck, N_CHD_CLASSES)
        self._add_linear("view_head", rng, bottleneck, N_VIEWS)

    # ============================================================
    # Forward
    # ============================================================

    def _conv(self, name: str, x: Tensor) -> Tensor:
        w = self.params[f"{name}.weight"]
        return conv2d(x, w, self.params[f"{name}.bias"], (w.data.shape[2] - 1) // 2)

    def _decode(self, features: Tensor, skips: list[Tensor]) -> Tensor:
        x = features
        for j, skip in enumerate(reversed(skips)):
            x = relu(self._conv(f"dec.{j}", upsample2(x)))
            x = add(x, skip)
        return self._conv("seg_head", x)

    def forward(
        self,
        image: Tensor,
        training: bool = False,
        fp_rate: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> NetOutput:
        """
        Run the network on one 1 x H x W image.

        When training and fp_rate > 0, a second decode pass over the
        channel-dropped bottleneck yields seg_fp.

        Raises:
            DimensionError: if H or W is not a multiple of the downsample factor
        """
        cfg = self.config
        if image.data.ndim != 3 or image.data.shape[0] != cfg.in_channels:
            raise DimensionError(f"forward expects {cfg.in_channels}xHxW input, got {image.dims}")
        factor = cfg.downsample_factor
        if image.data.shape[1] % factor or image.data.shape[2] % factor:
            raise DimensionError(f"spatial dims {image.dims[1:]} must be multiples of {factor}")

        x = image
        skips: list[Tensor] = []
        for i in range(cfg.depth):
            x = relu(self._conv(f"enc.{i}", x))
            if i in cfg.downsample_blocks:
                skips.append(x)
                x = avg_pool2(x)

        pooled = global_avg_pool(x)
        out = NetOutput(
            seg=self._decode(x, skips),
            chd=linear(pooled, self.params["chd_head.weight"], self.params["chd_head.bias"]),
            view=linear(pooled, self.params["view_head.weight"], self.params["view_head.bias"]),
        )
        if training and fp_rate > 0:
            if rng is None:
                raise ConfigurationError("feature perturbation needs an rng")
            out.seg_fp = self._decode(channel_dropout(x, fp_rate, rng, training=True), skips)
        return out

    __call__ = forward

    # ============================================================
    # Parameter control
    # ============================================================

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def resolve_prefix(self, prefix: str) -> list[str]:
        names = [n for n in self.params if matches_prefix(n, prefix)]
        if not names:
            raise ConfigurationError(f"parameter prefix '{prefix}' matches nothing")
        return names

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise StructuralError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            if state[name].shape != p.data.shape:
                raise StructuralError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
            p.zero_grad()

    def clone(self, trainable: bool = True) -> "MultiTaskNet":
        """Deep copy; trainable=False yields a gradient-free teacher."""
        twin = MultiTaskNet.__new__(MultiTaskNet)
        twin.config = self.config
        twin.params = {name: Tensor(p.data, requires_grad=trainable) for name, p in self.params.items()}
        return twin


def set_trainable(net: MultiTaskNet, scope: ParamScope, optim_state=None) -> list[str]:
    """
    Enable gradients exactly for parameters under the scope's prefixes.

    Optimizer moments of parameters that become frozen are discarded.

    Returns:
        Names of the trainable parameters

    Raises:
        ConfigurationError: if a prefix matches no parameter
    """
    selected: set[str] = set()
    for prefix in scope.trainable_prefixes:
        selected.update(net.resolve_prefix(prefix))

    for name, p in net.params.items():
        trainable = name in selected
        if p.requires_grad != trainable:
            p.set_requires_grad(trainable)
        if not trainable and optim_state is not None:
            optim_state.discard(name)

    frozen = len(net.params) - len(selected)
    logger.info(f"Trainable parameters: {len(selected)}, frozen: {frozen}")
    return [n for n in net.params if n in selected]


def reset_classification_head(net: MultiTaskNet, rng: np.random.Generator, include_view_head: bool = False) -> None:
    """Re-draw the CHD head (optionally the view head) from the init distribution."""
    heads = ["chd_head"] + (["view_head"] if include_view_head else [])
    for head in heads:
        w = net.params[f"{head}.weight"]
        b = net.params[f"{head}.bias"]
        d_out, d_in = w.data.shape
        w.data = he_normal(rng, (d_out, d_in), d_in).astype(w.data.dtype)
        b.data = np.zeros_like(b.data)
        w.zero_grad()
        b.zero_grad()
    logger.info(f"Reset heads: {', '.join(heads)}")


def ema_update(teacher: MultiTaskNet, student: MultiTaskNet, decay: float) -> None:
    """
    teacher <- decay * teacher + (1 - decay) * student, parameter by parameter.

    Raises:
        ConfigurationError: if decay is outside [0, 1]
        StructuralError: if the registries differ
    """
    if not 0.0 <= decay <= 1.0:
        raise ConfigurationError(f"ema decay must be in [0, 1], got {decay}")
    if list(teacher.params) != list(student.params):
        raise StructuralError("teacher and student parameter registries differ")

    for name, t in teacher.params.items():
        s = student.params[name]
        if t.data.shape != s.data.shape:
            raise StructuralError(f"{name}: teacher {t.dims} vs student {s.dims}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            t.data = s.data.astype(t.data.dtype, copy=True)
            continue
        mixed = decay * t.data.astype(np.float64) + (1.0 - decay) * s.data.astype(np.float64)
        t.data = mixed.astype(t.data.dtype)

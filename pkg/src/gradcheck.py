"""
Central finite-difference verification of every differentiable primitive
and of a full multi-task forward pass plus loss.

Graphs are evaluated in float64. A check passes when at least 99% of the
sampled coordinates have a relative error below the tolerance.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from src.models.sample import N_CHD_CLASSES, N_SEG_CLASSES, N_VIEWS
from src.network import MultiTaskNet, NetConfig
from src.tensorcore import (
    Tensor,
    add,
    avg_pool2,
    channel_dropout,
    channels_last,
    conv2d,
    focal_loss,
    global_avg_pool,
    linear,
    masked_fill_channels,
    mean_all,
    mul,
    precision,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    sum_all,
    upsample2,
)
from src.utils.seeding import stream

logger = logging.getLogger(__name__)

STEP = 1e-3
REL_TOL = 1e-3
ABS_FLOOR = 1e-5
PASS_FRACTION = 0.99
MAX_COORDS = 200

LossFn = Callable[[dict], Tensor]


@dataclass
class GradCheckResult:
    """Errors of one check over its sampled coordinates."""
    name: str
    n_coords: int
    max_error: float
    robust_error: float
    fraction_ok: float

    @property
    def passed(self) -> bool:
        return self.fraction_ok >= PASS_FRACTION


def _weighted_sum(out: Tensor, rng_seed: int) -> Tensor:
    """Reduce any output to a scalar with fixed random weights."""
    weights = np.random.default_rng(rng_seed).normal(size=out.data.shape)
    return sum_all(mul(out, Tensor(weights)))


def check_gradients(
    name: str,
    fn: LossFn,
    arrays: Mapping[str, np.ndarray],
    rng: np.random.Generator,
    max_coords: int = MAX_COORDS,
    step: float = STEP,
) -> GradCheckResult:
    """
    Compare backward() gradients of fn with central differences.

    Args:
        name: label for logs
        fn: maps name -> Tensor inputs to a scalar loss
        arrays: input values, perturbed one coordinate at a time
        rng: selects the sampled coordinates
    """
    with precision(np.float64):
        values = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        inputs = {k: Tensor(v, requires_grad=True) for k, v in values.items()}
        fn(inputs).backward()
        analytic = {k: t.grad.copy() for k, t in inputs.items()}

        coords = [(k, i) for k, v in values.items() for i in range(v.size)]
        if len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]

        def loss_at() -> float:
            return fn({k: Tensor(v) for k, v in values.items()}).item()

        errors = []
        for key, flat in coords:
            target = values[key].reshape(-1)
            original = target[flat]
            target[flat] = original + step
            plus = loss_at()
            target[flat] = original - step
            minus = loss_at()
            target[flat] = original
            numeric = (plus - minus) / (2 * step)
            exact = analytic[key].reshape(-1)[flat]
            errors.append(abs(exact - numeric) / max(abs(exact), abs(numeric), ABS_FLOOR))

    errors = np.sort(np.asarray(errors))
    robust = errors[max(math.ceil(PASS_FRACTION * len(errors)) - 1, 0)] if len(errors) else 0.0
    result = GradCheckResult(
        name=name,
        n_coords=len(errors),
        max_error=float(errors[-1]) if len(errors) else 0.0,
        robust_error=float(robust),
        fraction_ok=float(np.mean(errors < REL_TOL)) if len(errors) else 1.0,
    )
    logger.debug(f"{name}: max {result.max_error:.2e}, 99% {result.robust_error:.2e}")
    return result


# ============================================================
# Suites
# ============================================================

def _off_kink(values: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Move values at least margin away from 0 so a step cannot cross the relu kink."""
    return np.where(values >= 0, values + margin, values - margin)


def primitive_checks(seed: int) -> dict[str, tuple[LossFn, dict]]:
    """Scalar-valued wrappers around every primitive with random inputs."""
    rng = stream(seed, "gradcheck", "inputs")
    n = rng.normal
    keep = np.array([True, False, True])
    targets = rng.integers(0, 5, size=6)
    ignore = np.array([False, True, False, False, True, False])

    return {
        "add": (lambda t: _weighted_sum(add(t["a"], t["b"]), 1), {"a": n(size=(3, 4)), "b": n(size=(3, 4))}),
        "mul": (lambda t: _weighted_sum(mul(t["a"], t["b"]), 2), {"a": n(size=(2, 3, 4)), "b": n(size=(2, 3, 4))}),
        "scale": (lambda t: _weighted_sum(scale(t["a"], -1.7), 3), {"a": n(size=(5,))}),
        "sum": (lambda t: sum_all(mul(t["a"], t["a"])), {"a": n(size=(2, 2, 3))}),
        "mean": (lambda t: mean_all(mul(t["a"], t["a"])), {"a": n(size=(4, 3))}),
        "relu": (lambda t: _weighted_sum(relu(t["a"]), 4), {"a": _off_kink(n(size=(3, 5)))}),
        "reshape": (lambda t: _weighted_sum(reshape(t["a"], [6, 2]), 5), {"a": n(size=(3, 4))}),
        "channels_last": (lambda t: _weighted_sum(channels_last(t["a"]), 6), {"a": n(size=(3, 2, 2))}),
        "masked_fill": (lambda t: _weighted_sum(masked_fill_channels(t["a"], keep, -1e9), 7),
                        {"a": n(size=(3, 2, 2))}),
        "conv2d": (lambda t: _weighted_sum(conv2d(t["x"], t["k"], t["b"], 1), 8),
                   {"x": n(size=(2, 5, 5)), "k": n(size=(3, 2, 3, 3)), "b": n(size=(3,))}),
        "conv2d_1x1": (lambda t: _weighted_sum(conv2d(t["x"], t["k"], t["b"], 0), 9),
                       {"x": n(size=(3, 4, 4)), "k": n(size=(2, 3, 1, 1)), "b": n(size=(2,))}),
        "avg_pool2": (lambda t: _weighted_sum(avg_pool2(t["x"]), 10), {"x": n(size=(2, 4, 6))}),
        "upsample2": (lambda t: _weighted_sum(upsample2(t["x"]), 11), {"x": n(size=(2, 3, 4))}),
        "global_avg_pool": (lambda t: _weighted_sum(global_avg_pool(t["x"]), 12), {"x": n(size=(3, 4, 4))}),
        "linear": (lambda t: _weighted_sum(linear(t["x"], t["w"], t["b"]), 13),
                   {"x": n(size=(4,)), "w": n(size=(3, 4)), "b": n(size=(3,))}),
        "linear_batch": (lambda t: _weighted_sum(linear(t["x"], t["w"], t["b"]), 14),
                         {"x": n(size=(5, 4)), "w": n(size=(3, 4)), "b": n(size=(3,))}),
        "channel_dropout": (
            lambda t: _weighted_sum(channel_dropout(t["x"], 0.5, np.random.default_rng(seed), True), 15),
            {"x": n(size=(6, 3, 3))},
        ),
        "cross_entropy": (lambda t: softmax_cross_entropy(t["z"], targets, ignore), {"z": n(size=(6, 5))}),
        "focal": (lambda t: focal_loss(t["z"], targets, 2.0, ignore), {"z": n(size=(6, 5))}),
    }


def network_check(seed: int) -> tuple[LossFn, dict]:
    """Full multi-task forward, including the perturbed path, through a combined loss."""
    config = NetConfig(widths=(4, 6, 8), downsample_blocks=(0, 1))
    rng = stream(seed, "gradcheck", "network")
    image = rng.random((1, 8, 8))
    seg_target = rng.integers(0, N_SEG_CLASSES, size=64)
    chd_target = [int(rng.integers(0, N_CHD_CLASSES))]
    view_target = [int(rng.integers(0, N_VIEWS))]
    with precision(np.float64):
        net = MultiTaskNet(config, seed=seed)
    arrays = {name: p.data for name, p in net.named_parameters()}

    def loss(tensors: dict) -> Tensor:
        net.params = dict(tensors)
        out = net.forward(Tensor(image), training=True, fp_rate=0.5, rng=np.random.default_rng(seed))
        terms = [
            softmax_cross_entropy(channels_last(out.seg), seg_target),
            scale(focal_loss(channels_last(out.seg_fp), seg_target, 2.0), 0.3),
            scale(softmax_cross_entropy(out.chd, chd_target), 0.8),
            softmax_cross_entropy(out.view, view_target),
        ]
        total = terms[0]
        for term in terms[1:]:
            total = add(total, term)
        return total

    return loss, arrays


def run_gradcheck(seed: int, max_coords: int = MAX_COORDS) -> list[GradCheckResult]:
    """Check every primitive and the full network for one seed."""
    rng = stream(seed, "gradcheck", "coords")
    results = []
    for name, (fn, arrays) in primitive_checks(seed).items():
        results.append(check_gradients(name, fn, arrays, rng, max_coords))
    fn, arrays = network_check(seed)
    results.append(check_gradients("network", fn, arrays, rng, max_coords))

    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"Gradient check passed for {len(results)} checks (seed {seed})")
    return results

"""
Minimal reverse-mode automatic differentiation over dense tensors.

Tensors wrap numpy arrays of rank 1..4. Every differentiable operation
records a Node holding its inputs and a backward closure; node ids come
from a global counter, so sorting by id is a valid topological order.
Batches are handled by the caller with explicit loops.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import (
    ContractError,
    DimensionError,
    NumericalError,
    ParameterError,
    TargetIndexError,
)

logger = logging.getLogger(__name__)

MAX_RANK = 4

_state = threading.local()
_node_ids = itertools.count()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Temporarily change the storage dtype for newly created tensors.

    Used by the finite-difference checker to evaluate graphs in float64.
    """
    previous = _dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


@dataclass
class Node:
    """One recorded operation: kind, inputs and the gradient closure."""
    id: int
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    Dense tensor with an optional gradient buffer.

    Attributes:
        data: numpy array (rank 1..4) in the active precision
        requires_grad: whether gradients flow into this tensor
        grad: same-shape buffer, present iff requires_grad
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node: Optional[Node] = None):
        arr = np.array(data, dtype=_dtype(), copy=True) if _node is None else np.asarray(data, dtype=_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"Tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if arr.size == 0:
            raise DimensionError("Tensor dims must be positive")
        if not np.all(np.isfinite(arr)):
            op = _node.op if _node is not None else "leaf"
            raise NumericalError(f"Non-finite value produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._node = _node

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def set_requires_grad(self, flag: bool) -> None:
        """Toggle gradient tracking on a leaf; the grad buffer follows the flag."""
        self.requires_grad = bool(flag)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Wrap an op result, recording a node only when some input needs gradients."""
    needs_grad = any(t.requires_grad for t in inputs)
    node = Node(next(_node_ids), op, tuple(inputs), backward_fn) if needs_grad else None
    return Tensor(data, requires_grad=needs_grad, _node=node)


# ============================================================
# Graph and backward
# ============================================================

class Graph:
    """
    Ordered node list reachable from an output tensor.

    Order is ascending node id, so every node's inputs precede it.
    """

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.id)
        return cls(found)

    def __len__(self) -> int:
        return len(self.tensors)


def backward(loss: Tensor) -> None:
    """
    Populate gradients of every requires_grad leaf reachable from loss.

    Leaf gradients accumulate across calls; callers zero them between steps.

    Raises:
        ContractError: if loss is not a scalar
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad += 1.0
        return

    graph = Graph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for t in reversed(graph.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = t.grad + g if t.grad is not None else g
        for inp, gi in zip(t._node.inputs, t._node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad += gi.astype(inp.data.dtype, copy=False)
            else:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi


# ============================================================
# Elementwise and reduction ops
# ============================================================

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: dims {a.dims} and {b.dims} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shape tensors."""
    if not terms:
        raise ContractError("add_n needs at least one term")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


def sum_all(a: Tensor) -> Tensor:
    value = np.sum(a.data, dtype=np.float64)
    return _make(np.array([value]), (a,), "sum", lambda g: (np.full_like(a.data, g[0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    value = np.sum(a.data, dtype=np.float64) / n
    return _make(np.array([value]), (a,), "mean", lambda g: (np.full_like(a.data, g[0] / n),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _make(np.where(positive, a.data, 0), (a,), "relu", lambda g: (g * positive,))


def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    original = a.data.shape
    try:
        out = a.data.reshape(tuple(dims))
    except ValueError as e:
        raise DimensionError(f"reshape {list(original)} -> {list(dims)}: {e}")
    return _make(out, (a,), "reshape", lambda g: (g.reshape(original),))


def channels_last(a: Tensor) -> Tensor:
    """Flatten C x H x W logits into (H*W) x C rows for per-pixel losses."""
    if a.data.ndim != 3:
        raise DimensionError(f"channels_last expects CxHxW, got {a.dims}")
    c, h, w = a.data.shape
    out = a.data.reshape(c, h * w).T
    return _make(out, (a,), "channels_last", lambda g: (g.T.reshape(c, h, w),))


def masked_fill_channels(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace channels where keep is False by a constant; gradient is blocked there."""
    keep = np.asarray(keep, dtype=bool)
    if a.data.ndim < 1 or keep.shape != (a.data.shape[0],):
        raise DimensionError(f"channel mask of length {keep.shape} does not match dims {a.dims}")
    shape = (-1,) + (1,) * (a.data.ndim - 1)
    keep_b = keep.reshape(shape)
    out = np.where(keep_b, a.data, value)
    return _make(out, (a,), "masked_fill", lambda g: (g * keep_b,))


# ============================================================
# Convolutional network primitives
# ============================================================

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """
    Shape-preserving 2D cross-correlation plus bias.

    Args:
        x: C x H x W input
        kernel: O x C x K x K weights, K odd
        bias: length-O bias
        padding: must equal (K - 1) / 2

    Returns:
        O x H x W output
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise DimensionError(f"conv2d: bad ranks input {x.dims}, kernel {kernel.dims}, bias {bias.dims}")
    c, h, w = x.data.shape
    o, kc, kh, kw = kernel.data.shape
    if kc != c or kh != kw or kh % 2 == 0 or bias.data.shape[0] != o:
        raise DimensionError(f"conv2d: kernel {kernel.dims} incompatible with input {x.dims} / bias {bias.dims}")
    if padding != (kh - 1) // 2:
        raise DimensionError(f"conv2d: padding {padding} is not shape-preserving for K={kh}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # C,H,W,K,K
    out = np.tensordot(windows, kernel.data, axes=([0, 3, 4], [1, 2, 3]))  # H,W,O
    out = np.moveaxis(out, -1, 0) + bias.data[:, None, None]

    def backward_fn(g):
        g_kernel = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        g_bias = g.sum(axis=(1, 2))
        gp = np.pad(g, ((0, 0), (p, p), (p, p)))
        g_windows = sliding_window_view(gp, (kh, kw), axis=(1, 2))  # O,H,W,K,K
        flipped = kernel.data[:, :, ::-1, ::-1]
        g_x = np.moveaxis(np.tensordot(g_windows, flipped, axes=([0, 3, 4], [0, 2, 3])), -1, 0)
        return g_x, g_kernel, g_bias

    return _make(out, (x, kernel, bias), "conv2d", backward_fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {x.dims}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,)

    return _make(out, (x,), "avg_pool2", backward_fn)


@lru_cache(maxsize=32)
def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n x n) interpolation matrix for x2 bilinear upsampling, half-pixel centres."""
    mat = np.zeros((2 * n, n), dtype=np.float64)
    for out_idx in range(2 * n):
        src = min(max((out_idx + 0.5) / 2.0 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        mat[out_idx, i0] += 1.0 - frac
        mat[out_idx, i1] += frac
    return mat


def upsample2(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of a C x H x W tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample2 expects CxHxW, got {x.dims}")
    _, h, w = x.data.shape
    uh = _bilinear_matrix(h).astype(x.data.dtype)
    uw = _bilinear_matrix(w).astype(x.data.dtype)
    out = np.einsum("ij,cjk,lk->cil", uh, x.data, uw)
    return _make(out, (x,), "upsample2", lambda g: (np.einsum("ij,cil,lk->cjk", uh, g, uw),))


def global_avg_pool(x: Tensor) -> Tensor:
    """C x H x W -> length-C channel means."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects CxHxW, got {x.dims}")
    c, h, w = x.data.shape
    out = x.data.mean(axis=(1, 2))
    return _make(out, (x,), "global_avg_pool", lambda g: (np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Affine map y = x W^T + b for a single vector (D) or a batch (N x D).
    """
    if weight.data.ndim != 2 or bias.data.ndim != 1 or weight.data.shape[0] != bias.data.shape[0]:
        raise DimensionError(f"linear: weight {weight.dims} / bias {bias.dims} mismatch")
    if x.data.shape[-1] != weight.data.shape[1] or x.data.ndim not in (1, 2):
        raise DimensionError(f"linear: input {x.dims} incompatible with weight {weight.dims}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        if x.data.ndim == 1:
            return g @ weight.data, np.outer(g, x.data), g
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), "linear", backward_fn)


def channel_dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """
    Inverted channel dropout: whole channels zeroed with probability rate.

    Survivors are scaled by 1 / (1 - rate); evaluation mode is the identity.

    Raises:
        ParameterError: if rate is outside [0, 1)
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    channels = x.data.shape[0]
    keep = rng.random(channels) >= rate
    factors = (keep / (1.0 - rate)).astype(x.data.dtype)
    shape = (-1,) + (1,) * (x.data.ndim - 1)
    factors = factors.reshape(shape)
    return _make(x.data * factors, (x,), "channel_dropout", lambda g: (g * factors,))


# ============================================================
# Losses
# ============================================================

def _prepare_targets(logits: Tensor, targets, ignore_mask, op: str):
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2:
        raise DimensionError(f"{op}: logits must be N x K, got {logits.dims}")
    n, k = z.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{op}: {targets.shape[0]} targets for {n} rows")
    if ignore_mask is None:
        valid = np.ones(n, dtype=bool)
    else:
        valid = ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
        if valid.shape[0] != n:
            raise DimensionError(f"{op}: ignore mask length {valid.shape[0]} for {n} rows")
    chosen = targets[valid]
    if chosen.size and (chosen.min() < 0 or chosen.max() >= k):
        raise TargetIndexError(f"{op}: target outside [0, {k})")
    return z.astype(np.float64), targets, valid


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """
    Mean negative log-softmax over unignored rows.

    Args:
        logits: N x K (or length-K) tensor
        targets: N class indices
        ignore_mask: N booleans, True rows are excluded

    Returns:
        Scalar tensor; exactly 0 when every row is ignored.
    """
    return focal_loss(logits, targets, 0.0, ignore_mask, _op="cross_entropy")


def focal_loss(logits: Tensor, targets, gamma: float, ignore_mask=None, _op: str = "focal") -> Tensor:
    """
    Mean of (1 - p_t)^gamma * (-log p_t) over unignored rows.

    Raises:
        ParameterError: if gamma is negative
        TargetIndexError: if an unignored target is outside [0, K)
    """
    if gamma < 0:
        raise ParameterError(f"focal gamma must be >= 0, got {gamma}")
    z, targets, valid = _prepare_targets(logits, targets, ignore_mask, _op)
    count = int(valid.sum())
    if count == 0:
        return Tensor(0.0)

    rows = np.nonzero(valid)[0]
    logp = _log_softmax(z[rows])
    picked = targets[rows]
    logp_t = logp[np.arange(count), picked]
    p_t = np.exp(logp_t)
    one_minus = np.clip(1.0 - p_t, 0.0, 1.0)
    nll = -logp_t
    modulator = one_minus ** gamma if gamma > 0 else np.ones_like(p_t)
    value = float(np.sum(modulator * nll) / count)

    def backward_fn(g):
        probs = np.exp(logp)
        delta = probs.copy()
        delta[np.arange(count), picked] -= 1.0
        if gamma > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                extra = np.where(one_minus > 0, gamma * p_t * nll * one_minus ** (gamma - 1.0), 0.0)
            coeff = modulator + extra
        else:
            coeff = np.ones_like(p_t)
        grad_rows = delta * coeff[:, None] * (g[0] / count)
        full = np.zeros_like(z)
        full[rows] = grad_rows
        return (full.reshape(logits.data.shape).astype(logits.data.dtype),)

    return _make(np.array([value]), (logits,), _op, backward_fn)


def softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax on a plain array (no graph)."""
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return e / e.sum(axis=axis, keepdims=True)

"""
Prototype-based filtering of CHD pseudo-labels and the frozen-embedding probe.

The embedder is an injectable dependency: any object with an `embed`
method returning a unit-norm vector works. The built-in StubEmbedder is a
seeded random projection; CachedEmbedder serves vectors computed offline
by a real foundation model, keyed by sample id.
"""

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from src.errors import ConfigurationError, DataError, DimensionError, ParseError
from src.models.sample import N_CHD_CLASSES, Sample
from src.optim import OptimState, adamw_step
from src.tensorcore import Tensor, linear, softmax_cross_entropy
from src.utils.seeding import stream

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-8
STUB_GRID = 16


# ============================================================
# Embedders
# ============================================================

class EmbedderProtocol(Protocol):
    """Anything that maps an image (and optionally its id) to a unit vector."""

    dim: int

    def embed(self, image: np.ndarray, sample_id: Optional[str] = None) -> np.ndarray:
        ...


def _normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm < DEGENERATE_NORM:
        out = np.zeros_like(vector)
        out[0] = 1.0
        return out
    return vector / norm


def area_downsample(image: np.ndarray, grid: int = STUB_GRID) -> np.ndarray:
    """Block-average a H x W (or 1 x H x W) image onto a grid x grid canvas."""
    plane = image[0] if image.ndim == 3 else image
    h, w = plane.shape
    if h % grid or w % grid:
        raise DimensionError(f"image {plane.shape} is not divisible into a {grid}x{grid} grid")
    return plane.reshape(grid, h // grid, grid, w // grid).mean(axis=(1, 3))


@dataclass
class StubEmbedder:
    """
    Seeded random projection of a 16 x 16 area-downsampled, zero-mean image.

    Attributes:
        seed: projection seed
        dim: output dimension D
    """
    seed: int = 0
    dim: int = 64
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = stream(self.seed, "stub-embedder")
        self.projection = rng.normal(0.0, 1.0, size=(self.dim, STUB_GRID * STUB_GRID)) / np.sqrt(self.dim)

    def embed(self, image: np.ndarray, sample_id: Optional[str] = None) -> np.ndarray:
        small = area_downsample(np.asarray(image, dtype=np.float64))
        centred = (small - small.mean()).reshape(-1)
        return _normalize(self.projection @ centred)


@dataclass
class CachedEmbedder:
    """Serves embeddings read from an embedding cache file."""
    vectors: dict
    dim: int

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "CachedEmbedder":
        vectors = read_embedding_cache(path)
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) != 1:
            raise ParseError(path, 0, f"embedding cache mixes dimensions {sorted(dims)}")
        return cls(vectors=vectors, dim=dims.pop())

    def embed(self, image: np.ndarray, sample_id: Optional[str] = None) -> np.ndarray:
        if sample_id is None or sample_id not in self.vectors:
            raise DataError(f"no cached embedding for sample '{sample_id}'")
        return _normalize(self.vectors[sample_id].astype(np.float64))


def build_embedder(selection: str, seed: int, dim: int) -> EmbedderProtocol:
    """
    Create the embedder named by a config value: "stub" or "cache:<path>".

    Raises:
        ConfigurationError: for unknown or test-only selections
    """
    if selection == "stub":
        return StubEmbedder(seed=seed, dim=dim)
    if selection.startswith("cache:"):
        return CachedEmbedder.from_file(selection[len("cache:"):])
    if selection.startswith("oracle"):
        raise ConfigurationError("the oracle embedder is a test utility and cannot be used for training")
    raise ConfigurationError(f"unknown embedder '{selection}'")


def write_embedding_cache(path: Union[str, Path], vectors: dict) -> None:
    """
    Write records: u16 id length, UTF-8 id, u32 D, then D little-endian float32.
    """
    chunks = []
    for sample_id, vector in vectors.items():
        encoded = sample_id.encode("utf-8")
        vec = np.asarray(vector, dtype="<f4").reshape(-1)
        chunks.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<I", vec.shape[0]) + vec.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_embedding_cache(path: Union[str, Path]) -> dict:
    """
    Read an embedding cache file.

    Raises:
        ParseError: on truncated records
    """
    raw = Path(path).read_bytes()
    vectors: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise ParseError(path, pos, "truncated id length")
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + n + 4 > len(raw):
            raise ParseError(path, pos, "truncated id or dimension")
        sample_id = raw[pos:pos + n].decode("utf-8")
        pos += n
        (d,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if d == 0 or pos + 4 * d > len(raw):
            raise ParseError(path, pos, f"record '{sample_id}' declares {d} floats beyond end of file")
        vectors[sample_id] = np.frombuffer(raw, dtype="<f4", count=d, offset=pos).astype(np.float32)
        pos += 4 * d
    return vectors


# ============================================================
# Prototypes and filtering
# ============================================================

class RejectReason(Enum):
    BELOW_THRESHOLD = "below-threshold"
    PROTOTYPE_MISMATCH = "prototype-mismatch"
    CLASS_ABSENT = "class-absent"


@dataclass
class PrototypeBank:
    """
    Per-class unit-norm mean embeddings.

    Attributes:
        vectors: n_classes x D; rows of absent classes are zero
        present: True where a class has a usable prototype
        counts: members per class
        degenerate: classes whose members cancel to a zero mean
    """
    vectors: np.ndarray
    present: np.ndarray
    counts: np.ndarray
    degenerate: frozenset = frozenset()

    @property
    def n_present(self) -> int:
        return int(self.present.sum())

    def cosines(self, embedding: np.ndarray) -> np.ndarray:
        """Cosine to each prototype; absent classes get -inf."""
        unit = np.asarray(embedding, dtype=np.float64)
        norm = np.linalg.norm(unit)
        unit = unit / norm if norm > 0 else unit
        cos = self.vectors @ unit
        return np.where(self.present, cos, -np.inf)


@dataclass
class FilterVerdict:
    """Outcome of prototype filtering for one pseudo-label."""
    accepted: bool
    cosine: float
    reason: Optional[RejectReason] = None


def build_prototypes(embeddings: np.ndarray, labels: Sequence[int], n_classes: int = N_CHD_CLASSES) -> PrototypeBank:
    """
    Class-wise mean embedding, renormalised to unit length.

    Raises:
        ConfigurationError: for empty input
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ConfigurationError("prototype bank needs at least one embedding")
    if labels.shape[0] != embeddings.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {embeddings.shape[0]} embeddings")

    dim = embeddings.shape[1]
    vectors = np.zeros((n_classes, dim))
    present = np.zeros(n_classes, dtype=bool)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    degenerate = set()
    for c in range(n_classes):
        if counts[c] == 0:
            continue
        mean = embeddings[labels == c].sum(axis=0) / counts[c]
        norm = np.linalg.norm(mean)
        if norm < DEGENERATE_NORM:
            degenerate.add(c)
            logger.warning(f"Prototype for class {c} is degenerate (zero mean); marking absent")
            continue
        vectors[c] = mean / norm
        present[c] = True

    return PrototypeBank(vectors=vectors, present=present, counts=counts, degenerate=frozenset(degenerate))


def filter_pseudo(
    embedding: np.ndarray,
    pseudo_class: int,
    bank: PrototypeBank,
    theta_cos: float,
    require_argmax: bool = True,
) -> FilterVerdict:
    """
    Accept a pseudo-label iff its prototype cosine reaches theta_cos and,
    when require_argmax, that prototype is also the most similar one.
    """
    if not 0 <= pseudo_class < bank.vectors.shape[0]:
        raise ConfigurationError(f"pseudo class {pseudo_class} outside the prototype bank")
    if not bank.present[pseudo_class]:
        return FilterVerdict(False, float("nan"), RejectReason.CLASS_ABSENT)

    cos = bank.cosines(embedding)
    own = float(cos[pseudo_class])
    if own < theta_cos:
        return FilterVerdict(False, own, RejectReason.BELOW_THRESHOLD)
    if require_argmax and int(np.argmax(cos)) != pseudo_class:
        return FilterVerdict(False, own, RejectReason.PROTOTYPE_MISMATCH)
    return FilterVerdict(True, own)


# ============================================================
# Probe head
# ============================================================

@dataclass
class ProbeHead:
    """Linear D -> 7 classifier over frozen embeddings."""
    weight: np.ndarray
    bias: np.ndarray

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return np.asarray(embeddings, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(embeddings)), axis=1)


def fit_probe(
    embeddings: np.ndarray,
    labels: Sequence[int],
    epochs: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
    weight_decay: float = 0.0,
    n_classes: int = N_CHD_CLASSES,
) -> ProbeHead:
    """Full-batch cross-entropy training of a linear head with AdamW."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ConfigurationError("probe training needs at least one labeled embedding")
    rng = stream(seed, "probe-init")
    dim = embeddings.shape[1]
    params = {
        "probe.weight": Tensor(rng.normal(0.0, np.sqrt(1.0 / dim), size=(n_classes, dim)), requires_grad=True),
        "probe.bias": Tensor(np.zeros(n_classes), requires_grad=True),
    }
    inputs = Tensor(embeddings)
    targets = np.asarray(labels, dtype=np.int64)
    state = OptimState()

    for epoch in range(epochs):
        for p in params.values():
            p.zero_grad()
        loss = softmax_cross_entropy(linear(inputs, params["probe.weight"], params["probe.bias"]), targets)
        loss.backward()
        adamw_step(params, state, lr, weight_decay=weight_decay)
        if epoch == epochs - 1:
            logger.info(f"Probe final loss: {loss.item():.4f}")

    return ProbeHead(weight=params["probe.weight"].data.astype(np.float64),
                     bias=params["probe.bias"].data.astype(np.float64))


def embed_samples(embedder: EmbedderProtocol, samples: Sequence[Sample]) -> np.ndarray:
    """Stack embeddings of raw (unaugmented) samples."""
    return np.stack([embedder.embed(s.image, s.id) for s in samples])


def train_probe(
    embedder: EmbedderProtocol,
    samples: Sequence[Sample],
    epochs: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
) -> ProbeHead:
    """
    Train the probe on labeled samples through a frozen embedder.

    Raises:
        ConfigurationError: if no labeled sample is given
    """
    labeled = [s for s in samples if s.labeled and s.chd is not None]
    if not labeled:
        raise ConfigurationError("probe training needs a non-empty labeled set")
    embeddings = embed_samples(embedder, labeled)
    return fit_probe(embeddings, [s.chd for s in labeled], epochs=epochs, lr=lr, seed=seed)

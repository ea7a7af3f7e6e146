"""Entities, descriptor encoders and bag/vector embeddings.

A descriptor is one textual or visual item describing an entity. The text
encoder is a token-embedding table with mean pooling; the visual encoder is
a single linear layer over pre-computed feature vectors. Both feed a shared
adaptive max-pool projection down to the working dimension D, then the
shared self-attention block turns the bag of pre-embeddings into the bag
embedding. Datapoints and labels use the same encoders and the same
self-attention parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import binio
from .attention import AttentionParams, attend
from .tensor import (
    DegenerateInputError,
    DimensionError,
    NORM_FLOOR,
    Tensor,
    adaptive_max_pool,
    gather_rows,
    l2_normalize,
    matmul,
    mean_rows,
    pool_segments,
    stack_rows,
    sum_rows,
)

OOV_TOKEN = 0

PREEMBED_MAGIC = b"MXCPREMB"
PREEMBED_VERSION = 1


class Modality(IntEnum):
    TEXT = 0
    VISUAL = 1


@dataclass(frozen=True)
class Descriptor:
    """One textual (token-id sequence) or visual (feature vector) item."""

    modality: Modality
    tokens: tuple[int, ...] | None = None
    features: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.modality == Modality.TEXT:
            if not self.tokens:
                raise ValueError("text descriptor must have at least one token")
            if self.features is not None:
                raise ValueError("text descriptor cannot carry features")
        else:
            if self.features is None or np.asarray(self.features).ndim != 1:
                raise ValueError("visual descriptor must carry a 1-D feature vector")
            if self.tokens is not None:
                raise ValueError("visual descriptor cannot carry tokens")


@dataclass(frozen=True)
class Entity:
    """A datapoint or label: an identity plus a non-empty descriptor bag."""

    uid: str
    descriptors: tuple[Descriptor, ...]

    def __post_init__(self) -> None:
        if len(self.descriptors) == 0:
            raise ValueError(f"entity {self.uid!r} has no descriptors")

    @property
    def size(self) -> int:
        return len(self.descriptors)


@dataclass
class EncoderParams:
    """Trainable encoder state shared by datapoints and labels.

    ``token_table`` row 0 is the reserved out-of-vocabulary embedding; any
    token id outside [0, vocab) is mapped there.
    """

    token_table: Tensor  # (vocab, d_native)
    visual_w: Tensor  # (visual_width, d_native)
    visual_b: Tensor  # (d_native,)
    out_dim: int

    def __post_init__(self) -> None:
        if self.token_table.ndim != 2 or self.visual_w.ndim != 2:
            raise DimensionError("encoder tables must be 2-D")
        if self.visual_b.shape != (self.d_native,):
            raise DimensionError("visual bias width must match d_native")
        if self.visual_w.shape[1] != self.d_native:
            raise DimensionError("visual map must produce d_native columns")
        if not 1 <= self.out_dim <= self.d_native:
            raise DimensionError("out_dim must satisfy 1 <= D <= d_native")

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    @property
    def d_native(self) -> int:
        return self.token_table.shape[1]

    @property
    def visual_width(self) -> int:
        return self.visual_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "token_table": self.token_table,
            "visual_w": self.visual_w,
            "visual_b": self.visual_b,
        }


def init_encoder_params(
    rng: np.random.Generator,
    vocab_size: int,
    d_native: int,
    out_dim: int,
    visual_width: int,
) -> EncoderParams:
    """Fresh trainable encoder state.

    Token rows get small Gaussian init; the visual map gets Xavier-uniform
    init with a zero bias.
    """
    table = 0.1 * rng.standard_normal((vocab_size, d_native))
    bound = np.sqrt(6.0 / (visual_width + d_native))
    w = rng.uniform(-bound, bound, size=(visual_width, d_native))
    return EncoderParams(
        token_table=Tensor.leaf(table),
        visual_w=Tensor.leaf(w),
        visual_b=Tensor.leaf(np.zeros(d_native)),
        out_dim=out_dim,
    )


def pre_embed_descriptor(d: Descriptor, p: EncoderParams) -> Tensor:
    """Descriptor to its d_native-dim representation, before projection."""
    if d.modality == Modality.TEXT:
        ids = [t if 0 <= t < p.vocab_size else OOV_TOKEN for t in d.tokens]
        return mean_rows(gather_rows(p.token_table, ids))
    feats = np.asarray(d.features, dtype=np.float64)
    if feats.shape != (p.visual_width,):
        raise DimensionError(
            f"visual descriptor width {feats.shape} != configured {p.visual_width}"
        )
    return matmul(Tensor.leaf(feats), p.visual_w) + p.visual_b


def encode_descriptor(d: Descriptor, p: EncoderParams) -> Tensor:
    """Descriptor to a D-dim pre-embedding (modality encoder + projection)."""
    return adaptive_max_pool(pre_embed_descriptor(d, p), p.out_dim)


def embed_bag(
    e: Entity,
    p: EncoderParams,
    a_s: AttentionParams,
    *,
    bypass_self_attention: bool = False,
) -> Tensor:
    """Entity to its m×D bag embedding via the shared self-attention block.

    With the self-attention ablation the pre-embedding bag is returned
    unchanged.
    """
    pre = stack_rows([encode_descriptor(d, p) for d in e.descriptors])
    if bypass_self_attention:
        return pre
    return attend(pre, pre, a_s)


def embed_vector(bag: Tensor) -> Tensor:
    """Aggregate a bag embedding into a unit vector: ``𝒩(1ᵀX)``."""
    return l2_normalize(sum_rows(bag))


def embed_entity(
    e: Entity,
    p: EncoderParams,
    a_s: AttentionParams,
    *,
    bypass_self_attention: bool = False,
) -> tuple[Tensor, Tensor]:
    """Convenience: (bag embedding, unit vector embedding)."""
    bag = embed_bag(e, p, a_s, bypass_self_attention=bypass_self_attention)
    return bag, embed_vector(bag)


# ---------------------------------------------------------------------------
# Bulk no-gradient embedding. Used wherever large entity sets are embedded
# with frozen parameters (mining caches, retrieval, index builds). Must stay
# numerically identical to the tensor path; tests assert agreement.


def embed_all(
    entities: Sequence[Entity],
    p: EncoderParams,
    a_s: AttentionParams,
    *,
    bypass_self_attention: bool = False,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Bag and vector embeddings for many entities, as plain arrays.

    Returns ``(bags, vectors)`` where ``bags[i]`` is the m_i×D bag of entity
    ``i`` and ``vectors`` is the stacked (n, D) unit-vector matrix. Entities
    are grouped by bag size so the attention arithmetic runs batched.
    """
    n = len(entities)
    d = p.out_dim
    table = p.token_table.data
    vw = p.visual_w.data
    vb = p.visual_b.data
    segs = pool_segments(p.d_native, d)
    seg_starts = np.array([s for s, _ in segs], dtype=np.intp)

    pre_rows: list[np.ndarray] = []
    for e in entities:
        rows = np.empty((e.size, p.d_native))
        for j, desc in enumerate(e.descriptors):
            if desc.modality == Modality.TEXT:
                ids = [t if 0 <= t < p.vocab_size else OOV_TOKEN for t in desc.tokens]
                rows[j] = table[ids].mean(axis=0)
            else:
                feats = np.asarray(desc.features, dtype=np.float64)
                if feats.shape != (p.visual_width,):
                    raise DimensionError(
                        f"visual descriptor width {feats.shape} != configured {p.visual_width}"
                    )
                rows[j] = feats @ vw + vb
        pre_rows.append(rows)

    all_pre = np.concatenate(pre_rows, axis=0)
    pooled = np.maximum.reduceat(all_pre, seg_starts, axis=1)

    offsets = np.zeros(n + 1, dtype=np.intp)
    for i, e in enumerate(entities):
        offsets[i + 1] = offsets[i] + e.size
    bags = [pooled[offsets[i] : offsets[i + 1]] for i in range(n)]

    if not bypass_self_attention:
        bags = _attend_self_batched(bags, a_s)

    vectors = np.empty((n, d))
    for i, bag in enumerate(bags):
        v = bag.sum(axis=0)
        norm = np.linalg.norm(v)
        if norm <= NORM_FLOOR:
            raise DegenerateInputError(
                f"entity {entities[i].uid!r} aggregates to a near-zero vector"
            )
        vectors[i] = v / norm
    return bags, vectors


def _attend_self_batched(bags: list[np.ndarray], a_s: AttentionParams) -> list[np.ndarray]:
    d = a_s.dim
    q, k, v, o = a_s.q.data, a_s.k.data, a_s.v.data, a_s.o.data
    scale = 1.0 / np.sqrt(d)
    by_size: dict[int, list[int]] = {}
    for i, bag in enumerate(bags):
        by_size.setdefault(bag.shape[0], []).append(i)
    out: list[np.ndarray | None] = [None] * len(bags)
    for m, idxs in by_size.items():
        x = np.stack([bags[i] for i in idxs])  # (b, m, d)
        scores = scale * np.matmul(x @ q, np.transpose(x @ k, (0, 2, 1)))
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        w = e / e.sum(axis=2, keepdims=True)
        y = x + np.matmul(w, x @ v) @ o
        for slot, i in enumerate(idxs):
            out[i] = y[slot]
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Pre-embedding cache file: one record per descriptor holding the d_native
# representation produced by the modality encoders under a fixed parameter
# snapshot. Record layout (little-endian): entity id (length-prefixed UTF-8),
# descriptor index u32, modality u8, d_native f64 values.


def write_preembedding_cache(
    fh: BinaryIO, entities: Iterable[Entity], p: EncoderParams
) -> int:
    """Write pre-embedding records for every descriptor; returns the count."""
    entities = list(entities)
    total = sum(e.size for e in entities)
    binio.write_header(fh, PREEMBED_MAGIC, PREEMBED_VERSION)
    binio.write_u32(fh, p.d_native)
    binio.write_u32(fh, total)
    for e in entities:
        for j, desc in enumerate(e.descriptors):
            vec = pre_embed_descriptor(desc, p).data
            binio.write_str(fh, e.uid)
            binio.write_u32(fh, j)
            binio.write_u8(fh, int(desc.modality))
            binio.write_f64_array(fh, vec)
    return total


def read_preembedding_cache(
    fh: BinaryIO,
) -> list[tuple[str, int, Modality, np.ndarray]]:
    """Read all (entity id, descriptor index, modality, vector) records."""
    binio.read_header(fh, PREEMBED_MAGIC, PREEMBED_VERSION)
    d_native = binio.read_u32(fh)
    count = binio.read_u32(fh)
    records = []
    for _ in range(count):
        uid = binio.read_str(fh)
        idx = binio.read_u32(fh)
        modality = Modality(binio.read_u8(fh))
        vec = binio.read_f64_array(fh, d_native)
        records.append((uid, idx, modality, vec))
    return records

"""Single-head scaled dot-product attention with a residual connection.

One block definition, instantiated twice with independent parameters: once
as self-attention over an entity's own descriptor bag, once as
cross-attention from a datapoint bag onto a label bag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, matmul, row_softmax, transpose


@dataclass
class AttentionParams:
    """The four D×D transformation matrices of one attention block."""

    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor

    def __post_init__(self) -> None:
        d = self.q.shape[0] if self.q.ndim == 2 else -1
        for name in ("q", "k", "v", "o"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape != (d, d):
                raise DimensionError(f"attention parameter {name} must be {d}x{d}")

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o}


def init_identity(d: int) -> AttentionParams:
    """All four matrices set to the D×D identity."""
    if d < 1:
        raise DimensionError("init_identity: d must be positive")
    return AttentionParams(
        q=Tensor.leaf(np.eye(d)),
        k=Tensor.leaf(np.eye(d)),
        v=Tensor.leaf(np.eye(d)),
        o=Tensor.leaf(np.eye(d)),
    )


def attend(x: Tensor, z: Tensor, p: AttentionParams) -> Tensor:
    """``X + softmax((XQ)(ZK)ᵀ/√D)(ZV)O`` for an n×D query bag and k×D context bag.

    The residual makes the O→0 limit an exact passthrough of ``x``, which is
    how the cross-attention bypass semantics are realized.
    """
    d = p.dim
    if x.ndim != 2 or z.ndim != 2 or x.shape[1] != d or z.shape[1] != d:
        raise DimensionError(
            f"attend: bags must have width {d}, got {x.shape} and {z.shape}"
        )
    scores = matmul(matmul(x, p.q), transpose(matmul(z, p.k)))
    weights = row_softmax(scores, 1.0 / math.sqrt(d))
    return x + matmul(matmul(weights, matmul(z, p.v)), p.o)

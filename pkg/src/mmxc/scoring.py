"""Label classifiers, label-adapted datapoint embeddings and score fusion.

The classifier for label l blends the label's unit-vector embedding with a
normalized per-label free vector, weighted by a learnt α_l in [0, 1], and is
re-normalized so classifier scores stay cosine similarities comparable with
the retrieval similarity. The label-adapted datapoint embedding cross-attends
the datapoint bag onto the label bag and aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, attend
from .tensor import (
    DimensionError,
    Tensor,
    add,
    affine,
    concat,
    dot,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    row,
)
from .encoders import embed_vector


@dataclass
class ClassifierBank:
    """Per-label free vectors η (L×D) and blend weights α (L×1)."""

    eta: Tensor
    alpha: Tensor

    def __post_init__(self) -> None:
        if self.eta.ndim != 2 or self.alpha.shape != (self.eta.shape[0], 1):
            raise DimensionError("bank: eta must be (L, D) and alpha (L, 1)")

    @property
    def n_labels(self) -> int:
        return self.eta.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"eta": self.eta, "alpha": self.alpha}


def init_bank(n_labels: int, d: int) -> ClassifierBank:
    """Bank as it exists before fine-tuning: η = 0, α = 0 for every label."""
    return ClassifierBank(
        eta=Tensor.leaf(np.zeros((n_labels, d))),
        alpha=Tensor.leaf(np.zeros((n_labels, 1))),
    )


@dataclass
class ConcatParams:
    """Two feed-forward layers (2D→2D→D) for the concatenation scorer variant."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_concat_params(rng: np.random.Generator, d: int) -> ConcatParams:
    def xavier(n_in: int, n_out: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_in, n_out))

    return ConcatParams(
        w1=Tensor.leaf(xavier(2 * d, 2 * d)),
        b1=Tensor.leaf(np.zeros(2 * d)),
        w2=Tensor.leaf(xavier(2 * d, d)),
        b2=Tensor.leaf(np.zeros(d)),
    )


@dataclass(frozen=True)
class ScoreTriple:
    """Similarity score a, classifier score c and fused score s for one label."""

    label: int
    a: float
    c: float
    s: float


def classifier(
    label: int, z_hat: Tensor, bank: ClassifierBank, *, alpha_one: bool = False
) -> Tensor:
    """Classifier vector ``w_l = 𝒩(α_l·ẑ_l + (1−α_l)·𝒩(η_l))``.

    Under the α=1 variant the label embedding itself is the classifier and
    η_l is never touched.
    """
    if alpha_one:
        return z_hat
    alpha = reshape(row(bank.alpha, label), ())
    eta_hat = l2_normalize(row(bank.eta, label))
    blend = add(mul(alpha, z_hat), mul(affine(alpha, -1.0, 1.0), eta_hat))
    return l2_normalize(blend)


def adapt(
    x_bag: Tensor,
    z_bag: Tensor,
    a_c: AttentionParams,
    *,
    bypass: bool = False,
) -> Tensor:
    """Label-adapted datapoint vector: cross-attend, aggregate, normalize.

    With ``bypass`` the cross-attention stage is skipped entirely and the
    plain vector embedding of the datapoint bag is returned.
    """
    if bypass:
        return embed_vector(x_bag)
    return embed_vector(attend(x_bag, z_bag, a_c))


def adapt_concat(x_hat: Tensor, z_hat: Tensor, ff: ConcatParams) -> Tensor:
    """Concatenation variant: ``𝒩(FF₂(relu(FF₁([x̂ ; ẑ]))))``."""
    h = relu(matmul(concat(x_hat, z_hat), ff.w1) + ff.b1)
    return l2_normalize(matmul(h, ff.w2) + ff.b2)


def fuse(c: float, a: float, beta: float) -> float:
    """Linear score fusion ``s = β·c + (1−β)·a``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta * c + (1.0 - beta) * a


def score_label(
    x_bag: Tensor,
    label: int,
    z_bag: Tensor,
    z_hat: Tensor,
    bank: ClassifierBank,
    a_c: AttentionParams,
    *,
    a: float,
    beta: float,
    alpha_one: bool = False,
    bypass_cross_attention: bool = False,
) -> ScoreTriple:
    """Full scoring chain for one (datapoint, label) pair.

    ``a`` is the retrieval similarity supplied by the index (or computed
    externally for labels outside the shortlist).
    """
    w = classifier(label, z_hat, bank, alpha_one=alpha_one)
    x2 = adapt(x_bag, z_bag, a_c, bypass=bypass_cross_attention)
    c = dot(w, x2).item()
    return ScoreTriple(label=label, a=a, c=c, s=fuse(c, a, beta))

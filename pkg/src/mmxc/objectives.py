"""Hard-positive/negative mining and the two training losses.

Mining decisions are made against periodically refreshed embedding caches;
the loss formulas themselves only see the mined index sets plus freshly
computed embeddings, so sampling policy and loss arithmetic stay separable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add_n, affine, dot, relu, sub


@dataclass
class MiningConfig:
    """Sampling sizes, thresholds and margins for both training phases.

    ``no_hard_pos`` disables the positive similarity-threshold filter;
    ``no_hard_neg`` replaces similarity-ranked in-batch negatives with
    uniform ones. The paired flags reproduce the sampling ablations.
    """

    pos_threshold: float = 0.9
    p_size: int = 2
    n_size: int = 3
    margin_pretrain: float = 0.2
    s_size: int = 2
    t_size: int = 12
    margin_finetune: float = 0.5
    no_hard_pos: bool = False
    no_hard_neg: bool = False

    def __post_init__(self) -> None:
        if min(self.p_size, self.n_size, self.s_size, self.t_size) < 1:
            raise ValueError("mining set sizes must be >= 1")
        if not 0.0 < self.pos_threshold <= 1.0:
            raise ValueError("pos_threshold must lie in (0, 1]")
        if self.margin_pretrain <= 0.0 or self.margin_finetune <= 0.0:
            raise ValueError("margins must be positive")


@dataclass
class CostCounters:
    """Per-epoch instrumentation backing the complexity claims."""

    module1_terms: int = 0
    module4_adaptations: int = 0
    index_queries: int = 0
    classifier_evals: int = 0

    def reset(self) -> None:
        self.module1_terms = 0
        self.module4_adaptations = 0
        self.index_queries = 0
        self.classifier_evals = 0


def mine_hard_positives(
    positives: np.ndarray,
    z_hat: np.ndarray,
    x_cache: np.ndarray,
    cfg: MiningConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample up to ``p_size`` hard positives for one label.

    Eligible positives are those whose cached similarity to the label does
    not exceed the threshold (near-saturated pairs give vanishing
    gradients). Sampling is uniform without replacement over the eligible
    set, falling back to all positives when none are eligible. With the
    ``no_hard_pos`` ablation the filter is skipped entirely.
    """
    positives = np.asarray(positives, dtype=np.int64)
    if positives.size == 0:
        return positives
    if cfg.no_hard_pos:
        eligible = positives
    else:
        sims = x_cache[positives] @ z_hat
        eligible = positives[sims <= cfg.pos_threshold]
        if eligible.size == 0:
            eligible = positives
    take = min(cfg.p_size, eligible.size)
    chosen = rng.choice(eligible, size=take, replace=False)
    return np.sort(chosen)


def mine_inbatch_negatives(
    label_positives: np.ndarray,
    other_positives: np.ndarray,
    z_hat: np.ndarray,
    x_cache: np.ndarray,
    cfg: MiningConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pick up to ``n_size`` negatives among other batch labels' positives.

    Candidates are the union of positives chosen for the other labels in
    the mini-batch, minus any datapoint that is also positive for this
    label. Hard mode ranks candidates by cached similarity (ties broken by
    id); the ablation samples uniformly instead.
    """
    candidates = np.setdiff1d(
        np.unique(np.asarray(other_positives, dtype=np.int64)),
        np.asarray(label_positives, dtype=np.int64),
    )
    if candidates.size == 0:
        return candidates
    take = min(cfg.n_size, candidates.size)
    if cfg.no_hard_neg:
        chosen = rng.choice(candidates, size=take, replace=False)
    else:
        sims = x_cache[candidates] @ z_hat
        order = np.lexsort((candidates, -sims))
        chosen = candidates[order[:take]]
    return np.sort(chosen)


def loss_pretrain(
    mined: list[tuple[int, np.ndarray, np.ndarray]],
    z_vecs: dict[int, Tensor],
    x_vecs: dict[int, Tensor],
    margin: float,
    counters: CostCounters | None = None,
) -> tuple[Tensor, int]:
    """Contrastive loss over mined (label, positives, negatives) triples.

    ``Σ_l Σ_{i∈P_l} Σ_{j∈N_l} [⟨ẑ_l, x̂_j⟩ − ⟨ẑ_l, x̂_i⟩ + γ]₊``

    Labels with an empty positive or negative set contribute no terms.
    Returns the loss tensor and the number of hinge terms evaluated.
    """
    terms: list[Tensor] = []
    for label, pos_ids, neg_ids in mined:
        if len(pos_ids) == 0 or len(neg_ids) == 0:
            continue
        z = z_vecs[label]
        pos_sims = [dot(z, x_vecs[int(i)]) for i in pos_ids]
        neg_sims = [dot(z, x_vecs[int(j)]) for j in neg_ids]
        for ps in pos_sims:
            for ns in neg_sims:
                terms.append(relu(affine(sub(ns, ps), 1.0, margin)))
    if counters is not None:
        counters.module1_terms += len(terms)
    if not terms:
        return Tensor(np.zeros(())), 0
    return add_n(terms), len(terms)


def loss_finetune(
    batch: list[tuple[int, np.ndarray, np.ndarray]],
    adapted: dict[tuple[int, int], Tensor],
    classifiers: dict[int, Tensor],
    margin: float,
) -> tuple[Tensor, int]:
    """Cosine embedding loss over (datapoint, positive set, negative set).

    ``Σ_i { Σ_{l∈S_i} (1 − ⟨x̂²ᵢˡ, w_l⟩) + Σ_{k∈T_i} [⟨x̂²ᵢᵏ, w_k⟩ − γ]₊ }``

    ``adapted`` maps (datapoint, label) to the label-adapted datapoint
    vector; ``classifiers`` maps label to w_l. Returns the loss tensor and
    the number of loss terms.
    """
    terms: list[Tensor] = []
    for i, pos_labels, neg_labels in batch:
        for l in pos_labels:
            score = dot(adapted[(i, int(l))], classifiers[int(l)])
            terms.append(affine(score, -1.0, 1.0))
        for k in neg_labels:
            score = dot(adapted[(i, int(k))], classifiers[int(k)])
            terms.append(relu(affine(score, 1.0, -margin)))
    if not terms:
        return Tensor(np.zeros(())), 0
    return add_n(terms), len(terms)


def sample_finetune_sets(
    positives: np.ndarray,
    shortlist_negatives: np.ndarray,
    cfg: MiningConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw the per-datapoint positive and hard-negative label sets.

    Positives come uniformly from the ground truth (not the shortlist);
    negatives uniformly from the shortlist labels that are not positives.
    """
    positives = np.asarray(positives, dtype=np.int64)
    shortlist_negatives = np.asarray(shortlist_negatives, dtype=np.int64)
    s_take = min(cfg.s_size, positives.size)
    t_take = min(cfg.t_size, shortlist_negatives.size)
    s = rng.choice(positives, size=s_take, replace=False) if s_take else positives[:0]
    t = (
        rng.choice(shortlist_negatives, size=t_take, replace=False)
        if t_take
        else shortlist_negatives[:0]
    )
    return np.sort(s), np.sort(t)

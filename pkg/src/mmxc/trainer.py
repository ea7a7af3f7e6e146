"""Four-phase training pipeline, optimizer contract and prediction.

Phase I pre-trains the encoders and self-attention block contrastively over
label-wise batches with the classifiers disabled (α=0) and cross-attention
bypassed. Phase II freezes parameters, recomputes embeddings, builds the
augmented index and persists one shortlist per training datapoint. Phase III
transfers the pre-trained parameters, re-initializes cross-attention to
identity and the free vectors to Xavier with α=0.5. Phase IV fine-tunes
everything over datapoint-wise batches with the cosine embedding loss,
clamping α to [0,1] after every optimizer step. The resulting state is
frozen; prediction embeds a test point, fires a single index query and
rescores only the shortlisted labels.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

from . import binio
from .ann import (
    AugmentedIndex,
    IndexParams,
    MODE_EXACT,
    MODE_HNSW,
    Shortlist,
    build_index,
    build_vec_only_index,
    centroid,
    normalize_rows,
)
from .attention import AttentionParams, init_identity
from .data import GroundTruth
from .encoders import (
    EncoderParams,
    Entity,
    embed_all,
    embed_bag,
    embed_vector,
    init_encoder_params,
)
from .objectives import (
    CostCounters,
    MiningConfig,
    loss_finetune,
    loss_pretrain,
    mine_hard_positives,
    mine_inbatch_negatives,
    sample_finetune_sets,
)
from .scoring import (
    ClassifierBank,
    ConcatParams,
    ScoreTriple,
    adapt,
    adapt_concat,
    classifier,
    fuse,
    init_bank,
    init_concat_params,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MXCCHKPT"
CHECKPOINT_VERSION = 1

PHASES = ("init", "module1", "module2", "module3", "module4", "frozen")


class PhaseOrderError(RuntimeError):
    """A pipeline phase was invoked out of order."""


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite."""


@dataclass
class PipelineConfig:
    """Dimensions, per-phase hyperparameters and variant flags.

    Epoch counts default to desk-scale values; the reference settings
    (module I: 200 epochs / lr 2e-4 / batch 1024, module IV: 20 epochs /
    lr 5e-5 / batch 200, warmup 1000) are reachable through configuration.
    """

    embed_dim: int = 64
    native_dim: int = 256
    m1_epochs: int = 50
    m1_lr: float = 2e-4
    m1_batch: int = 1024
    m4_epochs: int = 10
    m4_lr: float = 5e-5
    m4_batch: int = 200
    warmup_iters: int = 1000
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta: float = 0.7
    shortlist_cap: int = 100
    seed: int = 0
    test_fraction: float = 0.1
    ann_mode: str = "auto"
    hnsw_m: int = 16
    hnsw_ef_construction: int = 200
    hnsw_ef_query: int = 200
    pos_threshold: float = 0.9
    p_size: int = 2
    n_size: int = 3
    margin_pretrain: float = 0.2
    s_size: int = 2
    t_size: int = 12
    margin_finetune: float = 0.5
    no_hard_pos: bool = False
    no_hard_neg: bool = False
    no_self_attention: bool = False
    no_cross_attention: bool = False
    concat_scorer: bool = False
    vec_only_index: bool = False
    alpha_one: bool = False
    log_every: int = 50

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        for name in (
            "embed_dim",
            "native_dim",
            "m1_lr",
            "m1_batch",
            "m4_lr",
            "m4_batch",
            "warmup_iters",
            "shortlist_cap",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.m1_epochs < 0 or self.m4_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.embed_dim > self.native_dim:
            raise ValueError("embed_dim cannot exceed native_dim")
        if self.ann_mode not in ("auto", MODE_EXACT, MODE_HNSW):
            raise ValueError(f"unknown ann_mode {self.ann_mode!r}")

    def mining(self) -> MiningConfig:
        return MiningConfig(
            pos_threshold=self.pos_threshold,
            p_size=self.p_size,
            n_size=self.n_size,
            margin_pretrain=self.margin_pretrain,
            s_size=self.s_size,
            t_size=self.t_size,
            margin_finetune=self.margin_finetune,
            no_hard_pos=self.no_hard_pos,
            no_hard_neg=self.no_hard_neg,
        )

    def index_params(self) -> IndexParams:
        return IndexParams(
            m_graph=self.hnsw_m,
            ef_construction=self.hnsw_ef_construction,
            ef_query=self.hnsw_ef_query,
            seed=self.seed,
        )

    def resolve_ann_mode(self, n_labels: int) -> str:
        if self.ann_mode == "auto":
            return MODE_EXACT if n_labels <= 2000 else MODE_HNSW
        return self.ann_mode


@dataclass
class TrainData:
    """Training-side view: datapoints, the label catalog and relevance."""

    datapoints: list[Entity]
    labels: list[Entity]
    gt: GroundTruth

    def __post_init__(self) -> None:
        if self.gt.n_datapoints != len(self.datapoints) or self.gt.n_labels != len(self.labels):
            raise ValueError("ground truth shape does not match entity lists")


@dataclass
class ModelState:
    """All trainable parameters plus the pipeline phase marker."""

    encoder: EncoderParams
    attn_self: AttentionParams
    attn_cross: AttentionParams
    bank: ClassifierBank
    concat_ff: ConcatParams | None = None
    phase: str = "init"

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self.encoder.tensors().items():
            out[f"encoder.{name}"] = t
        for name, t in self.attn_self.tensors().items():
            out[f"attn_self.{name}"] = t
        for name, t in self.attn_cross.tensors().items():
            out[f"attn_cross.{name}"] = t
        for name, t in self.bank.tensors().items():
            out[f"bank.{name}"] = t
        if self.concat_ff is not None:
            for name, t in self.concat_ff.tensors().items():
                out[f"concat.{name}"] = t
        return out

    def require_phase(self, expected: str, op: str) -> None:
        if self.phase != expected:
            raise PhaseOrderError(
                f"{op} requires phase {expected!r}, state is at {self.phase!r}"
            )


@dataclass
class PhaseLog:
    loss_per_epoch: list[float] = field(default_factory=list)
    terms_per_epoch: list[int] = field(default_factory=list)
    adaptations_per_epoch: list[int] = field(default_factory=list)
    steps: int = 0


def init_state(
    cfg: PipelineConfig, vocab_size: int, visual_width: int, n_labels: int
) -> ModelState:
    """Fresh state: seeded encoders, identity attention, zeroed bank (α=0)."""
    rng = np.random.default_rng([cfg.seed, 0])
    encoder = init_encoder_params(
        rng, vocab_size, cfg.native_dim, cfg.embed_dim, visual_width
    )
    return ModelState(
        encoder=encoder,
        attn_self=init_identity(cfg.embed_dim),
        attn_cross=init_identity(cfg.embed_dim),
        bank=init_bank(n_labels, cfg.embed_dim),
    )


# ---------------------------------------------------------------------------
# optimizer


class OneCycleSchedule:
    """Linear warmup into a cosine decay down to zero."""

    def __init__(self, lr_max: float, total_steps: int, warmup: int):
        self.lr_max = lr_max
        self.total = max(total_steps, 1)
        self.warmup = max(min(warmup, self.total), 1)

    def __call__(self, t: int) -> float:
        if t <= self.warmup:
            return self.lr_max * t / self.warmup
        if self.total == self.warmup:
            return self.lr_max
        progress = (t - self.warmup) / (self.total - self.warmup)
        return self.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def warmup_steps(cfg_warmup: int, total_steps: int) -> int:
    """Desk-scale warmup: the configured budget capped at 10% of the run."""
    return min(cfg_warmup, max(1, total_steps // 10))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(
        self,
        params: dict[str, Tensor],
        schedule: OneCycleSchedule,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        lr = self.schedule(self.t)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


# ---------------------------------------------------------------------------
# phase I: contrastive pre-training over label batches


def _embed_vec_grad(state: ModelState, e: Entity, cfg: PipelineConfig) -> Tensor:
    bag = embed_bag(
        e, state.encoder, state.attn_self, bypass_self_attention=cfg.no_self_attention
    )
    return embed_vector(bag)


def run_module1(
    state: ModelState,
    data: TrainData,
    cfg: PipelineConfig,
    counters: CostCounters | None = None,
) -> PhaseLog:
    """Train encoders + self-attention contrastively; classifiers stay off."""
    state.require_phase("init", "run_module1")
    mining = cfg.mining()
    rng = np.random.default_rng([cfg.seed, 1])
    label_pos = data.gt.label_positives()
    eligible = np.asarray(
        [l for l in range(data.gt.n_labels) if len(label_pos[l]) > 0], dtype=np.int64
    )
    log = PhaseLog()
    if cfg.m1_epochs == 0 or eligible.size == 0:
        state.phase = "module1"
        return log

    trainable = {}
    for name, t in state.encoder.tensors().items():
        trainable[f"encoder.{name}"] = t
    if not cfg.no_self_attention:
        for name, t in state.attn_self.tensors().items():
            trainable[f"attn_self.{name}"] = t

    steps_per_epoch = math.ceil(eligible.size / cfg.m1_batch)
    total_steps = cfg.m1_epochs * steps_per_epoch
    schedule = OneCycleSchedule(
        cfg.m1_lr, total_steps, warmup_steps(cfg.warmup_iters, total_steps)
    )
    opt = AdamW(
        trainable,
        schedule,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    for epoch in range(cfg.m1_epochs):
        _, x_cache = embed_all(
            data.datapoints,
            state.encoder,
            state.attn_self,
            bypass_self_attention=cfg.no_self_attention,
        )
        _, z_cache = embed_all(
            data.labels,
            state.encoder,
            state.attn_self,
            bypass_self_attention=cfg.no_self_attention,
        )
        order = rng.permutation(eligible)
        epoch_loss = 0.0
        epoch_terms = 0
        for start in range(0, order.size, cfg.m1_batch):
            batch = order[start : start + cfg.m1_batch]
            chosen_pos = {
                int(l): mine_hard_positives(
                    label_pos[int(l)], z_cache[int(l)], x_cache, mining, rng
                )
                for l in batch
            }
            mined = []
            for l in batch:
                l = int(l)
                others = [chosen_pos[int(o)] for o in batch if int(o) != l]
                other_union = (
                    np.concatenate(others) if others else np.empty(0, dtype=np.int64)
                )
                negs = mine_inbatch_negatives(
                    label_pos[l], other_union, z_cache[l], x_cache, mining, rng
                )
                mined.append((l, chosen_pos[l], negs))

            involved = sorted(
                {int(i) for _, pos, negs in mined for i in np.concatenate([pos, negs])}
            )
            x_vecs = {i: _embed_vec_grad(state, data.datapoints[i], cfg) for i in involved}
            z_vecs = {
                int(l): _embed_vec_grad(state, data.labels[int(l)], cfg) for l in batch
            }
            loss, n_terms = loss_pretrain(
                mined, z_vecs, x_vecs, mining.margin_pretrain, counters
            )
            epoch_terms += n_terms
            if n_terms == 0:
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"module1 loss is {value} at epoch {epoch}, step {opt.t}"
                )
            epoch_loss += value
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.steps += 1
            if cfg.log_every and log.steps % cfg.log_every == 0:
                logger.info(
                    "module1 epoch %d step %d loss %.4f (%d terms)",
                    epoch,
                    log.steps,
                    value / max(n_terms, 1),
                    n_terms,
                )
        log.loss_per_epoch.append(epoch_loss / max(epoch_terms, 1))
        log.terms_per_epoch.append(epoch_terms)
    state.phase = "module1"
    return log


# ---------------------------------------------------------------------------
# phase II: augmented retrieval


def run_module2(
    state: ModelState,
    data: TrainData,
    cfg: PipelineConfig,
    counters: CostCounters | None = None,
) -> tuple[AugmentedIndex, list[Shortlist]]:
    """Recompute embeddings, build the augmented index, shortlist every datapoint."""
    state.require_phase("module1", "run_module2")
    index = build_index_from_state(state, data, cfg)
    _, x_vecs = embed_all(
        data.datapoints,
        state.encoder,
        state.attn_self,
        bypass_self_attention=cfg.no_self_attention,
    )
    shortlists = []
    for i in range(len(data.datapoints)):
        s = index.query(x_vecs[i], cfg.shortlist_cap, counters)
        s.datapoint = i
        shortlists.append(s)
    state.phase = "module2"
    return index, shortlists


def build_index_from_state(
    state: ModelState, data: TrainData, cfg: PipelineConfig
) -> AugmentedIndex:
    """Augmented (or vector-only) index from the state's current embeddings."""
    label_bags, label_vecs = embed_all(
        data.labels,
        state.encoder,
        state.attn_self,
        bypass_self_attention=cfg.no_self_attention,
    )
    mode = cfg.resolve_ann_mode(data.gt.n_labels)
    if cfg.vec_only_index:
        return build_vec_only_index(label_vecs, mode, cfg.index_params())
    _, x_vecs = embed_all(
        data.datapoints,
        state.encoder,
        state.attn_self,
        bypass_self_attention=cfg.no_self_attention,
    )
    label_pos = data.gt.label_positives()
    centroids = [
        centroid(x_vecs[label_pos[l]]) if len(label_pos[l]) else None
        for l in range(data.gt.n_labels)
    ]
    n_missing = sum(1 for c in centroids if c is None)
    if n_missing:
        logger.warning("%d labels have no centroid (no training positives)", n_missing)
    return build_index(
        [normalize_rows(bag) for bag in label_bags], centroids, mode, cfg.index_params()
    )


# ---------------------------------------------------------------------------
# phase III: transfer


def run_module3(state: ModelState, cfg: PipelineConfig) -> None:
    """Carry over pre-trained parameters; initialize the fine-tuning ones."""
    state.require_phase("module2", "run_module3")
    rng = np.random.default_rng([cfg.seed, 3])
    d = cfg.embed_dim
    state.attn_cross = init_identity(d)
    if cfg.concat_scorer:
        state.concat_ff = init_concat_params(rng, d)
    n_labels = state.bank.n_labels
    bound = math.sqrt(6.0 / (d + d))
    state.bank.eta = Tensor.leaf(rng.uniform(-bound, bound, size=(n_labels, d)))
    alpha0 = 1.0 if cfg.alpha_one else 0.5
    state.bank.alpha = Tensor.leaf(np.full((n_labels, 1), alpha0))
    state.phase = "module3"


# ---------------------------------------------------------------------------
# phase IV: fine-tuning over datapoint batches


def _adapted_vec(
    state: ModelState,
    cfg: PipelineConfig,
    x_bag: Tensor,
    x_vec: Tensor,
    z_bag: Tensor,
    z_vec: Tensor,
) -> Tensor:
    if cfg.concat_scorer:
        assert state.concat_ff is not None
        return adapt_concat(x_vec, z_vec, state.concat_ff)
    return adapt(x_bag, z_bag, state.attn_cross, bypass=cfg.no_cross_attention)


def run_module4(
    state: ModelState,
    data: TrainData,
    shortlists: Sequence[Shortlist],
    cfg: PipelineConfig,
    counters: CostCounters | None = None,
) -> PhaseLog:
    """Fine-tune everything with the cosine embedding loss; freeze at the end."""
    state.require_phase("module3", "run_module4")
    if len(shortlists) != len(data.datapoints):
        raise ValueError("need one shortlist per training datapoint")
    mining = cfg.mining()
    rng = np.random.default_rng([cfg.seed, 4])
    log = PhaseLog()
    n = len(data.datapoints)
    if cfg.m4_epochs == 0 or n == 0:
        state.phase = "frozen"
        return log

    trainable: dict[str, Tensor] = {}
    for name, t in state.encoder.tensors().items():
        trainable[f"encoder.{name}"] = t
    if not cfg.no_self_attention:
        for name, t in state.attn_self.tensors().items():
            trainable[f"attn_self.{name}"] = t
    if cfg.concat_scorer:
        assert state.concat_ff is not None
        for name, t in state.concat_ff.tensors().items():
            trainable[f"concat.{name}"] = t
    elif not cfg.no_cross_attention:
        for name, t in state.attn_cross.tensors().items():
            trainable[f"attn_cross.{name}"] = t
    if not cfg.alpha_one:
        trainable["bank.eta"] = state.bank.eta
        trainable["bank.alpha"] = state.bank.alpha

    neg_pool = [
        shortlists[i].negatives(data.gt.positives[i]) for i in range(n)
    ]
    steps_per_epoch = math.ceil(n / cfg.m4_batch)
    total_steps = cfg.m4_epochs * steps_per_epoch
    schedule = OneCycleSchedule(
        cfg.m4_lr, total_steps, warmup_steps(cfg.warmup_iters, total_steps)
    )
    opt = AdamW(
        trainable,
        schedule,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    for epoch in range(cfg.m4_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_terms = 0
        epoch_adapt = 0
        for start in range(0, n, cfg.m4_batch):
            batch = order[start : start + cfg.m4_batch]
            sets = []
            for i in batch:
                i = int(i)
                s, t = sample_finetune_sets(
                    data.gt.positives[i], neg_pool[i], mining, rng
                )
                sets.append((i, s, t))
            involved = sorted(
                {int(l) for _, s, t in sets for l in np.concatenate([s, t])}
            )
            if not involved:
                continue

            z_bags: dict[int, Tensor] = {}
            z_vecs: dict[int, Tensor] = {}
            for l in involved:
                bag = embed_bag(
                    data.labels[l],
                    state.encoder,
                    state.attn_self,
                    bypass_self_attention=cfg.no_self_attention,
                )
                z_bags[l] = bag
                z_vecs[l] = embed_vector(bag)
            classifiers = {
                l: classifier(l, z_vecs[l], state.bank, alpha_one=cfg.alpha_one)
                for l in involved
            }

            adapted: dict[tuple[int, int], Tensor] = {}
            for i, s, t in sets:
                labels_i = np.concatenate([s, t])
                if labels_i.size == 0:
                    continue
                x_bag = embed_bag(
                    data.datapoints[i],
                    state.encoder,
                    state.attn_self,
                    bypass_self_attention=cfg.no_self_attention,
                )
                x_vec = embed_vector(x_bag) if cfg.concat_scorer else x_bag
                for l in labels_i:
                    l = int(l)
                    adapted[(i, l)] = _adapted_vec(
                        state, cfg, x_bag, x_vec, z_bags[l], z_vecs[l]
                    )
                    epoch_adapt += 1

            loss, n_terms = loss_finetune(sets, adapted, classifiers, mining.margin_finetune)
            epoch_terms += n_terms
            if n_terms == 0:
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"module4 loss is {value} at epoch {epoch}, step {opt.t}"
                )
            epoch_loss += value
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not cfg.alpha_one:
                np.clip(state.bank.alpha.data, 0.0, 1.0, out=state.bank.alpha.data)
            log.steps += 1
            if cfg.log_every and log.steps % cfg.log_every == 0:
                logger.info(
                    "module4 epoch %d step %d loss %.4f (%d terms)",
                    epoch,
                    log.steps,
                    value / max(n_terms, 1),
                    n_terms,
                )
        if counters is not None:
            counters.module4_adaptations += epoch_adapt
        log.loss_per_epoch.append(epoch_loss / max(epoch_terms, 1))
        log.terms_per_epoch.append(epoch_terms)
        log.adaptations_per_epoch.append(epoch_adapt)
    state.phase = "frozen"
    return log


# ---------------------------------------------------------------------------
# prediction


class Predictor:
    """Frozen-state scorer: caches label embeddings and classifier vectors."""

    def __init__(
        self,
        state: ModelState,
        labels: Sequence[Entity],
        index: AugmentedIndex,
        cfg: PipelineConfig,
    ):
        state.require_phase("frozen", "Predictor")
        self.state = state
        self.index = index
        self.cfg = cfg
        bags, vecs = embed_all(
            list(labels),
            state.encoder,
            state.attn_self,
            bypass_self_attention=cfg.no_self_attention,
        )
        self.label_bags = bags
        self.label_vecs = vecs
        if cfg.alpha_one:
            # The α=1 variant uses label embeddings directly; η is never read.
            self.classifier_matrix = vecs
        else:
            alpha = state.bank.alpha.data
            eta = state.bank.eta.data
            eta_hat = eta / np.linalg.norm(eta, axis=1, keepdims=True)
            blend = alpha * vecs + (1.0 - alpha) * eta_hat
            self.classifier_matrix = blend / np.linalg.norm(blend, axis=1, keepdims=True)

    def predict(self, entity: Entity, k: int) -> tuple[list[ScoreTriple], CostCounters]:
        """Top-k (label, scores) plus cost counters for this test point."""
        counters = CostCounters()
        if k <= 0:
            return [], counters
        x_bag = embed_bag(
            entity,
            self.state.encoder,
            self.state.attn_self,
            bypass_self_attention=self.cfg.no_self_attention,
        )
        x_vec = embed_vector(x_bag)
        shortlist = self.index.query(x_vec.data, self.cfg.shortlist_cap, counters)
        triples = []
        for label, a in zip(shortlist.labels, shortlist.sims):
            label = int(label)
            z_bag = Tensor(self.label_bags[label])
            z_vec = Tensor(self.label_vecs[label])
            x2 = _adapted_vec(self.state, self.cfg, x_bag, x_vec, z_bag, z_vec)
            c = float(self.classifier_matrix[label] @ x2.data)
            counters.classifier_evals += 1
            triples.append(
                ScoreTriple(label=label, a=float(a), c=c, s=fuse(c, float(a), self.cfg.beta))
            )
        triples.sort(key=lambda t: (-t.s, t.label))
        return triples[:k], counters


def predict(
    state: ModelState,
    index: AugmentedIndex,
    labels: Sequence[Entity],
    entity: Entity,
    k: int,
    cfg: PipelineConfig,
) -> tuple[list[ScoreTriple], CostCounters]:
    """One-shot prediction; prefer :class:`Predictor` for batches."""
    return Predictor(state, labels, index, cfg).predict(entity, k)


def similarity_predictions(
    state: ModelState,
    index: AugmentedIndex,
    entities: Sequence[Entity],
    cfg: PipelineConfig,
    k: int | None = None,
) -> list[list[tuple[int, float]]]:
    """Retrieval-only ranking (similarity scores straight off the index)."""
    _, vecs = embed_all(
        list(entities),
        state.encoder,
        state.attn_self,
        bypass_self_attention=cfg.no_self_attention,
    )
    out = []
    for i in range(len(entities)):
        s = index.query(vecs[i], cfg.shortlist_cap)
        ranked = list(zip(s.labels.tolist(), s.sims.tolist()))
        out.append(ranked[:k] if k is not None else ranked)
    return out


# ---------------------------------------------------------------------------
# whole-pipeline convenience


@dataclass
class PipelineResult:
    state: ModelState
    index: AugmentedIndex | None
    shortlists: list[Shortlist] | None
    m1_log: PhaseLog | None
    m4_log: PhaseLog | None
    counters: CostCounters


def run_pipeline(
    data: TrainData,
    cfg: PipelineConfig,
    vocab_size: int,
    visual_width: int,
    stop_after: str | None = None,
    state: ModelState | None = None,
    shortlists: list[Shortlist] | None = None,
) -> PipelineResult:
    """Run phases in order, optionally stopping after any module."""
    if stop_after is not None and stop_after not in PHASES[1:5]:
        raise ValueError(f"stop_after must be one of {PHASES[1:5]}")
    counters = CostCounters()
    if state is None:
        state = init_state(cfg, vocab_size, visual_width, data.gt.n_labels)
    index = None
    m1_log = m4_log = None
    if state.phase == "init":
        m1_log = run_module1(state, data, cfg, counters)
    if stop_after == "module1":
        return PipelineResult(state, index, shortlists, m1_log, m4_log, counters)
    if state.phase == "module1":
        index, shortlists = run_module2(state, data, cfg, counters)
    if stop_after == "module2":
        return PipelineResult(state, index, shortlists, m1_log, m4_log, counters)
    if state.phase == "module2":
        run_module3(state, cfg)
    if stop_after == "module3":
        return PipelineResult(state, index, shortlists, m1_log, m4_log, counters)
    if state.phase == "module3":
        if shortlists is None:
            raise ValueError("module4 needs the shortlists from module2")
        m4_log = run_module4(state, data, shortlists, cfg, counters)
    return PipelineResult(state, index, shortlists, m1_log, m4_log, counters)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(fh: BinaryIO, state: ModelState, cfg: PipelineConfig) -> None:
    binio.write_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    binio.write_str(fh, json.dumps(asdict(cfg), sort_keys=True))
    binio.write_str(fh, state.phase)
    params = state.parameters()
    binio.write_u32(fh, len(params))
    for name, t in params.items():
        binio.write_str(fh, name)
        binio.write_u32(fh, t.data.ndim)
        for dim in t.data.shape:
            binio.write_u32(fh, dim)
        binio.write_f64_array(fh, t.data)


def load_checkpoint(fh: BinaryIO) -> tuple[ModelState, PipelineConfig]:
    binio.read_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg = PipelineConfig(**json.loads(binio.read_str(fh)))
    phase = binio.read_str(fh)
    if phase not in PHASES:
        raise binio.FormatError(f"unknown phase {phase!r}")
    count = binio.read_u32(fh)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = binio.read_str(fh)
        ndim = binio.read_u32(fh)
        shape = tuple(binio.read_u32(fh) for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = binio.read_f64_array(fh, n).reshape(shape)

    encoder = EncoderParams(
        token_table=Tensor.leaf(arrays["encoder.token_table"]),
        visual_w=Tensor.leaf(arrays["encoder.visual_w"]),
        visual_b=Tensor.leaf(arrays["encoder.visual_b"]),
        out_dim=cfg.embed_dim,
    )
    attn_self = AttentionParams(
        *[Tensor.leaf(arrays[f"attn_self.{n}"]) for n in ("q", "k", "v", "o")]
    )
    attn_cross = AttentionParams(
        *[Tensor.leaf(arrays[f"attn_cross.{n}"]) for n in ("q", "k", "v", "o")]
    )
    bank = ClassifierBank(
        eta=Tensor.leaf(arrays["bank.eta"]), alpha=Tensor.leaf(arrays["bank.alpha"])
    )
    concat_ff = None
    if "concat.w1" in arrays:
        concat_ff = ConcatParams(
            *[Tensor.leaf(arrays[f"concat.{n}"]) for n in ("w1", "b1", "w2", "b2")]
        )
    return (
        ModelState(
            encoder=encoder,
            attn_self=attn_self,
            attn_cross=attn_cross,
            bank=bank,
            concat_ff=concat_ff,
            phase=phase,
        ),
        cfg,
    )

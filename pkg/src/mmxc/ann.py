"""Augmented nearest-neighbour retrieval over label entries.

Every label contributes its (normalized) bag-embedding rows plus, when the
label has training positives, a normalized centroid of those datapoints'
vector embeddings; each entry is tagged with the label it belongs to. A
query retrieves nearest entries by inner product (cosine, since everything
is unit-norm), deduplicates by label keeping the best entry per label, and
widens its raw-entry beam geometrically until enough unique labels are
found. Two modes share one surface: a hierarchical navigable small-world
graph for scale, and an exact scan that doubles as the oracle and as the
default for small label spaces.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import binio
from .objectives import CostCounters

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"MXCINDEX"
INDEX_VERSION = 1
SHORTLIST_MAGIC = b"MXCSHRTL"
SHORTLIST_VERSION = 1

MODE_EXACT = "exact"
MODE_HNSW = "hnsw"

UNIT_NORM_TOL = 1e-6


@dataclass
class IndexParams:
    """Graph degree and beam widths; ignored by the exact mode."""

    m_graph: int = 16
    ef_construction: int = 200
    ef_query: int = 200
    seed: int = 0


@dataclass
class Shortlist:
    """Up to ``cap`` unique labels for one datapoint, best-first.

    ``sims[r]`` is the maximum inner product between the query and any
    retrieved entry of ``labels[r]``; rows are sorted by similarity
    descending with ties broken by label id.
    """

    datapoint: int
    labels: np.ndarray
    sims: np.ndarray

    def negatives(self, positives: np.ndarray) -> np.ndarray:
        """Shortlist labels that are not ground-truth positives."""
        return np.setdiff1d(self.labels, positives)


def centroid(vectors: np.ndarray | None) -> np.ndarray | None:
    """Normalized mean of a label's positive datapoint vectors.

    Returns ``None`` when the label has no positives or the mean collapses
    to (near) zero; the caller then simply omits the centroid entry.
    """
    if vectors is None or len(vectors) == 0:
        return None
    mean = np.mean(np.asarray(vectors, dtype=np.float64), axis=0)
    norm = np.linalg.norm(mean)
    if norm <= 1e-12:
        return None
    return mean / norm


class AugmentedIndex:
    """Immutable-after-build retrieval structure over tagged unit vectors."""

    def __init__(
        self,
        vectors: np.ndarray,
        labels: np.ndarray,
        n_labels: int,
        mode: str,
        params: IndexParams,
        graph: "_HnswGraph | None" = None,
    ):
        self.vectors = vectors
        self.labels = labels
        self.n_labels = n_labels
        self.mode = mode
        self.params = params
        self._graph = graph

    @property
    def n_entries(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def query(
        self, x: np.ndarray, cap: int, counters: CostCounters | None = None
    ) -> Shortlist:
        """One retrieval pass returning up to ``cap`` unique labels.

        Counts as exactly one index query regardless of internal beam
        expansion rounds.
        """
        if counters is not None:
            counters.index_queries += 1
        if cap <= 0:
            return Shortlist(-1, np.empty(0, dtype=np.int64), np.empty(0))
        if self.mode == MODE_EXACT:
            best = np.full(self.n_labels, -np.inf)
            sims = self.vectors @ x
            np.maximum.at(best, self.labels, sims)
            present = np.flatnonzero(best > -np.inf)
            order = np.lexsort((present, -best[present]))
            keep = present[order[:cap]]
            return Shortlist(-1, keep.astype(np.int64), best[keep])
        return self._query_hnsw(x, cap)

    def _query_hnsw(self, x: np.ndarray, cap: int) -> Shortlist:
        assert self._graph is not None
        fetch = min(2 * cap, self.n_entries)
        while True:
            ef = max(self.params.ef_query, fetch)
            hits = self._graph.search(x, ef=ef, k=fetch)
            best: dict[int, float] = {}
            for sim, entry in hits:
                lab = int(self.labels[entry])
                if lab not in best or sim > best[lab]:
                    best[lab] = sim
            if len(best) >= cap or fetch >= self.n_entries:
                break
            fetch = min(2 * fetch, self.n_entries)
        labs = np.fromiter(best.keys(), dtype=np.int64, count=len(best))
        sims = np.fromiter(best.values(), dtype=np.float64, count=len(best))
        order = np.lexsort((labs, -sims))[:cap]
        return Shortlist(-1, labs[order], sims[order])

    def save(self, fh: BinaryIO) -> None:
        binio.write_header(fh, INDEX_MAGIC, INDEX_VERSION)
        binio.write_u8(fh, 0 if self.mode == MODE_EXACT else 1)
        binio.write_u32(fh, self.dim)
        binio.write_u32(fh, self.n_entries)
        binio.write_u32(fh, self.n_labels)
        binio.write_u32(fh, self.params.m_graph)
        binio.write_u32(fh, self.params.ef_construction)
        binio.write_u32(fh, self.params.ef_query)
        binio.write_u32_array(fh, self.labels)
        binio.write_f64_array(fh, self.vectors)
        if self.mode == MODE_HNSW:
            assert self._graph is not None
            self._graph.save(fh)

    @staticmethod
    def load(fh: BinaryIO) -> "AugmentedIndex":
        binio.read_header(fh, INDEX_MAGIC, INDEX_VERSION)
        mode = MODE_EXACT if binio.read_u8(fh) == 0 else MODE_HNSW
        dim = binio.read_u32(fh)
        n_entries = binio.read_u32(fh)
        n_labels = binio.read_u32(fh)
        params = IndexParams(
            m_graph=binio.read_u32(fh),
            ef_construction=binio.read_u32(fh),
            ef_query=binio.read_u32(fh),
        )
        labels = binio.read_u32_array(fh, n_entries)
        vectors = binio.read_f64_array(fh, n_entries * dim).reshape(n_entries, dim)
        graph = None
        if mode == MODE_HNSW:
            graph = _HnswGraph.load(fh, vectors)
        return AugmentedIndex(vectors, labels, n_labels, mode, params, graph)


def build_index(
    label_bags: Sequence[np.ndarray],
    centroids: Sequence[np.ndarray | None],
    mode: str = MODE_EXACT,
    params: IndexParams | None = None,
) -> AugmentedIndex:
    """Index over every label's bag rows plus its centroid (when defined).

    All supplied vectors must already be unit-norm. Labels without a
    centroid (no training positives, or a degenerate mean) contribute only
    their descriptor entries; that is also how unseen labels enter the
    index.
    """
    if len(label_bags) == 0:
        raise ValueError("build_index: empty label set")
    if len(centroids) != len(label_bags):
        raise ValueError("build_index: centroids must align with labels")
    rows: list[np.ndarray] = []
    tags: list[int] = []
    omitted = 0
    for lab, bag in enumerate(label_bags):
        bag = np.asarray(bag, dtype=np.float64)
        if bag.ndim != 2 or bag.shape[0] == 0:
            raise ValueError(f"build_index: label {lab} has an empty bag")
        _check_unit(bag, f"label {lab} bag rows")
        for r in bag:
            rows.append(r)
            tags.append(lab)
        mu = centroids[lab]
        if mu is None:
            omitted += 1
        else:
            mu = np.asarray(mu, dtype=np.float64)
            _check_unit(mu[None, :], f"label {lab} centroid")
            rows.append(mu)
            tags.append(lab)
    if omitted:
        logger.warning("build_index: %d labels indexed without a centroid", omitted)
    return _assemble(np.array(rows), np.array(tags, dtype=np.int64), len(label_bags), mode, params)


def build_vec_only_index(
    label_vectors: np.ndarray,
    mode: str = MODE_EXACT,
    params: IndexParams | None = None,
) -> AugmentedIndex:
    """Single-entry-per-label index over vector embeddings (retrieval ablation)."""
    vecs = np.asarray(label_vectors, dtype=np.float64)
    if vecs.ndim != 2 or vecs.shape[0] == 0:
        raise ValueError("build_vec_only_index: empty label set")
    _check_unit(vecs, "label vectors")
    tags = np.arange(vecs.shape[0], dtype=np.int64)
    return _assemble(vecs.copy(), tags, vecs.shape[0], mode, params)


def _check_unit(rows: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(rows, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ValueError(f"build_index: {what} must be unit-norm")


def _assemble(
    vectors: np.ndarray,
    tags: np.ndarray,
    n_labels: int,
    mode: str,
    params: IndexParams | None,
) -> AugmentedIndex:
    params = params or IndexParams()
    if mode == MODE_EXACT:
        return AugmentedIndex(vectors, tags, n_labels, MODE_EXACT, params)
    if mode != MODE_HNSW:
        raise ValueError(f"unknown index mode {mode!r}")
    graph = _HnswGraph.build(vectors, params)
    return AugmentedIndex(vectors, tags, n_labels, MODE_HNSW, params, graph)


def normalize_rows(bag: np.ndarray) -> np.ndarray:
    """Row-normalize a bag for indexing; zero rows indicate an upstream bug."""
    bag = np.asarray(bag, dtype=np.float64)
    norms = np.linalg.norm(bag, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("normalize_rows: bag contains a near-zero row")
    return bag / norms


# ---------------------------------------------------------------------------
# Hierarchical navigable small-world graph. Distances are negated inner
# products so the usual min-heap machinery applies; all vectors unit-norm.


class _HnswGraph:
    def __init__(
        self,
        vectors: np.ndarray,
        m: int,
        levels: np.ndarray,
        neighbors: list[list[list[int]]],
        entry_point: int,
        max_level: int,
    ):
        self.vectors = vectors
        self.m = m
        self.levels = levels
        self.neighbors = neighbors  # neighbors[node][level] -> list of node ids
        self.entry_point = entry_point
        self.max_level = max_level

    # -- construction -------------------------------------------------

    @staticmethod
    def build(vectors: np.ndarray, params: IndexParams) -> "_HnswGraph":
        n = vectors.shape[0]
        rng = np.random.default_rng(params.seed)
        ml = 1.0 / math.log(params.m_graph)
        u = rng.uniform(size=n)  # 1-u lies in (0, 1], so the log stays finite
        levels = np.floor(-np.log(1.0 - u) * ml).astype(np.int64)
        graph = _HnswGraph(
            vectors=vectors,
            m=params.m_graph,
            levels=levels,
            neighbors=[[[] for _ in range(levels[i] + 1)] for i in range(n)],
            entry_point=0,
            max_level=int(levels[0]),
        )
        for i in range(1, n):
            graph._insert(i, params.ef_construction)
        return graph

    def _insert(self, i: int, ef_construction: int) -> None:
        q = self.vectors[i]
        level = int(self.levels[i])
        eps = [self.entry_point]
        for lc in range(self.max_level, level, -1):
            eps = [self._search_layer(q, eps, 1, lc)[0][1]]
        for lc in range(min(level, self.max_level), -1, -1):
            cands = self._search_layer(q, eps, ef_construction, lc)
            limit = self.m if lc > 0 else 2 * self.m
            selected = self._select_heuristic(cands, self.m)
            self.neighbors[i][lc] = list(selected)
            for nb in selected:
                nb_list = self.neighbors[nb][lc]
                nb_list.append(i)
                if len(nb_list) > limit:
                    dists = -(self.vectors[nb_list] @ self.vectors[nb])
                    pruned = self._select_heuristic(
                        sorted(zip(dists, nb_list)), limit
                    )
                    self.neighbors[nb][lc] = list(pruned)
            eps = [c for _, c in cands]
        if level > self.max_level:
            self.entry_point = i
            self.max_level = level

    def _select_heuristic(
        self, candidates: Sequence[tuple[float, int]], m: int
    ) -> list[int]:
        """Diversity-aware neighbor selection; keeps pruned closest as filler."""
        if len(candidates) <= m:
            return [c for _, c in candidates]
        result: list[int] = []
        discarded: list[int] = []
        for dist, c in candidates:
            if len(result) >= m:
                break
            if not result:
                result.append(c)
                continue
            d_to_sel = -(self.vectors[result] @ self.vectors[c])
            if dist < float(np.min(d_to_sel)):
                result.append(c)
            else:
                discarded.append(c)
        for c in discarded:
            if len(result) >= m:
                break
            result.append(c)
        return result

    # -- search --------------------------------------------------------

    def _search_layer(
        self, q: np.ndarray, entry_points: list[int], ef: int, level: int
    ) -> list[tuple[float, int]]:
        visited = set(entry_points)
        dists = -(self.vectors[entry_points] @ q)
        candidates = list(zip(dists.tolist(), entry_points))
        heapq.heapify(candidates)
        best = [(-d, n) for d, n in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(best) >= ef and dist > -best[0][0]:
                break
            fresh = [nb for nb in self.neighbors[node][level] if nb not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            nb_dists = -(self.vectors[fresh] @ q)
            bound = -best[0][0]
            for nd, nb in zip(nb_dists.tolist(), fresh):
                if len(best) < ef:
                    heapq.heappush(candidates, (nd, nb))
                    heapq.heappush(best, (-nd, nb))
                    bound = -best[0][0]
                elif nd < bound:
                    heapq.heappush(candidates, (nd, nb))
                    heapq.heapreplace(best, (-nd, nb))
                    bound = -best[0][0]
        out = sorted(((-negd, n) for negd, n in best))
        return out

    def search(self, q: np.ndarray, ef: int, k: int) -> list[tuple[float, int]]:
        """Top-k entries as (similarity, entry id), best first."""
        eps = [self.entry_point]
        for lc in range(self.max_level, 0, -1):
            eps = [self._search_layer(q, eps, 1, lc)[0][1]]
        hits = self._search_layer(q, eps, max(ef, k), 0)
        return [(-d, n) for d, n in hits[:k]]

    # -- serialization ---------------------------------------------------

    def save(self, fh: BinaryIO) -> None:
        n = self.vectors.shape[0]
        binio.write_u32(fh, self.entry_point)
        binio.write_u32(fh, self.max_level)
        binio.write_u32_array(fh, self.levels)
        for i in range(n):
            for lc in range(int(self.levels[i]) + 1):
                ids = self.neighbors[i][lc]
                binio.write_u32(fh, len(ids))
                binio.write_u32_array(fh, np.asarray(ids, dtype=np.int64))

    @staticmethod
    def load(fh: BinaryIO, vectors: np.ndarray) -> "_HnswGraph":
        n = vectors.shape[0]
        entry_point = binio.read_u32(fh)
        max_level = binio.read_u32(fh)
        levels = binio.read_u32_array(fh, n)
        neighbors = []
        for i in range(n):
            per_node = []
            for _ in range(int(levels[i]) + 1):
                cnt = binio.read_u32(fh)
                per_node.append([int(v) for v in binio.read_u32_array(fh, cnt)])
            neighbors.append(per_node)
        # m is recoverable from the caller's params; store-side it only
        # matters for further inserts, which a loaded index does not allow.
        return _HnswGraph(vectors, 0, levels, neighbors, entry_point, max_level)


# ---------------------------------------------------------------------------
# Shortlist file: per-datapoint retrieved labels with similarities.


def save_shortlists(fh: BinaryIO, shortlists: Sequence[Shortlist]) -> None:
    binio.write_header(fh, SHORTLIST_MAGIC, SHORTLIST_VERSION)
    binio.write_u32(fh, len(shortlists))
    for s in shortlists:
        binio.write_u32(fh, s.datapoint)
        binio.write_u32(fh, len(s.labels))
        binio.write_u32_array(fh, s.labels)
        binio.write_f64_array(fh, s.sims)


def load_shortlists(fh: BinaryIO) -> list[Shortlist]:
    binio.read_header(fh, SHORTLIST_MAGIC, SHORTLIST_VERSION)
    count = binio.read_u32(fh)
    out = []
    for _ in range(count):
        dp = binio.read_u32(fh)
        n = binio.read_u32(fh)
        labels = binio.read_u32_array(fh, n)
        sims = binio.read_f64_array(fh, n)
        out.append(Shortlist(dp, labels, sims))
    return out

"""Dataset ingestion, synthetic generation and the artifact file formats.

Products arrive as JSON records (one object per line, or a single array)
with fields ``ASIN``, ``title``, ``images`` and ``also_buy``. Visual
content is never fetched: images are either inline feature vectors or
references resolved against a sidecar feature file keyed by (ASIN, image
index). In single-catalog mode every product acts as both datapoint and
label and ``also_buy`` edges define relevance; synthetic datasets keep
datapoints and labels separate and plant a cluster structure that doubles
as the category map.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import binio
from .encoders import Descriptor, Entity, Modality

logger = logging.getLogger(__name__)

FEATURES_MAGIC = b"MXCVFEAT"
FEATURES_VERSION = 1

DEFAULT_MAX_VOCAB = 20000


class DatasetError(ValueError):
    """Malformed dataset input."""


@dataclass
class GroundTruth:
    """Sparse ±1 relevance: stored pairs are the positives."""

    n_datapoints: int
    n_labels: int
    positives: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.positives) != self.n_datapoints:
            raise DatasetError("ground truth rows must match datapoint count")
        for i, row in enumerate(self.positives):
            row = np.asarray(row, dtype=np.int64)
            if row.size and (row.min() < 0 or row.max() >= self.n_labels):
                raise DatasetError(f"ground truth row {i} has out-of-range labels")
            self.positives[i] = np.unique(row)

    def is_positive(self, i: int, l: int) -> bool:
        row = self.positives[i]
        j = np.searchsorted(row, l)
        return bool(j < row.size and row[j] == l)

    def label_positives(self) -> list[np.ndarray]:
        """Inverse map: datapoint ids per label."""
        buckets: list[list[int]] = [[] for _ in range(self.n_labels)]
        for i, row in enumerate(self.positives):
            for l in row:
                buckets[int(l)].append(i)
        return [np.asarray(b, dtype=np.int64) for b in buckets]

    def label_frequency(self) -> np.ndarray:
        freq = np.zeros(self.n_labels, dtype=np.int64)
        for row in self.positives:
            freq[row] += 1
        return freq

    def subset(self, rows: np.ndarray) -> "GroundTruth":
        return GroundTruth(
            n_datapoints=len(rows),
            n_labels=self.n_labels,
            positives=[self.positives[int(i)] for i in rows],
        )

    def total_pairs(self) -> int:
        return int(sum(len(r) for r in self.positives))


@dataclass
class ProductRecord:
    """One catalog entry, with image references resolved to feature vectors."""

    asin: str
    title: str
    image_features: list[np.ndarray]
    also_buy: list[str]


@dataclass
class IngestReport:
    n_records: int = 0
    n_accepted: int = 0
    rejected_empty: int = 0
    rejected_duplicate: int = 0
    dropped_images: int = 0
    dropped_edges: int = 0

    def summary(self) -> str:
        return (
            f"records={self.n_records} accepted={self.n_accepted} "
            f"rejected_empty={self.rejected_empty} rejected_duplicate={self.rejected_duplicate} "
            f"dropped_images={self.dropped_images} dropped_edges={self.dropped_edges}"
        )


@dataclass
class Dataset:
    """Entities plus relevance, ready for the training pipeline."""

    datapoints: list[Entity]
    labels: list[Entity]
    datapoint_records: list[ProductRecord]
    label_records: list[ProductRecord]
    gt: GroundTruth
    vocab: dict[str, int]
    visual_width: int
    shared_catalog: bool
    categories: dict[int, str] = field(default_factory=dict)

    @property
    def n_datapoints(self) -> int:
        return len(self.datapoints)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def vocab_size(self) -> int:
        """Embedding-table rows: vocabulary plus the reserved OOV row 0."""
        return len(self.vocab) + 1

    def label_index(self) -> dict[str, int]:
        return {e.uid: i for i, e in enumerate(self.labels)}

    def split(self, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic train/test split by hashing datapoint ids."""
        if not 0.0 <= test_fraction < 1.0:
            raise DatasetError("test_fraction must lie in [0, 1)")
        train, test = [], []
        for i, e in enumerate(self.datapoints):
            h = hashlib.md5(e.uid.encode("utf-8")).digest()
            u = int.from_bytes(h[:8], "little") / 2**64
            (test if u < test_fraction else train).append(i)
        return np.asarray(train, dtype=np.int64), np.asarray(test, dtype=np.int64)


def tokenize(title: str) -> list[str]:
    return title.lower().split()


def build_vocab(records: Iterable[ProductRecord], max_vocab: int) -> dict[str, int]:
    """Frequency-ranked vocabulary; ids start at 1 (0 is the OOV row)."""
    counts: dict[str, int] = {}
    for rec in records:
        for tok in tokenize(rec.title):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {tok: i + 1 for i, (tok, _) in enumerate(ranked[: max_vocab - 1])}


def record_to_entity(rec: ProductRecord, vocab: dict[str, int]) -> Entity:
    descriptors: list[Descriptor] = []
    tokens = tuple(vocab.get(t, 0) for t in tokenize(rec.title))
    if tokens:
        descriptors.append(Descriptor(Modality.TEXT, tokens=tokens))
    for feats in rec.image_features:
        descriptors.append(Descriptor(Modality.VISUAL, features=np.asarray(feats)))
    return Entity(uid=rec.asin, descriptors=tuple(descriptors))


# ---------------------------------------------------------------------------
# JSON ingestion


def _parse_records(path: Path) -> Iterable[tuple[int, dict]]:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            items = json.loads(text)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: malformed JSON array: {e}") from e
        for i, obj in enumerate(items):
            yield i, obj
    else:
        for i, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                yield i, json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: malformed JSON on line {i + 1}: {e}") from e


def _read_raw_products(
    path: Path,
    features: dict[tuple[str, int], np.ndarray],
    report: IngestReport,
) -> list[ProductRecord]:
    records: list[ProductRecord] = []
    seen: set[str] = set()
    for line_no, obj in _parse_records(path):
        report.n_records += 1
        if not isinstance(obj, dict) or "ASIN" not in obj:
            raise DatasetError(f"{path}: record {line_no + 1} lacks an ASIN field")
        asin = str(obj["ASIN"])
        if asin in seen:
            report.rejected_duplicate += 1
            continue
        title = str(obj.get("title") or "")
        images = obj.get("images") or []
        if not title.strip() and not images:
            report.rejected_empty += 1
            continue
        feats: list[np.ndarray] = []
        for idx, img in enumerate(images):
            if isinstance(img, (list, tuple)):
                feats.append(np.asarray(img, dtype=np.float64))
            else:
                cached = features.get((asin, idx))
                if cached is None:
                    report.dropped_images += 1
                else:
                    feats.append(cached)
        if not tokenize(title) and not feats:
            # All image references were unresolved and there is no usable
            # title left, so the record cannot become a text-only entity.
            report.rejected_empty += 1
            continue
        seen.add(asin)
        records.append(ProductRecord(asin, title, feats, [str(a) for a in obj.get("also_buy") or []]))
        report.n_accepted += 1
    return records


def _edges_to_gt(
    dp_records: Sequence[ProductRecord],
    label_of: dict[str, int],
    n_labels: int,
    report: IngestReport,
) -> GroundTruth:
    rows = []
    for rec in dp_records:
        row = []
        for target in rec.also_buy:
            l = label_of.get(target)
            if l is None:
                report.dropped_edges += 1
            else:
                row.append(l)
        rows.append(np.asarray(sorted(set(row)), dtype=np.int64))
    return GroundTruth(len(dp_records), n_labels, rows)


def _infer_visual_width(records: Iterable[ProductRecord], default: int) -> int:
    widths = {f.shape[0] for rec in records for f in rec.image_features}
    if len(widths) > 1:
        raise DatasetError(f"inconsistent visual feature widths: {sorted(widths)}")
    return widths.pop() if widths else default


def ingest(
    path: str | Path,
    features_path: str | Path | None = None,
    max_vocab: int = DEFAULT_MAX_VOCAB,
    default_visual_width: int = 256,
) -> tuple[Dataset, IngestReport]:
    """Load a dataset from a product file or a datapoints/labels directory.

    A single product file yields the shared-catalog task: every product is
    both a datapoint and a label. A directory must hold ``datapoints.jsonl``
    and ``labels.jsonl`` (plus optional ``features.bin`` and
    ``categories.tsv``).
    """
    path = Path(path)
    report = IngestReport()
    if path.is_dir():
        features = {}
        fpath = Path(features_path) if features_path else path / "features.bin"
        if fpath.exists():
            with open(fpath, "rb") as fh:
                features = read_feature_sidecar(fh)
        label_records = _read_raw_products(path / "labels.jsonl", features, report)
        dp_records = _read_raw_products(path / "datapoints.jsonl", features, report)
        vocab = build_vocab([*label_records, *dp_records], max_vocab)
        label_of = {r.asin: i for i, r in enumerate(label_records)}
        gt = _edges_to_gt(dp_records, label_of, len(label_records), report)
        width = _infer_visual_width([*label_records, *dp_records], default_visual_width)
        categories = {}
        cpath = path / "categories.tsv"
        if cpath.exists():
            categories = load_categories(cpath, label_of)
        ds = Dataset(
            datapoints=[record_to_entity(r, vocab) for r in dp_records],
            labels=[record_to_entity(r, vocab) for r in label_records],
            datapoint_records=dp_records,
            label_records=label_records,
            gt=gt,
            vocab=vocab,
            visual_width=width,
            shared_catalog=False,
            categories=categories,
        )
        return ds, report

    features = {}
    if features_path:
        with open(features_path, "rb") as fh:
            features = read_feature_sidecar(fh)
    records = _read_raw_products(path, features, report)
    if not records:
        raise DatasetError(f"{path}: no usable records")
    vocab = build_vocab(records, max_vocab)
    label_of = {r.asin: i for i, r in enumerate(records)}
    gt = _edges_to_gt(records, label_of, len(records), report)
    width = _infer_visual_width(records, default_visual_width)
    entities = [record_to_entity(r, vocab) for r in records]
    ds = Dataset(
        datapoints=entities,
        labels=entities,
        datapoint_records=records,
        label_records=records,
        gt=gt,
        vocab=vocab,
        visual_width=width,
        shared_catalog=True,
        categories={},
    )
    return ds, report


def load_categories(path: str | Path, label_of: dict[str, int]) -> dict[int, str]:
    categories: dict[int, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        asin, _, cat = line.partition("\t")
        idx = label_of.get(asin)
        if idx is not None:
            categories[idx] = cat.strip()
    return categories


# ---------------------------------------------------------------------------
# Serialization back to the JSON schema (round-trip support)


def save_products_jsonl(
    records: Sequence[ProductRecord], path: str | Path, sidecar: dict[tuple[str, int], np.ndarray]
) -> None:
    """Write records as JSONL with sidecar references for visual features."""
    lines = []
    for rec in records:
        refs = []
        for i, feats in enumerate(rec.image_features):
            refs.append(f"sidecar://{rec.asin}/{i}")
            sidecar[(rec.asin, i)] = feats
        lines.append(
            json.dumps(
                {"ASIN": rec.asin, "title": rec.title, "images": refs, "also_buy": rec.also_buy},
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_feature_sidecar(fh: BinaryIO, features: dict[tuple[str, int], np.ndarray]) -> None:
    """Visual feature records: ASIN (length-prefixed), image index, floats."""
    widths = {v.shape[0] for v in features.values()}
    if len(widths) > 1:
        raise DatasetError(f"inconsistent feature widths: {sorted(widths)}")
    width = widths.pop() if widths else 0
    binio.write_header(fh, FEATURES_MAGIC, FEATURES_VERSION)
    binio.write_u32(fh, width)
    binio.write_u32(fh, len(features))
    for (asin, idx), vec in features.items():
        binio.write_str(fh, asin)
        binio.write_u32(fh, idx)
        binio.write_f64_array(fh, vec)


def read_feature_sidecar(fh: BinaryIO) -> dict[tuple[str, int], np.ndarray]:
    binio.read_header(fh, FEATURES_MAGIC, FEATURES_VERSION)
    width = binio.read_u32(fh)
    count = binio.read_u32(fh)
    out: dict[tuple[str, int], np.ndarray] = {}
    for _ in range(count):
        asin = binio.read_str(fh)
        idx = binio.read_u32(fh)
        out[(asin, idx)] = binio.read_f64_array(fh, width)
    return out


def save_dataset_dir(ds: Dataset, out_dir: str | Path) -> None:
    """Persist a two-catalog dataset as the JSONL + sidecar + categories layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sidecar: dict[tuple[str, int], np.ndarray] = {}
    save_products_jsonl(ds.label_records, out / "labels.jsonl", sidecar)
    save_products_jsonl(ds.datapoint_records, out / "datapoints.jsonl", sidecar)
    with open(out / "features.bin", "wb") as fh:
        write_feature_sidecar(fh, sidecar)
    if ds.categories:
        lines = [f"{ds.labels[i].uid}\t{cat}" for i, cat in sorted(ds.categories.items())]
        (out / "categories.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic multi-modal datasets with planted cluster structure


@dataclass
class SyntheticSpec:
    """Knobs for the planted-cluster generator.

    Relevance is same-cluster membership; when ``avg_positives`` is set,
    each datapoint keeps each same-cluster label independently with
    probability ``avg_positives / cluster size`` (always keeping at least
    one) to reach realistic sparsity.
    """

    clusters: int = 20
    n_labels: int = 200
    n_datapoints: int = 1000
    visual_width: int = 32
    min_descriptors: int = 1
    max_descriptors: int = 3
    modality_dropout: float = 0.1
    noise: float = 0.2
    seed: int = 0
    avg_positives: float | None = None
    tokens_per_cluster: int = 8

    def __post_init__(self) -> None:
        if self.clusters > self.n_labels:
            raise DatasetError("need at least one label per cluster")
        if not 0.0 <= self.modality_dropout <= 1.0:
            raise DatasetError("modality_dropout must lie in [0, 1]")
        if self.min_descriptors < 1 or self.max_descriptors < self.min_descriptors:
            raise DatasetError("descriptor range must satisfy 1 <= min <= max")
        if self.noise < 0.0:
            raise DatasetError("noise must be non-negative")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic-under-seed clustered dataset; categories are cluster ids."""
    rng = np.random.default_rng(spec.seed)
    k = spec.clusters
    protos = rng.standard_normal((k, spec.visual_width))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    cluster_tokens = [
        [f"c{c:03d}w{j}" for j in range(spec.tokens_per_cluster)] for c in range(k)
    ]
    all_tokens = [t for toks in cluster_tokens for t in toks]

    def make_record(asin: str, cluster: int) -> ProductRecord:
        m = int(rng.integers(spec.min_descriptors, spec.max_descriptors + 1))
        modalities = rng.integers(0, 2, size=m)
        if rng.uniform() < spec.modality_dropout:
            modalities[:] = int(rng.integers(0, 2))
        title_parts: list[str] = []
        feats: list[np.ndarray] = []
        for mod in modalities:
            if mod == 0:
                words = list(cluster_tokens[cluster])
                if spec.noise > 0:
                    corrupt = rng.uniform(size=len(words)) < min(1.0, spec.noise)
                    for idx in np.flatnonzero(corrupt):
                        words[idx] = all_tokens[int(rng.integers(0, len(all_tokens)))]
                title_parts.extend(words)
            else:
                vec = protos[cluster].copy()
                if spec.noise > 0:
                    # Prototypes are unit-norm, so this perturbation has
                    # expected norm ~= noise: the same relative corruption
                    # level the text modality gets.
                    vec = vec + spec.noise * rng.standard_normal(
                        spec.visual_width
                    ) / np.sqrt(spec.visual_width)
                feats.append(vec)
        if not title_parts and not feats:
            title_parts = list(cluster_tokens[cluster])
        return ProductRecord(asin, " ".join(title_parts), feats, [])

    label_cluster = np.arange(spec.n_labels) % k
    label_records = [
        make_record(f"L{i:06d}", int(label_cluster[i])) for i in range(spec.n_labels)
    ]
    dp_cluster = rng.integers(0, k, size=spec.n_datapoints)
    dp_records = [
        make_record(f"D{i:06d}", int(dp_cluster[i])) for i in range(spec.n_datapoints)
    ]

    members = [np.flatnonzero(label_cluster == c) for c in range(k)]
    rows = []
    for i in range(spec.n_datapoints):
        mates = members[int(dp_cluster[i])]
        if spec.avg_positives is None:
            keep = mates
        else:
            p = min(1.0, spec.avg_positives / len(mates))
            mask = rng.uniform(size=len(mates)) < p
            keep = mates[mask]
            if keep.size == 0:
                keep = mates[[int(rng.integers(0, len(mates)))]]
        rows.append(np.asarray(keep, dtype=np.int64))
    gt = GroundTruth(spec.n_datapoints, spec.n_labels, rows)

    # also_buy edges mirror the ground truth so the dataset round-trips
    # through the JSON schema.
    for i, rec in enumerate(dp_records):
        rec.also_buy = [label_records[int(l)].asin for l in gt.positives[i]]

    vocab = build_vocab([*label_records, *dp_records], max_vocab=DEFAULT_MAX_VOCAB)
    categories = {i: f"cluster{label_cluster[i]:03d}" for i in range(spec.n_labels)}
    return Dataset(
        datapoints=[record_to_entity(r, vocab) for r in dp_records],
        labels=[record_to_entity(r, vocab) for r in label_records],
        datapoint_records=dp_records,
        label_records=label_records,
        gt=gt,
        vocab=vocab,
        visual_width=spec.visual_width,
        shared_catalog=False,
        categories=categories,
    )


# ---------------------------------------------------------------------------
# Prediction files: one tab-separated row per (test id, label id) with the
# fused, classifier and similarity scores.


def write_predictions(
    path: str | Path,
    rows: Sequence[tuple[str, Sequence[tuple[str, float, float, float]]]],
) -> None:
    """``rows`` holds (test id, [(label id, s, c, a), ...]) best-first."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("test_id\tlabel_id\ts\tc\ta\n")
        for test_id, ranked in rows:
            for label_id, s, c, a in ranked:
                fh.write(
                    f"{test_id}\t{label_id}\t{s:.17g}\t{c:.17g}\t{a:.17g}\n"
                )


def read_predictions(
    path: str | Path,
) -> list[tuple[str, list[tuple[str, float, float, float]]]]:
    out: dict[str, list[tuple[str, float, float, float]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("test_id\t"):
            raise DatasetError(f"{path}: missing prediction header")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise DatasetError(f"{path}: bad prediction row {line!r}")
            test_id, label_id, s, c, a = parts
            if test_id not in out:
                out[test_id] = []
                order.append(test_id)
            out[test_id].append((label_id, float(s), float(c), float(a)))
    return [(tid, out[tid]) for tid in order]

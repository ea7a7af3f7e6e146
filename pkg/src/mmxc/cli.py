"""Command-line surface: dataset prep, training, retrieval, scoring, reports."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, binio
from .ann import AugmentedIndex, load_shortlists, save_shortlists
from .data import (
    Dataset,
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    ingest,
    read_predictions,
    save_dataset_dir,
    write_predictions,
)
from .encoders import write_preembedding_cache
from .metrics import (
    auc,
    bin_decomposition,
    category_report,
    make_bins,
    ndcg_at_k,
    precision_at_k,
    recall_at_k,
    validate_predictions,
)
from .reporting import (
    render_bin_figure,
    render_category_figure,
    write_bin_series,
    write_category_series,
    write_metrics_table,
    write_summary,
)
from .trainer import (
    PipelineConfig,
    Predictor,
    TrainData,
    build_index_from_state,
    init_state,
    load_checkpoint,
    run_module2,
    run_pipeline,
    save_checkpoint,
    similarity_predictions,
)

logger = logging.getLogger(__name__)

ABLATIONS: dict[str, dict] = {
    "full": {},
    "no-pos": {"no_hard_pos": True},
    "no-pos-neg": {"no_hard_pos": True, "no_hard_neg": True},
    "p-i-bag": {"retrieval_only": True},
    "p-i-vec": {"retrieval_only": True, "vec_only_index": True},
    "concat": {"concat_scorer": True},
    "no-self-attn": {"no_self_attention": True},
    "no-xattn": {"no_cross_attention": True},
    "alpha-one": {"alpha_one": True},
}

_METRIC_KS = (1, 5, 10)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"{path}:{i + 1}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, typ) -> object:
    if typ is bool or typ == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    if typ is int or typ == "int":
        return int(value)
    if typ is float or typ == "float":
        return float(value)
    return value


def build_config(args: argparse.Namespace, base: PipelineConfig | None = None) -> PipelineConfig:
    """Defaults (or a checkpoint snapshot) + config file + --set + flags."""
    values = dataclasses.asdict(base) if base is not None else dataclasses.asdict(PipelineConfig())
    field_types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise DatasetError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    for key, value in raw.items():
        if key not in field_types:
            raise DatasetError(f"unknown configuration key {key!r}")
        values[key] = _coerce(value, field_types[key])
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "beta", None) is not None:
        values["beta"] = args.beta
    if getattr(args, "shortlist_cap", None) is not None:
        values["shortlist_cap"] = args.shortlist_cap
    if getattr(args, "exact_ann", False):
        values["ann_mode"] = "exact"
    if getattr(args, "alpha_one", False):
        values["alpha_one"] = True
    return PipelineConfig(**values)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--beta", type=float, default=None, help="score fusion weight")
    p.add_argument("--shortlist-cap", type=int, default=None)
    p.add_argument("--exact-ann", action="store_true", help="force exact-scan retrieval")
    p.add_argument("--alpha-one", action="store_true", help="use label embeddings as classifiers")


def _load_dataset(args: argparse.Namespace) -> Dataset:
    ds, report = ingest(args.data, features_path=getattr(args, "features", None))
    logger.info("ingest: %s", report.summary())
    return ds


def _split(ds: Dataset, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    return ds.split(cfg.test_fraction)


def _train_view(ds: Dataset, rows: np.ndarray) -> TrainData:
    return TrainData(
        datapoints=[ds.datapoints[int(i)] for i in rows],
        labels=ds.labels,
        gt=ds.gt.subset(rows),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        clusters=args.clusters,
        n_labels=args.labels,
        n_datapoints=args.datapoints,
        visual_width=args.visual_width,
        min_descriptors=args.min_descriptors,
        max_descriptors=args.max_descriptors,
        modality_dropout=args.modality_dropout,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
        avg_positives=args.avg_positives,
    )
    ds = generate_synthetic(spec)
    save_dataset_dir(ds, args.out)
    print(
        f"wrote synthetic dataset: {ds.n_datapoints} datapoints, {ds.n_labels} labels, "
        f"{ds.gt.total_pairs()} positive pairs -> {args.out}"
    )
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    ds, report = ingest(args.data, features_path=args.features)
    print(f"ingest: {report.summary()}")
    cfg = build_config(args)
    if args.checkpoint:
        with open(args.checkpoint, "rb") as fh:
            state, cfg = load_checkpoint(fh)
    else:
        state = init_state(cfg, ds.vocab_size, ds.visual_width, ds.n_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache_path = out / "preembed.bin"
    entities = ds.datapoints if ds.shared_catalog else [*ds.datapoints, *ds.labels]
    with open(cache_path, "wb") as fh:
        n = write_preembedding_cache(fh, entities, state.encoder)
    print(f"cached {n} descriptor pre-embeddings -> {cache_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    state = None
    shortlists = None
    if args.resume:
        with open(args.resume, "rb") as fh:
            state, base_cfg = load_checkpoint(fh)
        cfg = build_config(args, base=base_cfg)
    else:
        cfg = build_config(args)
    if args.shortlists:
        with open(args.shortlists, "rb") as fh:
            shortlists = load_shortlists(fh)
    train_rows, test_rows = _split(ds, cfg)
    data = _train_view(ds, train_rows)
    logger.info(
        "training on %d datapoints / %d labels (%d held out)",
        len(train_rows),
        ds.n_labels,
        len(test_rows),
    )
    t0 = time.monotonic()
    result = run_pipeline(
        data,
        cfg,
        vocab_size=ds.vocab_size,
        visual_width=ds.visual_width,
        stop_after=args.stop_after,
        state=state,
        shortlists=shortlists,
    )
    elapsed = time.monotonic() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "checkpoint.bin", "wb") as fh:
        save_checkpoint(fh, result.state, cfg)
    if result.index is not None:
        with open(out / "index.bin", "wb") as fh:
            result.index.save(fh)
    if result.shortlists is not None:
        with open(out / "shortlists.bin", "wb") as fh:
            save_shortlists(fh, result.shortlists)
    for log, name in ((result.m1_log, "module1"), (result.m4_log, "module4")):
        if log is not None and log.loss_per_epoch:
            print(
                f"{name}: {len(log.loss_per_epoch)} epochs, "
                f"loss {log.loss_per_epoch[0]:.4f} -> {log.loss_per_epoch[-1]:.4f}"
            )
    print(f"phase={result.state.phase} elapsed={elapsed:.1f}s -> {out}")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    with open(args.checkpoint, "rb") as fh:
        state, cfg = load_checkpoint(fh)
    cfg = build_config(args, base=cfg)
    train_rows, _ = _split(ds, cfg)
    data = _train_view(ds, train_rows)
    index, shortlists = run_module2(state, data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.bin", "wb") as fh:
        index.save(fh)
    with open(out / "shortlists.bin", "wb") as fh:
        save_shortlists(fh, shortlists)
    with open(out / "checkpoint.bin", "wb") as fh:
        save_checkpoint(fh, state, cfg)
    print(
        f"indexed {index.n_entries} entries over {index.n_labels} labels "
        f"({index.mode}); {len(shortlists)} shortlists -> {out}"
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    with open(args.checkpoint, "rb") as fh:
        state, cfg = load_checkpoint(fh)
    cfg = build_config(args, base=cfg)
    train_rows, test_rows = _split(ds, cfg)
    rows = {"test": test_rows, "train": train_rows, "all": np.arange(ds.n_datapoints)}[
        args.split
    ]
    if args.index:
        with open(args.index, "rb") as fh:
            index = AugmentedIndex.load(fh)
    else:
        index = build_index_from_state(state, _train_view(ds, train_rows), cfg)
    predictor = Predictor(state, ds.labels, index, cfg)
    out_rows = []
    total_queries = 0
    total_evals = 0
    for i in rows:
        entity = ds.datapoints[int(i)]
        triples, counters = predictor.predict(entity, args.k)
        total_queries += counters.index_queries
        total_evals += counters.classifier_evals
        out_rows.append(
            (
                entity.uid,
                [(ds.labels[t.label].uid, t.s, t.c, t.a) for t in triples],
            )
        )
    write_predictions(args.out, out_rows)
    print(
        f"predicted top-{args.k} for {len(out_rows)} datapoints "
        f"({total_queries} index queries, {total_evals} classifier evals) -> {args.out}"
    )
    return 0


def _ranked_for_metrics(
    ds: Dataset, parsed: list[tuple[str, list[tuple[str, float, float, float]]]]
) -> tuple[list[list[tuple[int, float]]], list[np.ndarray]]:
    label_of = ds.label_index()
    dp_of = {e.uid: i for i, e in enumerate(ds.datapoints)}
    preds = []
    gt_rows = []
    for test_id, ranked in parsed:
        if test_id not in dp_of:
            raise DatasetError(f"prediction references unknown datapoint {test_id!r}")
        preds.append([(label_of[lab], s) for lab, s, _, _ in ranked])
        gt_rows.append(ds.gt.positives[dp_of[test_id]])
    validate_predictions(preds)
    return preds, gt_rows


def _metric_rows(
    preds: list[list[tuple[int, float]]], gt_rows: list[np.ndarray], n_labels: int, ks
) -> list[tuple[str, float]]:
    rows: list[tuple[str, float]] = []
    for k in ks:
        rows.append((f"P@{k}", precision_at_k(preds, gt_rows, k)))
    for k in ks:
        rows.append((f"N@{k}", ndcg_at_k(preds, gt_rows, k)))
    for k in ks:
        rows.append((f"R@{k}", recall_at_k(preds, gt_rows, k)))
    rows.append(("AUC", auc(preds, gt_rows, n_labels)))
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    cfg = build_config(args)
    parsed = read_predictions(args.predictions)
    preds, gt_rows = _ranked_for_metrics(ds, parsed)
    ks = args.k or list(_METRIC_KS)
    rows = _metric_rows(preds, gt_rows, ds.n_labels, ks)

    train_rows, _ = _split(ds, cfg)
    freq = ds.gt.subset(train_rows).label_frequency()
    bins = make_bins(freq, n_bins=args.bins)
    k_bin = max(ks)
    contributions = bin_decomposition(preds, gt_rows, bins, k_bin)
    cats = category_report(preds, gt_rows, ds.categories, min(ks)) if ds.categories else {}

    write_metrics_table(sys.stdout, rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.tsv", "w", encoding="utf-8") as fh:
        write_metrics_table(fh, rows)
    write_bin_series(out / "bins.tsv", contributions, bins.masses)
    if cats:
        write_category_series(out / "categories.tsv", cats)
    write_summary(out / "summary.txt", rows, contributions, cats)
    if not args.no_figures:
        render_bin_figure(out / "bins.png", contributions, k_bin)
        if cats:
            render_category_figure(out / "categories.png", cats, min(ks))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.variant not in ABLATIONS:
        print(f"unknown ablation {args.variant!r}; choices: {', '.join(ABLATIONS)}", file=sys.stderr)
        return 2
    toggles = dict(ABLATIONS[args.variant])
    retrieval_only = toggles.pop("retrieval_only", False)
    ds = _load_dataset(args)
    cfg = build_config(args)
    cfg = dataclasses.replace(cfg, **toggles)
    train_rows, test_rows = _split(ds, cfg)
    data = _train_view(ds, train_rows)
    test_entities = [ds.datapoints[int(i)] for i in test_rows]
    gt_rows = [ds.gt.positives[int(i)] for i in test_rows]

    if retrieval_only:
        result = run_pipeline(
            data, cfg, vocab_size=ds.vocab_size, visual_width=ds.visual_width, stop_after="module2"
        )
        assert result.index is not None
        preds = similarity_predictions(result.state, result.index, test_entities, cfg)
    else:
        result = run_pipeline(data, cfg, vocab_size=ds.vocab_size, visual_width=ds.visual_width)
        index = build_index_from_state(result.state, data, cfg)
        predictor = Predictor(result.state, ds.labels, index, cfg)
        preds = []
        for e in test_entities:
            triples, _ = predictor.predict(e, max(_METRIC_KS))
            preds.append([(t.label, t.s) for t in triples])

    rows = _metric_rows(preds, gt_rows, ds.n_labels, _METRIC_KS)
    header = "variant\t" + "\t".join(name for name, _ in rows)
    line = args.variant + "\t" + "\t".join(f"{v:.6f}" for _, v in rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablations.tsv"
    if not table.exists():
        table.write_text(header + "\n", encoding="utf-8")
    with open(table, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    print(header)
    print(line)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmxc",
        description="Multi-modal extreme multi-label classification engine",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clustered dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--labels", type=int, default=200)
    p.add_argument("--datapoints", type=int, default=1000)
    p.add_argument("--visual-width", type=int, default=32)
    p.add_argument("--min-descriptors", type=int, default=1)
    p.add_argument("--max-descriptors", type=int, default=3)
    p.add_argument("--modality-dropout", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--avg-positives", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest a dataset and cache pre-embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None, help="visual feature sidecar file")
    p.add_argument("--checkpoint", default=None, help="encoder snapshot to embed with")
    p.add_argument("--out", required=True)
    _add_common_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the four-module training pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--stop-after",
        choices=["module1", "module2", "module3", "module4"],
        default=None,
    )
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--shortlists", default=None, help="previously saved shortlists")
    _add_common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="augmented retrieval only (module II)")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_common_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("predict", help="batch top-k scoring")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", default=None, help="serialized index (else rebuilt)")
    p.add_argument("--out", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    _add_common_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics, frequency bins and category report")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-k", type=int, action="append", default=None)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--no-figures", action="store_true")
    _add_common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one named pipeline variant end to end")
    p.add_argument("variant", help=", ".join(ABLATIONS))
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--out", required=True)
    _add_common_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (DatasetError, binio.FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

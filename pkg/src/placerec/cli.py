"""Command-line surface tying the pipeline together.

Every command accepts an optional ``--config`` file of ``key=value``
lines (keys match the long flag names with underscores); explicit flags
override file values.  Randomized commands require a seed, and rerunning
any command with the same inputs and seed produces byte-identical
outputs.  Errors exit with a per-class code and a single machine-parsable
``error:<Class>: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import encoding, evaluation, features, initialization, training, whitening
from .errors import (
    ConfigError,
    DegenerateDescriptor,
    DimensionMismatch,
    DuplicateId,
    EmptyIndex,
    FormatError,
    InsufficientDynamic,
    InsufficientStatic,
    InvalidSpec,
    NoPositive,
    PlacerecError,
    TooFewSamples,
    ZeroFeature,
)

EXIT_CODES: dict[type, int] = {
    ConfigError: 2,
    FormatError: 3,
    DimensionMismatch: 4,
    ZeroFeature: 5,
    InvalidSpec: 6,
    TooFewSamples: 7,
    InsufficientStatic: 8,
    InsufficientDynamic: 9,
    DegenerateDescriptor: 10,
    NoPositive: 11,
    EmptyIndex: 12,
    DuplicateId: 13,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


@dataclass(frozen=True)
class Opt:
    name: str  # long flag without leading dashes, e.g. "informative-fraction"
    cast: Callable
    default: object = None
    required: bool = False
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def load_config(path) -> dict[str, str]:
    """Parse a UTF-8 key=value config file; '#' starts a comment line."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config file {path} is not UTF-8: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _resolve(args: argparse.Namespace, opts: list[Opt]) -> argparse.Namespace:
    """Merge flag values, config-file values, and declared defaults."""
    config: dict[str, str] = {}
    if getattr(args, "config", None):
        config = load_config(args.config)
        known = {o.dest for o in opts} | {o.name for o in opts}
        for key in config:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
    merged = argparse.Namespace()
    for opt in opts:
        value = getattr(args, opt.dest)
        if value is None:
            raw = config.get(opt.dest, config.get(opt.name))
            if raw is not None:
                try:
                    value = opt.cast(raw)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"config key {opt.dest}: {exc}") from exc
            elif opt.required:
                raise ConfigError(f"missing required option --{opt.name}")
            else:
                value = opt.default
        setattr(merged, opt.dest, value)
    return merged


def _read_feature_inputs(path) -> list[features.LocalFeatureSet]:
    """Read one SRLF file or every *.srlf in a directory (sorted by name)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.srlf"))
        if not files:
            raise FormatError(f"no .srlf files in {p}")
        return [features.read_feature_file(f) for f in files]
    return [features.read_feature_file(p)]


def _tags_for(sets, manifest_path) -> list[features.GeoTag]:
    tags = features.read_geotag_manifest(manifest_path)
    missing = [fs.image_id for fs in sets if fs.image_id not in tags]
    if missing:
        raise FormatError(f"manifest lacks geotags for {missing[:5]}")
    return [tags[fs.image_id] for fs in sets]


def read_partition_file(path) -> features.SemanticPartition:
    """Partition files reuse the config syntax with two comma-list keys."""
    values = load_config(path)
    try:
        static = frozenset(_int_list(values["static_classes"]))
        dynamic = frozenset(_int_list(values["dynamic_classes"]))
    except KeyError as exc:
        raise ConfigError(f"partition file {path} is missing key {exc}") from exc
    return features.SemanticPartition(static_classes=static, dynamic_classes=dynamic)


def write_partition_file(path, partition: features.SemanticPartition) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("static_classes=" + ",".join(str(c) for c in sorted(partition.static_classes)))
        fh.write("\n")
        fh.write("dynamic_classes=" + ",".join(str(c) for c in sorted(partition.dynamic_classes)))
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

SYNTH_OPTS = [
    Opt("out", str, required=True, help="output directory"),
    Opt("seed", int, required=True),
    Opt("places", int, 40),
    Opt("views", int, 4),
    Opt("depth", int, 16),
    Opt("height", int, 6),
    Opt("width", int, 6),
    Opt("informative-fraction", float, 0.3),
    Opt("clutter-noise", float, 0.04),
    Opt("view-noise", float, 0.12),
]


def cmd_synth(o) -> int:
    spec = features.SyntheticPlaceSpec(
        num_places=o.places,
        views_per_place=o.views,
        depth=o.depth,
        height=o.height,
        width=o.width,
        informative_fraction=o.informative_fraction,
        clutter_noise_scale=o.clutter_noise,
        view_noise_scale=o.view_noise,
        rng_seed=o.seed,
    )
    sets, tags = features.generate_synthetic_dataset(spec)
    out = Path(o.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for fs in sets:
        features.write_feature_file(fs, out / "features" / f"{fs.image_id}.srlf")
    features.write_geotag_manifest(out / "manifest.csv", [fs.image_id for fs in sets], tags)
    write_partition_file(out / "partition.cfg", features.DEFAULT_PARTITION)
    print(f"wrote {len(sets)} feature sets to {out}")
    return 0


INIT_OPTS = [
    Opt("features", str, required=True, help="feature file or directory"),
    Opt("out", str, required=True, help="output model path"),
    Opt("seed", int, required=True),
    Opt("mode", str, "normal", help="normal or semantic"),
    Opt("clusters", int, 64),
    Opt("shadows", int, 2),
    Opt("scale", float, encoding.DEFAULT_SCALE),
    Opt("pool-size", int, initialization.DEFAULT_POOL_SIZE),
    Opt("candidates", int, None, help="shadow candidate count (semantic mode)"),
    Opt("partition", str, None, help="partition file (semantic mode)"),
]


def cmd_init(o) -> int:
    if o.mode not in ("normal", "semantic"):
        raise ConfigError(f"--mode must be 'normal' or 'semantic', got {o.mode!r}")
    sets = _read_feature_inputs(o.features)
    rng = np.random.default_rng(o.seed)
    pool, labels = initialization.sample_feature_pool(sets, o.pool_size, rng)
    if o.mode == "normal":
        model = initialization.init_normal(pool, o.clusters, o.shadows, scale=o.scale, seed=rng)
    else:
        if labels is None:
            raise InsufficientStatic("semantic initialization needs a labels channel")
        partition = (
            read_partition_file(o.partition) if o.partition else features.DEFAULT_PARTITION
        )
        model = initialization.init_semantic(
            pool,
            labels,
            partition,
            o.clusters,
            o.shadows,
            n_candidates=o.candidates,
            scale=o.scale,
            seed=rng,
        )
    encoding.save_model(model, o.out)
    print(
        f"initialized {o.mode} model: K={model.num_clusters} S={model.num_shadows} "
        f"D={model.depth} -> {o.out}"
    )
    return 0


TRAIN_OPTS = [
    Opt("features", str, required=True),
    Opt("manifest", str, required=True),
    Opt("model", str, required=True, help="initial model path"),
    Opt("out", str, required=True, help="trained model path"),
    Opt("seed", int, required=True),
    Opt("history", str, None, help="training history CSV path"),
    Opt("epochs", int, 30),
    Opt("lr", float, 0.01),
    Opt("momentum", float, 0.9),
    Opt("weight-decay", float, 0.001),
    Opt("margin", float, 0.1),
    Opt("lr-halving-period", int, 5),
    Opt("early-stop-patience", int, 10),
    Opt("n-neg", int, 10),
    Opt("val-fraction", float, 0.2),
    Opt("positive-radius", float, 10.0),
    Opt("negative-radius", float, 25.0),
]


def _split_by_place(sets, tags, val_fraction: float, rng) -> tuple[list[int], list[int]]:
    """Hold out a fraction of places (not views) for validation."""
    groups = features.group_places(tags)
    unique = sorted(set(groups))
    perm = rng.permutation(len(unique))
    n_val = max(1, int(round(val_fraction * len(unique))))
    val_groups = {unique[i] for i in perm[:n_val]}
    train_idx = [i for i, g in enumerate(groups) if g not in val_groups]
    val_idx = [i for i, g in enumerate(groups) if g in val_groups]
    return train_idx, val_idx


def cmd_train(o) -> int:
    sets = _read_feature_inputs(o.features)
    tags = _tags_for(sets, o.manifest)
    model = encoding.load_model(o.model)
    config = training.SgdConfig(
        learning_rate=o.lr,
        momentum=o.momentum,
        weight_decay=o.weight_decay,
        margin=o.margin,
        epochs=o.epochs,
        lr_halving_period=o.lr_halving_period,
        early_stop_patience=o.early_stop_patience,
        n_neg=o.n_neg,
        rng_seed=o.seed,
        positive_radius=o.positive_radius,
        negative_radius=o.negative_radius,
    )
    rng = np.random.default_rng(o.seed)
    train_idx, val_idx = _split_by_place(sets, tags, o.val_fraction, rng)
    result = training.train(
        [sets[i] for i in train_idx],
        [tags[i] for i in train_idx],
        [sets[i] for i in val_idx],
        [tags[i] for i in val_idx],
        model,
        config,
    )
    encoding.save_model(result.model, o.out)
    training.save_optimizer_state(str(o.out) + ".opt", result.optimizer_state)
    if o.history:
        training.write_history_csv(o.history, result.history)
    print(
        f"trained {len(result.history) - 1} epochs; best val recall@1 "
        f"{result.best_val_recall1:.4f} at epoch {result.best_epoch} -> {o.out}"
    )
    return 0


ENCODE_OPTS = [
    Opt("features", str, required=True),
    Opt("model", str, required=True),
    Opt("out", str, required=True, help="descriptor file path"),
    Opt("whitening", str, None, help="apply this whitening transform"),
    Opt("baseline", str, "no", help="'yes' uses the plain-VLAD path (S=0 models)"),
    Opt("threads", int, 1),
]


def cmd_encode(o) -> int:
    sets = _read_feature_inputs(o.features)
    model = encoding.load_model(o.model)
    if o.baseline == "yes":
        vectors = np.stack([encoding.encode_baseline(fs, model).values for fs in sets])
    else:
        vectors = encoding.encode_batch(sets, model, threads=o.threads)
    if o.whitening:
        transform = whitening.load_whitening(o.whitening)
        vectors = whitening.apply_whitening_batch(transform, vectors)
    encoding.write_descriptor_file(o.out, [fs.image_id for fs in sets], vectors)
    print(f"encoded {len(sets)} images ({vectors.shape[1]}-D) -> {o.out}")
    return 0


WHITEN_OPTS = [
    Opt("descriptors", str, required=True, help="training descriptor file"),
    Opt("out", str, required=True, help="output transform path"),
    Opt("target-dim", int, None, help="default: full descriptor dimension"),
]


def cmd_whiten(o) -> int:
    _, vectors = encoding.read_descriptor_file(o.descriptors)
    target = o.target_dim if o.target_dim is not None else vectors.shape[1]
    transform = whitening.fit_whitening(vectors, target)
    whitening.save_whitening(transform, o.out)
    print(f"fit whitening {transform.input_dim}-D -> {transform.target_dim}-D: {o.out}")
    return 0


EVAL_OPTS = [
    Opt("db-descriptors", str, required=True),
    Opt("db-manifest", str, required=True),
    Opt("query-descriptors", str, required=True),
    Opt("query-manifest", str, required=True),
    Opt("out", str, required=True, help="recall CSV path"),
    Opt("n", _int_list, [1, 5, 10]),
    Opt("dr", float, 25.0),
    Opt("whitening", str, None),
    Opt("gnuplot-out", str, None),
]


def cmd_eval(o) -> int:
    db_ids, db_vectors = encoding.read_descriptor_file(o.db_descriptors)
    db_tag_map = features.read_geotag_manifest(o.db_manifest)
    query_ids, query_vectors = encoding.read_descriptor_file(o.query_descriptors)
    query_tag_map = features.read_geotag_manifest(o.query_manifest)
    for ids, tag_map, what in ((db_ids, db_tag_map, "db"), (query_ids, query_tag_map, "query")):
        missing = [i for i in ids if i not in tag_map]
        if missing:
            raise FormatError(f"{what} manifest lacks geotags for {missing[:5]}")
    if o.whitening:
        transform = whitening.load_whitening(o.whitening)
        db_vectors = whitening.apply_whitening_batch(transform, db_vectors)
        query_vectors = whitening.apply_whitening_batch(transform, query_vectors)
    index = evaluation.build_index(db_ids, db_vectors, [db_tag_map[i] for i in db_ids])
    result = evaluation.recall_at(
        index, query_vectors, [query_tag_map[i] for i in query_ids], o.n, d_r=o.dr
    )
    evaluation.write_recall_csv(o.out, result)
    if o.gnuplot_out:
        evaluation.write_recall_gnuplot(o.gnuplot_out, result)
    for n in result.n_values:
        print(f"recall@{n} = {result.recalls[n]:.4f}")
    if result.num_unreachable:
        print(f"unreachable queries: {result.num_unreachable}/{result.num_queries}")
    return 0


GRADCHECK_OPTS = [
    Opt("seed", int, required=True),
    Opt("trials", int, 20),
    Opt("depth", int, 8),
    Opt("clusters", int, 4),
    Opt("shadows", int, 2),
    Opt("grid", int, 6),
    Opt("n-neg", int, 2),
    Opt("step", float, 1e-5),
    Opt("tolerance", float, 1e-5),
]


def cmd_gradcheck(o) -> int:
    report = training.gradient_check(
        o.seed,
        trials=o.trials,
        depth=o.depth,
        clusters=o.clusters,
        shadows=o.shadows,
        grid=o.grid,
        n_neg=o.n_neg,
        step=o.step,
        tolerance=o.tolerance,
    )
    print(f"max relative error: {report.max_rel_error:.3e} over {len(report.instances)} instances")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


ATTENTION_OPTS = [
    Opt("features", str, required=True),
    Opt("model", str, required=True),
    Opt("out", str, required=True, help="attention CSV path"),
]


def cmd_attention_export(o) -> int:
    sets = _read_feature_inputs(o.features)
    model = encoding.load_model(o.model)
    entries = []
    for fs in sets:
        _, maps = encoding.encode_with_attention(fs, model)
        entries.append((fs, maps))
    encoding.write_attention_csv(o.out, entries)
    print(f"exported attention for {len(sets)} images -> {o.out}")
    return 0


REPRO_OPTS = [
    Opt("out", str, required=True),
    Opt("seed", int, required=True),
    Opt("places", int, 40),
    Opt("views", int, 4),
    Opt("depth", int, 16),
    Opt("height", int, 6),
    Opt("width", int, 6),
    Opt("clusters", int, 8),
    Opt("shadows", int, 2),
    Opt("epochs", int, 10),
    Opt("n-neg", int, 10),
    Opt("target-dim", int, 32, help="whitening dimension for the whitened run"),
]


def cmd_repro_synthetic(o) -> int:
    """End-to-end synthetic pipeline: synth, init, train, whiten, eval."""
    started = time.perf_counter()
    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = features.SyntheticPlaceSpec(
        num_places=o.places,
        views_per_place=o.views,
        depth=o.depth,
        height=o.height,
        width=o.width,
        informative_fraction=0.3,
        clutter_noise_scale=0.04,
        view_noise_scale=0.12,
        rng_seed=o.seed,
    )
    sets, tags = features.generate_synthetic_dataset(spec)
    dataset_dir = out / "dataset"
    (dataset_dir / "features").mkdir(parents=True, exist_ok=True)
    for fs in sets:
        features.write_feature_file(fs, dataset_dir / "features" / f"{fs.image_id}.srlf")
    features.write_geotag_manifest(
        dataset_dir / "manifest.csv", [fs.image_id for fs in sets], tags
    )
    write_partition_file(dataset_dir / "partition.cfg", features.DEFAULT_PARTITION)

    rng = np.random.default_rng(o.seed)
    train_idx, val_idx = _split_by_place(sets, tags, 0.2, rng)
    train_sets = [sets[i] for i in train_idx]
    train_tags = [tags[i] for i in train_idx]
    val_sets = [sets[i] for i in val_idx]
    val_tags = [tags[i] for i in val_idx]

    pool, labels = initialization.sample_feature_pool(train_sets, seed=rng)
    baseline_init = initialization.init_normal(pool, o.clusters, 0, seed=rng)
    sc_init = initialization.init_semantic(
        pool, labels, features.DEFAULT_PARTITION, o.clusters, o.shadows, seed=rng
    )
    encoding.save_model(baseline_init, out / "model_baseline_init.srlm")
    encoding.save_model(sc_init, out / "model_sc_init.srlm")

    config = training.SgdConfig(epochs=o.epochs, n_neg=o.n_neg, rng_seed=o.seed)
    baseline_result = training.train(
        train_sets, train_tags, val_sets, val_tags, baseline_init, config
    )
    sc_result = training.train(train_sets, train_tags, val_sets, val_tags, sc_init, config)
    encoding.save_model(baseline_result.model, out / "model_baseline_trained.srlm")
    encoding.save_model(sc_result.model, out / "model_sc_trained.srlm")
    training.write_history_csv(out / "history_baseline.csv", baseline_result.history)
    training.write_history_csv(out / "history_sc.csv", sc_result.history)

    train_vectors = encoding.encode_batch(train_sets, sc_result.model)
    # keep the whitened run full-rank: no more directions than half the fit set
    target_dim = min(o.target_dim, train_vectors.shape[1], max(1, len(train_sets) // 2))
    transform = whitening.fit_whitening(train_vectors, target_dim)
    whitening.save_whitening(transform, out / "whitening.srlw")

    db_idx, query_idx = training.split_views_for_eval(val_sets, val_tags)
    db_sets = [val_sets[i] for i in db_idx]
    db_tags = [val_tags[i] for i in db_idx]
    query_sets = [val_sets[i] for i in query_idx]
    query_tags = [val_tags[i] for i in query_idx]
    n_values = [1, 5, 10]

    def evaluate(model, whiten_transform=None):
        db = encoding.encode_batch(db_sets, model)
        queries = encoding.encode_batch(query_sets, model)
        if whiten_transform is not None:
            db = whitening.apply_whitening_batch(whiten_transform, db)
            queries = whitening.apply_whitening_batch(whiten_transform, queries)
        index = evaluation.build_index([fs.image_id for fs in db_sets], db, db_tags)
        return evaluation.recall_at(index, queries, query_tags, n_values)

    results = {
        "baseline_init": evaluate(baseline_init),
        "sc_init": evaluate(sc_init),
        "baseline_trained": evaluate(baseline_result.model),
        "sc_trained": evaluate(sc_result.model),
        "sc_trained_whitened": evaluate(sc_result.model, transform),
    }
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("model,N,recall\n")
        for name, result in results.items():
            for n in result.n_values:
                fh.write(f"{name},{n},{float(result.recalls[n])!r}\n")

    elapsed = time.perf_counter() - started
    for name, result in results.items():
        print(f"{name}: " + " ".join(f"r@{n}={result.recalls[n]:.4f}" for n in result.n_values))
    print(f"done in {elapsed:.1f}s -> {out}")
    return 0


COMMANDS: list[tuple[str, str, list[Opt], Callable]] = [
    ("synth", "generate a synthetic planted-place dataset", SYNTH_OPTS, cmd_synth),
    ("init", "initialize a cluster model from features", INIT_OPTS, cmd_init),
    ("train", "train a model with mined tuples and SGD", TRAIN_OPTS, cmd_train),
    ("encode", "encode features into descriptors", ENCODE_OPTS, cmd_encode),
    ("whiten", "fit a PCA whitening transform", WHITEN_OPTS, cmd_whiten),
    ("eval", "compute Recall@N for a query set", EVAL_OPTS, cmd_eval),
    ("gradcheck", "check analytic gradients against finite differences", GRADCHECK_OPTS, cmd_gradcheck),
    ("attention-export", "export per-feature attention maps", ATTENTION_OPTS, cmd_attention_export),
    ("repro-synthetic", "run the full synthetic pipeline", REPRO_OPTS, cmd_repro_synthetic),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="placerec",
        description="Attention-weighted VLAD descriptors for visual place recognition.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text, opts, func in COMMANDS:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None, help="key=value config file")
        for opt in opts:
            sub.add_argument(f"--{opt.name}", dest=opt.dest, default=None, help=opt.help)
        sub.set_defaults(func=func, opts=opts)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        merged = _resolve(args, args.opts)
        # Flags arrive as strings; cast them like config values.
        for opt in args.opts:
            value = getattr(merged, opt.dest)
            if value is not None and isinstance(value, str) and opt.cast is not str:
                try:
                    setattr(merged, opt.dest, opt.cast(value))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"--{opt.name}: {exc}") from exc
        return args.func(merged)
    except PlacerecError as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(type(exc), 1)


if __name__ == "__main__":
    sys.exit(main())

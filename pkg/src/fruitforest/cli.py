"""Command-line pipeline: prepare, train, extract, fit-forest, evaluate.

Configuration is layered: built-in defaults, then a flat key=value config
file, then command-line flags. Stage failures exit with a stage-specific
code (prepare 2, train 3, extract 4, fit-forest 5, evaluate 6); usage
problems exit 1. Paths of written artifacts go to stdout, errors to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cnn import (
    Cnn4Config,
    build_cnn4,
    extract_deep_features,
    load_features,
    load_model,
    predict_proba_batch,
    save_features,
    save_model,
)
from .data import (
    ImageDataset,
    LoadConfig,
    SplitSpec,
    SynthSpec,
    generate_synthetic,
    load_batch,
    make_validation_split,
    read_index_csv,
    read_split_csv,
    scan_directory_tree,
    write_index_csv,
    write_split_csv,
)
from .container import atomic_write_text
from .errors import EmptyDatasetError, FruitForestError, InvalidSpecError
from .forest import RfConfig, fit_forest, load_forest, predict_proba_matrix, save_forest
from .metrics import (
    FRUITS360_GROUPS,
    CategoryGroup,
    category_macro_metrics,
    compare_models,
    resolve_group,
)
from .training import TrainConfig, evaluate_model, train_model, write_history_csv

_STAGE_CODES = {"prepare": 2, "train": 3, "extract": 4, "fit-forest": 5, "evaluate": 6}
# Images are decoded and pushed through the network in chunks of this many;
# keeps im2col buffers under control for 100x100 inputs on small machines.
_LOAD_CHUNK = 64
_MODEL_NAME = "cnn4"


class UsageError(Exception):
    """Bad flags, config keys, or synthetic spec tokens; exits 1."""


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None
    synthetic: str | None = None
    out: str = "run"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 50
    eta: float = 0.1
    gamma: float = 0.95
    epsilon: float = 1e-7
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    early_stop_patience: int = 8
    min_delta: float = 1e-4
    dropout: float = 0.0
    val_fraction: float = 0.1
    flood_fill: bool = False
    fill_threshold: int = 12
    resize: int | None = None
    taps: str = "conv4_pooled,dense1,dense2"
    trees: int = 250
    max_features: str = "sqrt"
    bootstrap: bool = True
    max_depth: int | None = None
    min_samples_split: int = 2
    groups: str | None = None


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _parse_opt_int(text: str):
    lowered = text.strip().lower()
    return None if lowered == "none" else int(text)


_FIELD_PARSERS = {
    "dataset": str,
    "synthetic": str,
    "out": str,
    "taps": str,
    "max_features": str,
    "groups": str,
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "plateau_patience": int,
    "early_stop_patience": int,
    "fill_threshold": int,
    "trees": int,
    "min_samples_split": int,
    "eta": float,
    "gamma": float,
    "epsilon": float,
    "plateau_factor": float,
    "min_delta": float,
    "dropout": float,
    "val_fraction": float,
    "flood_fill": _parse_bool,
    "bootstrap": _parse_bool,
    "resize": _parse_opt_int,
    "max_depth": _parse_opt_int,
}


def _parse_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in _FIELD_PARSERS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _FIELD_PARSERS[key](text.strip())
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from exc
    return values


def _merge_config(args: argparse.Namespace) -> RunConfig:
    values = {field.name: field.default for field in fields(RunConfig)}
    if getattr(args, "config", None):
        values.update(_parse_config_file(args.config))
    for field in fields(RunConfig):
        supplied = getattr(args, field.name, None)
        if supplied is not None:
            values[field.name] = supplied
    return RunConfig(**values)


_SYNTH_KEYS = {
    "classes": ("n_classes", int),
    "per-class": ("per_class", int),
    "size": ("image_size", int),
    "pairs": ("deceptive_pairs", int),
    "hue-delta": ("hue_delta", float),
    "seed": ("seed", int),
}


def _synth_spec(text: str, default_seed: int) -> SynthSpec:
    values = {"seed": default_seed}
    for token in text.split():
        key, sep, raw = token.partition("=")
        if not sep or key not in _SYNTH_KEYS:
            raise UsageError(f"bad synthetic spec token {token!r}")
        name, parse = _SYNTH_KEYS[key]
        try:
            values[name] = parse(raw)
        except ValueError as exc:
            raise UsageError(f"bad synthetic spec token {token!r}: {exc}") from exc
    return SynthSpec(**values)


def _paths(out: Path) -> dict[str, Path]:
    return {
        "index": out / "index.csv",
        "groups": out / "groups.csv",
        "split": out / "split.csv",
        "model": out / "model.grnm",
        "history": out / "history.csv",
        "train_summary": out / "train_summary.txt",
        "features_train": out / "features_train.grfx",
        "features_val": out / "features_val.grfx",
        "features_test": out / "features_test.grfx",
        "forest": out / "forest.grrf",
        "forest_summary": out / "forest_summary.txt",
        "comparison_csv": out / "comparison.csv",
        "comparison_txt": out / "comparison.txt",
        "category_csv": out / "category_metrics.csv",
        "pipeline_summary": out / "pipeline_summary.txt",
    }


def _load_config(cfg: RunConfig) -> LoadConfig:
    resize = None if cfg.resize is None else (cfg.resize, cfg.resize)
    return LoadConfig(flood_fill=cfg.flood_fill, fill_threshold=cfg.fill_threshold, resize=resize)


def _write_kv(path: Path, pairs) -> None:
    atomic_write_text(str(path), "".join(f"{key}={value!r}\n" for key, value in pairs))


def _emit(path: Path) -> None:
    print(path)


def _run_prepare(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _paths(out)
    if cfg.synthetic is not None:
        index = generate_synthetic(_synth_spec(cfg.synthetic, cfg.seed), out / "dataset")
    elif cfg.dataset:
        index = scan_directory_tree(cfg.dataset)
    else:
        raise UsageError("prepare needs --dataset or --synthetic")
    write_index_csv(index, paths["index"], root=out)
    tree_groups = Path(index.root) / "groups.csv"
    if tree_groups.is_file():
        atomic_write_text(str(paths["groups"]), tree_groups.read_text())
    _emit(paths["index"])
    return {"index": paths["index"], "classes": index.classes}


def _run_train(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    paths = _paths(out)
    index = read_index_csv(paths["index"])
    train_records, val_records = make_validation_split(
        index, SplitSpec(fraction=cfg.val_fraction, seed=cfg.seed)
    )
    write_split_csv(paths["split"], str(out), index.classes, train_records, val_records)
    load_cfg = _load_config(cfg)
    train_set = ImageDataset(train_records, load_cfg)
    val_set = ImageDataset(val_records, load_cfg)
    height, width = train_set.images.shape[1:3]
    model = build_cnn4(
        Cnn4Config(input_shape=(height, width, 4), num_classes=index.n_classes), cfg.seed
    )
    train_cfg = TrainConfig(
        batch_size=cfg.batch_size,
        max_epochs=cfg.epochs,
        eta=cfg.eta,
        gamma=cfg.gamma,
        epsilon=cfg.epsilon,
        plateau_factor=cfg.plateau_factor,
        plateau_patience=cfg.plateau_patience,
        early_stop_patience=cfg.early_stop_patience,
        min_delta=cfg.min_delta,
        dropout=cfg.dropout,
        seed=cfg.seed,
    )
    history = train_model(model, train_set, val_set, train_cfg)
    save_model(model, str(paths["model"]))
    write_history_csv(history, str(paths["history"]))
    _, val_accuracy = evaluate_model(model, val_set, cfg.batch_size)
    test_set = ImageDataset(index.test, load_cfg)
    _, test_accuracy = evaluate_model(model, test_set, cfg.batch_size)
    _write_kv(
        paths["train_summary"],
        [
            ("epochs", len(history)),
            ("validation_accuracy", val_accuracy),
            ("test_accuracy", test_accuracy),
        ],
    )
    for key in ("model", "history", "train_summary"):
        _emit(paths[key])
    return {"epochs": len(history), "validation_accuracy": val_accuracy, "test_accuracy": test_accuracy}


def _taps(cfg: RunConfig) -> tuple[str, ...]:
    names = tuple(name.strip() for name in cfg.taps.split(",") if name.strip())
    if not names:
        raise UsageError(f"no tap names in {cfg.taps!r}")
    return names


def _extract_records(model, records, load_cfg: LoadConfig, taps):
    if not records:
        raise EmptyDatasetError("no records to extract features from")
    parts, labels = [], []
    layout = None
    for start in range(0, len(records), _LOAD_CHUNK):
        batch, chunk_labels = load_batch(records[start : start + _LOAD_CHUNK], load_cfg)
        matrix, layout = extract_deep_features(model, batch, taps)
        parts.append(matrix)
        labels.append(chunk_labels)
    return np.concatenate(parts), layout, np.concatenate(labels)


def _run_extract(cfg: RunConfig) -> dict:
    paths = _paths(Path(cfg.out))
    model = load_model(str(paths["model"]))
    index = read_index_csv(paths["index"])
    train_records, val_records, _ = read_split_csv(paths["split"])
    load_cfg = _load_config(cfg)
    taps = _taps(cfg)
    written = {}
    for split_name, records in (
        ("train", train_records),
        ("val", val_records),
        ("test", index.test),
    ):
        matrix, layout, labels = _extract_records(model, records, load_cfg, taps)
        target = paths[f"features_{split_name}"]
        save_features(str(target), matrix, layout, labels)
        written[split_name] = target
        _emit(target)
    return written


def _rf_config(cfg: RunConfig) -> RfConfig:
    if cfg.max_features.strip().lower() == "sqrt":
        max_features = None
    else:
        try:
            max_features = int(cfg.max_features)
        except ValueError as exc:
            raise UsageError(f"max_features must be 'sqrt' or an integer, got {cfg.max_features!r}") from exc
    return RfConfig(
        n_trees=cfg.trees,
        max_features=max_features,
        bootstrap=cfg.bootstrap,
        max_depth=cfg.max_depth,
        min_samples_split=cfg.min_samples_split,
        seed=cfg.seed,
    )


def _run_fit_forest(cfg: RunConfig) -> dict:
    paths = _paths(Path(cfg.out))
    matrix, _, labels = load_features(str(paths["features_train"]))
    index = read_index_csv(paths["index"])
    forest = fit_forest(matrix, labels, _rf_config(cfg), n_classes=index.n_classes)
    save_forest(forest, str(paths["forest"]))
    val_matrix, _, val_labels = load_features(str(paths["features_val"]))
    predictions = np.argmax(predict_proba_matrix(forest, val_matrix), axis=1)
    val_accuracy = float(np.mean(predictions == val_labels))
    _write_kv(
        paths["forest_summary"],
        [("trees", forest.config.n_trees), ("validation_accuracy", val_accuracy)],
    )
    _emit(paths["forest"])
    _emit(paths["forest_summary"])
    return {"validation_accuracy": val_accuracy}


def _read_groups_file(path) -> tuple[CategoryGroup, ...]:
    groups = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.split(",")]
        if len(parts) < 2 or not all(parts):
            raise InvalidSpecError(f"{path}:{lineno}: expected name,member[,member...]")
        groups.append(CategoryGroup(parts[0], tuple(parts[1:])))
    return tuple(groups)


def _resolve_groups(cfg: RunConfig, paths: dict, classes) -> tuple[CategoryGroup, ...]:
    if cfg.groups:
        return _read_groups_file(cfg.groups)
    if paths["groups"].is_file():
        return _read_groups_file(paths["groups"])
    known = set(classes)
    return tuple(group for group in FRUITS360_GROUPS if set(group.members) <= known)


def _metric_cell(value) -> str:
    return "" if value is None else f"{value:.4f}"


def _run_evaluate(cfg: RunConfig) -> dict:
    paths = _paths(Path(cfg.out))
    model = load_model(str(paths["model"]))
    forest = load_forest(str(paths["forest"]))
    index = read_index_csv(paths["index"])
    matrix, _, feature_labels = load_features(str(paths["features_test"]))
    records = index.test
    true_labels = np.array([record.label for record in records], dtype=np.int64)
    if not np.array_equal(true_labels, feature_labels):
        raise InvalidSpecError("test feature labels do not match the dataset index")
    if matrix.shape[1] != forest.feature_count:
        raise InvalidSpecError(
            f"forest expects {forest.feature_count} features, matrix has {matrix.shape[1]}"
        )
    load_cfg = _load_config(cfg)
    softmax_parts = []
    for start in range(0, len(records), _LOAD_CHUNK):
        batch, _ = load_batch(records[start : start + _LOAD_CHUNK], load_cfg)
        softmax_parts.append(np.argmax(predict_proba_batch(model, batch), axis=1))
    softmax_predictions = np.concatenate(softmax_parts)
    ensemble_predictions = np.argmax(predict_proba_matrix(forest, matrix), axis=1)
    softmax_accuracy = float(np.mean(softmax_predictions == true_labels))
    ensemble_accuracy = float(np.mean(ensemble_predictions == true_labels))
    csv_text, table_text = compare_models(
        [(_MODEL_NAME, 100.0 * softmax_accuracy, 100.0 * ensemble_accuracy)]
    )
    atomic_write_text(str(paths["comparison_csv"]), csv_text)
    atomic_write_text(str(paths["comparison_txt"]), table_text)
    rows = ["model,category,n_classes,accuracy,precision,recall,f1,specificity"]
    for group in _resolve_groups(cfg, paths, index.classes):
        member_ids = resolve_group(group, index.classes)
        for model_name, predictions in (
            ("softmax", softmax_predictions),
            ("ensemble", ensemble_predictions),
        ):
            macro = category_macro_metrics(true_labels, predictions, member_ids)
            rows.append(
                ",".join(
                    [
                        model_name,
                        group.name,
                        str(len(member_ids)),
                        _metric_cell(macro.accuracy),
                        _metric_cell(macro.precision),
                        _metric_cell(macro.recall),
                        _metric_cell(macro.f1),
                        _metric_cell(macro.specificity),
                    ]
                )
            )
    atomic_write_text(str(paths["category_csv"]), "\n".join(rows) + "\n")
    for key in ("comparison_csv", "comparison_txt", "category_csv"):
        _emit(paths[key])
    return {"softmax_accuracy": softmax_accuracy, "ensemble_accuracy": ensemble_accuracy}


_RUNNERS = {
    "prepare": _run_prepare,
    "train": _run_train,
    "extract": _run_extract,
    "fit-forest": _run_fit_forest,
    "evaluate": _run_evaluate,
}


def _run_pipeline(cfg: RunConfig, skip_train: bool) -> int:
    paths = _paths(Path(cfg.out))
    results = {}
    stages = ["prepare", "train", "extract", "fit-forest", "evaluate"]
    if skip_train:
        if not paths["model"].is_file():
            print(f"pipeline: --skip-train but no model at {paths['model']}", file=sys.stderr)
            return _STAGE_CODES["train"]
        stages.remove("train")
    for stage in stages:
        try:
            results[stage] = _RUNNERS[stage](cfg)
        except (FruitForestError, OSError) as exc:
            print(f"{stage}: {exc}", file=sys.stderr)
            return _STAGE_CODES[stage]
    summary = [("seed", cfg.seed), ("classes", len(results["prepare"]["classes"]))]
    if "train" in results:
        summary.append(("epochs", results["train"]["epochs"]))
        summary.append(("cnn_validation_accuracy", results["train"]["validation_accuracy"]))
    summary.append(("forest_validation_accuracy", results["fit-forest"]["validation_accuracy"]))
    summary.append(("softmax_test_accuracy", results["evaluate"]["softmax_accuracy"]))
    summary.append(("ensemble_test_accuracy", results["evaluate"]["ensemble_accuracy"]))
    _write_kv(paths["pipeline_summary"], summary)
    _emit(paths["pipeline_summary"])
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--dataset", help="dataset root with Training/ and Test/")
    common.add_argument(
        "--synthetic",
        nargs="*",
        metavar="KEY=VALUE",
        help="generate a synthetic dataset (classes=, per-class=, size=, pairs=, hue-delta=, seed=)",
    )
    common.add_argument("--out", help="output directory (default: run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--eta", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--plateau-factor", type=float)
    common.add_argument("--plateau-patience", type=int)
    common.add_argument("--early-stop-patience", type=int)
    common.add_argument("--min-delta", type=float)
    common.add_argument("--dropout", type=float)
    common.add_argument("--val-fraction", type=float)
    common.add_argument("--flood-fill", action=argparse.BooleanOptionalAction)
    common.add_argument("--fill-threshold", type=int)
    common.add_argument("--resize", type=int, help="square side to resize inputs to")
    common.add_argument("--taps", help="comma-separated tap names")
    common.add_argument("--trees", type=int)
    common.add_argument("--max-features", help="'sqrt' or an integer")
    common.add_argument("--bootstrap", action=argparse.BooleanOptionalAction)
    common.add_argument("--max-depth", type=_parse_opt_int)
    common.add_argument("--min-samples-split", type=int)
    common.add_argument("--groups", help="category groups file (name,member[,member...])")
    parser = _Parser(prog="fruitforest", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in ("prepare", "train", "extract", "fit-forest", "evaluate"):
        subparsers.add_parser(command, parents=[common])
    pipeline = subparsers.add_parser("pipeline", parents=[common])
    pipeline.add_argument("--skip-train", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.synthetic is not None:
        args.synthetic = " ".join(args.synthetic)
    try:
        cfg = _merge_config(args)
        if args.command == "pipeline":
            return _run_pipeline(cfg, args.skip_train)
        _RUNNERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FruitForestError, OSError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return _STAGE_CODES[args.command]
    return 0


if __name__ == "__main__":
    sys.exit(main())

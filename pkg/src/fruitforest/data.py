"""Dataset indexing, validation splits, batch loading, and a synthetic tree.

The on-disk layout contract is `<root>/Training/<class>/<images>` plus a
parallel `Test/` subtree. Labels are assigned by sorted class-folder name,
so the same tree always yields the same label ids. The synthetic generator
writes that exact layout, which keeps every downstream stage identical for
real and generated data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imaging
from .container import atomic_write_text
from .errors import (
    ClassTooSmallError,
    EmptyClassError,
    EmptyDatasetError,
    InvalidSpecError,
    MissingSplitError,
    ShapeMismatchError,
    UnknownTestClassError,
)
from .rng import ROLE_SPLIT, ROLE_SYNTH, derive_rng

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
_CSV_HEADER = "path,split,label,class_name"


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: int


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    classes: tuple[str, ...]
    training: tuple[SampleRecord, ...]
    test: tuple[SampleRecord, ...]
    provenance: str

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class SplitSpec:
    fraction: float = 0.1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction <= 0.5:
            raise InvalidSpecError(f"validation fraction {self.fraction} outside (0, 0.5]")
        if not self.stratified:
            raise InvalidSpecError("only stratified splits are supported")


@dataclass(frozen=True)
class LoadConfig:
    flood_fill: bool = False
    fill_threshold: int = 12
    resize: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.fill_threshold < 0:
            raise InvalidSpecError(f"fill threshold {self.fill_threshold} is negative")
        if self.resize is not None:
            width, height = self.resize
            if width < 1 or height < 1:
                raise InvalidSpecError(f"resize target {self.resize} must be positive")


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 8
    per_class: int = 60
    image_size: int = 32
    deceptive_pairs: int = 3
    hue_delta: float = 12 / 360
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise InvalidSpecError(f"{self.n_classes} classes; need at least 2")
        if self.per_class < 4:
            raise InvalidSpecError(f"{self.per_class} samples per class; need at least 4")
        if self.image_size < 8:
            raise InvalidSpecError(f"image size {self.image_size} below 8")
        if self.deceptive_pairs < 0 or 2 * self.deceptive_pairs > self.n_classes:
            raise InvalidSpecError(
                f"{self.deceptive_pairs} pairs cannot fit in {self.n_classes} classes"
            )
        if not 0.0 < self.hue_delta <= 20 / 360:
            raise InvalidSpecError(f"hue delta {self.hue_delta} outside (0, 20/360]")


def _list_images(folder: Path) -> list[Path]:
    return sorted(
        entry
        for entry in folder.iterdir()
        if entry.is_file() and entry.suffix.lower() in _IMAGE_SUFFIXES
    )


def scan_directory_tree(root) -> DatasetIndex:
    """Index a Training/ + Test/ class-folder tree; labels by sorted name."""
    root = Path(root)
    training_dir = root / "Training"
    test_dir = root / "Test"
    for split_dir in (training_dir, test_dir):
        if not split_dir.is_dir():
            raise MissingSplitError(f"missing split directory: {split_dir}")
    classes = tuple(sorted(entry.name for entry in training_dir.iterdir() if entry.is_dir()))
    if not classes:
        raise EmptyDatasetError(f"no class folders under {training_dir}")
    labels = {name: i for i, name in enumerate(classes)}
    strays = sorted(
        entry.name
        for entry in test_dir.iterdir()
        if entry.is_dir() and entry.name not in labels
    )
    if strays:
        raise UnknownTestClassError(f"test-only classes: {strays}")
    training = []
    for name in classes:
        files = _list_images(training_dir / name)
        if not files:
            raise EmptyClassError(f"no images in {training_dir / name}")
        training.extend(SampleRecord(str(path), labels[name]) for path in files)
    test = []
    for name in classes:
        folder = test_dir / name
        if not folder.is_dir():
            continue
        files = _list_images(folder)
        if not files:
            raise EmptyClassError(f"no images in {folder}")
        test.extend(SampleRecord(str(path), labels[name]) for path in files)
    return DatasetIndex(
        root=str(root),
        classes=classes,
        training=tuple(training),
        test=tuple(test),
        provenance="directory tree",
    )


def make_validation_split(index: DatasetIndex, spec: SplitSpec):
    """Stratified seeded partition of the training records."""
    by_label: dict[int, list[SampleRecord]] = {}
    for record in index.training:
        by_label.setdefault(record.label, []).append(record)
    rng = derive_rng(spec.seed, ROLE_SPLIT)
    train_out: list[SampleRecord] = []
    val_out: list[SampleRecord] = []
    for label in range(index.n_classes):
        records = by_label.get(label, [])
        if len(records) < 2:
            raise ClassTooSmallError(
                f"{index.classes[label]}: {len(records)} training sample(s), need 2"
            )
        n = len(records)
        n_val = min(max(int(n * spec.fraction + 0.5), 1), n - 1)
        order = rng.permutation(n)
        val_out.extend(records[i] for i in order[:n_val])
        train_out.extend(records[i] for i in order[n_val:])
    return tuple(train_out), tuple(val_out)


def _prepare_rgb(path: str, config: LoadConfig) -> np.ndarray:
    image = imaging.load_rgb8(path)
    if config.flood_fill:
        mask = imaging.flood_fill_background(image, config.fill_threshold)
        image = imaging.apply_background(image, mask)
    if config.resize is not None:
        width, height = config.resize
        image = imaging.resize_image(image, width, height)
    return image


def load_batch(records, config: LoadConfig = LoadConfig()):
    """Decode records in order into a float32 [N, H, W, 4] batch plus labels."""
    records = list(records)
    labels = np.array([record.label for record in records], dtype=np.int64)
    if not records:
        height, width = (0, 0) if config.resize is None else config.resize[::-1]
        return np.zeros((0, height, width, 4), dtype=np.float32), labels
    images = [_prepare_rgb(record.path, config) for record in records]
    shapes = {image.shape for image in images}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"mixed image shapes in batch: {sorted(shapes)}")
    batch = np.stack([imaging.make_4channel(image) for image in images])
    return batch, labels


class ImageDataset:
    """Batch source over decoded uint8 images; tensors materialize per take.

    Decoding and geometry happen once up front; the HSV+gray conversion runs
    per batch so the resident set stays 3 bytes per pixel.
    """

    def __init__(self, records, config: LoadConfig = LoadConfig()):
        records = list(records)
        self.labels = np.array([record.label for record in records], dtype=np.int64)
        images = [_prepare_rgb(record.path, config) for record in records]
        shapes = {image.shape for image in images}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"mixed image shapes in dataset: {sorted(shapes)}")
        if images:
            self.images = np.stack(images)
        else:
            height, width = (0, 0) if config.resize is None else config.resize[::-1]
            self.images = np.zeros((0, height, width, 3), dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices):
        batch = np.stack([imaging.make_4channel(self.images[i]) for i in indices])
        return batch, self.labels[np.asarray(indices)]


_SHAPE_KINDS = ("ellipse", 3, 4, 5, 6)


def _class_plan(spec: SynthSpec):
    """(name, group index, hue offset sign) per class, in sorted-name order."""
    solos = spec.n_classes - 2 * spec.deceptive_pairs
    entries = []
    for pair in range(spec.deceptive_pairs):
        entries.append((f"pair{pair:02d}-a", pair, -1.0))
        entries.append((f"pair{pair:02d}-b", pair, 1.0))
    for solo in range(solos):
        entries.append((f"solo{solo:02d}", spec.deceptive_pairs + solo, 0.0))
    entries.sort(key=lambda entry: entry[0])
    return entries


def _render_sample(spec: SynthSpec, class_idx: int, sample_idx: int, kind, hue_center: float) -> np.ndarray:
    rng = derive_rng(spec.seed, ROLE_SYNTH, class_idx, sample_idx)
    size = spec.image_size
    hue = (hue_center + rng.uniform(-0.1, 0.1) * spec.hue_delta) % 1.0
    sat = 0.85 + rng.uniform(-0.05, 0.05)
    val = 0.90 + rng.uniform(-0.05, 0.05)
    fill = np.array(
        [round(c * 255.0) for c in imaging.hsv_to_rgb(hue, sat, val)], dtype=np.uint8
    )
    cy = size * (0.5 + rng.uniform(-0.08, 0.08))
    cx = size * (0.5 + rng.uniform(-0.08, 0.08))
    radius = size * rng.uniform(0.28, 0.42)
    theta = rng.uniform(0.0, np.pi)
    centers = np.arange(size, dtype=np.float64) + 0.5
    dy = (centers - cy)[:, None]
    dx = (centers - cx)[None, :]
    if kind == "ellipse":
        aspect = rng.uniform(0.6, 1.0)
        xr = np.cos(theta) * dx + np.sin(theta) * dy
        yr = -np.sin(theta) * dx + np.cos(theta) * dy
        mask = (xr / radius) ** 2 + (yr / (radius * aspect)) ** 2 <= 1.0
    else:
        sides = int(kind)
        angles = theta + np.pi / sides + 2.0 * np.pi * np.arange(sides) / sides
        proj = (
            np.cos(angles)[:, None, None] * dx[None]
            + np.sin(angles)[:, None, None] * dy[None]
        )
        mask = np.all(proj <= radius * np.cos(np.pi / sides), axis=0)
    image = np.full((size, size, 3), 255, dtype=np.uint8)
    image[mask] = fill
    return image


def generate_synthetic(spec: SynthSpec, out_root) -> DatasetIndex:
    """Render a Fruits-360-shaped tree of solid shapes on white.

    Deceptive pair members share geometry and differ only by a hue shift
    smaller than `spec.hue_delta`; the first 75% of each class is Training.
    A `groups.csv` beside the tree names each pair and its two classes.
    """
    out_root = Path(out_root)
    entries = _class_plan(spec)
    n_groups = spec.n_classes - spec.deceptive_pairs
    n_train = (spec.per_class * 3) // 4
    for class_idx, (name, group, sign) in enumerate(entries):
        kind = _SHAPE_KINDS[group % len(_SHAPE_KINDS)]
        hue_center = ((2 * group + 1) / (2 * n_groups) + sign * 0.4 * spec.hue_delta) % 1.0
        for split, lo, hi in (("Training", 0, n_train), ("Test", n_train, spec.per_class)):
            folder = out_root / split / name
            folder.mkdir(parents=True, exist_ok=True)
            for sample_idx in range(lo, hi):
                image = _render_sample(spec, class_idx, sample_idx, kind, hue_center)
                imaging.save_rgb8(str(folder / f"{sample_idx:03d}.png"), image)
    group_lines = [
        f"pair{pair:02d},pair{pair:02d}-a,pair{pair:02d}-b"
        for pair in range(spec.deceptive_pairs)
    ]
    atomic_write_text(str(out_root / "groups.csv"), "\n".join(group_lines) + "\n")
    index = scan_directory_tree(out_root)
    return replace(index, provenance=f"synthetic seed={spec.seed}")


def _format_rows(root: str, named_splits, classes) -> str:
    lines = [_CSV_HEADER]
    for split_name, records in named_splits:
        for record in records:
            name = classes[record.label]
            rel = Path(os.path.relpath(record.path, root)).as_posix()
            if "," in rel or "," in name:
                raise InvalidSpecError(f"comma in CSV field: {rel!r} / {name!r}")
            lines.append(f"{rel},{split_name},{record.label},{name}")
    return "\n".join(lines) + "\n"


def _parse_rows(path) -> list[tuple[str, str, int, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _CSV_HEADER:
        raise InvalidSpecError(f"bad index header in {path}")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4 or not parts[2].isdigit():
            raise InvalidSpecError(f"bad index row in {path}: {line!r}")
        rows.append((parts[0], parts[1], int(parts[2]), parts[3]))
    return rows


def _classes_from_rows(rows, path) -> tuple[str, ...]:
    names: dict[int, str] = {}
    for _, _, label, name in rows:
        if names.setdefault(label, name) != name:
            raise InvalidSpecError(f"label {label} maps to two names in {path}")
    if sorted(names) != list(range(len(names))):
        raise InvalidSpecError(f"label ids not dense in {path}")
    return tuple(names[i] for i in range(len(names)))


def _split_records(rows, root, allowed, path):
    seen: set[str] = set()
    out: dict[str, list[SampleRecord]] = {name: [] for name in allowed}
    for rel, split, label, _ in rows:
        if split not in out:
            raise InvalidSpecError(f"unknown split {split!r} in {path}")
        if rel in seen:
            raise InvalidSpecError(f"duplicate path {rel!r} in {path}")
        seen.add(rel)
        out[split].append(SampleRecord(str(Path(root) / rel), label))
    return out


def write_index_csv(index: DatasetIndex, path, root=None) -> None:
    """Persist an index as path,split,label,class_name rows.

    Paths are stored relative to `root` (default: the index root), so pass
    the CSV's own directory to make the file relocatable alongside it.
    """
    base = index.root if root is None else str(root)
    text = _format_rows(
        base, (("training", index.training), ("test", index.test)), index.classes
    )
    atomic_write_text(str(path), text)


def read_index_csv(path, root=None) -> DatasetIndex:
    root = str(Path(path).parent if root is None else root)
    rows = _parse_rows(path)
    classes = _classes_from_rows(rows, path)
    splits = _split_records(rows, root, ("training", "test"), path)
    return DatasetIndex(
        root=root,
        classes=classes,
        training=tuple(splits["training"]),
        test=tuple(splits["test"]),
        provenance="index csv",
    )


def write_split_csv(path, root, classes, train_records, val_records) -> None:
    """Persist a train/validation partition in the index CSV format."""
    text = _format_rows(root, (("train", train_records), ("val", val_records)), classes)
    atomic_write_text(str(path), text)


def read_split_csv(path, root=None):
    """Returns (train records, validation records, class names)."""
    root = str(Path(path).parent if root is None else root)
    rows = _parse_rows(path)
    classes = _classes_from_rows(rows, path)
    splits = _split_records(rows, root, ("train", "val"), path)
    return tuple(splits["train"]), tuple(splits["val"]), classes

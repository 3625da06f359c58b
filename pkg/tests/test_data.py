"""Directory indexing, splits, batch loading, CSV caches, synthetic trees."""

import numpy as np
import pytest

from fruitforest import imaging
from fruitforest.data import (
    DatasetIndex,
    ImageDataset,
    LoadConfig,
    SampleRecord,
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
from fruitforest.errors import (
    ClassTooSmallError,
    DecodeError,
    EmptyClassError,
    EmptyDatasetError,
    InvalidSpecError,
    MissingSplitError,
    ShapeMismatchError,
    UnknownTestClassError,
)
from fruitforest.metrics import FRUITS360_GROUPS


def _write_png(path, color, size=6):
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.full((size, size, 3), color, dtype=np.uint8)
    imaging.save_rgb8(str(path), image)


def _make_tree(root, counts):
    """counts: class name -> (training files, test files)."""
    for name, (n_train, n_test) in counts.items():
        for i in range(n_train):
            _write_png(root / "Training" / name / f"img{i:02d}.png", (i * 7) % 256)
        for i in range(n_test):
            _write_png(root / "Test" / name / f"img{i:02d}.png", (i * 11) % 256)
    (root / "Test").mkdir(exist_ok=True)
    return root


class TestScanDirectoryTree:
    def test_sorted_classes_and_counts(self, tmp_path):
        _make_tree(tmp_path, {"pear": (3, 2), "apple": (2, 1), "cherry": (4, 0)})
        index = scan_directory_tree(tmp_path)
        assert index.classes == ("apple", "cherry", "pear")
        assert [r.label for r in index.training] == [0, 0, 1, 1, 1, 1, 2, 2, 2]
        assert [r.label for r in index.test] == [0, 2, 2]
        assert index.provenance == "directory tree"

    def test_files_sorted_within_class(self, tmp_path):
        _make_tree(tmp_path, {"only": (4, 0)})
        index = scan_directory_tree(tmp_path)
        names = [r.path.rsplit("/", 1)[1] for r in index.training]
        assert names == sorted(names)

    def test_no_duplicate_paths(self, tmp_path):
        _make_tree(tmp_path, {"a": (3, 1), "b": (2, 2)})
        index = scan_directory_tree(tmp_path)
        paths = [r.path for r in index.training + index.test]
        assert len(paths) == len(set(paths))

    def test_class_without_test_folder_allowed(self, tmp_path):
        _make_tree(tmp_path, {"a": (2, 1)})
        for i in range(2):
            _write_png(tmp_path / "Training" / "b" / f"img{i}.png", 10)
        index = scan_directory_tree(tmp_path)
        assert index.classes == ("a", "b")
        assert [r.label for r in index.test] == [0]

    def test_non_image_files_ignored(self, tmp_path):
        _make_tree(tmp_path, {"a": (2, 1)})
        (tmp_path / "Training" / "a" / "notes.txt").write_text("x")
        index = scan_directory_tree(tmp_path)
        assert len(index.training) == 2

    def test_missing_split_rejected(self, tmp_path):
        (tmp_path / "Training" / "a").mkdir(parents=True)
        with pytest.raises(MissingSplitError, match="Test"):
            scan_directory_tree(tmp_path)

    def test_test_only_class_rejected(self, tmp_path):
        _make_tree(tmp_path, {"a": (2, 1)})
        _write_png(tmp_path / "Test" / "ghost" / "img.png", 5)
        with pytest.raises(UnknownTestClassError, match="ghost"):
            scan_directory_tree(tmp_path)

    def test_empty_class_rejected(self, tmp_path):
        _make_tree(tmp_path, {"a": (2, 1)})
        (tmp_path / "Training" / "empty").mkdir()
        with pytest.raises(EmptyClassError, match="empty"):
            scan_directory_tree(tmp_path)

    def test_no_classes_rejected(self, tmp_path):
        (tmp_path / "Training").mkdir()
        (tmp_path / "Test").mkdir()
        with pytest.raises(EmptyDatasetError):
            scan_directory_tree(tmp_path)

    def test_apple_category_indexes_thirteen_folders(self, tmp_path):
        for name in FRUITS360_GROUPS[0].members:
            _write_png(tmp_path / "Training" / name / "0.png", 100)
        (tmp_path / "Test").mkdir()
        index = scan_directory_tree(tmp_path)
        assert len(index.classes) == 13
        assert set(index.classes) == set(FRUITS360_GROUPS[0].members)


def _fake_index(per_class):
    records = []
    classes = tuple(f"c{i}" for i in range(len(per_class)))
    for label, n in enumerate(per_class):
        records.extend(SampleRecord(f"/x/c{label}/{i}.png", label) for i in range(n))
    return DatasetIndex("/x", classes, tuple(records), (), "directory tree")


class TestMakeValidationSplit:
    def test_ninety_ten_per_class(self):
        index = _fake_index([100, 100, 100])
        train, val = make_validation_split(index, SplitSpec(fraction=0.1, seed=3))
        assert len(train) == 270 and len(val) == 30
        for label in range(3):
            assert sum(r.label == label for r in val) == 10

    def test_partition_of_original(self):
        index = _fake_index([17, 9, 25])
        train, val = make_validation_split(index, SplitSpec(seed=5))
        merged = sorted(r.path for r in train + val)
        assert merged == sorted(r.path for r in index.training)
        assert not {r.path for r in train} & {r.path for r in val}

    def test_same_seed_identical(self):
        index = _fake_index([30, 30])
        first = make_validation_split(index, SplitSpec(seed=9))
        second = make_validation_split(index, SplitSpec(seed=9))
        assert first == second

    def test_seed_changes_selection(self):
        index = _fake_index([40, 40])
        _, val_a = make_validation_split(index, SplitSpec(seed=1))
        _, val_b = make_validation_split(index, SplitSpec(seed=2))
        assert {r.path for r in val_a} != {r.path for r in val_b}

    def test_rounding_keeps_bounds(self):
        train, val = make_validation_split(_fake_index([5]), SplitSpec(fraction=0.1))
        assert (len(train), len(val)) == (4, 1)
        train, val = make_validation_split(_fake_index([2]), SplitSpec(fraction=0.5))
        assert (len(train), len(val)) == (1, 1)

    def test_single_sample_class_rejected(self):
        with pytest.raises(ClassTooSmallError, match="c1"):
            make_validation_split(_fake_index([10, 1]), SplitSpec())

    def test_spec_validation(self):
        with pytest.raises(InvalidSpecError):
            SplitSpec(fraction=0.0)
        with pytest.raises(InvalidSpecError):
            SplitSpec(fraction=0.6)
        with pytest.raises(InvalidSpecError):
            SplitSpec(stratified=False)


class TestLoadBatch:
    def test_matches_single_image_pipeline(self, tmp_path):
        _write_png(tmp_path / "red.png", (200, 30, 30))
        _write_png(tmp_path / "blue.png", (20, 40, 220))
        records = [
            SampleRecord(str(tmp_path / "red.png"), 0),
            SampleRecord(str(tmp_path / "blue.png"), 1),
        ]
        batch, labels = load_batch(records)
        assert batch.shape == (2, 6, 6, 4) and batch.dtype == np.float32
        assert labels.tolist() == [0, 1]
        for row, record in zip(batch, records):
            expected = imaging.make_4channel(imaging.load_rgb8(record.path))
            assert np.array_equal(row, expected)

    def test_empty_records(self):
        batch, labels = load_batch([])
        assert batch.shape == (0, 0, 0, 4)
        assert labels.shape == (0,)

    def test_resize_applied(self, tmp_path):
        _write_png(tmp_path / "img.png", 120, size=8)
        records = [SampleRecord(str(tmp_path / "img.png"), 0)]
        batch, _ = load_batch(records, LoadConfig(resize=(5, 3)))
        assert batch.shape == (1, 3, 5, 4)
        source = imaging.resize_image(imaging.load_rgb8(records[0].path), 5, 3)
        assert np.array_equal(batch[0], imaging.make_4channel(source))

    def test_flood_fill_applied(self, tmp_path):
        image = np.full((9, 9, 3), 250, dtype=np.uint8)
        image[3:6, 3:6] = 40
        path = tmp_path / "obj.png"
        imaging.save_rgb8(str(path), image)
        batch, _ = load_batch([SampleRecord(str(path), 0)], LoadConfig(flood_fill=True))
        mask = imaging.flood_fill_background(image, 12)
        expected = imaging.make_4channel(imaging.apply_background(image, mask))
        assert np.array_equal(batch[0], expected)

    def test_decode_failure_names_path(self, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(DecodeError, match="broken.png"):
            load_batch([SampleRecord(str(bad), 0)])

    def test_mixed_shapes_rejected(self, tmp_path):
        _write_png(tmp_path / "small.png", 10, size=4)
        _write_png(tmp_path / "large.png", 10, size=6)
        records = [
            SampleRecord(str(tmp_path / "small.png"), 0),
            SampleRecord(str(tmp_path / "large.png"), 1),
        ]
        with pytest.raises(ShapeMismatchError):
            load_batch(records)


class TestImageDataset:
    def test_take_matches_load_batch(self, tmp_path):
        colors = [(250, 10, 10), (10, 250, 10), (10, 10, 250)]
        records = []
        for i, color in enumerate(colors):
            _write_png(tmp_path / f"{i}.png", color)
            records.append(SampleRecord(str(tmp_path / f"{i}.png"), i))
        dataset = ImageDataset(records)
        assert len(dataset) == 3
        batch, labels = dataset.take([2, 0, 2])
        full, _ = load_batch(records)
        assert np.array_equal(batch, full[[2, 0, 2]])
        assert labels.tolist() == [2, 0, 2]


class TestSyntheticGeneration:
    def test_tree_shape_and_split_sizes(self, tmp_path):
        spec = SynthSpec(n_classes=4, per_class=60, image_size=12, deceptive_pairs=1, seed=4)
        index = generate_synthetic(spec, tmp_path / "synth")
        assert index.classes == ("pair00-a", "pair00-b", "solo00", "solo01")
        assert index.provenance == "synthetic seed=4"
        for name in index.classes:
            assert sum(r.label == index.classes.index(name) for r in index.training) == 45
            assert sum(r.label == index.classes.index(name) for r in index.test) == 15

    def test_scan_reads_generated_tree(self, tmp_path):
        spec = SynthSpec(n_classes=2, per_class=8, image_size=10, deceptive_pairs=1, seed=1)
        index = generate_synthetic(spec, tmp_path / "synth")
        rescanned = scan_directory_tree(tmp_path / "synth")
        assert rescanned.classes == index.classes
        assert rescanned.training == index.training
        assert rescanned.test == index.test

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SynthSpec(n_classes=2, per_class=4, image_size=10, deceptive_pairs=0, seed=7)
        index_a = generate_synthetic(spec, tmp_path / "a")
        index_b = generate_synthetic(spec, tmp_path / "b")
        for rec_a, rec_b in zip(index_a.training + index_a.test, index_b.training + index_b.test):
            with open(rec_a.path, "rb") as fa, open(rec_b.path, "rb") as fb:
                assert fa.read() == fb.read()

    def test_pair_mean_hue_difference_within_delta(self, tmp_path):
        spec = SynthSpec(n_classes=2, per_class=12, image_size=24, deceptive_pairs=1, seed=2)
        index = generate_synthetic(spec, tmp_path / "synth")
        mean_hues = []
        for label in range(2):
            vectors = []
            for record in index.training:
                if record.label != label:
                    continue
                image = imaging.load_rgb8(record.path)
                h, s, _ = imaging.rgb_to_hsv(image[..., 0], image[..., 1], image[..., 2])
                angles = 2.0 * np.pi * h[s > 0.5]
                vectors.append([np.cos(angles).mean(), np.sin(angles).mean()])
            cy, sy = np.mean(vectors, axis=0)
            mean_hues.append((np.arctan2(sy, cy) / (2.0 * np.pi)) % 1.0)
        gap = abs(mean_hues[0] - mean_hues[1])
        gap = min(gap, 1.0 - gap)
        assert 0.3 * spec.hue_delta <= gap <= spec.hue_delta

    def test_groups_file_lists_pairs(self, tmp_path):
        spec = SynthSpec(n_classes=5, per_class=4, image_size=10, deceptive_pairs=2, seed=0)
        generate_synthetic(spec, tmp_path / "synth")
        lines = (tmp_path / "synth" / "groups.csv").read_text().splitlines()
        assert lines == ["pair00,pair00-a,pair00-b", "pair01,pair01-a,pair01-b"]

    def test_spec_validation(self):
        with pytest.raises(InvalidSpecError):
            SynthSpec(n_classes=4, deceptive_pairs=3)
        with pytest.raises(InvalidSpecError):
            SynthSpec(hue_delta=30 / 360)
        with pytest.raises(InvalidSpecError):
            SynthSpec(per_class=2)


class TestIndexCsv:
    def test_index_round_trip(self, tmp_path):
        _make_tree(tmp_path, {"a": (3, 1), "b": (2, 2)})
        index = scan_directory_tree(tmp_path)
        csv_path = tmp_path / "index.csv"
        write_index_csv(index, csv_path)
        loaded = read_index_csv(csv_path, root=tmp_path)
        assert loaded.classes == index.classes
        assert loaded.training == index.training
        assert loaded.test == index.test

    def test_paths_stored_relative(self, tmp_path):
        _make_tree(tmp_path, {"a": (2, 1)})
        csv_path = tmp_path / "index.csv"
        write_index_csv(scan_directory_tree(tmp_path), csv_path)
        for line in csv_path.read_text().splitlines()[1:]:
            assert not line.startswith("/")

    def test_default_root_is_csv_directory(self, tmp_path):
        _make_tree(tmp_path, {"a": (2, 1)})
        csv_path = tmp_path / "index.csv"
        write_index_csv(scan_directory_tree(tmp_path), csv_path)
        loaded = read_index_csv(csv_path)
        batch, _ = load_batch(loaded.training)
        assert batch.shape == (2, 6, 6, 4)

    def test_split_round_trip(self, tmp_path):
        index = _fake_index([10, 10])
        train, val = make_validation_split(index, SplitSpec(seed=2))
        csv_path = tmp_path / "split.csv"
        write_split_csv(csv_path, index.root, index.classes, train, val)
        got_train, got_val, classes = read_split_csv(csv_path, root=index.root)
        assert got_train == train and got_val == val
        assert classes == index.classes

    def test_bad_header_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("nope\n")
        with pytest.raises(InvalidSpecError, match="header"):
            read_index_csv(bad)

    def test_unknown_split_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("path,split,label,class_name\np.png,holdout,0,a\n")
        with pytest.raises(InvalidSpecError, match="holdout"):
            read_index_csv(bad)

    def test_duplicate_path_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text(
            "path,split,label,class_name\np.png,training,0,a\np.png,test,0,a\n"
        )
        with pytest.raises(InvalidSpecError, match="duplicate"):
            read_index_csv(bad)

    def test_sparse_labels_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("path,split,label,class_name\np.png,training,1,b\n")
        with pytest.raises(InvalidSpecError, match="dense"):
            read_index_csv(bad)

import numpy as np
import pytest
from PIL import Image

from pestclf.data import (ImageRecord, LabelSpace, SplitRatios, load_fixed_split,
                          make_random_split, save_manifest, scan_label_space,
                          scan_records, stream_batches)
from pestclf.errors import (ClassTooSmall, EmptyDataset, LabelOutOfRange,
                            MalformedLine, UnreadableRoot)
from pestclf.preprocess import PreprocessSpec

RATIOS = SplitRatios(0.7, 0.1, 0.2)


def _records(counts: dict[int, int]) -> list[ImageRecord]:
    return [ImageRecord(f"class{label}/img{i}.jpg", label)
            for label, n in counts.items() for i in range(n)]


class TestScan:
    def test_lexicographic_class_order(self, tmp_path):
        for name in ("bees", "ants"):
            folder = tmp_path / name
            folder.mkdir()
            Image.new("RGB", (8, 8)).save(folder / "a.png")
        labels = scan_label_space(tmp_path)
        assert labels.names == ("ants", "bees")
        assert labels.count == 2

    def test_many_classes(self, tmp_path):
        for i in range(102):
            folder = tmp_path / f"species_{i:03d}"
            folder.mkdir()
            Image.new("RGB", (8, 8)).save(folder / "a.png")
        assert scan_label_space(tmp_path).count == 102

    def test_single_class_is_empty_dataset(self, tmp_path):
        folder = tmp_path / "only"
        folder.mkdir()
        Image.new("RGB", (8, 8)).save(folder / "a.png")
        with pytest.raises(EmptyDataset):
            scan_label_space(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(UnreadableRoot):
            scan_label_space(tmp_path / "nope")

    def test_scan_records_relative_paths(self, shape_root):
        labels = scan_label_space(shape_root)
        records = scan_records(shape_root, labels)
        assert len(records) == 36
        assert all((shape_root / r.path).exists() for r in records)
        assert all(0 <= r.label < labels.count for r in records)


class TestRandomSplit:
    def test_exact_ratio_arithmetic(self):
        train, val, test = make_random_split(_records({0: 10}), RATIOS, seed=0)
        assert (len(train), len(val), len(test)) == (7, 1, 2)

    def test_large_set_partitions_exactly(self):
        # 4508 records over 40 classes, uneven sizes
        rng = np.random.default_rng(0)
        sizes = rng.multinomial(4508 - 40 * 20, np.full(40, 1 / 40)) + 20
        records = _records({c: int(n) for c, n in enumerate(sizes)})
        train, val, test = make_random_split(records, RATIOS, seed=1)
        assert len(train) + len(val) + len(test) == 4508
        paths = [r.path for m in (train, val, test) for r in m.records]
        assert len(set(paths)) == 4508  # pairwise disjoint
        for c, n in enumerate(sizes):
            per = [sum(1 for r in m.records if r.label == c)
                   for m in (train, val, test)]
            assert sum(per) == n
            assert per[1] == int(n * 0.1)
            assert per[2] == int(n * 0.2)

    def test_seed_changes_membership_not_sizes(self):
        records = _records({0: 40, 1: 25})
        a = make_random_split(records, RATIOS, seed=1)
        b = make_random_split(records, RATIOS, seed=2)
        assert [len(m) for m in a] == [len(m) for m in b]
        assert {r.path for r in a[0].records} != {r.path for r in b[0].records}

    def test_same_seed_is_deterministic(self):
        records = _records({0: 33, 1: 47, 2: 12})
        a = make_random_split(records, RATIOS, seed=9)
        b = make_random_split(records, RATIOS, seed=9)
        for ma, mb in zip(a, b):
            assert ma.records == mb.records

    def test_class_too_small(self):
        with pytest.raises(ClassTooSmall):
            make_random_split(_records({0: 20, 1: 5}), RATIOS, seed=0)


class TestFixedSplit:
    def test_parses_large_list(self, tmp_path):
        labels = LabelSpace(tuple(f"c{i}" for i in range(102)))
        lines = [f"images/{i:06d}.jpg {i % 102}" for i in range(45095)]
        path = tmp_path / "train.txt"
        path.write_text("\n".join(lines) + "\n")
        manifest = load_fixed_split(path, labels, "train")
        assert len(manifest) == 45095
        assert manifest.records[0] == ImageRecord("images/000000.jpg", 0)

    def test_empty_file_empty_manifest(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        assert len(load_fixed_split(path, LabelSpace(("a", "b")))) == 0

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("img.jpg 999\n")
        labels = LabelSpace(tuple(f"c{i}" for i in range(102)))
        with pytest.raises(LabelOutOfRange):
            load_fixed_split(path, labels)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a.jpg 0\nb.jpg zero\n")
        with pytest.raises(MalformedLine, match=":2:"):
            load_fixed_split(path, LabelSpace(("a", "b")))

    def test_round_trip(self, tmp_path):
        manifest = make_random_split(
            _records({0: 10, 1: 10}), RATIOS, seed=0)[0]
        path = tmp_path / "m.txt"
        save_manifest(manifest, path)
        loaded = load_fixed_split(path, LabelSpace(("a", "b")), "train")
        assert loaded.records == manifest.records


class TestStreamBatches:
    @pytest.fixture()
    def manifest(self, shape_root):
        labels = scan_label_space(shape_root)
        records = scan_records(shape_root, labels)
        from pestclf.data import SplitManifest
        return SplitManifest("test", records)

    SPEC = PreprocessSpec(short_side=72, crop=64)

    def test_eval_batch_sizes_ceiling(self, shape_root, manifest):
        sizes = [len(labels) for _, labels in stream_batches(
            manifest, shape_root, self.SPEC, 16, "eval", seed=0)]
        assert sizes == [16, 16, 4]

    def test_hundred_records_batch_32(self, tmp_path):
        from pestclf.data import SplitManifest
        for name, n in (("a", 50), ("b", 50)):
            folder = tmp_path / name
            folder.mkdir()
            for i in range(n):
                Image.new("RGB", (24, 24), (i, 128, 0)).save(folder / f"{i}.png")
        labels = scan_label_space(tmp_path)
        manifest = SplitManifest("test", scan_records(tmp_path, labels))
        spec = PreprocessSpec(short_side=24, crop=24)
        sizes = [len(y) for _, y in stream_batches(
            manifest, tmp_path, spec, 32, "eval", seed=0)]
        assert sizes == [32, 32, 32, 4]

    def test_eval_preserves_manifest_order(self, shape_root, manifest):
        streamed = np.concatenate([labels for _, labels in stream_batches(
            manifest, shape_root, self.SPEC, 7, "eval", seed=0)])
        assert np.array_equal(streamed, manifest.labels())

    def test_train_same_seed_identical_epochs(self, shape_root, manifest):
        def epoch_trace():
            batches = list(stream_batches(manifest, shape_root, self.SPEC,
                                          8, "train", seed=3, epoch=2))
            return batches
        a, b = epoch_trace(), epoch_trace()
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_train_epochs_reshuffle(self, shape_root, manifest):
        first = np.concatenate([y for _, y in stream_batches(
            manifest, shape_root, self.SPEC, 8, "train", seed=3, epoch=0)])
        second = np.concatenate([y for _, y in stream_batches(
            manifest, shape_root, self.SPEC, 8, "train", seed=3, epoch=1)])
        assert not np.array_equal(first, second)

    def test_workers_do_not_change_stream(self, shape_root, manifest):
        solo = list(stream_batches(manifest, shape_root, self.SPEC, 8,
                                   "train", seed=5, epoch=1, num_workers=0))
        threaded = list(stream_batches(manifest, shape_root, self.SPEC, 8,
                                       "train", seed=5, epoch=1, num_workers=4))
        assert len(solo) == len(threaded)
        for (xa, ya), (xb, yb) in zip(solo, threaded):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_undecodable_image_skipped(self, tmp_path, caplog):
        from pestclf.data import SplitManifest
        for name in ("a", "b"):
            folder = tmp_path / name
            folder.mkdir()
            for i in range(3):
                Image.new("RGB", (70, 70), (100, 0, 0)).save(folder / f"{i}.png")
        (tmp_path / "a" / "broken.png").write_bytes(b"not an image")
        labels = scan_label_space(tmp_path)
        manifest = SplitManifest("test", scan_records(tmp_path, labels))
        assert len(manifest) == 7
        spec = PreprocessSpec(short_side=64, crop=64)
        batches = list(stream_batches(manifest, tmp_path, spec, 4, "eval", 0))
        assert sum(len(y) for _, y in batches) == 6
        assert any("broken.png" in r.message for r in caplog.records)

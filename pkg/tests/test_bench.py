import numpy as np
import pytest

from ekpc.bench import (FeatureFileError, MetricsReport, StreamError, accuracy,
                        average_forgetting, load_feature_stream,
                        make_synthetic_stream, read_feature_file, read_metrics,
                        summarize, write_feature_file, write_metrics)
from ekpc.numerics import SeededRng


class TestSyntheticStream:
    def test_deterministic_under_seed(self):
        a = make_synthetic_stream(2, 2, 3, 8, 0.5, seed=7, samples_per_class=10)
        b = make_synthetic_stream(2, 2, 3, 8, 0.5, seed=7, samples_per_class=10)
        for ta, tb in zip(a.tasks, b.tasks):
            assert np.array_equal(ta.train_x, tb.train_x)
            assert np.array_equal(ta.test_y, tb.test_y)

    def test_different_seed_differs(self):
        a = make_synthetic_stream(2, 2, 3, 8, 0.5, seed=7, samples_per_class=10)
        b = make_synthetic_stream(2, 2, 3, 8, 0.5, seed=8, samples_per_class=10)
        assert not np.array_equal(a.tasks[0].train_x, b.tasks[0].train_x)

    def test_class_sets_disjoint(self):
        stream = make_synthetic_stream(4, 3, 3, 8, 0.5, seed=1, samples_per_class=8)
        stream.check_disjoint()
        seen = [c for t in stream.tasks for c in t.class_ids]
        assert sorted(seen) == list(range(12))

    def test_every_test_class_in_train(self):
        stream = make_synthetic_stream(3, 2, 3, 8, 0.5, seed=2, samples_per_class=10)
        for task in stream.tasks:
            assert set(task.test_y.tolist()) <= set(task.train_y.tolist())

    def test_split_is_80_20(self):
        stream = make_synthetic_stream(1, 2, 3, 8, 0.5, seed=3, samples_per_class=50)
        task = stream.tasks[0]
        assert task.train_x.shape[0] == 2 * 40
        assert task.test_x.shape[0] == 2 * 10

    def test_zero_spread_nearest_anchor_is_perfect(self):
        stream = make_synthetic_stream(2, 3, 4, 8, 1e-9, seed=4, samples_per_class=12)
        # centroid classifier fit on train tokens classifies test perfectly
        for task in stream.tasks:
            centroids = {c: task.train_x[task.train_y == c].mean(axis=(0, 1))
                         for c in task.class_ids}
            for x, y in zip(task.test_x, task.test_y):
                token = x.mean(axis=0)
                pred = min(centroids, key=lambda c: np.linalg.norm(token - centroids[c]))
                assert pred == y

    def test_cls_row_is_content_mean(self):
        stream = make_synthetic_stream(1, 1, 5, 8, 0.5, seed=5, samples_per_class=6)
        x = stream.tasks[0].train_x
        assert np.allclose(x[:, 0], x[:, 1:].mean(axis=1), atol=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(StreamError):
            make_synthetic_stream(0, 2, 3, 8, 0.5, seed=1)
        with pytest.raises(StreamError):
            make_synthetic_stream(2, 2, 3, 8, 0.5, seed=1, samples_per_class=1)


class TestFeatureFile:
    def _sample(self, n=10, d_t=3, d=4, k=5, seed=9):
        rng = SeededRng(seed)
        tokens = rng.standard_normal((n, d_t, d)).astype(np.float32)
        labels = rng.derive(1).integers(0, k, n).astype(np.uint32)
        return tokens, labels, k

    def test_round_trip_bit_exact(self, tmp_path):
        tokens, labels, k = self._sample()
        path = tmp_path / "feats.ekft"
        write_feature_file(path, tokens, labels, k)
        t2, l2, k2 = read_feature_file(path)
        assert t2.dtype == np.float32
        assert np.array_equal(t2.view(np.uint32), tokens.view(np.uint32))  # bitwise
        assert np.array_equal(l2, labels.astype(np.int64))
        assert k2 == k

    def test_truncated_payload_names_offset(self, tmp_path):
        tokens, labels, k = self._sample()
        path = tmp_path / "feats.ekft"
        write_feature_file(path, tokens, labels, k)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 7])
        with pytest.raises(FeatureFileError, match="byte"):
            read_feature_file(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "feats.ekft"
        path.write_bytes(b"ABCD" + bytes(20))
        with pytest.raises(FeatureFileError, match="magic"):
            read_feature_file(path)

    def test_label_out_of_range(self, tmp_path):
        tokens = np.zeros((2, 1, 2), dtype=np.float32)
        labels = np.array([0, 3], dtype=np.uint32)
        path = tmp_path / "feats.ekft"
        write_feature_file(path, tokens, labels, 4)
        raw = bytearray(path.read_bytes())
        # header says 2 classes instead of 4: second label becomes invalid
        raw[20:24] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FeatureFileError, match="label 3 out of range"):
            read_feature_file(path)

    def test_writer_rejects_bad_labels(self, tmp_path):
        with pytest.raises(ValueError):
            write_feature_file(tmp_path / "x.ekft", np.zeros((1, 1, 2), dtype=np.float32),
                               np.array([7], dtype=np.uint32), 3)


class TestFeatureStream:
    def _file(self, tmp_path, classes=200, per_class=2, d_t=2, d=3):
        n = classes * per_class
        rng = SeededRng(17)
        tokens = rng.standard_normal((n, d_t, d)).astype(np.float32)
        labels = np.repeat(np.arange(classes, dtype=np.uint32), per_class)
        path = tmp_path / "feats.ekft"
        write_feature_file(path, tokens, labels, classes)
        return path

    def test_even_split_of_200_classes_into_10_tasks(self, tmp_path):
        path = self._file(tmp_path)
        stream = load_feature_stream(path, tasks=10, seed=3)
        assert len(stream.tasks) == 10
        for task in stream.tasks:
            assert len(task.class_ids) == 20
        stream.check_disjoint()

    def test_uneven_split_rejected(self, tmp_path):
        path = self._file(tmp_path, classes=10)
        with pytest.raises(StreamError, match="do not split evenly"):
            load_feature_stream(path, tasks=3, seed=3)

    def test_seed_controls_class_assignment(self, tmp_path):
        path = self._file(tmp_path, classes=20, per_class=4)
        a = load_feature_stream(path, tasks=4, seed=0)
        b = load_feature_stream(path, tasks=4, seed=1)
        assert a.label_map != b.label_map
        again = load_feature_stream(path, tasks=4, seed=0)
        assert a.label_map == again.label_map
        for ta, tb in zip(a.tasks, again.tasks):
            assert np.array_equal(ta.train_x, tb.train_x)

    def test_values_survive_round_trip_to_f64(self, tmp_path):
        path = self._file(tmp_path, classes=4, per_class=5)
        tokens, labels, _ = read_feature_file(path)
        stream = load_feature_stream(path, tasks=2, seed=5)
        # every engine-side sample must exist bit-exactly in the file payload
        pool = tokens.astype(np.float64).reshape(tokens.shape[0], -1)
        for task in stream.tasks:
            for row in task.train_x.reshape(task.train_x.shape[0], -1):
                assert (pool == row).all(axis=1).any()


class TestMetrics:
    def test_accuracy_percent(self):
        assert accuracy(np.array([1, 1, 0, 2]), np.array([1, 0, 0, 2])) == 75.0

    def test_af_zero_without_degradation(self):
        acc = [[90.0], [90.0, 85.0]]
        assert average_forgetting(acc) == 0.0

    def test_af_direct_substitution(self):
        acc = [[90.0], [80.0, 70.0]]
        assert average_forgetting(acc) == 10.0

    def test_af_can_be_negative(self):
        acc = [[80.0], [95.0, 70.0]]
        assert average_forgetting(acc) == -15.0

    def test_af_needs_two_sessions(self):
        with pytest.raises(ValueError):
            average_forgetting([[90.0]])

    def test_summarize_single_task(self):
        a_last, a_avg = summarize([[84.0]])
        assert a_last == 84.0 and a_avg == 84.0

    def test_summarize_direct(self):
        # all-seen accuracies [100, 80] -> A_Avg 90, A_Last 80
        a_last, a_avg = summarize([[100.0], [80.0, 80.0]])
        assert a_last == 80.0
        assert a_avg == 90.0

    def test_summarize_weighted(self):
        a_last, _ = summarize([[100.0], [90.0, 60.0]], weights=[30.0, 10.0])
        assert a_last == pytest.approx((90.0 * 30 + 60.0 * 10) / 40)

    def test_a_avg_invariant_to_appending_average_session(self):
        acc = [[100.0], [80.0, 80.0]]
        _, a_avg = summarize(acc)
        acc2 = acc + [[90.0, 90.0, 90.0]]
        _, a_avg2 = summarize(acc2)
        assert a_avg2 == pytest.approx(a_avg)

    def test_three_by_three_fixture(self):
        # hand-computed oracle table
        acc = [[90.0], [80.0, 70.0], [60.0, 50.0, 40.0]]
        assert average_forgetting(acc) == pytest.approx((90 - 60 + 70 - 50) / 2)  # 25
        a_last, a_avg = summarize(acc)
        assert a_last == pytest.approx(50.0)
        assert a_avg == pytest.approx((90.0 + 75.0 + 50.0) / 3)

    def test_lower_triangular_enforced(self):
        with pytest.raises(ValueError):
            average_forgetting([[90.0, 50.0], [80.0, 70.0]])
        with pytest.raises(ValueError):
            summarize([[90.0, 50.0]])


class TestMetricsPersistence:
    def _report(self):
        return MetricsReport(
            acc_matrix=[[90.0], [80.0, 70.0]],
            seen_acc=[90.0, 75.0],
            a_last=75.0, a_avg=82.5, af=10.0,
            sdv_trace=[None, 0.125],
            config={"variant": "ekpc", "train": {"seed": 3}},
            seed=3)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        write_metrics(path, self._report())
        records = read_metrics(path)
        assert len(records) == 3
        assert records[0]["record"] == "session"
        assert records[0]["sdv"] is None
        assert records[1]["sdv"] == 0.125
        summary = records[-1]
        assert summary["record"] == "summary"
        assert summary["a_last"] == 75.0
        assert summary["af"] == 10.0
        assert summary["config"]["variant"] == "ekpc"

    def test_byte_identical_across_writes(self, tmp_path):
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        write_metrics(p1, self._report())
        write_metrics(p2, self._report())
        assert p1.read_bytes() == p2.read_bytes()

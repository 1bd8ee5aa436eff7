import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spam.data_metrics import (
    NormStats,
    Schema,
    accuracy_top1,
    auroc,
    load_csv,
    metrics_record,
    minibatches,
    normalize_minmax,
    rmse,
    split_70_10_20,
)
from spam.errors import DataError, MetricError, SchemaError


@pytest.fixture
def write_csv(tmp_path):
    def _write(text, name="table.csv"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return _write


class TestLoadCsv:
    def test_numeric(self, write_csv):
        path = write_csv("a,b,y\n1,2,0.5\n3,4,1.5\n5,6,2.5\n")
        table = load_csv(path, Schema.from_dict({"columns": ["a", "b"], "target": "y", "task": "regression"}))
        assert table.X.shape == (3, 2)
        assert table.y.tolist() == [0.5, 1.5, 2.5]

    def test_one_hot(self, write_csv):
        path = write_csv("c,y\nb,1\na,0\n")
        schema = Schema.from_dict({
            "columns": [{"name": "c", "type": "categorical", "categories": ["a", "b"]}],
            "target": "y", "task": "binary", "classes": [0, 1],
        })
        table = load_csv(path, schema)
        assert table.X.tolist() == [[0.0, 1.0], [1.0, 0.0]]
        assert table.feature_names == ["c=a", "c=b"]
        assert table.y.tolist() == [1, 0]

    def test_missing_value_names_row(self, write_csv):
        path = write_csv("a,y\n1,2\nNA,3\n")
        with pytest.raises(DataError, match="row 2") as info:
            load_csv(path, Schema.from_dict({"columns": ["a"], "target": "y", "task": "regression"}))
        assert info.value.row == 2 and info.value.column == "a"

    def test_unknown_category(self, write_csv):
        path = write_csv("c,y\nz,1\n")
        schema = Schema.from_dict({
            "columns": [{"name": "c", "type": "categorical", "categories": ["a"]}],
            "target": "y", "task": "regression",
        })
        with pytest.raises(DataError, match="unknown category"):
            load_csv(path, schema)

    def test_bad_number(self, write_csv):
        path = write_csv("a,y\n1,2\n3,4\nfoo,5\n")
        with pytest.raises(DataError) as info:
            load_csv(path, Schema.from_dict({"columns": ["a"], "target": "y", "task": "regression"}))
        assert info.value.row == 3

    def test_header_mismatch(self, write_csv):
        path = write_csv("a,y\n1,2\n")
        with pytest.raises(SchemaError):
            load_csv(path, Schema.from_dict({"columns": ["b"], "target": "y", "task": "regression"}))

    def test_schema_validation(self):
        with pytest.raises(SchemaError):
            Schema.from_dict({"columns": ["a"], "target": "y", "task": "ranking"})
        with pytest.raises(SchemaError):
            Schema.from_dict({"columns": ["a"], "target": "y", "task": "binary", "classes": [0, 1, 2]})


class TestNormalize:
    def test_train_column(self):
        Z, stats = normalize_minmax(np.array([[2.0], [4.0], [6.0]]), [0, 1, 2])
        assert Z[:, 0].tolist() == [0.0, 0.5, 1.0]

    def test_constant_column(self):
        Z, _ = normalize_minmax(np.array([[5.0], [5.0]]), [0, 1])
        assert Z[:, 0].tolist() == [0.0, 0.0]

    def test_clipping(self):
        Z, _ = normalize_minmax(np.array([[2.0], [6.0], [8.0], [-1.0]]), [0, 1])
        assert Z[2, 0] == 1.0 and Z[3, 0] == 0.0

    @settings(max_examples=30)
    @given(st.integers(0, 2**31 - 1))
    def test_inverse_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(scale=100.0, size=(20, 3))
        Z, stats = normalize_minmax(raw, np.arange(20))
        assert np.max(np.abs(stats.inverse(Z) - raw)) <= 1e-12 * max(1.0, np.abs(raw).max())

    def test_stats_serialize(self):
        stats = NormStats(np.array([0.0, -1.0]), np.array([2.0, 1.0]))
        back = NormStats.from_dict(stats.to_dict())
        assert np.array_equal(back.minimum, stats.minimum) and np.array_equal(back.maximum, stats.maximum)


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(100, (70, 10, 20)), (101, (71, 10, 20)), (10, (7, 1, 2))])
    def test_sizes(self, n, sizes):
        assert tuple(map(len, split_70_10_20(n, 0))) == sizes

    @given(st.integers(10, 500), st.integers(0, 1000))
    def test_partition(self, n, seed):
        parts = split_70_10_20(n, seed)
        joined = np.concatenate(parts)
        assert sorted(joined.tolist()) == list(range(n))

    def test_deterministic(self):
        a, b = split_70_10_20(1000, 3), split_70_10_20(1000, 3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[2], split_70_10_20(1000, 4)[2])

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_70_10_20(9, 0)


class TestMinibatches:
    def test_sizes(self):
        assert [len(b) for b in minibatches(10, 4, 0, 0)] == [4, 4, 2]

    def test_permutation(self):
        assert sorted(np.concatenate(minibatches(37, 5, 1, 2)).tolist()) == list(range(37))

    def test_keyed_by_seed_and_epoch(self):
        a = np.concatenate(minibatches(50, 8, 1, 3))
        assert np.array_equal(a, np.concatenate(minibatches(50, 8, 1, 3)))
        assert not np.array_equal(a, np.concatenate(minibatches(50, 8, 1, 4)))


class TestMetrics:
    def test_rmse_examples(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5355, abs=1e-4)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-10, 10))
    def test_rmse_properties(self, values, c):
        pred = np.array(values)
        target = pred[::-1] + 1.0
        assert rmse(pred, target) == rmse(target, pred)
        assert rmse(c * pred, c * target) == pytest.approx(abs(c) * rmse(pred, target), rel=1e-9, abs=1e-9)

    def test_rmse_length_mismatch(self):
        with pytest.raises(MetricError):
            rmse([1.0], [1.0, 2.0])

    def test_auroc_examples(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auroc([0.3] * 4, [0, 1, 0, 1]) == 0.5
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-15)

    def test_auroc_matches_reference(self, rng):
        from sklearn.metrics import roc_auc_score

        scores = np.round(rng.normal(size=300), 1)
        labels = rng.integers(0, 2, size=300)
        assert auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_auroc_monotone_invariance(self, rng):
        scores = rng.normal(size=100)
        labels = rng.integers(0, 2, size=100)
        assert auroc(np.exp(3 * scores) + 7, labels) == pytest.approx(auroc(scores, labels), abs=1e-15)

    def test_auroc_single_class(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_accuracy_examples(self):
        labels = np.array([0, 2, 1])
        assert accuracy_top1(np.eye(3)[labels], labels) == 1.0
        assert accuracy_top1(np.array([[0.0, 1.0]]), [1]) == 1.0

    def test_accuracy_tie_rule(self, rng):
        labels = rng.integers(0, 4, size=200)
        assert accuracy_top1(np.zeros((200, 4)), labels) == pytest.approx(np.mean(labels == 0))

    def test_accuracy_label_range(self):
        with pytest.raises(MetricError):
            accuracy_top1(np.zeros((2, 3)), [0, 3])

    def test_metrics_record(self):
        rec = metrics_record("binary", 0.8, 10, 3)
        assert rec == {"task": "binary", "metric_name": "auroc", "value": 0.8, "n_test": 10, "seed": 3}

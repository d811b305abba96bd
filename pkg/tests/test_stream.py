"""
Synthetic stream generation and CSV export/ingest
"""
import numpy as np
import pytest

from subspace_cl.config import StreamConfig
from subspace_cl.core.stream import class_means, export_csv, generate, ingest_csv
from subspace_cl.exceptions import ConfigError, DataIngestError

SMALL = dict(num_tasks=3, classes_per_task=3, train_samples_per_class=5, test_samples_per_class=2,
             d_raw=16, d_shared=4, d_private=3)


def _cross_task_cosine(datasets):
    first = class_means(datasets[0])
    second = class_means(datasets[1])
    first /= np.linalg.norm(first, axis=1, keepdims=True)
    second /= np.linalg.norm(second, axis=1, keepdims=True)
    return float(np.mean(np.abs(first @ second.T)))


class TestGenerate:
    def test_shapes_and_label_spaces(self):
        datasets = generate(StreamConfig(**SMALL))
        assert len(datasets) == 3
        seen = set()
        for t, ds in enumerate(datasets):
            assert ds.task_index == t
            assert ds.X_train.shape == (15, 16)
            assert ds.X_test.shape == (6, 16)
            assert set(ds.y_train) == set(ds.class_ids) == set(ds.y_test)
            assert not seen & set(ds.class_ids)
            seen |= set(ds.class_ids)

    def test_deterministic_per_seed(self):
        first = generate(StreamConfig(**SMALL, seed=4))
        second = generate(StreamConfig(**SMALL, seed=4))
        other = generate(StreamConfig(**SMALL, seed=5))
        np.testing.assert_array_equal(first[2].X_train, second[2].X_train)
        assert not np.array_equal(first[0].X_train, other[0].X_train)

    def test_class_means_have_configured_norm(self):
        datasets = generate(StreamConfig(**SMALL, noise_sigma=0.0, mean_norm=2.5))
        np.testing.assert_allclose(np.linalg.norm(class_means(datasets[1]), axis=1), 2.5)

    def test_orthogonal_tasks_at_zero_kappa(self):
        datasets = generate(StreamConfig(**SMALL, noise_sigma=0.0, kappa=0.0))
        assert _cross_task_cosine(datasets) == pytest.approx(0.0, abs=1e-12)

    def test_cross_task_similarity_grows_with_kappa(self):
        similarities = [
            _cross_task_cosine(generate(StreamConfig(**SMALL, noise_sigma=0.0, kappa=kappa, seed=2)))
            for kappa in (0.0, 0.25, 0.5, 0.75, 1.0)
        ]
        assert all(a < b for a, b in zip(similarities, similarities[1:]))

    def test_dimension_budget_rejected_by_validation(self):
        with pytest.raises(ValueError):
            StreamConfig(**{**SMALL, "d_private": 5})

    def test_dimension_budget_rejected_by_generator(self):
        cfg = StreamConfig.model_construct(**{**StreamConfig(**SMALL).model_dump(), "d_private": 5})
        with pytest.raises(ConfigError):
            generate(cfg)


class TestCsv:
    def test_export_then_ingest_is_exact(self, tmp_path):
        datasets = generate(StreamConfig(**SMALL))
        path = str(tmp_path / "stream.csv")
        export_csv(datasets, path)
        loaded = ingest_csv(path)
        assert len(loaded) == len(datasets)
        for original, restored in zip(datasets, loaded):
            assert restored.class_ids == original.class_ids
            np.testing.assert_array_equal(restored.X_train, original.X_train)
            np.testing.assert_array_equal(restored.y_test, original.y_test)
            np.testing.assert_array_equal(restored.X_test, original.X_test)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert ingest_csv(str(path)) == []

    def test_header_only(self, tmp_path):
        path = tmp_path / "header.csv"
        path.write_text("task_id,class_id,split,f0\n")
        assert ingest_csv(str(path)) == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIngestError):
            ingest_csv(str(tmp_path / "missing.csv"))

    def test_row_with_missing_value(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("task_id,class_id,split,f0,f1\n0,0,train,1.0,2.0\n0,1,train,1.0\n")
        with pytest.raises(DataIngestError) as info:
            ingest_csv(str(path))
        assert info.value.row == 3
        assert "row 3" in str(info.value)

    def test_row_with_extra_fields(self, tmp_path):
        path = tmp_path / "long.csv"
        path.write_text("task_id,class_id,split,f0\n0,0,train,1.0\n0,1,train,1.0,5.0,6.0\n")
        with pytest.raises(DataIngestError):
            ingest_csv(str(path))

    def test_unknown_split(self, tmp_path):
        path = tmp_path / "split.csv"
        path.write_text("task_id,class_id,split,f0\n0,0,train,1.0\n0,0,valid,1.0\n")
        with pytest.raises(DataIngestError) as info:
            ingest_csv(str(path))
        assert info.value.row == 3

    def test_non_numeric_feature(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("task_id,class_id,split,f0\n0,0,train,1.0\n0,0,test,abc\n")
        with pytest.raises(DataIngestError) as info:
            ingest_csv(str(path))
        assert info.value.row == 3

    def test_class_shared_between_tasks(self, tmp_path):
        path = tmp_path / "shared.csv"
        path.write_text("task_id,class_id,split,f0\n0,0,train,1.0\n1,0,train,2.0\n")
        with pytest.raises(DataIngestError):
            ingest_csv(str(path))

    def test_tasks_grouped_in_ascending_order(self, tmp_path):
        path = tmp_path / "order.csv"
        path.write_text("task_id,class_id,split,f0\n1,5,train,2.0\n0,0,train,1.0\n0,0,test,3.0\n")
        loaded = ingest_csv(str(path))
        assert [ds.task_index for ds in loaded] == [0, 1]
        assert loaded[1].X_test.shape == (0, 1)
        np.testing.assert_array_equal(loaded[0].X_test, [[3.0]])

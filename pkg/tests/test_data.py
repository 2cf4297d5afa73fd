import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtdbn.data import (
    Dataset,
    NormalizationStats,
    SyntheticSpec,
    TargetColumn,
    apply_preprocess,
    fit_preprocess,
    generate_synthetic,
    load_dataset,
    normalize_real_view,
    transform_counts,
    write_dataset,
)
from mtdbn.errors import DataError
from mtdbn.metrics import concat_baseline_embed, map_at, RelevanceJudge

SMALL = SyntheticSpec(clusters=3, per_cluster=6, real_dim=3, count_dim=4, binary_dim=5, seed=2)


def tiny_dataset():
    return Dataset({"r": "real", "c": "count"},
                   {"r": np.array([[0.5, -1.25], [3.0, 4.0]]), "c": np.array([[0.0, 2.0], [7.0, 1.0]])},
                   {"lab": TargetColumn("multilabel", [["x"], None], ["x", "y"])},
                   {"train": np.array([0, 1])})


class TestRoundTrip:
    def test_generated_corpus(self, tmp_path):
        ds = generate_synthetic(SMALL, tmp_path)
        back = load_dataset(tmp_path / "manifest.json")
        assert list(back.view_types) == ["real", "count", "binary"]
        for name, x in ds.views.items():
            assert back.views[name].shape == x.shape
            np.testing.assert_array_equal(back.views[name], x)  # exact, reals included
        for name, col in ds.targets.items():
            assert back.targets[name].values == col.values
            assert back.targets[name].labels == col.labels
        for k, ids in ds.splits.items():
            np.testing.assert_array_equal(back.splits[k], ids)

    def test_missing_target_rows(self, tmp_path):
        write_dataset(tiny_dataset(), tmp_path)
        back = load_dataset(tmp_path / "manifest.json")
        assert back.targets["lab"].values == [["x"], None]

    def test_no_targets(self, tmp_path):
        ds = tiny_dataset()
        ds.targets = {}
        write_dataset(ds, tmp_path)
        assert load_dataset(tmp_path / "manifest.json").targets == {}

    def test_format_key(self, tmp_path):
        path = write_dataset(tiny_dataset(), tmp_path)
        assert json.loads(path.read_text())["format"] == "mtdbn/1"


class TestLoadErrors:
    def write(self, tmp_path):
        return write_dataset(tiny_dataset(), tmp_path)

    def test_negative_count_names_row(self, tmp_path):
        path = self.write(tmp_path)
        (tmp_path / "c.csv").write_text("0,2\n-1,1\n")
        with pytest.raises(DataError, match=r"c\.csv: row 2"):
            load_dataset(path)

    def test_row_count_mismatch(self, tmp_path):
        path = self.write(tmp_path)
        (tmp_path / "r.csv").write_text("0.5,1.0\n")
        with pytest.raises(DataError, match=r"r\.csv.*1 rows"):
            load_dataset(path)

    def test_column_mismatch(self, tmp_path):
        path = self.write(tmp_path)
        (tmp_path / "r.csv").write_text("0.5,1.0\n1,2,3\n")
        with pytest.raises(DataError, match="row 2"):
            load_dataset(path)

    def test_unknown_kind(self, tmp_path):
        path = self.write(tmp_path)
        m = json.loads(path.read_text())
        m["targets"][0]["kind"] = "ordinal"
        path.write_text(json.dumps(m))
        with pytest.raises(DataError, match="unknown kind"):
            load_dataset(path)

    def test_bad_label_names_row(self, tmp_path):
        path = self.write(tmp_path)
        (tmp_path / "lab.jsonl").write_text('{"id": 0, "kind": "multilabel", "y": ["x"]}\n'
                                            '{"id": 1, "kind": "multilabel", "y": ["q"]}\n')
        with pytest.raises(DataError, match=r"lab\.jsonl: row 2"):
            load_dataset(path)

    def test_binary_domain(self, tmp_path):
        ds = Dataset({"b": "binary"}, {"b": np.array([[1.0, 0.0]])})
        path = write_dataset(ds, tmp_path)
        (tmp_path / "b.csv").write_text("1,0.5\n")
        with pytest.raises(DataError, match="row 1"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        path = self.write(tmp_path)
        (tmp_path / "c.csv").unlink()
        with pytest.raises(DataError, match=r"c\.csv"):
            load_dataset(path)

    def test_wrong_format(self, tmp_path):
        path = self.write(tmp_path)
        m = json.loads(path.read_text())
        m["format"] = "other/2"
        path.write_text(json.dumps(m))
        with pytest.raises(DataError, match="format"):
            load_dataset(path)


class TestNormalization:
    def test_unit_stage(self):
        out, stats = normalize_real_view(np.array([[3.0, 4.0], [6.0, 8.0], [0.0, 5.0]]))
        np.testing.assert_allclose(stats.mean, [(0.6 + 0.6 + 0.0) / 3, (0.8 + 0.8 + 1.0) / 3])

    def test_unit_row_hand_value(self):
        stats = NormalizationStats(np.zeros(2), np.ones(2))
        out, _ = normalize_real_view([[3.0, 4.0]], stats)
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_identical_rows(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out, stats = normalize_real_view(np.tile([1.0, 2.0, 2.0], (5, 1)))
        assert caught and "zero-variance" in str(caught[0].message)
        np.testing.assert_array_equal(stats.std, 1.0)
        np.testing.assert_allclose(out, 0.0, atol=1e-15)

    def test_output_is_standardized(self):
        x = np.random.default_rng(0).normal(size=(50, 4))
        out, _ = normalize_real_view(x)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-9)

    def test_stats_reused(self):
        rng = np.random.default_rng(1)
        train, test = rng.normal(size=(20, 3)), rng.normal(size=(5, 3))
        _, stats = normalize_real_view(train)
        out, same = normalize_real_view(test, stats)
        assert same is stats
        u = test / np.linalg.norm(test, axis=1, keepdims=True)
        np.testing.assert_allclose(out, (u - stats.mean) / stats.std)

    def test_test_rows_do_not_affect_stats(self):
        ds = generate_synthetic(SMALL)
        train = ds.split_ids("train")
        a = fit_preprocess(ds, train)
        shuffled = Dataset(dict(ds.view_types), {k: v.copy() for k, v in ds.views.items()}, {}, {})
        others = np.setdiff1d(np.arange(ds.n), train)
        perm = np.random.default_rng(0).permutation(others)
        for v in shuffled.views.values():
            v[others] = v[perm]
        assert fit_preprocess(shuffled, train) == a

    def test_stats_dict_round_trip(self):
        _, stats = normalize_real_view(np.random.default_rng(2).normal(size=(6, 3)))
        back = NormalizationStats.from_dict(json.loads(json.dumps(stats.to_dict())))
        np.testing.assert_array_equal(back.mean, stats.mean)
        np.testing.assert_array_equal(back.std, stats.std)


class TestCounts:
    def test_hand_values(self):
        np.testing.assert_array_equal(transform_counts([0, 1, 100]), [0, 1, 5])

    def test_modes(self):
        assert transform_counts([100], "floor")[0] == 4
        assert transform_counts([1], "none")[0] == pytest.approx(math.log(2))
        with pytest.raises(DataError):
            transform_counts([1], "ceil")

    @given(st.lists(st.integers(0, 10**9), min_size=1, max_size=20), st.sampled_from(["round", "floor"]))
    def test_output_is_count_domain(self, counts, mode):
        out = transform_counts(counts, mode)
        assert np.all(out >= 0) and np.all(out == np.floor(out))

    def test_apply_preprocess(self):
        ds = tiny_dataset()
        recipe = fit_preprocess(ds)
        out = apply_preprocess(ds, recipe)
        assert recipe["c"] == {"recipe": "log1p-round"}
        np.testing.assert_array_equal(out.views["c"], [[0.0, 1.0], [2.0, 1.0]])


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        generate_synthetic(SMALL, tmp_path / "a")
        generate_synthetic(SMALL, tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_zero_noise_rows_identical(self):
        spec = SyntheticSpec(clusters=2, per_cluster=5, real_noise=0.0, seed=1)
        ds = generate_synthetic(spec)
        real = ds.views["real"]
        np.testing.assert_array_equal(real[:5], np.tile(real[0], (5, 1)))

    def test_single_cluster_shares_labels(self):
        ds = generate_synthetic(SyntheticSpec(clusters=1, per_cluster=20, seed=3))
        col = ds.targets["concepts"]
        assert col.labels == ["concept0_0", "concept0_1"]
        assert all(v[0] == "concept0_0" for v in col.values)

    def test_views_and_domains(self):
        ds = generate_synthetic(SMALL)
        assert ds.views["real"].shape == (18, 3)
        assert ds.views["count"].shape == (18, 4)
        c, b = ds.views["count"], ds.views["binary"]
        assert np.all(c >= 0) and np.all(c == np.floor(c))
        assert set(np.unique(b)) <= {0.0, 1.0}

    def test_ranking_targets(self):
        ds = generate_synthetic(SMALL)
        col = ds.targets["tags"]
        assert col.kind == "ranking"
        assert all(len(v) == SMALL.rank_depth and len(set(v)) == len(v) for v in col.values)

    def test_splits_partition(self):
        ds = generate_synthetic(SyntheticSpec(per_cluster=25, split_fractions=(0.6, 0.2, 0.2)))
        ids = np.concatenate([ds.splits[k] for k in ("train", "calibrate", "test")])
        np.testing.assert_array_equal(np.sort(ids), np.arange(100))
        assert len(ds.splits["train"]) == 60

    def test_default_corpus_is_separable(self):
        ds = generate_synthetic(SyntheticSpec(clusters=4, per_cluster=50, seed=0))
        prepped = apply_preprocess(ds, fit_preprocess(ds, ds.split_ids("train")))
        emb = concat_baseline_embed([prepped.views[k] for k in prepped.views])
        assert map_at(emb, RelevanceJudge(ds.targets["concepts"].label_sets()), T=20) > 0.5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_round_trip_property(tmp_path_factory, seed):
    tmp = tmp_path_factory.mktemp("rt")
    spec = SyntheticSpec(clusters=2, per_cluster=4, real_dim=2, count_dim=3, binary_dim=2, seed=seed)
    ds = generate_synthetic(spec, tmp)
    back = load_dataset(tmp / "manifest.json")
    for k in ds.views:
        np.testing.assert_array_equal(back.views[k], ds.views[k])

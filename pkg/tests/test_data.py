import numpy as np
import pytest

from ppcl.data import (Dataset, SyntheticSpec, augment_numerical, factor_stats,
                       fit_minmax, generate_synthetic, load_dataset,
                       minmax_normalize, popularity_label, read_feature_matrix,
                       read_posts, save_dataset, temporal_split,
                       write_feature_matrix, write_posts)
from ppcl.errors import DataError


class TestPopularityLabel:
    def test_direct(self):
        assert popularity_label(2, 1, smoothing=False) == pytest.approx(2.0)

    def test_log_example(self):
        assert popularity_label(1024, 16, smoothing=False) == pytest.approx(7.0)

    def test_r_equals_d(self):
        assert popularity_label(37, 37, smoothing=False) == pytest.approx(1.0)

    def test_zero_views_needs_smoothing(self):
        assert popularity_label(0, 5, smoothing=True) == pytest.approx(np.log2(1 / 5) + 1)
        with pytest.raises(DataError):
            popularity_label(0, 5, smoothing=False)

    def test_bad_days(self):
        with pytest.raises(DataError):
            popularity_label(10, 0)


class TestAugment:
    def test_small_vectors(self):
        np.testing.assert_allclose(augment_numerical(np.array([4.0])), [4, 16, 2])
        np.testing.assert_allclose(augment_numerical(np.array([0.0])), [0, 0, 0])

    def test_two_fields(self):
        out = augment_numerical(np.array([1.0, 2.0]))
        assert out.shape == (6,)
        np.testing.assert_allclose(out, [1, 2, 1, 4, 1, np.sqrt(2)])

    def test_negative_clamped(self):
        with pytest.warns(UserWarning):
            out = augment_numerical(np.array([-3.0]))
        np.testing.assert_array_equal(out, [0, 0, 0])

    def test_eleven_fields_give_33(self):
        assert augment_numerical(np.ones(11)).shape == (33,)


class TestMinmax:
    def test_extremes(self):
        rows = np.array([[0.0, 5.0], [10.0, 5.0], [4.0, 5.0]])
        stats = fit_minmax(rows)
        out = minmax_normalize(rows, stats)
        assert out[:, 0].min() == 0.0 and out[:, 0].max() == 1.0
        np.testing.assert_array_equal(out[:, 1], 0.0)  # constant column

    def test_clamp_beyond_train_range(self):
        stats = fit_minmax(np.array([[0.0], [2.0]]))
        assert minmax_normalize(np.array([5.0]), stats)[0] == 1.0
        assert minmax_normalize(np.array([-5.0]), stats)[0] == 0.0

    def test_in_unit_interval(self):
        rng = np.random.default_rng(0)
        rows = augment_numerical(rng.uniform(0, 100, size=(20, 11)))
        stats = fit_minmax(rows)
        out = minmax_normalize(rows, stats)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert (out == 0.0).any(axis=0).all() and (out == 1.0).any(axis=0).all()


def _mini_dataset(n_posts=12, **kw):
    defaults = dict(n_posts=n_posts, n_users=4, branching=(2, 2), d_r=8, seed=3)
    defaults.update(kw)
    return generate_synthetic(SyntheticSpec(**defaults))


class TestTemporalSplit:
    def test_sizes_and_order(self):
        ds = _mini_dataset(20)
        tr, va, te = temporal_split(ds.posts)
        assert (len(tr), len(va), len(te)) == (16, 2, 2)
        assert max(p.timestamp for p in tr) <= min(p.timestamp for p in te)

    def test_partition(self):
        ds = _mini_dataset(25)
        tr, va, te = temporal_split(ds.posts)
        ids = [p.post_id for p in tr + va + te]
        assert len(ids) == 25 and len(set(ids)) == 25

    def test_tie_break_by_post_id(self):
        ds = _mini_dataset(10)
        for p in ds.posts:
            p.timestamp = 1000
        tr, va, te = temporal_split(ds.posts)
        assert (len(tr), len(va), len(te)) == (8, 1, 1)
        assert [p.post_id for p in tr] == sorted(p.post_id for p in tr)

    def test_too_few_posts(self):
        ds = _mini_dataset(12)
        with pytest.raises(DataError):
            temporal_split(ds.posts[:5])


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(n_posts=50, n_users=8, branching=(2, 2), d_r=8, seed=7)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        for pa, pb in zip(a.posts, b.posts):
            assert pa.views == pb.views and pa.days == pb.days
            np.testing.assert_array_equal(pa.image_feat, pb.image_feat)

    def test_no_effects_constant_labels(self):
        ds = _mini_dataset(30, sigma=0.0, beta=0.0, cat_effect=0.0, user_effect=0.0,
                           base=5.0)
        labels = [popularity_label(p.views, p.days) for p in ds.posts]
        np.testing.assert_allclose(labels, 5.0, atol=0.01)

    def test_label_backsolve_bound(self):
        ds = _mini_dataset(200, sigma=1.0)
        # the planted label is recoverable from (leaf, user, followers) when
        # sigma=0; here just check labels are finite and plausible
        labels = np.array([popularity_label(p.views, p.days) for p in ds.posts])
        assert np.isfinite(labels).all()

    def test_sigma_zero_oracle_regression(self):
        ds = _mini_dataset(400, n_users=10, sigma=0.0)
        leafs = np.array([p.category_path[-1] for p in ds.posts])
        uids = sorted({p.user_id for p in ds.posts})
        umap = {u: i for i, u in enumerate(uids)}
        labels = np.array([popularity_label(p.views, p.days) for p in ds.posts])
        X = np.zeros((len(ds.posts), leafs.max() + 1 + len(uids) + 1))
        for i, p in enumerate(ds.posts):
            X[i, leafs[i]] = 1.0
            X[i, leafs.max() + 1 + umap[p.user_id]] = 1.0
            X[i, -1] = np.log2(1 + ds.users[p.user_id].numerical["followerCount"])
        coef, *_ = np.linalg.lstsq(X, labels, rcond=None)
        mae = np.abs(X @ coef - labels).mean()
        assert mae < 0.02

    def test_user_grouping_reduces_variance(self):
        ds = _mini_dataset(600, n_users=30, user_effect=2.0, sigma=0.2)
        labels = {}
        for p in ds.posts:
            labels.setdefault(p.user_id, []).append(popularity_label(p.views, p.days))
        all_labels = np.concatenate([np.array(v) for v in labels.values()])
        within = np.mean([np.var(v) for v in labels.values() if len(v) > 1])
        assert within < np.var(all_labels)

    def test_planted_label_within_rounding(self):
        ds = _mini_dataset(300, sigma=0.7)
        # reconstruct the planted label from the generator's own covariates is
        # not possible post-hoc; instead verify the documented bound against a
        # re-generation with identical seed and intercepted labels
        for p in ds.posts:
            y = popularity_label(p.views, p.days)
            r2 = max(0, int(round(p.days * 2.0 ** (y - 1.0))) - 1)
            assert r2 == p.views


class TestFactorStats:
    def test_single_category_constant(self):
        ds = _mini_dataset(20, branching=(1,), sigma=0.0, beta=0.0,
                           cat_effect=0.0, user_effect=0.0, base=4.0)
        stats = factor_stats(ds, n_groups=20)
        assert len(stats["category"]) == 1
        row = stats["category"][0]
        np.testing.assert_allclose(row[1:6], 4.0, atol=0.01)

    def test_row_counts(self):
        ds = _mini_dataset(200, n_users=30)
        stats = factor_stats(ds, n_groups=20)
        assert len(stats["category"]) <= 20
        assert len(stats["user"]) == 20
        assert len(stats["influence"]) == 200

    def test_user_spread_below_global(self):
        ds = _mini_dataset(600, n_users=25, user_effect=2.5, sigma=0.2)
        stats = factor_stats(ds)
        iqrs = [row[4] - row[2] for row in stats["user"]]
        labels = [pt[1] for pt in stats["influence"]]
        global_iqr = np.percentile(labels, 75) - np.percentile(labels, 25)
        assert np.median(iqrs) < global_iqr

    def test_deterministic_sampling(self):
        ds = _mini_dataset(100, n_users=30)
        a = factor_stats(ds, seed=5)
        b = factor_stats(ds, seed=5)
        assert a["user"] == b["user"] and a["category"] == b["category"]


class TestFiles:
    def test_feature_matrix_roundtrip(self, tmp_path):
        mat = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
        path = str(tmp_path / "m.bin")
        write_feature_matrix(path, mat)
        np.testing.assert_allclose(read_feature_matrix(path), mat, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.bin")
        with open(path, "wb") as f:
            f.write(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(DataError):
            read_feature_matrix(path)

    @pytest.mark.parametrize("inline", [True, False])
    def test_posts_roundtrip(self, tmp_path, inline):
        ds = _mini_dataset(15)
        path = str(tmp_path / "posts.jsonl")
        write_posts(ds.posts, path, inline_features=inline)
        back = read_posts(path)
        assert len(back) == 15
        for a, b in zip(ds.posts, back):
            assert a.post_id == b.post_id and a.views == b.views
            assert a.category_path == b.category_path
            np.testing.assert_allclose(a.image_feat, b.image_feat, atol=1e-6)

    def test_dataset_roundtrip(self, tmp_path):
        ds = _mini_dataset(20)
        save_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        assert len(back.posts) == 20
        assert back.level_sizes == [int(s) for s in ds.level_sizes]
        assert set(back.users) == set(ds.users)


class TestVocab:
    def test_unseen_category_maps_to_unk(self):
        ds = _mini_dataset(30, n_users=10)
        tr, va, te = ds.split()
        train_uids = {p.user_id for p in tr}
        unseen = [u for u in ds.users if u not in train_uids]
        if unseen:
            ids = ds.user_cat_ids(unseen[0])
            # user_id field of an unseen user must be UNK (0)
            assert ids[0] == 0

    def test_materialize_shapes(self):
        ds = _mini_dataset(30)
        tr, va, te = ds.split()
        arr = ds.materialize(tr)
        assert arr.user_dense.shape == (len(tr), 33)
        assert arr.user_cat.shape == (len(tr), 9)
        assert arr.cat_levels.shape == (len(tr), 2)
        assert arr.user_dense.min() >= 0.0 and arr.user_dense.max() <= 1.0

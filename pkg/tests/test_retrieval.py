import math

import numpy as np
import pytest

import oracles
from geotime import model as M
from geotime import retrieval as R
from geotime.autodiff import ContractError
from geotime.data import SyntheticWorldConfig, generate_synthetic
from geotime.geomath import all_bin_centers


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def rank_order(scores):
    """Independent oracle: full stable sort on (-score, index)."""
    return np.array(sorted(range(len(scores)), key=lambda i: (-scores[i], i)))


@pytest.fixture(scope="module")
def tiny_model():
    return M.GeoTimeModel(M.ModelConfig(d=16, heads=2, img_feat_dim=8, n_freq=4, geo_nside=2))


@pytest.fixture(scope="module")
def tiny_world():
    return generate_synthetic(SyntheticWorldConfig(n_cameras=6, frames_per_camera=5, feature_dim=8, seed=3))


class TestGallery:
    def test_empty(self, rng):
        g = R.build_gallery(np.zeros((0, 4)))
        assert len(g) == 0
        res = R.search(unit(rng, 1, 4)[0], g, k=5)
        assert len(res) == 0

    def test_rejects_non_unit_rows_by_id(self):
        rows = np.array([[1.0, 0.0], [0.5, 0.5]])
        with pytest.raises(R.GalleryError, match="bad"):
            R.Gallery(rows, ids=["ok", "bad"])

    def test_metadata_checks(self):
        with pytest.raises(R.GalleryError):
            R.Gallery(np.eye(2), ids=["a"])
        with pytest.raises(R.GalleryError, match="bin"):
            R.Gallery(np.eye(2), bins=[0, 288], space="time")
        with pytest.raises(R.GalleryError, match="space"):
            R.Gallery(np.eye(2), bins=[0, 1], space="colour")
        R.Gallery(np.eye(2), bins=[0, 767], space="geo:8")

    def test_duplicates_tie_break_by_row(self):
        rows = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        res = R.search(np.array([1.0, 0.0]), R.Gallery(rows), k=3)
        assert res.rows.tolist() == [1, 2, 0]

    def test_shards_cover_rows(self):
        g = R.Gallery(np.tile([[1.0, 0.0]], (10, 1)))
        sh = g.shards(3)
        assert sh[0][0] == 0 and sh[-1][1] == 10
        assert all(a[1] == b[0] for a, b in zip(sh, sh[1:]))
        assert g.shards(50) == [(i, i + 1) for i in range(10)]

    def test_save_load_bit_exact_large(self, tmp_path, rng):
        n = 100_000
        rows = unit(rng, n, 16)
        torus = rng.random((n, 2))
        torus[::7] = np.nan
        g = R.Gallery(rows, coords=rng.uniform(-80, 80, (n, 2)), torus=torus, bins=rng.integers(0, 288, n), space="time")
        g.save(tmp_path / "g.gtck")
        back = R.Gallery.load(tmp_path / "g.gtck")
        assert back.rows.tobytes() == g.rows.tobytes()
        assert back.ids == g.ids and back.space == "time"
        np.testing.assert_array_equal(back.bins, g.bins)
        np.testing.assert_array_equal(back.coords, g.coords)
        np.testing.assert_array_equal(back.torus, g.torus)


class TestSearch:
    def test_self_is_rank_one(self, rng):
        rows = unit(rng, 50, 8)
        res = R.search(rows[17], R.Gallery(rows), k=1)
        assert res.rows[0] == 17
        assert res.cosines[0] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_query_keeps_row_order(self):
        rows = np.eye(6)[:, 1:][1:]  # five unit rows, all orthogonal to e0 after padding
        g = R.Gallery(np.hstack([np.zeros((5, 1)), rows]))
        res = R.search(np.eye(6)[0], g, k=None)
        assert res.rows.tolist() == [0, 1, 2, 3, 4]
        np.testing.assert_array_equal(res.cosines, 0.0)

    def test_matches_full_sort_oracle(self, rng):
        g = R.Gallery(unit(rng, 300, 8))
        for q in unit(rng, 1000, 8):
            got = R.search(q, g, k=10)
            sims = g.rows.astype(np.float64) @ q
            np.testing.assert_array_equal(got.rows, rank_order(sims)[:10])

    def test_sharded_equals_unsharded(self, rng):
        g = R.Gallery(unit(rng, 1003, 8))
        for q in unit(rng, 20, 8):
            a = R.search(q, g, k=25)
            for s in (2, 7, 2000):
                b = R.search(q, g, k=25, shards=s)
                np.testing.assert_array_equal(a.rows, b.rows)

    def test_k_clipped_and_validated(self, rng):
        g = R.Gallery(unit(rng, 3, 4))
        assert len(R.search(unit(rng, 1, 4)[0], g, k=10)) == 3
        with pytest.raises(ValueError):
            R.search(unit(rng, 1, 4)[0], g, k=0)


class TestEntropyBeta:
    def test_endpoints_exact(self):
        assert R.entropy_beta(np.full(288, 1 / 288), 2.0) == 0.0
        assert R.entropy_beta(np.eye(768)[5], 1.0) == 1.0

    def test_two_class_value(self):
        h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert h == pytest.approx(0.32508, abs=1e-5)
        assert R.entropy_beta([0.9, 0.1], 1.0) == pytest.approx(0.53100, abs=1e-4)
        assert R.entropy_beta([0.9, 0.1], 2.0) == pytest.approx(2 * 0.53100, abs=2e-4)

    def test_monotone_in_entropy(self):
        ps = [np.array([p, 1 - p]) for p in np.linspace(0.5, 1.0, 30)]
        betas = [R.entropy_beta(p, 1.0) for p in ps]
        assert np.all(np.diff(betas) >= 0)
        assert 0.0 <= min(betas) and max(betas) <= 1.0

    def test_batched(self):
        b = R.entropy_beta(np.array([[0.5, 0.5], [1.0, 0.0]]), 1.0)
        np.testing.assert_array_equal(b, [0.0, 1.0])


class TestRerank:
    def test_against_scalar_oracle(self, rng):
        for _ in range(50):
            n, B = 40, 12
            sims = rng.uniform(-1, 1, n)
            probs = rng.dirichlet(np.full(B, 0.3))
            probs[rng.integers(B)] = 0.0
            probs /= probs.sum()
            bins = rng.integers(0, B, n)
            got, _ = R.rerank(sims, probs, bins, R.RerankConfig(0.07, 2.0))
            ref = oracles.rerank_loop(sims, probs, bins, 0.07, 2.0)
            assert np.abs(got - ref).max() < 1e-12

    def test_uniform_classifier_preserves_argsort(self, rng):
        for _ in range(1000):
            n, B = 30, 8
            sims = rng.uniform(-1, 1, n)
            scores, beta = R.rerank(sims, np.full(B, 1 / B), rng.integers(0, B, n), R.GEO_RERANK)
            assert beta == 0.0
            np.testing.assert_array_equal(R.top_k(scores, None), R.top_k(sims, None))

    def test_one_hot_class_dominates(self, rng):
        sims = rng.uniform(-1, 1, 20)
        bins = np.arange(20) % 4
        scores, beta = R.rerank(sims, np.eye(4)[2], bins, R.RerankConfig(0.07, 1.0))
        assert beta == 1.0
        top = R.top_k(scores, 5)
        assert set(bins[top]) == {2}

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            R.rerank(np.zeros(3), np.full(4, 0.25), np.array([0, 1, 4]), R.GEO_RERANK)
        with pytest.raises(ContractError):
            R.rerank(np.zeros(3), np.full(4, 0.25), np.array([0, 1]), R.GEO_RERANK)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            R.RerankConfig(psi=0.0)
        with pytest.raises(ValueError):
            R.RerankConfig(beta_max=-1.0)
        assert (R.TIME_RERANK.psi, R.TIME_RERANK.beta_max) == (0.07, 2.0)


class TestTasks:
    def test_time_gallery(self, tiny_model):
        g = R.time_gallery(tiny_model)
        assert len(g) == 288 and g.space == "time"
        np.testing.assert_array_equal(g.bins, np.arange(288))
        np.testing.assert_array_equal(g.torus, all_bin_centers())
        assert len(R.time_gallery(tiny_model, fine=True)) == 365 * 24

    def test_location_conditioning_changes_only_query(self, tiny_model, tiny_world):
        g = R.time_gallery(tiny_model)
        before = g.rows.copy()
        a = R.task_time_predict(tiny_model, tiny_world.features[:4], g, None, None, k=None)
        b = R.task_time_predict(tiny_model, tiny_world.features[:4], g, tiny_world.coords[:4], None, k=None)
        assert g.rows.tobytes() == before.tobytes()
        assert any(not np.array_equal(x.cosines, y.cosines) for x, y in zip(a, b))

    def test_time_distributions(self, tiny_model, tiny_world):
        g = R.time_gallery(tiny_model)
        (res,) = R.task_time_predict(tiny_model, tiny_world.features[:1], g, k=None)
        months, hours = R.time_distributions(res, g)
        assert months.shape == (12,) and hours.shape == (24,)
        assert months.sum() == pytest.approx(1.0, abs=1e-12) and hours.sum() == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(ValueError):
            R.time_distributions(R.task_time_predict(tiny_model, tiny_world.features[:1], g, k=3)[0], g)

    def test_uniform_head_geoloc_is_pure_cosine(self, tiny_model, tiny_world):
        params = dict(tiny_model.params)
        params["geo_fc2_w"] = np.zeros_like(params["geo_fc2_w"])
        params["geo_fc2_b"] = np.zeros_like(params["geo_fc2_b"])
        m = M.GeoTimeModel(tiny_model.config, params)
        cand = R.location_gallery(m, tiny_world.coords[::5])
        a = R.task_geolocalize(m, tiny_world.features, cand, R.GEO_RERANK, k=None)
        b = R.task_geolocalize(m, tiny_world.features, cand, None, k=None)
        for x, y in zip(a, b):
            assert x.beta == 0.0
            np.testing.assert_array_equal(x.rows, y.rows)

    def test_geoloc_errors(self, tiny_model, tiny_world):
        with pytest.raises(R.GalleryError):
            R.location_gallery(tiny_model, np.zeros((0, 2)))

    def test_geotime_exclude(self, tiny_model, tiny_world):
        g = R.image_gallery(tiny_model, tiny_world)
        q = np.array([0, 7])
        res = R.task_geotime_retrieve(tiny_model, tiny_world.features[q], tiny_world.torus[q], g, k=None, exclude=q)
        for i, r in zip(q, res):
            assert len(r) == len(g) - 1 and i not in r.rows
        assert res[0].beta is None

    def test_compositional_season_sensitivity(self, tiny_model, tiny_world):
        g = R.image_gallery(tiny_model, tiny_world)
        t = np.array([[0.1, 0.3]])
        a = R.task_compositional(tiny_model, tiny_world.coords[:1], t, g, k=None)[0]
        b = R.task_compositional(tiny_model, tiny_world.coords[:1], (t + [0.5, 0]) % 1, g, k=None)[0]
        ra, rb = np.argsort(a.rows), np.argsort(b.rows)
        assert np.corrcoef(ra, rb)[0, 1] < 1.0

    def test_compositional_empty_gallery(self, tiny_model):
        g = R.build_gallery(np.zeros((0, 16)))
        assert len(R.task_compositional(tiny_model, [[0.0, 0.0]], [[0.2, 0.2]], g)[0]) == 0

    def test_tasks_are_pure(self, tiny_model, tiny_world):
        g = R.time_gallery(tiny_model)
        a = R.task_time_predict(tiny_model, tiny_world.features, g)
        b = R.task_time_predict(tiny_model, tiny_world.features, g)
        assert all(np.array_equal(x.rows, y.rows) and np.array_equal(x.scores, y.scores) for x, y in zip(a, b))

    def test_default_candidates(self):
        c = R.default_geo_candidates(np.array([[1.0, 2.0], [1.0, 2.0]]), 2)
        assert len(c) == 1 + 48

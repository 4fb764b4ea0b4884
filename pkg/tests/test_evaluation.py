import json
import math
from datetime import datetime

import numpy as np
import pytest

from geotime import evaluation as E
from geotime import model as M
from geotime.data import SyntheticWorldConfig, generate_synthetic
from geotime.geomath import EARTH_RADIUS_KM, GeoCoord, TorusTime, timestamp_to_torus


def tt(hour=0.0, day=0.0):
    """Torus point from day-of-year (0-based, 365-day circle) and hour."""
    return np.array([day / 365.0, hour / 24.0])


class TestCircularErrors:
    def test_tod_wrap(self):
        assert E.tod_error_hours(tt(hour=23), tt(hour=1)) == pytest.approx(2.0, abs=1e-12)

    def test_toy_wrap(self):
        a = timestamp_to_torus(datetime(2023, 1, 15))
        b = timestamp_to_torus(datetime(2023, 12, 15))
        assert E.toy_error_days(a, b) == pytest.approx(31.0, abs=1e-9)

    def test_maxima_and_identity(self):
        assert E.tod_error_hours(TorusTime(0, 0), TorusTime(0, 0.5)) == 12.0
        assert E.toy_error_days(TorusTime(0, 0), TorusTime(0.5, 0)) == 182.5
        assert E.toy_error_days(TorusTime(0.3, 0.1), TorusTime(0.3, 0.9)) == 0.0

    def test_symmetric_and_bounded(self, rng):
        a, b = rng.random((500, 2)), rng.random((500, 2))
        np.testing.assert_array_equal(E.tod_error_hours(a, b), E.tod_error_hours(b, a))
        assert E.toy_error_days(a, b).max() <= 182.5 and E.tod_error_hours(a, b).max() <= 12.0

    def test_geo_error(self):
        assert E.geoloc_error_km(GeoCoord(3, 4), GeoCoord(3, 4)) == 0.0
        assert abs(E.geoloc_error_km(GeoCoord(0, 0), GeoCoord(0, 179.999999999)) - 20015.09) < 0.05

    def test_chance_baselines(self):
        c = E.chance_baselines(1_000_000, np.random.default_rng(1))
        assert c["tod_hours"] == pytest.approx(6.0, rel=0.005)
        assert c["toy_days"] == pytest.approx(91.25, rel=0.005)
        assert c["geo_km"] == pytest.approx(math.pi / 2 * EARTH_RADIUS_KM, rel=0.005)
        assert E.EXPECTED_RANDOM_GEO_KM == pytest.approx(10007.5, abs=0.1)


class TestRecall:
    q = np.array([[10.0, 20.0]])
    target = tt(hour=12, day=100)[None]

    def hit(self, coord, torus, th=E.SAME_CAMERA):
        return E.hit_matrix(self.q, self.target, np.array([[coord]]), np.array([[torus]]), th)[0, 0]

    def test_within_all_thresholds(self):
        assert self.hit([10.0, 20.0], tt(hour=12.2, day=110))

    def test_conjunction(self):
        assert not self.hit([10.0, 20.0], tt(hour=13.5, day=100))
        assert not self.hit([10.0, 20.0], tt(hour=12, day=131))
        assert not self.hit([10.5, 20.0], tt(hour=12, day=100))  # ~55 km away
        assert self.hit([10.5, 20.0], tt(hour=12, day=100), E.CROSS_CAMERA)

    def test_missing_metadata_never_hits(self):
        assert not self.hit([np.nan, np.nan], tt(hour=12, day=100))

    def test_monotone_in_k_and_thresholds(self, rng):
        n, k = 200, 10
        qc = rng.uniform(-10, 10, (n, 2))
        qt = rng.random((n, 2))
        gc = qc[:, None, :] + rng.normal(0, 0.3, (n, k, 2))
        gt = (qt[:, None, :] + rng.normal(0, 0.05, (n, k, 2))) % 1
        tight = E.hit_matrix(qc, qt, gc, gt, E.ThresholdSet(25, 30, 1))
        loose = E.hit_matrix(qc, qt, gc, gt, E.ThresholdSet(60, 45, 2))
        assert np.all(loose >= tight)
        r = [E.recall_at(tight, j) for j in range(1, k + 1)]
        assert np.all(np.diff(r) >= 0)

    def test_empty_queries(self):
        with pytest.raises(E.UndefinedMetricError):
            E.recall_at(np.zeros((0, 10), bool), 10)

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            E.ThresholdSet(0, 30, 1)


class TestHemispheres:
    def test_equal_recall(self):
        n, s, ratio = E.hemispheric_ratio([1, 0, 1, 0], [10, 20, -10, -20])
        assert (n, s, ratio) == (0.5, 0.5, 1.0)

    def test_equator_is_north(self):
        n, s, _ = E.hemispheric_ratio([1, 0], [0.0, -1.0])
        assert (n, s) == (1.0, 0.0)

    def test_zero_south_recall(self):
        assert E.hemispheric_ratio([1, 0], [5, -5])[2] is None

    def test_one_hemisphere(self):
        with pytest.raises(E.UndefinedMetricError):
            E.hemispheric_ratio([1, 1], [5, 6])


class TestConfusion:
    def test_perfect_predictor(self, rng):
        bins = rng.integers(0, 288, 300)
        m, h = E.confusion_matrices(bins, bins)
        assert m.shape == (12, 12) and h.shape == (24, 24)
        assert np.count_nonzero(m - np.diag(np.diag(m))) == 0
        assert m.sum() == h.sum() == 300
        np.testing.assert_array_equal(m.sum(1), np.bincount(bins % 12, minlength=12))

    def test_constant_predictor(self, rng):
        gt = rng.random((50, 2))
        m, h = E.confusion_matrices(np.tile([[0.5, 0.25]], (50, 1)), gt)
        assert m.sum(0)[6] == 50 and h.sum(0)[6] == 50


class TestReport:
    def test_round_trip_and_files(self, tmp_path):
        rep = E.MetricsReport(
            1.5, 2.5, 300.0, {"1": 0.1, "5": 0.3, "10": 0.5}, 0.6, 0.4, 1.5,
            np.eye(12, dtype=int).tolist(), np.eye(24, dtype=int).tolist(), 7, {"random_R@10": 0.01},
        )
        assert E.MetricsReport.from_json(rep.to_json()) == rep
        rep.save(tmp_path / "r.json")
        assert E.MetricsReport.from_json((tmp_path / "r.json").read_text()) == rep
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0] == "metric,value" and "R@10,0.5" in rows
        grid = (tmp_path / "r.confusion_month.csv").read_text().splitlines()
        assert len(grid) == 12 and grid[0].startswith("1,0,")


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(SyntheticWorldConfig(n_cameras=6, frames_per_camera=8, feature_dim=8, seed=1))
    m = M.GeoTimeModel(M.ModelConfig(d=16, heads=2, img_feat_dim=8, n_freq=4, geo_nside=1))
    return m, ds


class TestEvaluate:
    def test_report_fields(self, setup):
        m, ds = setup
        rep = E.evaluate(m, ds, ds.coords[:5], E.EvalConfig(random_baseline_repeats=3))
        assert rep.n_queries == 48
        assert 0 <= rep.tod_error_hours <= 12 and 0 <= rep.toy_error_days <= 182.5
        assert rep.geo_error_km >= 0
        assert list(rep.recall) == ["1", "5", "10"]
        r = list(rep.recall.values())
        assert r == sorted(r)
        assert np.sum(rep.confusion_month) == 48
        assert 0 <= rep.extras["random_R@10"] <= 1
        json.loads(rep.to_json())

    def test_max_queries(self, setup):
        m, ds = setup
        rep = E.evaluate(m, ds, cfg=E.EvalConfig(max_queries=10, random_baseline_repeats=1))
        assert rep.n_queries == 10 and np.sum(rep.confusion_hour) == 10

    def test_geotime_queries_same_camera(self, setup):
        _, ds = setup
        q, t = E.geotime_queries(ds, np.random.default_rng(0))
        assert len(q) == len(ds)
        assert np.all(q != t)
        assert all(ds.camera_ids[a] == ds.camera_ids[b] for a, b in zip(q, t))

    def test_random_ranking_recall_excludes_query(self, setup):
        m, ds = setup
        from geotime.retrieval import image_gallery

        g = image_gallery(m, ds)
        q = np.arange(len(ds))
        # target = the query's own time and place: only the query row itself would hit
        r = E.random_ranking_recall(g, q, ds.coords, ds.torus, E.ThresholdSet(1e-3, 1e-6, 1e-6), k=10, repeats=5)
        assert r == 0.0

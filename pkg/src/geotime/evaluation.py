"""Task metrics: circular time errors, geodesic error, joint-threshold recall, hemisphere balance."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .data import Dataset
from .geomath import EARTH_RADIUS_KM, N_HOUR_BINS, N_MONTH_BINS, _torus, haversine_km, torus_to_bin, wrap_unit
from .retrieval import (
    GEO_RERANK,
    TIME_RERANK,
    Gallery,
    RerankConfig,
    default_geo_candidates,
    image_gallery,
    location_gallery,
    predicted_points,
    task_geolocalize,
    task_geotime_retrieve,
    task_time_predict,
    time_gallery,
)

DAYS_PER_YEAR = 365.0
HOURS_PER_DAY = 24.0
RECALL_KS = (1, 5, 10)


class UndefinedMetricError(ValueError):
    pass


def _circ(a, b) -> np.ndarray:
    d = np.abs(wrap_unit(np.asarray(a, dtype=float)) - wrap_unit(np.asarray(b, dtype=float)))
    return np.minimum(d, 1.0 - d)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def tod_error_hours(pred, gt):
    """Circular time-of-day error in hours, at most 12."""
    (_, pp), (_, gp) = _torus(pred), _torus(gt)
    return _scalar(HOURS_PER_DAY * _circ(pp, gp))


def toy_error_days(pred, gt):
    """Circular time-of-year error on a 365-day circle, at most 182.5."""
    (pt, _), (gt_, _) = _torus(pred), _torus(gt)
    return _scalar(DAYS_PER_YEAR * _circ(pt, gt_))


def geoloc_error_km(pred, gt):
    return haversine_km(pred, gt)


def chance_baselines(n: int = 1_000_000, rng=None) -> dict[str, float]:
    """Monte Carlo mean errors of uniformly random predictions against uniform truth."""
    rng = np.random.default_rng(0) if rng is None else rng
    a, b = rng.random((n, 2)), rng.random((n, 2))
    z = rng.uniform(-1, 1, (2, n))
    lat = np.degrees(np.arcsin(z))
    lon = rng.uniform(-180, 180, (2, n))
    geo = haversine_km(np.stack([lat[0], lon[0]], 1), np.stack([lat[1], lon[1]], 1))
    return {
        "tod_hours": float(np.mean(tod_error_hours(a, b))),
        "toy_days": float(np.mean(toy_error_days(a, b))),
        "geo_km": float(np.mean(geo)),
    }


EXPECTED_RANDOM_GEO_KM = np.pi / 2 * EARTH_RADIUS_KM


# ---------------------------------------------------------------------------
# recall


@dataclass(frozen=True)
class ThresholdSet:
    t_geo_km: float = 25.0
    t_toy_days: float = 30.0
    t_tod_hours: float = 1.0

    def __post_init__(self):
        if min(self.t_geo_km, self.t_toy_days, self.t_tod_hours) <= 0:
            raise ValueError("thresholds must be positive")


SAME_CAMERA = ThresholdSet(25.0)
CROSS_CAMERA = ThresholdSet(125.0)


def hit_matrix(query_coords, target_torus, got_coords, got_torus, th: ThresholdSet) -> np.ndarray:
    """(n, k) booleans: retrieved item satisfies all three thresholds jointly.

    `got_*` have shape (n, k, 2); query arrays (n, 2) broadcast over k.
    Items with missing metadata (NaN) never count.
    """
    qc = np.asarray(query_coords, dtype=float)[:, None, :]
    qt = np.asarray(target_torus, dtype=float)[:, None, :]
    gc = np.asarray(got_coords, dtype=float)
    gt = np.asarray(got_torus, dtype=float)
    with np.errstate(invalid="ignore"):
        ok = (
            (haversine_km(np.broadcast_to(qc, gc.shape), gc) <= th.t_geo_km)
            & (toy_error_days(np.broadcast_to(qt, gt.shape), gt) <= th.t_toy_days)
            & (tod_error_hours(np.broadcast_to(qt, gt.shape), gt) <= th.t_tod_hours)
        )
    return np.asarray(ok, dtype=bool)


def recall_at(hits: np.ndarray, k: int) -> float:
    """Fraction of queries with a hit among their first k results."""
    hits = np.asarray(hits, dtype=bool)
    if hits.shape[0] == 0:
        raise UndefinedMetricError("recall over zero queries")
    return float(hits[:, :k].any(axis=1).mean())


def geotime_recall(results, gallery: Gallery, query_coords, target_torus, th: ThresholdSet, k: int) -> float:
    """Recall@k of ranked gallery rows against (query location, target time)."""
    return recall_at(result_hits(results, gallery, query_coords, target_torus, th, k), k)


def result_hits(results, gallery: Gallery, query_coords, target_torus, th: ThresholdSet, k: int) -> np.ndarray:
    n = len(results)
    rows = np.full((n, k), -1, dtype=np.int64)
    for i, r in enumerate(results):
        m = min(k, len(r.rows))
        rows[i, :m] = r.rows[:m]
    gc = np.where(rows[..., None] >= 0, gallery.coords[np.maximum(rows, 0)], np.nan)
    gt = np.where(rows[..., None] >= 0, gallery.torus[np.maximum(rows, 0)], np.nan)
    return hit_matrix(query_coords, target_torus, gc, gt, th)


def hemispheric_ratio(hits, lats) -> tuple[float, float, float | None]:
    """(N recall, S recall, N/S) from per-query hit flags; latitude 0 counts as north.

    Raises when a hemisphere has no queries; the ratio is None when S recall is 0.
    """
    hits = np.asarray(hits, dtype=bool)
    north = np.asarray(lats, dtype=float) >= 0
    if not north.any() or north.all():
        raise UndefinedMetricError("both hemispheres need at least one query")
    n_r = float(hits[north].mean())
    s_r = float(hits[~north].mean())
    return n_r, s_r, (n_r / s_r if s_r > 0 else None)


def confusion_matrices(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """12 x 12 month and 24 x 24 hour count matrices (rows = truth, columns = prediction).

    Inputs are torus points (n, 2) or flat month x hour bin indices (n,).
    """
    def split(x):
        x = np.asarray(x)
        flat = torus_to_bin(x) if x.ndim == 2 else x.astype(np.int64)
        return flat % N_MONTH_BINS, flat // N_MONTH_BINS

    pm, ph = split(pred)
    gm, gh = split(gt)
    months = np.zeros((N_MONTH_BINS, N_MONTH_BINS), dtype=np.int64)
    hours = np.zeros((N_HOUR_BINS, N_HOUR_BINS), dtype=np.int64)
    np.add.at(months, (gm, pm), 1)
    np.add.at(hours, (gh, ph), 1)
    return months, hours


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    toy_error_days: float | None = None
    tod_error_hours: float | None = None
    geo_error_km: float | None = None
    recall: dict[str, float] = field(default_factory=dict)
    n_r10: float | None = None
    s_r10: float | None = None
    ns_ratio: float | None = None
    confusion_month: list = field(default_factory=list)
    confusion_hour: list = field(default_factory=list)
    n_queries: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def flat(self) -> dict[str, float | int | None]:
        row = {k: getattr(self, k) for k in ("toy_error_days", "tod_error_hours", "geo_error_km", "n_r10", "s_r10", "ns_ratio", "n_queries")}
        row.update({f"R@{k}": v for k, v in self.recall.items()})
        row.update(self.extras)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.flat().items():
            w.writerow([k, "" if v is None else repr(v)])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        """JSON at `path`; flat CSV and the two confusion grids next to it."""
        path = Path(path)
        atomic_write_bytes(path, self.to_json().encode())
        atomic_write_bytes(path.with_suffix(".csv"), self.to_csv().encode())
        for name in ("confusion_month", "confusion_hour"):
            grid = getattr(self, name)
            if grid:
                text = "\n".join(",".join(str(int(x)) for x in row) for row in grid) + "\n"
                atomic_write_bytes(path.with_name(f"{path.stem}.{name}.csv"), text.encode())


# ---------------------------------------------------------------------------
# end-to-end evaluation of a trained model


@dataclass
class EvalConfig:
    thresholds: ThresholdSet = SAME_CAMERA
    geo_rerank: RerankConfig | None = GEO_RERANK
    time_rerank: RerankConfig | None = TIME_RERANK
    condition_time_on_location: bool = True
    fine_time_grid: bool = False
    max_queries: int | None = None
    random_baseline_repeats: int = 20
    seed: int = 0


def geotime_queries(test: Dataset, rng, max_queries=None) -> tuple[np.ndarray, np.ndarray]:
    """Pairs (query row, target row) from the same camera, target != query.

    The query image is retrieved against the target frame's time, so at
    least one gallery item (the target) satisfies every threshold.
    """
    q, t = [], []
    for rows in test.cameras().values():
        rows = rows[test.timed[rows]]
        if len(rows) < 2:
            continue
        for r in rows:
            other = rows[rows != r]
            q.append(r)
            t.append(other[rng.integers(len(other))])
    q, t = np.array(q, dtype=np.int64), np.array(t, dtype=np.int64)
    if max_queries is not None and len(q) > max_queries:
        pick = np.sort(rng.choice(len(q), max_queries, replace=False))
        q, t = q[pick], t[pick]
    return q, t


def evaluate(model, test: Dataset, train_coords=None, cfg: EvalConfig | None = None) -> MetricsReport:
    """Time prediction, geolocalization and geo-time retrieval metrics on `test`.

    Geolocalization candidates are the unique training coordinates (if
    given) plus all cell centers. Geo-time retrieval runs over the test
    images themselves; each query excludes its own row.
    """
    cfg = cfg or EvalConfig()
    rng = np.random.default_rng(cfg.seed)
    rep = MetricsReport()
    timed = np.flatnonzero(test.timed)
    if cfg.max_queries is not None and len(timed) > cfg.max_queries:
        timed = np.sort(rng.choice(timed, cfg.max_queries, replace=False))
    rep.n_queries = int(len(timed))

    if len(timed):
        tg = time_gallery(model, cfg.fine_time_grid)
        loc = test.coords[timed] if cfg.condition_time_on_location else None
        res = task_time_predict(model, test.features[timed], tg, loc, cfg.time_rerank, k=1)
        pred_t = predicted_points(res, tg.torus)
        gt_t = test.torus[timed]
        rep.tod_error_hours = float(np.mean(tod_error_hours(pred_t, gt_t)))
        rep.toy_error_days = float(np.mean(toy_error_days(pred_t, gt_t)))
        cm, ch = confusion_matrices(pred_t, gt_t)
        rep.confusion_month, rep.confusion_hour = cm.tolist(), ch.tolist()

    if len(test):
        cand = default_geo_candidates(np.zeros((0, 2)) if train_coords is None else train_coords, model.config.geo_nside)
        lg = location_gallery(model, cand)
        rows = timed if len(timed) else np.arange(len(test))
        res = task_geolocalize(model, test.features[rows], lg, cfg.geo_rerank, k=1)
        rep.geo_error_km = float(np.mean(geoloc_error_km(predicted_points(res, lg.coords), test.coords[rows])))

    q, t = geotime_queries(test, rng, cfg.max_queries)
    if len(q):
        ig = image_gallery(model, test)
        kmax = max(RECALL_KS)
        res = task_geotime_retrieve(model, test.features[q], test.torus[t], ig, k=kmax, exclude=q)
        hits = result_hits(res, ig, test.coords[q], test.torus[t], cfg.thresholds, kmax)
        rep.recall = {str(k): recall_at(hits, k) for k in RECALL_KS}
        rep.extras["random_R@10"] = random_ranking_recall(ig, q, test.coords[q], test.torus[t], cfg.thresholds, kmax, cfg.random_baseline_repeats, rng)
        try:
            n_r, s_r, ratio = hemispheric_ratio(hits[:, :kmax].any(axis=1), test.coords[q, 0])
            rep.n_r10, rep.s_r10, rep.ns_ratio = n_r, s_r, ratio
        except UndefinedMetricError:
            pass
    return rep


def random_ranking_recall(gallery: Gallery, exclude, query_coords, target_torus, th, k: int = 10, repeats: int = 20, rng=None) -> float:
    """Mean recall@k when each query's ranking is a uniformly random permutation."""
    rng = np.random.default_rng(0) if rng is None else rng
    n, m = len(exclude), len(gallery)
    vals = []
    for _ in range(repeats):
        rows = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            pick = rng.choice(m - 1, size=min(k, m - 1), replace=False)
            pick[pick >= exclude[i]] += 1  # skip the query's own row
            rows[i, : len(pick)] = pick
        hits = hit_matrix(query_coords, target_torus, gallery.coords[rows], gallery.torus[rows], th)
        vals.append(recall_at(hits, k))
    return float(np.mean(vals))

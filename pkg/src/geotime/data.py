"""Records, the synthetic webcam world, the quality probe and train/test curation."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .geomath import GeoCoord, geo_to_cell, timestamps_to_torus, torus_to_bin, wrap_lon

HIGH, MEDIUM, LOW = "high", "medium", "low"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    camera_id: str
    coord: GeoCoord
    timestamp: datetime | None
    feature: np.ndarray
    quality: float | None = None

    def __post_init__(self):
        if self.quality is not None and not 0.0 <= self.quality <= 1.0:
            raise DatasetError(f"quality {self.quality} outside [0, 1]")


class Dataset:
    """Column store of records. Immutable by convention; `subset` makes copies."""

    def __init__(
        self,
        camera_ids: Sequence[str],
        coords,
        timestamps: Sequence[datetime | None],
        features,
        quality=None,
    ):
        n = len(camera_ids)
        self.camera_ids = np.asarray(camera_ids, dtype=object).reshape(n)
        self.coords = np.asarray(coords, dtype=float).reshape(n, 2)
        self.timestamps = list(timestamps)
        feats = np.asarray(features, dtype=float)
        self.features = feats.reshape(n, feats.shape[-1] if feats.size else 0)
        q = np.full(n, np.nan) if quality is None else np.asarray(quality, dtype=float).reshape(n)
        self.quality = q
        if len(self.timestamps) != n:
            raise DatasetError("timestamps and camera ids differ in length")
        if n and (np.any(np.abs(self.coords[:, 0]) > 90)):
            raise DatasetError("latitude outside [-90, 90]")
        self.coords[:, 1] = wrap_lon(self.coords[:, 1]) if n else self.coords[:, 1]
        finite_q = q[~np.isnan(q)]
        if finite_q.size and (finite_q.min() < 0 or finite_q.max() > 1):
            raise DatasetError("quality scores must lie in [0, 1]")
        self.timed = np.array([t is not None for t in self.timestamps], dtype=bool)
        self.torus = np.full((n, 2), np.nan)
        if self.timed.any():
            self.torus[self.timed] = timestamps_to_torus([t for t in self.timestamps if t is not None])

    @classmethod
    def from_records(cls, records: Iterable[Record]) -> "Dataset":
        recs = list(records)
        if not recs:
            return cls.empty()
        widths = {len(r.feature) for r in recs}
        if len(widths) > 1:
            raise DatasetError(f"feature widths differ: {sorted(widths)}")
        return cls(
            [r.camera_id for r in recs],
            [[r.coord.lat, r.coord.lon] for r in recs],
            [r.timestamp for r in recs],
            np.stack([np.asarray(r.feature, dtype=float) for r in recs]),
            [np.nan if r.quality is None else r.quality for r in recs],
        )

    @classmethod
    def empty(cls, feature_dim: int = 0) -> "Dataset":
        return cls([], np.zeros((0, 2)), [], np.zeros((0, feature_dim)))

    def __len__(self) -> int:
        return len(self.camera_ids)

    def __getitem__(self, i: int) -> Record:
        q = self.quality[i]
        return Record(
            str(self.camera_ids[i]),
            GeoCoord(*self.coords[i]),
            self.timestamps[i],
            self.features[i],
            None if np.isnan(q) else float(q),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(
            self.camera_ids[idx],
            self.coords[idx],
            [self.timestamps[i] for i in idx],
            self.features[idx],
            self.quality[idx],
        )

    def with_quality(self, scores) -> "Dataset":
        return Dataset(self.camera_ids, self.coords, self.timestamps, self.features, scores)

    def cameras(self) -> dict[str, np.ndarray]:
        """camera id -> row indices, in first-appearance order."""
        groups: dict[str, list[int]] = defaultdict(list)
        for i, c in enumerate(self.camera_ids):
            groups[c].append(i)
        return {c: np.array(v) for c, v in groups.items()}

    def cells(self, nside: int = 8) -> np.ndarray:
        return geo_to_cell(self.coords, nside) if len(self) else np.zeros(0, dtype=np.int64)

    def time_bins(self) -> np.ndarray:
        """Flat month x hour bin per row; -1 where the timestamp is missing."""
        out = np.full(len(self), -1, dtype=np.int64)
        if self.timed.any():
            out[self.timed] = torus_to_bin(self.torus[self.timed])
        return out


# ---------------------------------------------------------------------------
# JSON lines


def _record_json(ds: Dataset, i: int) -> dict:
    row = {
        "camera_id": str(ds.camera_ids[i]),
        "lat": float(ds.coords[i, 0]),
        "lon": float(ds.coords[i, 1]),
        "timestamp": None if ds.timestamps[i] is None else ds.timestamps[i].isoformat(),
        "feature": [float(x) for x in ds.features[i]],
    }
    if not np.isnan(ds.quality[i]):
        row["quality"] = float(ds.quality[i])
    return row


def dumps_jsonl(ds: Dataset) -> str:
    return "".join(json.dumps(_record_json(ds, i)) + "\n" for i in range(len(ds)))


def save_jsonl(ds: Dataset, path: str | Path) -> None:
    atomic_write_bytes(path, dumps_jsonl(ds).encode("utf-8"))


def load_jsonl(path: str | Path) -> Dataset:
    """Read one JSON object per line (blank lines ignored)."""
    path = Path(path)
    ids, coords, stamps, feats, qual = [], [], [], [], []
    width = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ts = obj["timestamp"]
                ts = None if ts is None else datetime.fromisoformat(ts)
                feat = [float(x) for x in obj["feature"]]
                lat, lon = float(obj["lat"]), float(obj["lon"])
                cam = str(obj["camera_id"])
                q = obj.get("quality")
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if width is None:
                width = len(feat)
            elif len(feat) != width:
                raise DatasetError(f"{path}:{lineno}: feature width {len(feat)} != {width}")
            ids.append(cam)
            coords.append((lat, lon))
            stamps.append(ts)
            feats.append(feat)
            qual.append(np.nan if q is None else float(q))
    if not ids:
        return Dataset.empty()
    return Dataset(ids, coords, stamps, np.array(feats), qual)


def load_jsonl_labels(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Labeled probe seed set: one {"feature": [...], "label": 0 or 1} object per line."""
    feats, labels = [], []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                feats.append([float(x) for x in obj["feature"]])
                labels.append(int(obj["label"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed labeled feature ({exc})") from None
            if labels[-1] not in (0, 1) or len(feats[-1]) != len(feats[0]):
                raise DatasetError(f"{path}:{lineno}: label must be 0/1 and widths uniform")
    return np.array(feats), np.array(labels)


def save_jsonl_labels(features, labels, path: str | Path) -> None:
    lines = (json.dumps({"feature": [float(x) for x in f], "label": int(y)}) + "\n" for f, y in zip(features, labels))
    atomic_write_bytes(path, "".join(lines).encode())


def save_feature_sidecar(ds: Dataset, path: str | Path) -> None:
    """Packed little-endian float32 features at `path` plus `<path>.index.json`."""
    path = Path(path)
    atomic_write_bytes(path, np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
    index = {"rows": len(ds), "dim": ds.feature_dim, "dtype": "float32-le", "order": "row-major"}
    atomic_write_bytes(path.with_name(path.name + ".index.json"), json.dumps(index).encode())


def load_feature_sidecar(path: str | Path) -> np.ndarray:
    path = Path(path)
    index = json.loads(path.with_name(path.name + ".index.json").read_text())
    arr = np.fromfile(path, dtype="<f4")
    return arr.reshape(index["rows"], index["dim"])


# ---------------------------------------------------------------------------
# synthetic world


@dataclass
class SyntheticWorldConfig:
    n_cameras: int = 200
    frames_per_camera: int = 100
    feature_dim: int = 32
    seasonal_amp: float = 1.0
    diurnal_amp: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0
    year: int = 2023
    # extensions (0 disables): location signal in the camera signature, corrupted frames
    geo_amp: float = 0.0
    corruption_rate: float = 0.0

    def __post_init__(self):
        if min(self.seasonal_amp, self.diurnal_amp, self.noise_sigma, self.geo_amp) < 0:
            raise ValueError("amplitudes and noise must be non-negative")
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be at least 8")
        if self.n_cameras < 0 or self.frames_per_camera < 0:
            raise ValueError("counts must be non-negative")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")


@dataclass
class WorldBasis:
    """Shared directions of the synthetic feature space."""

    seasonal: np.ndarray  # (2, D)
    diurnal: np.ndarray  # (2, D)
    geo: np.ndarray  # (3, D)
    corruption: np.ndarray  # (4, D) corruption-mode directions

    @classmethod
    def create(cls, dim: int, seed: int) -> "WorldBasis":
        rng = np.random.default_rng([seed, 1])
        q, _ = np.linalg.qr(rng.normal(size=(dim, 8)))
        q = q.T
        axis = q[7]
        modes = axis + 0.5 * rng.normal(size=(4, dim)) / np.sqrt(dim)
        modes /= np.linalg.norm(modes, axis=1, keepdims=True)
        return cls(q[0:2], q[2:4], q[4:7], modes)


def _uniform_sphere(rng, n):
    z = rng.uniform(-1.0, 1.0, n)
    lon = rng.uniform(-180.0, 180.0, n)
    return np.degrees(np.arcsin(z)), lon


def world_features(
    signatures, lat, torus, basis: WorldBasis, cfg: SyntheticWorldConfig, rng
) -> np.ndarray:
    """Noisy frame features for cameras with the given signatures at the given times."""
    theta = torus[:, 0] + np.where(lat < 0, 0.5, 0.0)
    phi = torus[:, 1]
    seas = np.stack([np.cos(2 * np.pi * theta), np.sin(2 * np.pi * theta)], axis=1) @ basis.seasonal
    diur = np.stack([np.cos(2 * np.pi * phi), np.sin(2 * np.pi * phi)], axis=1) @ basis.diurnal
    noise = rng.normal(0.0, cfg.noise_sigma, size=signatures.shape) if cfg.noise_sigma > 0 else 0.0
    return signatures + cfg.seasonal_amp * seas + cfg.diurnal_amp * diur + noise


def generate_synthetic(cfg: SyntheticWorldConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Webcam world with planted geo-temporal structure.

    Each camera sits uniformly on the sphere and owns a random unit signature
    vector. A frame's feature is the signature plus seasonal and diurnal
    cycles along shared directions, plus Gaussian noise. Seasons are shifted
    by half a year south of the equator. Timestamps are uniform over the
    year and the day, at one-second resolution.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    basis = WorldBasis.create(cfg.feature_dim, cfg.seed)
    D = cfg.feature_dim
    lat, lon = _uniform_sphere(rng, cfg.n_cameras)
    sig = rng.normal(size=(cfg.n_cameras, D))
    sig /= np.maximum(np.linalg.norm(sig, axis=1, keepdims=True), 1e-12)
    if cfg.geo_amp > 0:
        from .geomath import latlon_to_unit

        sig = sig + cfg.geo_amp * latlon_to_unit(lat, lon) @ basis.geo

    F = cfg.frames_per_camera
    start = datetime(cfg.year, 1, 1)
    year_seconds = (datetime(cfg.year + 1, 1, 1) - start).days * 86400
    cam = np.repeat(np.arange(cfg.n_cameras), F)
    secs = rng.integers(0, year_seconds, size=cam.size)
    stamps = [start + timedelta(seconds=int(s)) for s in secs]
    torus = timestamps_to_torus(stamps) if stamps else np.zeros((0, 2))
    feats = world_features(sig[cam], lat[cam], torus, basis, cfg, rng) if cam.size else np.zeros((0, D))
    if cfg.corruption_rate > 0 and cam.size:
        bad = rng.random(cam.size) < cfg.corruption_rate
        feats[bad] = corrupt_features(feats[bad], basis, rng)
    ids = [f"cam{c:05d}" for c in cam]
    return Dataset(ids, np.stack([lat[cam], lon[cam]], axis=1), stamps, feats)


def corrupt_features(feats: np.ndarray, basis: WorldBasis, rng, strength: float = 3.0) -> np.ndarray:
    """Overlay a random corruption mode on each row (stand-in for broken frames)."""
    mode = rng.integers(0, len(basis.corruption), size=len(feats))
    return feats + strength * basis.corruption[mode]


def quality_seed_set(cfg: SyntheticWorldConfig, n: int = 400, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Labeled clean (1) / corrupted (0) features in the world's feature space."""
    rng = np.random.default_rng([cfg.seed, 2]) if rng is None else rng
    basis = WorldBasis.create(cfg.feature_dim, cfg.seed)
    world = generate_synthetic(
        SyntheticWorldConfig(**{**cfg.__dict__, "n_cameras": n, "frames_per_camera": 1, "corruption_rate": 0.0}),
        rng,
    )
    labels = (rng.random(n) < 0.5).astype(int)
    feats = world.features.copy()
    bad = labels == 0
    feats[bad] = corrupt_features(feats[bad], basis, rng)
    return feats, labels


# ---------------------------------------------------------------------------
# quality probe


@dataclass
class QualityProbe:
    weight: np.ndarray
    bias: float
    heldout_accuracy: float | None = None
    iterations: int = 0

    def score(self, features) -> np.ndarray:
        """P(high quality | features), in (0, 1)."""
        z = np.asarray(features, dtype=float) @ self.weight + self.bias
        return _sigmoid(z)

    def to_dict(self) -> dict:
        return {
            "weight": self.weight.tolist(),
            "bias": self.bias,
            "heldout_accuracy": self.heldout_accuracy,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityProbe":
        return cls(np.asarray(d["weight"], dtype=float), float(d["bias"]), d.get("heldout_accuracy"), d.get("iterations", 0))


def _sigmoid(z):
    z = np.clip(z, -700, 700)
    # clamp keeps scores strictly inside (0, 1) in float64
    return np.clip(1.0 / (1.0 + np.exp(-z)), 1e-300, 1 - 1e-16)


def fit_logistic(x: np.ndarray, y: np.ndarray, tol: float = 1e-6, max_iter: int = 10_000):
    """Plain gradient descent on the mean logistic loss. Returns (w, b, iterations)."""
    n = len(y)
    xa = np.hstack([x, np.ones((n, 1))])
    lip = np.linalg.norm(xa, 2) ** 2 / (4 * n)
    step = 1.0 / max(lip, 1e-12)
    theta = np.zeros(xa.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        g = xa.T @ (_sigmoid(xa @ theta) - y) / n
        if np.linalg.norm(g) < tol:
            break
        theta -= step * g
    return theta[:-1], float(theta[-1]), it


def train_quality_probe(features, labels, holdout: float = 0.1, rng=None) -> QualityProbe:
    """Linear probe for binary quality (1 = high). Holds out a stratified fraction for accuracy."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    counts = np.bincount(y, minlength=2)
    if len(counts) > 2 or counts[0] < 2 or counts[1] < 2:
        raise DatasetError(f"need at least two examples of each class, got counts {counts.tolist()}")
    rng = np.random.default_rng(0) if rng is None else rng
    test = np.zeros(len(y), dtype=bool)
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = min(int(round(holdout * len(idx))), len(idx) - 1)
        test[idx[:k]] = True
    w, b, it = fit_logistic(x[~test], y[~test])
    probe = QualityProbe(w, b, None, it)
    if test.any():
        pred = (probe.score(x[test]) >= 0.5).astype(int)
        probe.heldout_accuracy = float((pred == y[test]).mean())
    return probe


# ---------------------------------------------------------------------------
# curation


@dataclass
class SplitThresholds:
    t_high: float = 0.7
    t_low: float = 0.4
    bin_size_deg: float = 10.0
    min_frames: int = 500
    min_months: int = 12
    # test camera budget; None selects one camera per occupied bin
    test_budget: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.t_low < self.t_high <= 1.0:
            raise ValueError(f"need 0 <= t_low < t_high <= 1, got {self.t_low}, {self.t_high}")
        if self.bin_size_deg <= 0 or self.min_frames < 0:
            raise ValueError("bin size must be positive and min_frames non-negative")


def partition_quality(scores, thresholds: SplitThresholds | None = None) -> np.ndarray:
    """Label each score high (>= t_high), medium (t_low <= s < t_high) or low (< t_low)."""
    th = thresholds or SplitThresholds()
    s = np.asarray(scores, dtype=float)
    return np.where(s >= th.t_high, HIGH, np.where(s >= th.t_low, MEDIUM, LOW)).astype(object)


def geo_bin(coords, bin_size_deg: float = 10.0) -> list[tuple[int, int]]:
    """(lat row, lon column) of the lat/lon grid bin containing each coordinate."""
    c = np.atleast_2d(np.asarray(coords, dtype=float))
    rows = np.floor((c[:, 0] + 90.0) / bin_size_deg).astype(int)
    cols = np.floor((wrap_lon(c[:, 1]) + 180.0) / bin_size_deg).astype(int)
    rows = np.minimum(rows, int(math.ceil(180 / bin_size_deg)) - 1)
    cols = np.minimum(cols, int(math.ceil(360 / bin_size_deg)) - 1)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass
class CurationReport:
    quality_counts: dict[str, int]
    eligible_cameras: list[str]
    rejected: dict[str, str]
    test_cameras: list[str]
    train_cameras: list[str]
    test_per_bin: dict[str, int]
    occupied_bins: int
    kept_per_bin: dict[str, int]
    disjoint: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def curate_split(
    ds: Dataset,
    labels=None,
    thresholds: SplitThresholds | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Dataset, Dataset, CurationReport]:
    """Drop low-quality frames and build a camera-disjoint train/test split.

    `labels` are per-row quality classes; by default they come from
    `partition_quality` on ``ds.quality``. Test candidates are cameras whose
    high-quality frames number at least ``min_frames`` and cover
    ``min_months`` calendar months. Candidates are drawn round-robin, one per
    occupied lat/lon bin per round, until the budget is met; test frames are
    the high-quality frames of the chosen cameras. All other cameras' high
    and medium frames form the training set.
    """
    th = thresholds or SplitThresholds()
    rng = np.random.default_rng(0) if rng is None else rng
    if labels is None:
        if np.isnan(ds.quality).any():
            raise DatasetError("records lack quality scores; score them or pass labels")
        labels = partition_quality(ds.quality, th)
    labels = np.asarray(labels, dtype=object)
    counts = {k: int((labels == k).sum()) for k in (HIGH, MEDIUM, LOW)}
    keep = labels != LOW

    groups = ds.cameras()
    rejected: dict[str, str] = {}
    eligible: list[str] = []
    for cam, rows in groups.items():
        hi = rows[labels[rows] == HIGH]
        months = {ds.timestamps[i].month for i in hi if ds.timestamps[i] is not None}
        if len(hi) < th.min_frames:
            rejected[cam] = f"{len(hi)} high-quality frames < {th.min_frames}"
        elif len(months) < th.min_months:
            rejected[cam] = f"high-quality frames cover {len(months)} months < {th.min_months}"
        else:
            eligible.append(cam)

    by_bin: dict[tuple[int, int], list[str]] = defaultdict(list)
    for cam in eligible:
        by_bin[geo_bin(ds.coords[groups[cam][0]], th.bin_size_deg)[0]].append(cam)
    for b in by_bin:
        by_bin[b] = [by_bin[b][i] for i in rng.permutation(len(by_bin[b]))]
    budget = len(by_bin) if th.test_budget is None else min(th.test_budget, len(eligible))

    test_cams: list[str] = []
    per_bin: dict[str, int] = {}
    order = sorted(by_bin)
    while len(test_cams) < budget:
        progressed = False
        for b in order:
            if len(test_cams) >= budget:
                break
            if by_bin[b]:
                test_cams.append(by_bin[b].pop(0))
                per_bin[f"{b[0]},{b[1]}"] = per_bin.get(f"{b[0]},{b[1]}", 0) + 1
                progressed = True
        if not progressed:
            break

    test_set = set(test_cams)
    is_test_cam = np.array([c in test_set for c in ds.camera_ids], dtype=bool)
    test_rows = is_test_cam & (labels == HIGH)
    train_rows = ~is_test_cam & keep
    train, test = ds.subset(train_rows), ds.subset(test_rows)
    train_cams = sorted(set(train.camera_ids.tolist()))
    disjoint = not (set(train_cams) & test_set)
    if not disjoint:
        raise AssertionError("train and test share cameras")
    notes = [] if test_cams else ["no eligible test cameras; test split is empty"]
    kept_bins: dict[str, int] = defaultdict(int)
    for b in geo_bin(ds.coords[keep], th.bin_size_deg) if keep.any() else []:
        kept_bins[f"{b[0]},{b[1]}"] += 1
    report = CurationReport(
        counts, eligible, rejected, test_cams, train_cams, per_bin, len(by_bin), dict(kept_bins), disjoint, notes
    )
    return train, test, report


def split_cameras(ds: Dataset, n_test: int, rng=None) -> tuple[Dataset, Dataset]:
    """Random camera-disjoint split with `n_test` held-out cameras."""
    rng = np.random.default_rng(0) if rng is None else rng
    cams = list(ds.cameras())
    pick = set(cams[i] for i in rng.permutation(len(cams))[:n_test])
    mask = np.array([c in pick for c in ds.camera_ids], dtype=bool)
    return ds.subset(~mask), ds.subset(mask)

"""Galleries, exact cosine search, entropy-adaptive reranking and the four retrieval tasks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .checkpoint import atomic_write_bytes, load_tensors, save_tensors
from .data import Dataset
from .geomath import N_TIME_BINS, all_bin_centers, all_cell_centers, fine_time_grid, geo_to_cell, torus_to_bin
from .model import GeoTimeModel
from .objectives import PROB_FLOOR, entropy

NORM_TOL = 1e-6


class GalleryError(ValueError):
    pass


@dataclass(frozen=True)
class RerankConfig:
    psi: float = 0.07
    beta_max: float = 1.0

    def __post_init__(self):
        if not self.psi > 0:
            raise ValueError(f"psi must be positive, got {self.psi}")
        if not self.beta_max >= 0:
            raise ValueError(f"beta_max must be non-negative, got {self.beta_max}")


GEO_RERANK = RerankConfig(0.07, 1.0)
TIME_RERANK = RerankConfig(0.07, 2.0)


@dataclass
class QueryResult:
    rows: np.ndarray  # gallery row ids, best first
    cosines: np.ndarray
    scores: np.ndarray
    beta: float | None = None

    def __len__(self) -> int:
        return len(self.rows)


# ---------------------------------------------------------------------------
# gallery


class Gallery:
    """Unit embeddings (float32 rows) with parallel metadata.

    `coords` and `torus` hold NaN where a row has no location or time;
    `bins` is each row's class index (-1 when not set) in the class space
    named by `space` ('geo:<nside>' or 'time').
    """

    def __init__(self, rows, ids=None, coords=None, torus=None, bins=None, space: str | None = None):
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise GalleryError(f"gallery rows must be a matrix, got shape {rows.shape}")
        n = rows.shape[0]
        self.rows = np.ascontiguousarray(rows)
        self.ids = [str(i) for i in range(n)] if ids is None else [str(i) for i in ids]
        self.coords = np.full((n, 2), np.nan) if coords is None else np.asarray(coords, dtype=float).reshape(n, 2)
        self.torus = np.full((n, 2), np.nan) if torus is None else np.asarray(torus, dtype=float).reshape(n, 2)
        self.bins = np.full(n, -1, dtype=np.int64) if bins is None else np.asarray(bins, dtype=np.int64).reshape(n)
        self.space = space
        if len(self.ids) != n:
            raise GalleryError(f"{len(self.ids)} ids for {n} rows")
        norms = np.linalg.norm(self.rows.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise GalleryError(
                "rows are not unit-norm: " + ", ".join(f"{self.ids[i]} (|x|={norms[i]:.6g})" for i in bad[:5])
            )
        n_classes = class_count(space)
        if n_classes is not None and n and (self.bins.min() < 0 or self.bins.max() >= n_classes):
            raise GalleryError(f"bin indices outside [0, {n_classes}) for space {space!r}")

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def shards(self, n_shards: int) -> list[tuple[int, int]]:
        """Contiguous row ranges for a parallel scan."""
        edges = np.linspace(0, len(self), max(1, n_shards) + 1).round().astype(int)
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]

    def save(self, path: str | Path) -> None:
        """Binary float32 rows at `path`, metadata at ``<path>.meta.json``."""
        path = Path(path)
        meta = {
            "ids": self.ids,
            "coords": _nan_to_none(self.coords),
            "torus": _nan_to_none(self.torus),
            "bins": self.bins.tolist(),
            "space": self.space,
        }
        save_tensors(path, {"rows": self.rows}, width=4)
        atomic_write_bytes(meta_path(path), json.dumps(meta).encode())

    @classmethod
    def load(cls, path: str | Path) -> "Gallery":
        path = Path(path)
        rows = load_tensors(path)["rows"]
        meta = json.loads(meta_path(path).read_text())
        return cls(
            rows,
            meta["ids"],
            _none_to_nan(meta["coords"], len(rows)),
            _none_to_nan(meta["torus"], len(rows)),
            meta["bins"],
            meta["space"],
        )


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _nan_to_none(a: np.ndarray) -> list:
    return [None if np.isnan(r).any() else [float(x) for x in r] for r in a]


def _none_to_nan(rows: list, n: int) -> np.ndarray:
    out = np.full((n, 2), np.nan)
    for i, r in enumerate(rows):
        if r is not None:
            out[i] = r
    return out


def class_count(space: str | None) -> int | None:
    if space is None:
        return None
    if space == "time":
        return N_TIME_BINS
    if space.startswith("geo:"):
        return 12 * int(space[4:]) ** 2
    raise GalleryError(f"unknown class space {space!r}")


def build_gallery(embeddings, ids=None, coords=None, torus=None, bins=None, space=None) -> Gallery:
    emb = np.asarray(embeddings, dtype=float)
    if emb.size == 0:
        return Gallery(np.zeros((0, emb.shape[-1] if emb.ndim == 2 else 0)), [], space=space)
    return Gallery(emb, ids, coords, torus, bins, space)


# ---------------------------------------------------------------------------
# search


def top_k(scores: np.ndarray, k: int | None) -> np.ndarray:
    """Indices of the k best scores, ties broken by ascending index."""
    n = len(scores)
    k = n if k is None else min(k, n)
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def cosines(query, g: Gallery) -> np.ndarray:
    return g.rows.astype(np.float64) @ np.asarray(query, dtype=np.float64)


def search(query, g: Gallery, k: int | None = 10, shards: int | None = None) -> QueryResult:
    """Exact top-k by dot product (brute force). `shards` splits the scan and merges."""
    if k is not None and k < 1:
        raise ValueError("k must be at least 1")
    if len(g) == 0:
        return QueryResult(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    if not shards or shards <= 1:
        sims = cosines(query, g)
        rows = top_k(sims, k)
        return QueryResult(rows, sims[rows], sims[rows])
    cand_rows, cand_sims = [], []
    q = np.asarray(query, dtype=np.float64)
    for a, b in g.shards(shards):
        s = g.rows[a:b].astype(np.float64) @ q
        r = top_k(s, k)
        cand_rows.append(r + a)
        cand_sims.append(s[r])
    rows_all = np.concatenate(cand_rows)
    sims_all = np.concatenate(cand_sims)
    order = np.lexsort((rows_all, -sims_all))[: len(rows_all) if k is None else k]
    return QueryResult(rows_all[order], sims_all[order], sims_all[order])


def entropy_beta(probs, beta_max: float):
    """beta_max * (1 - H(p) / ln B), clipped to [0, beta_max]; broadcasts over leading axes.

    Values within 1e-12 of the endpoints are snapped so the uniform and
    one-hot cases are exact.
    """
    p = np.asarray(probs, dtype=float)
    B = p.shape[-1]
    if B == 1:
        frac = np.ones(p.shape[:-1])
    else:
        frac = 1.0 - np.asarray(entropy(p)) / math.log(B)
        frac = np.where(np.abs(frac) < 1e-12, 0.0, np.where(np.abs(frac - 1) < 1e-12, 1.0, frac))
    beta = beta_max * np.clip(frac, 0.0, 1.0)
    return float(beta) if np.ndim(beta) == 0 else beta


def rerank(sims, probs, bins, cfg: RerankConfig) -> tuple[np.ndarray, float]:
    """Posterior-style scores sims/psi + beta * ln(max(p[bin], 1e-12)). Returns (scores, beta)."""
    sims = np.asarray(sims, dtype=float)
    probs = np.asarray(probs, dtype=float)
    bins = np.asarray(bins, dtype=np.int64)
    if sims.shape != bins.shape:
        raise ContractError(f"{len(sims)} similarities but {len(bins)} bins")
    if bins.size and (bins.min() < 0 or bins.max() >= probs.shape[-1]):
        raise ContractError(f"bin index outside [0, {probs.shape[-1]})")
    beta = entropy_beta(probs, cfg.beta_max)
    return sims / cfg.psi + beta * np.log(np.maximum(probs[bins], PROB_FLOOR)), beta


def ranked(sims, k, probs=None, bins=None, cfg: RerankConfig | None = None) -> QueryResult:
    if probs is None or cfg is None:
        rows = top_k(sims, k)
        return QueryResult(rows, sims[rows], sims[rows])
    scores, beta = rerank(sims, probs, bins, cfg)
    rows = top_k(scores, k)
    return QueryResult(rows, sims[rows], scores[rows], beta)


# ---------------------------------------------------------------------------
# galleries for each task


def image_gallery(model: GeoTimeModel, ds: Dataset, ids=None) -> Gallery:
    """v̄ of every record, with its location and time as metadata."""
    if len(ds) == 0:
        return Gallery(np.zeros((0, model.config.d)), [], space=f"geo:{model.config.geo_nside}")
    emb = model.embed(image=ds.features)
    ids = ids if ids is not None else [f"{c}#{i}" for i, c in enumerate(ds.camera_ids)]
    nside = model.config.geo_nside
    return Gallery(emb, ids, ds.coords, ds.torus, geo_to_cell(ds.coords, nside), f"geo:{nside}")


def location_gallery(model: GeoTimeModel, coords, ids=None) -> Gallery:
    c = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(c) == 0:
        raise GalleryError("empty candidate location set")
    nside = model.config.geo_nside
    return Gallery(model.embed(location=c), ids, c, None, geo_to_cell(c, nside), f"geo:{nside}")


def default_geo_candidates(train_coords, nside: int = 8) -> np.ndarray:
    """Unique training coordinates plus every cell center."""
    tc = np.unique(np.asarray(train_coords, dtype=float).reshape(-1, 2), axis=0)
    return np.concatenate([tc, all_cell_centers(nside)], axis=0)


def time_gallery(model: GeoTimeModel, fine: bool = False) -> Gallery:
    """t̄ at the 288 month x hour bin centers, or on a daily x hourly grid."""
    grid = fine_time_grid() if fine else all_bin_centers()
    return Gallery(model.embed(time=grid), None, None, grid, torus_to_bin(grid), "time")


# ---------------------------------------------------------------------------
# tasks


def _queries(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


def _search_all(q: np.ndarray, g: Gallery, k, probs=None, cfg=None, exclude=None) -> list[QueryResult]:
    out = []
    if len(g) == 0:
        return [QueryResult(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)) for _ in q]
    sims_all = q @ g.rows.astype(np.float64).T
    for i, sims in enumerate(sims_all):
        if exclude is not None and exclude[i] >= 0:
            sims = sims.copy()
            sims[exclude[i]] = -np.inf
        res = ranked(sims, k, None if probs is None else probs[i], g.bins, cfg)
        if exclude is not None and exclude[i] >= 0:
            keep = res.rows != exclude[i]
            res = QueryResult(res.rows[keep], res.cosines[keep], res.scores[keep], res.beta)
        out.append(res)
    return out


def task_geolocalize(
    model: GeoTimeModel, image_feats, candidates: Gallery, cfg: RerankConfig | None = GEO_RERANK,
    time=None, k: int | None = 1,
) -> list[QueryResult]:
    """Rank candidate locations for each image; query is v̄ (or v̄t when `time` is given).

    The geo head's distribution over cells, from v̄, reranks the candidates
    unless `cfg` is None.
    """
    if len(candidates) == 0:
        raise GalleryError("empty candidate location set")
    feats = _queries(image_feats)
    v = model.embed(image=feats)
    q = v if time is None else model.embed(image=feats, time=_queries(time))
    probs = model.classify_geo(v) if cfg is not None else None
    return _search_all(q, candidates, k, probs, cfg)


def task_time_predict(
    model: GeoTimeModel, image_feats, gallery: Gallery, location=None,
    cfg: RerankConfig | None = TIME_RERANK, k: int | None = 1,
) -> list[QueryResult]:
    """Rank time-gallery entries for each image; query is v̄ (or v̄l with `location`)."""
    feats = _queries(image_feats)
    v = model.embed(image=feats)
    q = v if location is None else model.embed(image=feats, location=_queries(location))
    probs = model.classify_time(v) if cfg is not None else None
    return _search_all(q, gallery, k, probs, cfg)


def predicted_points(results: list[QueryResult], values: np.ndarray) -> np.ndarray:
    """Metadata value (coords or torus) of each query's rank-1 row."""
    return np.stack([values[r.rows[0]] for r in results]) if results else np.zeros((0, 2))


def time_distributions(result: QueryResult, gallery: Gallery) -> tuple[np.ndarray, np.ndarray]:
    """Month (12) and hour (24) distributions from a full-gallery ranking's scores (softmax)."""
    if len(result) != len(gallery):
        raise ValueError("time_distributions needs scores for every gallery row (k=None)")
    s = result.scores - result.scores.max()
    w = np.exp(s)
    w /= w.sum()
    flat = np.bincount(gallery.bins[result.rows], weights=w, minlength=N_TIME_BINS)
    grid = flat.reshape(24, 12)  # flat index = hour * 12 + month
    return grid.sum(axis=0), grid.sum(axis=1)


def task_geotime_retrieve(
    model: GeoTimeModel, image_feats, target_time, gallery: Gallery, k: int | None = 10, exclude=None
) -> list[QueryResult]:
    """Images of the query's scene at the target time: query v̄t, plain cosine ranking.

    `exclude` optionally gives one gallery row per query to leave out
    (e.g. the query image itself); -1 keeps every row.
    """
    q = model.embed(image=_queries(image_feats), time=_queries(target_time))
    return _search_all(q, gallery, k, exclude=exclude)


def task_compositional(model: GeoTimeModel, location, target_time, gallery: Gallery, k: int | None = 10) -> list[QueryResult]:
    """Images matching a (location, time) pair: query l̄t, plain cosine ranking."""
    q = model.embed(location=_queries(location), time=_queries(target_time))
    return _search_all(q, gallery, k)

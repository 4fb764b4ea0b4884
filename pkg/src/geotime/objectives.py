"""Training objectives: cross-modal InfoNCE, metric soft targets, soft cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .geomath import all_bin_centers, all_cell_centers, haversine_km, torus_distance

# (anchor, partner) embedding keys of the five aligned pairs; (l, t) is left out
CONTRASTIVE_PAIRS = (("v", "l"), ("v", "t"), ("v", "lt"), ("l", "vt"), ("t", "vl"))
PAIR_NAMES = tuple(f"{a}_{b}" for a, b in CONTRASTIVE_PAIRS)

GEO_GAMMA_KM = 250.0
TIME_GAMMA = 1.0
PROB_FLOOR = 1e-12


class EmptyBatchError(ValueError):
    pass


def _one_way(logits: Tensor, positives: Tensor) -> Tensor:
    return ad.mean(ad.sub(ad.logsumexp_rows(logits), positives))


def info_nce(x, y, tau: float = 0.07) -> Tensor:
    """Symmetrized InfoNCE between matched rows of `x` and `y` (both (N, d), unit rows).

    Each direction is the mean over i of -log softmax_j(x_i . y_j / tau)[i];
    the result averages the x->y and y->x directions.
    """
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape[0] == 0:
        raise EmptyBatchError("InfoNCE needs at least one pair")
    if x.shape != y.shape:
        raise ad.DimensionError(f"info_nce: shapes {x.shape} and {y.shape} differ")
    logits = ad.scale(ad.matmul(x, ad.transpose(y)), 1.0 / tau)
    pos = ad.scale(ad.sum_(ad.mul(x, y), axis=-1), 1.0 / tau)
    return ad.scale(ad.add(_one_way(logits, pos), _one_way(ad.transpose(logits), pos)), 0.5)


def total_contrastive(emb: dict[str, Tensor], tau: float = 0.07) -> tuple[Tensor, dict[str, Tensor]]:
    """Sum of InfoNCE over the five aligned pairs. Returns (total, per-pair terms)."""
    sizes = {k: emb[k].shape[0] for k in ("v", "l", "t", "vl", "vt", "lt")}
    if len(set(sizes.values())) != 1:
        raise ad.ContractError(f"embedding batches differ in size: {sizes}")
    terms = {name: info_nce(emb[a], emb[b], tau) for name, (a, b) in zip(PAIR_NAMES, CONTRASTIVE_PAIRS)}
    total = terms[PAIR_NAMES[0]]
    for name in PAIR_NAMES[1:]:
        total = ad.add(total, terms[name])
    return total, terms


# ---------------------------------------------------------------------------
# metric soft targets


@dataclass
class AffinityTable:
    """Row-stochastic class-affinity matrix K[i, j] proportional to exp(-dist(C_i, C_j) / gamma)."""

    matrix: np.ndarray
    metric: str
    gamma: float

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    def save(self, path: str | Path) -> None:
        save_tensors(
            path,
            {f"affinity/{self.metric}": self.matrix, "gamma": np.array([self.gamma])},
            width=8,
        )

    @classmethod
    def load(cls, path: str | Path) -> "AffinityTable":
        raw = load_tensors(path)
        key = next(k for k in raw if k.startswith("affinity/"))
        return cls(raw[key], key.split("/", 1)[1], float(raw["gamma"][0]))


_METRICS: dict[str, Callable] = {
    "haversine": lambda a, b: haversine_km(a, b),
    "torus": lambda a, b: torus_distance(a, b),
}


def build_affinity(centers, metric: str | Callable = "haversine", gamma: float = GEO_GAMMA_KM) -> AffinityTable:
    """Affinity table over class `centers` ((B, 2) array).

    `metric` is 'haversine' (km, centers in degrees), 'torus' (torus points)
    or a callable broadcasting over (B, 1, 2) x (1, B, 2).
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    c = np.asarray(centers, dtype=float)
    name = metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")
    fn = _METRICS[metric] if isinstance(metric, str) else metric
    dist = np.asarray(fn(c[:, None, :], c[None, :, :]), dtype=float)
    logits = -dist / gamma
    logits -= logits.max(axis=1, keepdims=True)
    k = np.exp(logits)
    k /= k.sum(axis=1, keepdims=True)
    return AffinityTable(k, name, float(gamma))


def geo_affinity(nside: int = 8, gamma: float = GEO_GAMMA_KM) -> AffinityTable:
    return build_affinity(all_cell_centers(nside), "haversine", gamma)


def time_affinity(gamma: float = TIME_GAMMA) -> AffinityTable:
    return build_affinity(all_bin_centers(), "torus", gamma)


def soft_target(class_index, table: AffinityTable) -> np.ndarray:
    """Soft label(s): the table row of each class index, renormalized to sum to 1."""
    rows = table.matrix[np.asarray(class_index)]
    return rows / rows.sum(axis=-1, keepdims=True)


def soft_cross_entropy(pred, target) -> np.ndarray | float:
    """-sum(target * log(pred)) over the last axis, pred clamped at 1e-12."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    out = -(target * np.log(np.maximum(pred, PROB_FLOOR))).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats over the last axis (0 log 0 = 0)."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def soft_cross_entropy_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of soft cross-entropy between softmax(logits) and `target` rows."""
    if logits.shape[0] == 0:
        return Tensor(0.0)
    lp = ad.log_softmax_rows(logits)
    return ad.scale(ad.sum_(ad.mul(lp, Tensor(target))), -1.0 / logits.shape[0])


# ---------------------------------------------------------------------------
# combined loss


@dataclass
class LossBreakdown:
    contrastive: dict[str, float]
    geo: float
    time: float
    total: float
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    FIELDS = PAIR_NAMES + ("geo", "time", "total")

    def as_row(self) -> dict[str, float]:
        row = dict(self.contrastive)
        row.update(geo=self.geo, time=self.time, total=self.total)
        return row


def total_loss(
    emb: dict[str, Tensor],
    geo_logits: Tensor | None,
    time_logits: Tensor | None,
    geo_targets: np.ndarray | None,
    time_targets: np.ndarray | None,
    tau: float = 0.07,
    lambda_geo: float = 1.0,
    lambda_time: float = 1.0,
    timed: np.ndarray | None = None,
) -> LossBreakdown:
    """Contrastive sum plus weighted head losses.

    `emb` holds 'v' and 'l' for the whole batch. When `timed` (boolean mask)
    marks only some rows as having a timestamp, 't', 'vl', 'vt' and 'lt' are
    expected for the timed rows only; rows without time contribute to the
    (v, l) pair and the geo head; `time_targets` then covers the timed rows
    only. Heads with zero weight are skipped.
    """
    n = emb["v"].shape[0]
    timed_idx = None
    if timed is not None and not np.all(timed):
        timed_idx = np.flatnonzero(timed)

    terms: dict[str, Tensor] = {}
    for name, (a, b) in zip(PAIR_NAMES, CONTRASTIVE_PAIRS):
        if timed_idx is not None and name != "v_l" and timed_idx.size == 0:
            terms[name] = Tensor(0.0)
            continue
        xa, xb = emb[a], emb[b]
        if timed_idx is not None and name != "v_l":
            if xa.shape[0] == n:
                xa = ad.take_rows(xa, timed_idx)
            if xb.shape[0] == n:
                xb = ad.take_rows(xb, timed_idx)
        terms[name] = info_nce(xa, xb, tau)

    total = terms[PAIR_NAMES[0]]
    for name in PAIR_NAMES[1:]:
        total = ad.add(total, terms[name])

    geo = Tensor(0.0)
    if lambda_geo and geo_logits is not None:
        geo = soft_cross_entropy_logits(geo_logits, geo_targets)
        total = ad.add(total, ad.scale(geo, lambda_geo))
    tim = Tensor(0.0)
    if lambda_time and time_logits is not None and (timed_idx is None or timed_idx.size):
        tl = time_logits if timed_idx is None else ad.take_rows(time_logits, timed_idx)
        tim = soft_cross_entropy_logits(tl, time_targets)
        total = ad.add(total, ad.scale(tim, lambda_time))

    values = {k: float(v.data) for k, v in terms.items()}
    return LossBreakdown(values, float(geo.data), float(tim.data), float(total.data), loss=total)

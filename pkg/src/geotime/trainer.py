"""Debiased batch sampling, AdamW, the warmup-cosine schedule and the training loop."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as M
from .checkpoint import atomic_write_bytes, load_tensors, save_tensors
from .data import Dataset
from .objectives import (
    GEO_GAMMA_KM,
    TIME_GAMMA,
    AffinityTable,
    LossBreakdown,
    geo_affinity,
    soft_target,
    time_affinity,
    total_loss,
)


class NumericalError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# batch sampling


@dataclass
class BatchSpec:
    batch_size: int = 64
    min_cells: int = 64
    max_per_cell: int = 16
    nside: int = 8
    enforce_distinct_toy_tod: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.min_cells < 1 or self.max_per_cell < 1:
            raise ValueError("batch_size, min_cells and max_per_cell must be positive")
        if self.min_cells * self.max_per_cell < self.batch_size:
            raise ValueError(
                f"min_cells * max_per_cell = {self.min_cells * self.max_per_cell} "
                f"cannot fill batch_size = {self.batch_size}"
            )


class BatchSampler:
    """Cell-balanced sampler; precomputes the cell and time-bin of every row."""

    def __init__(self, ds: Dataset, spec: BatchSpec):
        if len(ds) == 0:
            raise ValueError("cannot sample batches from an empty dataset")
        self.spec = spec
        self.n = len(ds)
        cells = ds.cells(spec.nside)
        self.bins = ds.time_bins()
        order = np.argsort(cells, kind="stable")
        uniq, starts = np.unique(cells[order], return_index=True)
        self.cell_ids = uniq
        self.members = np.split(order, starts[1:])

    def _cell_order(self, rows: np.ndarray, rng) -> np.ndarray:
        """Shuffle a cell's rows, putting first occurrences of each (month, hour) bin first."""
        rows = rows[rng.permutation(len(rows))]
        if not self.spec.enforce_distinct_toy_tod:
            return rows
        seen: dict[int, int] = {}
        rank = np.empty(len(rows), dtype=np.int64)
        for i, b in enumerate(self.bins[rows]):
            if b < 0:  # untimed rows never collide
                rank[i] = 0
                continue
            rank[i] = seen.get(b, 0)
            seen[b] = rank[i] + 1
        return rows[np.argsort(rank, kind="stable")]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Row indices of one batch (no repeats; size min(batch_size, len(dataset)))."""
        spec = self.spec
        target = min(spec.batch_size, self.n)
        n_cells = len(self.members)
        first = min(n_cells, max(spec.min_cells, math.ceil(target / spec.max_per_cell)))
        cell_perm = rng.permutation(n_cells)
        chosen = list(cell_perm[:first])
        spare = list(cell_perm[first:])
        queues = {c: self._cell_order(self.members[c], rng) for c in chosen}
        taken = {c: 0 for c in chosen}
        out: list[int] = []
        cap = spec.max_per_cell
        while len(out) < target:
            progressed = False
            for c in chosen:
                if len(out) >= target:
                    break
                if taken[c] < min(cap, len(queues[c])):
                    out.append(int(queues[c][taken[c]]))
                    taken[c] += 1
                    progressed = True
            if progressed:
                continue
            if spare:
                c = spare.pop(0)
                chosen.append(c)
                queues[c] = self._cell_order(self.members[c], rng)
                taken[c] = 0
            else:
                cap = self.n  # every cell is at its cap: fill from what remains
        return np.array(out, dtype=np.int64)


def sample_batch(ds: Dataset, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    return BatchSampler(ds, spec).sample(rng)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-3
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ad.DimensionError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {k!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = params[k]
        p *= 1 - lr * state.weight_decay
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class ScheduleConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    warmup_iters: int = 100
    total_iters: int = 10_000

    def __post_init__(self):
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError(f"need 0 <= warmup_iters < total_iters, got {self.warmup_iters}, {self.total_iters}")
        if not 0 <= self.lr_min < self.lr_max:
            raise ValueError(f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")


def lr_at(it: int, s: ScheduleConfig) -> float:
    """Linear warmup to lr_max at `warmup_iters`, then cosine decay to lr_min at `total_iters`."""
    if not 0 <= it <= s.total_iters:
        raise ValueError(f"iteration {it} outside [0, {s.total_iters}]")
    if it <= s.warmup_iters:
        return s.lr_max * it / s.warmup_iters if s.warmup_iters else s.lr_max
    progress = (it - s.warmup_iters) / (s.total_iters - s.warmup_iters)
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training step


@dataclass
class TrainerConfig:
    batch: BatchSpec = field(default_factory=BatchSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    lambda_geo: float = 1.0
    lambda_time: float = 1.0
    geo_gamma_km: float = GEO_GAMMA_KM
    time_gamma: float = TIME_GAMMA
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 500
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        d = dict(d)
        d["batch"] = BatchSpec(**d.get("batch", {}))
        d["schedule"] = ScheduleConfig(**d.get("schedule", {}))
        return cls(**d)


@dataclass
class Tables:
    geo: AffinityTable
    time: AffinityTable

    @classmethod
    def build(cls, mcfg: M.ModelConfig, tcfg: TrainerConfig) -> "Tables":
        return cls(geo_affinity(mcfg.geo_nside, tcfg.geo_gamma_km), time_affinity(tcfg.time_gamma))


def forward_loss(
    p: dict[str, ad.Tensor], batch: Dataset, tables: Tables, mcfg: M.ModelConfig, tcfg: TrainerConfig
) -> LossBreakdown:
    """Six forward passes and the total loss for one batch (records the tape if active)."""
    timed = batch.timed
    tok_v = M.adapt_image(batch.features, p, mcfg)
    tok_l = M.encode_location(batch.coords, p, mcfg)
    emb = {"v": M.fuse({"v": tok_v}, p, mcfg), "l": M.fuse({"l": tok_l}, p, mcfg)}
    if timed.any():
        if timed.all():
            tv, tl = tok_v, tok_l
        else:
            idx = np.flatnonzero(timed)
            tv, tl = ad.take_rows(tok_v, idx), ad.take_rows(tok_l, idx)
        tok_t = M.encode_time(batch.torus[timed], p, mcfg)
        emb["t"] = M.fuse({"t": tok_t}, p, mcfg)
        emb["vl"] = M.fuse({"v": tv, "l": tl}, p, mcfg)
        emb["vt"] = M.fuse({"v": tv, "t": tok_t}, p, mcfg)
        emb["lt"] = M.fuse({"l": tl, "t": tok_t}, p, mcfg)

    g_logits = M.geo_logits(emb["v"], p) if tcfg.lambda_geo else None
    t_logits = M.time_logits(emb["v"], p) if tcfg.lambda_time else None
    g_tgt = soft_target(batch.cells(mcfg.geo_nside), tables.geo) if g_logits is not None else None
    t_tgt = soft_target(batch.time_bins()[timed], tables.time) if t_logits is not None else None
    return total_loss(
        emb, g_logits, t_logits, g_tgt, t_tgt, mcfg.tau, tcfg.lambda_geo, tcfg.lambda_time, timed=timed
    )


def loss_and_grads(params, batch, tables, mcfg, tcfg) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    p = M.as_tensors(params, requires_grad=True)
    with ad.Tape() as tape:
        out = forward_loss(p, batch, tables, mcfg, tcfg)
    names = list(p)
    grads = tape.backward(out.loss, [p[k] for k in names])
    return out, dict(zip(names, grads))


def train_step(params, batch: Dataset, tables: Tables, mcfg, tcfg, state: OptimizerState, lr: float) -> LossBreakdown:
    """Forward, backward and one AdamW update. Returns the pre-update losses."""
    out, grads = loss_and_grads(params, batch, tables, mcfg, tcfg)
    if not math.isfinite(out.total):
        raise NumericalError(f"loss is {out.total} at step {state.step + 1}")
    adamw_step(params, grads, state, lr)
    return out


# ---------------------------------------------------------------------------
# loop, log and checkpoints

LOG_COLUMNS = ("iter", "lr") + LossBreakdown.FIELDS


def iteration_rng(seed: int, it: int) -> np.random.Generator:
    """Per-iteration stream, so a resumed run draws the same batches."""
    return np.random.default_rng([seed, it])


def save_training_state(path, params, state: OptimizerState, mcfg: M.ModelConfig, it: int) -> None:
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.v.items()})
    tensors["state/iter"] = np.array([it], dtype=float)
    tensors["state/step"] = np.array([state.step], dtype=float)
    save_tensors(path, tensors, width=8)
    atomic_write_bytes(M.config_path(path), json.dumps(mcfg.to_dict(), indent=2).encode())


def load_training_state(path, tcfg: TrainerConfig):
    """-> (model config, params, optimizer state, iteration)."""
    raw = load_tensors(path)
    mcfg = M.ModelConfig.from_dict(json.loads(M.config_path(path).read_text()))
    pick = lambda prefix: {k[len(prefix) :]: v for k, v in raw.items() if k.startswith(prefix)}  # noqa: E731
    params = pick("param/")
    state = OptimizerState(
        pick("adam_m/"), pick("adam_v/"), int(raw["state/step"][0]),
        tcfg.beta1, tcfg.beta2, tcfg.weight_decay, tcfg.eps,
    )
    if set(state.m) != set(params):
        raise ValueError(f"{path}: optimizer moments do not match parameters")
    return mcfg, params, state, int(raw["state/iter"][0])


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


@dataclass
class TrainResult:
    model: M.GeoTimeModel
    log: list[dict]
    checkpoint: Path | None
    state: OptimizerState


def run_training(
    ds: Dataset,
    mcfg: M.ModelConfig,
    tcfg: TrainerConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    on_iter: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Train for ``schedule.total_iters`` iterations (or until `stop_at`).

    With `out_dir`, checkpoints go to ``ckpt_<iter>.gtck`` every
    ``checkpoint_every`` iterations and ``final.gtck`` at the end (a run cut
    short by `stop_at` ends with ``ckpt_<stop_at>.gtck`` instead), and the
    loss log to ``log.csv``. `resume` restarts from a checkpoint written
    by this function; the remaining loss trace matches an uninterrupted run.
    """
    out = Path(out_dir) if out_dir is not None else None
    total = tcfg.schedule.total_iters if stop_at is None else min(stop_at, tcfg.schedule.total_iters)
    hyper = dict(beta1=tcfg.beta1, beta2=tcfg.beta2, weight_decay=tcfg.weight_decay, eps=tcfg.eps)
    rows: list[dict] = []
    if resume is not None:
        ck_cfg, params, state, start = load_training_state(resume, tcfg)
        if ck_cfg != mcfg:
            raise ValueError(f"{resume}: checkpoint model config differs from the requested one")
        log_path = Path(resume).parent / "log.csv"
        if log_path.exists():
            rows = [r for r in read_log(log_path) if r["iter"] <= start]
    else:
        params = M.init_params(mcfg)
        state = OptimizerState.zeros_like(params, **hyper)
        start = 0

    sampler = BatchSampler(ds, tcfg.batch)
    tables = Tables.build(mcfg, tcfg)
    last_ckpt = None

    def checkpoint(it, name):
        nonlocal last_ckpt
        if out is None:
            return
        path = out / name
        save_training_state(path, params, state, mcfg, it)
        atomic_write_bytes(out / "log.csv", format_log(rows).encode())
        atomic_write_bytes(out / "trainer.json", json.dumps(tcfg.to_dict(), indent=2).encode())
        last_ckpt = path

    for it in range(start + 1, total + 1):
        lr = lr_at(it, tcfg.schedule)
        batch = ds.subset(sampler.sample(iteration_rng(tcfg.seed, it)))
        br = train_step(params, batch, tables, mcfg, tcfg, state, lr)
        rows.append({"iter": it, "lr": lr, **br.as_row()})
        if on_iter is not None:
            on_iter(it, br)
        if tcfg.checkpoint_every and it % tcfg.checkpoint_every == 0 and it < total:
            checkpoint(it, f"ckpt_{it:06d}.gtck")
    checkpoint(total, "final.gtck" if total == tcfg.schedule.total_iters else f"ckpt_{total:06d}.gtck")
    return TrainResult(M.GeoTimeModel(mcfg, params), rows, last_ckpt, state)

"""Command-line entry point: generate, curate, train, index, query, eval, dump-embeddings.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
import types
import typing
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import retrieval as R
from . import trainer as T
from .checkpoint import CheckpointError, atomic_write_bytes
from .geomath import timestamp_to_torus
from .model import CONFIGURATIONS, GeoTimeModel, ModelConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class DataSection:
    world: D.SyntheticWorldConfig = field(default_factory=D.SyntheticWorldConfig)
    split: D.SplitThresholds = field(default_factory=D.SplitThresholds)


@dataclass
class RetrievalSection:
    geo: R.RerankConfig = R.GEO_RERANK
    time: R.RerankConfig = R.TIME_RERANK
    rerank: bool = True
    fine_time_grid: bool = False
    top_k: int = 10


@dataclass
class EvaluationSection:
    thresholds: E.ThresholdSet = E.SAME_CAMERA
    condition_time_on_location: bool = True
    max_queries: int | None = None
    random_baseline_repeats: int = 20


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: T.TrainerConfig = field(default_factory=T.TrainerConfig)
    data: DataSection = field(default_factory=DataSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)

    def eval_config(self) -> E.EvalConfig:
        r, e = self.retrieval, self.evaluation
        return E.EvalConfig(
            thresholds=e.thresholds,
            geo_rerank=r.geo if r.rerank else None,
            time_rerank=r.time if r.rerank else None,
            condition_time_on_location=e.condition_time_on_location,
            fine_time_grid=r.fine_time_grid,
            max_queries=e.max_queries,
            random_baseline_repeats=e.random_baseline_repeats,
            seed=self.seed,
        )


def _check_scalar(tp, value, path):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return value
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(inner[0], value, path)
    if typing.get_origin(tp) is dict:
        if not isinstance(value, dict) or not all(isinstance(v, str) for v in value.values()):
            raise ConfigError(f"{path}: expected an object of strings")
        return dict(value)
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__} {value!r}")
    return value


def from_mapping(cls, data, path: str = "config"):
    """Build dataclass `cls` from JSON data, rejecting unknown keys and wrong types."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name in names & set(data):
        tp, sub = hints[name], f"{path}.{name}"
        inner = [a for a in typing.get_args(tp) if a is not type(None)]
        target = tp if dataclasses.is_dataclass(tp) else (inner[0] if len(inner) == 1 and dataclasses.is_dataclass(inner[0]) else None)
        if target is not None and data[name] is not None:
            kwargs[name] = from_mapping(target, data[name], sub)
        else:
            kwargs[name] = _check_scalar(tp, data[name], sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


def load_run_config(path: str | None, seed: int | None = None) -> RunConfig:
    """Parse and validate a run config; module seeds not set explicitly follow the run seed."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_mapping(RunConfig, raw)
    if seed is not None:
        cfg.seed = seed
    explicit = lambda *keys: _has(raw, keys) and seed is None  # noqa: E731
    if not explicit("model", "init_seed"):
        cfg.model.init_seed = cfg.seed
    if not explicit("trainer", "seed"):
        cfg.trainer.seed = cfg.seed
    if not explicit("data", "world", "seed"):
        cfg.data.world.seed = cfg.seed
    return cfg


def _has(d, keys) -> bool:
    for k in keys:
        if not isinstance(d, dict) or k not in d:
            return False
        d = d[k]
    return True


# ---------------------------------------------------------------------------
# helpers


def _write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode())


def _emit(obj, out: str | None) -> None:
    if out:
        _write_json(out, obj)
    else:
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")


def _torus_of(obj: dict, path: str):
    if obj.get("timestamp") is not None:
        try:
            t = timestamp_to_torus(datetime.fromisoformat(obj["timestamp"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.timestamp: {exc}") from None
        return [t.theta, t.phi]
    if "theta" in obj and "phi" in obj:
        return [float(obj["theta"]), float(obj["phi"])]
    return None


def _load_queries(path: str) -> list[dict]:
    raw = json.loads(Path(path).read_text())
    items = raw if isinstance(raw, list) else [raw]
    if not all(isinstance(q, dict) for q in items):
        raise ConfigError(f"{path}: queries must be JSON objects")
    return items


def _need(q: dict, key: str, i: int):
    if q.get(key) is None:
        raise ConfigError(f"query[{i}].{key}: required for this task")
    return q[key]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(a) -> int:
    cfg = load_run_config(a.config, a.seed)
    ds = D.generate_synthetic(cfg.data.world)
    D.save_jsonl(ds, a.out)
    print(f"wrote {len(ds)} records to {a.out}")
    if a.probe_out:
        feats, labels = D.quality_seed_set(cfg.data.world, a.probe_size)
        D.save_jsonl_labels(feats, labels, a.probe_out)
        print(f"wrote {len(labels)} labeled probe features to {a.probe_out}")
    return EXIT_OK


def cmd_curate(a) -> int:
    cfg = load_run_config(a.config, a.seed)
    s = cfg.data.split
    overrides = {k: getattr(a, k) for k in ("t_high", "t_low", "min_frames", "min_months", "bin_size_deg", "test_budget") if getattr(a, k) is not None}
    try:
        th = D.SplitThresholds(**{**dataclasses.asdict(s), **overrides})
    except ValueError as exc:
        raise ConfigError(f"thresholds: {exc}") from None
    ds = D.load_jsonl(a.inp)
    probe_info = None
    if a.probe:
        seed = D.load_jsonl_labels(a.probe)
        probe = D.train_quality_probe(*seed, rng=np.random.default_rng(cfg.seed))
        ds = ds.with_quality(probe.score(ds.features))
        probe_info = {"heldout_accuracy": probe.heldout_accuracy, "iterations": probe.iterations}
    elif np.isnan(ds.quality).any():
        raise ConfigError("records lack quality scores; pass --probe with labeled features")
    train, test, rep = D.curate_split(ds, None, th, np.random.default_rng(cfg.seed))
    report = rep.to_dict()
    report["thresholds"] = dataclasses.asdict(th)
    report["probe"] = probe_info
    D.save_jsonl(train, a.out_train)
    D.save_jsonl(test, a.out_test)
    _write_json(a.report or a.out_train + ".report.json", report)
    print(json.dumps({"quality_counts": rep.quality_counts, "kept_per_bin": rep.kept_per_bin, "test_per_bin": rep.test_per_bin}))
    print(f"train: {len(train)} records / {len(rep.train_cameras)} cameras; test: {len(test)} records / {len(rep.test_cameras)} cameras")
    print(f"camera-disjoint: {'yes' if rep.disjoint else 'NO'}")
    for note in rep.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = load_run_config(a.config, a.seed)
    tcfg = cfg.trainer
    if a.iters is not None:
        try:
            tcfg.schedule = T.ScheduleConfig(**{**dataclasses.asdict(tcfg.schedule), "total_iters": a.iters})
        except ValueError as exc:
            raise ConfigError(f"--iters: {exc}") from None
    ds = D.load_jsonl(a.data)
    if len(ds) == 0:
        raise ConfigError(f"{a.data}: no training records")
    if ds.feature_dim != cfg.model.img_feat_dim:
        raise ConfigError(f"model.img_feat_dim is {cfg.model.img_feat_dim} but {a.data} has width {ds.feature_dim}")

    def progress(it, br):
        if it % a.log_every == 0:
            print(f"iter {it} total {br.total:.4f}", flush=True)

    res = T.run_training(ds, cfg.model, tcfg, a.out, resume=a.resume, on_iter=progress)
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_index(a) -> int:
    cfg = load_run_config(a.config, a.seed)
    model = GeoTimeModel.load(a.checkpoint)
    if a.kind == "time":
        g = R.time_gallery(model, a.fine or cfg.retrieval.fine_time_grid)
    else:
        if not a.data:
            raise ConfigError(f"--data is required for a {a.kind} gallery")
        ds = D.load_jsonl(a.data)
        if a.kind == "image":
            g = R.image_gallery(model, ds)
        else:
            g = R.location_gallery(model, R.default_geo_candidates(ds.coords, model.config.geo_nside))
    g.save(a.out)
    print(f"wrote {a.kind} gallery with {len(g)} rows to {a.out}")
    return EXIT_OK


def cmd_query(a) -> int:
    cfg = load_run_config(a.config, a.seed)
    model = GeoTimeModel.load(a.checkpoint)
    g = R.Gallery.load(a.gallery)
    queries = _load_queries(a.input)
    k = a.k or cfg.retrieval.top_k
    want = {"geoloc": "geo:", "time": "time", "geotime": "geo:", "compose": "geo:"}[a.task]
    if not (g.space or "").startswith(want):
        raise ConfigError(f"task {a.task} needs a {want.rstrip(':')} gallery, {a.gallery} holds {g.space!r}")
    geo_cfg = cfg.retrieval.geo if cfg.retrieval.rerank else None
    time_cfg = cfg.retrieval.time if cfg.retrieval.rerank else None
    out = []
    for i, q in enumerate(queries):
        t = _torus_of(q, f"query[{i}]")
        loc = [q["lat"], q["lon"]] if q.get("lat") is not None and q.get("lon") is not None else None
        if a.task == "geoloc":
            res = R.task_geolocalize(model, _need(q, "feature", i), g, geo_cfg, time=t, k=k)[0]
        elif a.task == "time":
            res = R.task_time_predict(model, _need(q, "feature", i), g, loc, time_cfg, k=k)[0]
        elif a.task == "geotime":
            if t is None:
                raise ConfigError(f"query[{i}]: geotime needs a target timestamp")
            res = R.task_geotime_retrieve(model, _need(q, "feature", i), t, g, k=k)[0]
        else:
            if t is None or loc is None:
                raise ConfigError(f"query[{i}]: compose needs lat, lon and a timestamp")
            res = R.task_compositional(model, loc, t, g, k=k)[0]
        ranked = []
        for rank, (row, cos, score) in enumerate(zip(res.rows, res.cosines, res.scores), 1):
            item = {"rank": rank, "id": g.ids[row], "cosine": float(cos), "score": float(score)}
            if not np.isnan(g.coords[row]).any():
                item["lat"], item["lon"] = map(float, g.coords[row])
            if not np.isnan(g.torus[row]).any():
                item["theta"], item["phi"] = map(float, g.torus[row])
            ranked.append(item)
        out.append({"query": i, "task": a.task, "beta": res.beta, "results": ranked})
    _emit(out, a.out)
    return EXIT_OK


def cmd_eval(a) -> int:
    cfg = load_run_config(a.config, a.seed)
    ecfg = cfg.eval_config()
    if a.max_queries is not None:
        ecfg.max_queries = a.max_queries
    model = GeoTimeModel.load(a.checkpoint)
    test = D.load_jsonl(a.test)
    train_coords = D.load_jsonl(a.train).coords if a.train else None
    rep = E.evaluate(model, test, train_coords, ecfg)
    rep.save(a.report)
    print(json.dumps(rep.flat()))
    return EXIT_OK


def cmd_dump_embeddings(a) -> int:
    model = GeoTimeModel.load(a.checkpoint)
    ds = D.load_jsonl(a.data)
    mods = a.modality
    inputs = {}
    if "v" in mods:
        inputs["image"] = ds.features
    if "l" in mods:
        inputs["location"] = ds.coords
    if "t" in mods:
        if not ds.timed.all():
            raise ConfigError(f"{a.data}: time embeddings need a timestamp on every record")
        inputs["time"] = ds.torus
    emb = model.embed(**inputs) if len(ds) else np.zeros((0, model.config.d))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["camera_id", "lat", "lon", "timestamp", "modality"] + [f"e{j}" for j in range(emb.shape[1])])
    for i in range(len(ds)):
        ts = ds.timestamps[i]
        w.writerow([ds.camera_ids[i], repr(ds.coords[i, 0]), repr(ds.coords[i, 1]), "" if ts is None else ts.isoformat(), mods] + [repr(float(x)) for x in emb[i]])
    atomic_write_bytes(a.out, buf.getvalue().encode())
    print(f"wrote {len(ds)} {mods} embeddings to {a.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geotime", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.set_defaults(fn=fn)
        return p

    p = add("generate", cmd_generate, "write a synthetic dataset as JSON lines")
    p.add_argument("--out", required=True)
    p.add_argument("--probe-out", help="also write a labeled clean/corrupted seed set for the quality probe")
    p.add_argument("--probe-size", type=int, default=400)

    p = add("curate", cmd_curate, "quality filtering and camera-disjoint split")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--probe", help="JSON lines of {feature, label} for the quality probe")
    p.add_argument("--report")
    p.add_argument("--t-high", type=float)
    p.add_argument("--t-low", type=float)
    p.add_argument("--min-frames", type=int)
    p.add_argument("--min-months", type=int)
    p.add_argument("--bin-size", dest="bin_size_deg", type=float)
    p.add_argument("--budget", dest="test_budget", type=int)

    p = add("train", cmd_train, "train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume")
    p.add_argument("--iters", type=int, help="overrides trainer.schedule.total_iters")
    p.add_argument("--log-every", type=int, default=100)

    p = add("index", cmd_index, "build a gallery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("image", "location", "time"), default="image")
    p.add_argument("--fine", action="store_true", help="day x hour time gallery")

    p = add("query", cmd_query, "rank a gallery for one or more queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--task", choices=("geoloc", "time", "geotime", "compose"), required=True)
    p.add_argument("--input", required=True, help="JSON query object or list")
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train", help="training data (adds its coordinates to the geo candidates)")
    p.add_argument("--report", required=True)
    p.add_argument("--max-queries", type=int)

    p = add("dump-embeddings", cmd_dump_embeddings, "CSV of embeddings with metadata")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", choices=["".join(c) for c in CONFIGURATIONS], default="v")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except T.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, D.DatasetError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest

from geotime import cli
from geotime.data import load_jsonl
from geotime.evaluation import MetricsReport

SMALL = {
    "model": {"d": 16, "heads": 2, "img_feat_dim": 8, "n_freq": 4, "geo_nside": 1},
    "trainer": {
        "batch": {"batch_size": 8, "min_cells": 4, "max_per_cell": 4, "nside": 1},
        "schedule": {"lr_max": 1e-3, "warmup_iters": 2, "total_iters": 12},
        "checkpoint_every": 100,
    },
    "data": {
        "world": {"n_cameras": 12, "frames_per_camera": 20, "feature_dim": 8, "corruption_rate": 0.2},
        "split": {"min_frames": 10, "min_months": 1, "test_budget": 3},
    },
    "evaluation": {"random_baseline_repeats": 2},
    "seed": 3,
}


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return p


class TestRunConfig:
    def test_defaults(self):
        cfg = cli.load_run_config(None)
        assert cfg.seed == 0 and cfg.model.d == 64 and cfg.data.split.t_high == 0.7

    def test_seed_propagates(self, config):
        cfg = cli.load_run_config(str(config), seed=9)
        assert cfg.seed == cfg.model.init_seed == cfg.trainer.seed == cfg.data.world.seed == 9

    def test_unknown_key_names_field_path(self, tmp_path, capsys):
        bad = json.loads(json.dumps(SMALL))
        bad["trainer"]["schedule"]["warmup"] = 3
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(bad))
        assert run("generate", "--config", p, "--out", tmp_path / "x.jsonl") == cli.EXIT_CONFIG
        assert "config.trainer.schedule.warmup" in capsys.readouterr().err
        assert not (tmp_path / "x.jsonl").exists()

    def test_wrong_type(self):
        with pytest.raises(cli.ConfigError, match=r"config\.model\.d"):
            cli.from_mapping(cli.RunConfig, {"model": {"d": "wide"}})
        with pytest.raises(cli.ConfigError, match="bool"):
            cli.from_mapping(cli.RunConfig, {"retrieval": {"rerank": 1}})

    def test_invariant_violation_is_config_error(self):
        with pytest.raises(cli.ConfigError, match="config.model"):
            cli.from_mapping(cli.RunConfig, {"model": {"d": 10, "heads": 4}})

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        assert run("generate", "--config", p, "--out", tmp_path / "x.jsonl") == cli.EXIT_CONFIG


class TestGenerate:
    def test_line_count_and_reproducible(self, tmp_path, config):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run("generate", "--config", config, "--out", a) == 0
        assert run("generate", "--config", config, "--out", b) == 0
        assert len(a.read_text().splitlines()) == 12 * 20
        assert a.read_bytes() == b.read_bytes()
        c = tmp_path / "c.jsonl"
        run("generate", "--config", config, "--seed", 4, "--out", c)
        assert c.read_bytes() != a.read_bytes()

    def test_default_config_size(self, tmp_path):
        out = tmp_path / "d.jsonl"
        assert run("generate", "--out", out) == 0
        assert len(out.read_text().splitlines()) == 200 * 100

    def test_unwritable_output_is_io_error(self, tmp_path, config):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run("generate", "--config", config, "--out", blocker / "sub" / "x.jsonl") == cli.EXIT_IO


class TestErrors:
    def test_missing_input_is_io_error(self, tmp_path, config):
        assert run("curate", "--config", config, "--in", tmp_path / "none.jsonl", "--out-train", tmp_path / "a",
                   "--out-test", tmp_path / "b", "--probe", tmp_path / "none") == cli.EXIT_IO

    def test_curate_without_quality(self, tmp_path, config):
        data = tmp_path / "d.jsonl"
        run("generate", "--config", config, "--out", data)
        assert run("curate", "--config", config, "--in", data, "--out-train", tmp_path / "a",
                   "--out-test", tmp_path / "b") == cli.EXIT_CONFIG

    def test_bad_threshold_flags(self, tmp_path, config):
        data, probe = tmp_path / "d.jsonl", tmp_path / "p.jsonl"
        run("generate", "--config", config, "--out", data, "--probe-out", probe)
        rc = run("curate", "--config", config, "--in", data, "--probe", probe, "--out-train", tmp_path / "a",
                 "--out-test", tmp_path / "b", "--t-high", 0.3, "--t-low", 0.5)
        assert rc == cli.EXIT_CONFIG
        assert not (tmp_path / "a").exists()

    def test_nan_abort_exit_code(self, tmp_path, config):
        data = tmp_path / "d.jsonl"
        run("generate", "--config", config, "--out", data)
        cfg = json.loads(config.read_text())
        cfg["trainer"]["schedule"]["lr_max"] = 1e300
        hot = tmp_path / "hot.json"
        hot.write_text(json.dumps(cfg))
        with np.errstate(all="ignore"):
            assert run("train", "--config", hot, "--data", data, "--out", tmp_path / "ck") == cli.EXIT_NUMERIC

    def test_feature_width_mismatch(self, tmp_path, config):
        data = tmp_path / "d.jsonl"
        run("generate", "--config", config, "--out", data)
        cfg = json.loads(config.read_text())
        cfg["model"]["img_feat_dim"] = 5
        p = tmp_path / "w.json"
        p.write_text(json.dumps(cfg))
        assert run("train", "--config", p, "--data", data, "--out", tmp_path / "ck") == cli.EXIT_CONFIG


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> curate -> train -> index, shared by the query/eval tests."""
    d = tmp_path_factory.mktemp("pipe")
    cfg = d / "run.json"
    cfg.write_text(json.dumps(SMALL))
    p = {k: d / v for k, v in dict(data="all.jsonl", probe="probe.jsonl", train="train.jsonl", test="test.jsonl",
                                     report="curate.json", ck="ck", images="images.gal", locs="locs.gal",
                                     times="times.gal").items()}
    assert run("generate", "--config", cfg, "--out", p["data"], "--probe-out", p["probe"]) == 0
    assert run("curate", "--config", cfg, "--in", p["data"], "--probe", p["probe"], "--out-train", p["train"],
               "--out-test", p["test"], "--report", p["report"]) == 0
    assert run("train", "--config", cfg, "--data", p["train"], "--out", p["ck"], "--log-every", 5) == 0
    p["model"] = p["ck"] / "final.gtck"
    assert run("index", "--checkpoint", p["model"], "--data", p["train"], "--out", p["images"]) == 0
    assert run("index", "--checkpoint", p["model"], "--data", p["train"], "--kind", "location", "--out", p["locs"]) == 0
    assert run("index", "--checkpoint", p["model"], "--kind", "time", "--out", p["times"]) == 0
    p["cfg"] = cfg
    return p


class TestPipeline:
    def test_curation_report(self, pipeline):
        rep = json.loads(pipeline["report"].read_text())
        assert set(rep["quality_counts"]) == {"high", "medium", "low"}
        assert sum(rep["quality_counts"].values()) == 240
        assert rep["disjoint"] is True
        assert rep["thresholds"]["t_high"] == 0.7 and rep["thresholds"]["t_low"] == 0.4
        train, test = load_jsonl(pipeline["train"]), load_jsonl(pipeline["test"])
        assert not set(train.camera_ids) & set(test.camera_ids)
        assert len(set(test.camera_ids)) == 3

    def test_training_outputs(self, pipeline):
        log = (pipeline["ck"] / "log.csv").read_text().splitlines()
        assert len(log) == 13

    def test_query_tasks(self, pipeline, tmp_path):
        test = load_jsonl(pipeline["test"])
        q = {"feature": test.features[0].tolist(), "timestamp": test.timestamps[0].isoformat(),
             "lat": float(test.coords[0, 0]), "lon": float(test.coords[0, 1])}
        qf = tmp_path / "q.json"
        qf.write_text(json.dumps([q, q]))
        for task, gal in (("geoloc", "locs"), ("time", "times"), ("geotime", "images"), ("compose", "images")):
            out = tmp_path / f"{task}.json"
            assert run("query", "--checkpoint", pipeline["model"], "--gallery", pipeline[gal], "--task", task,
                       "--input", qf, "--k", 3, "--out", out) == 0
            res = json.loads(out.read_text())
            assert len(res) == 2 and [r["rank"] for r in res[0]["results"]] == [1, 2, 3]
            assert res[0] == {**res[1], "query": 0}

    def test_geotime_echoes_raw_cosines(self, pipeline, tmp_path):
        test = load_jsonl(pipeline["test"])
        q = {"feature": test.features[1].tolist(), "theta": 0.25, "phi": 0.5}
        qf, out = tmp_path / "q.json", tmp_path / "o.json"
        qf.write_text(json.dumps(q))
        run("query", "--checkpoint", pipeline["model"], "--gallery", pipeline["images"], "--task", "geotime",
            "--input", qf, "--out", out)
        res = json.loads(out.read_text())[0]["results"]
        assert len(res) == 10
        cos = [r["cosine"] for r in res]
        assert cos == sorted(cos, reverse=True) and all(r["score"] == r["cosine"] for r in res)

    def test_query_wrong_gallery_kind(self, pipeline, tmp_path):
        qf = tmp_path / "q.json"
        qf.write_text(json.dumps({"feature": [0.0] * 8}))
        assert run("query", "--checkpoint", pipeline["model"], "--gallery", pipeline["times"], "--task", "geoloc",
                   "--input", qf) == cli.EXIT_CONFIG

    def test_query_missing_field(self, pipeline, tmp_path):
        qf = tmp_path / "q.json"
        qf.write_text(json.dumps({"lat": 1.0, "lon": 2.0}))
        assert run("query", "--checkpoint", pipeline["model"], "--gallery", pipeline["images"], "--task", "compose",
                   "--input", qf) == cli.EXIT_CONFIG

    def test_eval_report(self, pipeline, tmp_path):
        out = tmp_path / "m.json"
        assert run("eval", "--config", pipeline["cfg"], "--checkpoint", pipeline["model"], "--test", pipeline["test"],
                   "--train", pipeline["train"], "--report", out) == 0
        rep = MetricsReport.from_json(out.read_text())
        assert rep.n_queries == len(load_jsonl(pipeline["test"]))
        assert (tmp_path / "m.csv").exists()

    def test_dump_embeddings(self, pipeline, tmp_path):
        out = tmp_path / "e.csv"
        assert run("dump-embeddings", "--checkpoint", pipeline["model"], "--data", pipeline["test"],
                   "--modality", "vl", "--out", out) == 0
        rows = out.read_text().splitlines()
        assert rows[0].split(",")[:5] == ["camera_id", "lat", "lon", "timestamp", "modality"]
        assert len(rows) == len(load_jsonl(pipeline["test"])) + 1
        e = np.array(rows[1].split(",")[5:], float)
        assert len(e) == 16 and abs(np.linalg.norm(e) - 1) < 1e-9

    def test_train_is_bit_reproducible(self, pipeline, tmp_path):
        assert run("train", "--config", pipeline["cfg"], "--data", pipeline["train"], "--out", tmp_path) == 0
        assert (tmp_path / "final.gtck").read_bytes() == pipeline["model"].read_bytes()


def test_eval_untrained_near_chance(tmp_path):
    # uniform ground-truth times: any fixed predictor averages 6 h / 91.25 d
    cfg = json.loads(json.dumps(SMALL))
    cfg["data"]["world"].update(n_cameras=150, frames_per_camera=4, corruption_rate=0.0)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    data = tmp_path / "d.jsonl"
    run("generate", "--config", p, "--out", data)
    ck = tmp_path / "m.gtck"
    cli.GeoTimeModel(cli.load_run_config(str(p)).model).save(ck)
    assert run("eval", "--config", p, "--checkpoint", ck, "--test", data, "--report", tmp_path / "r.json") == 0
    rep = MetricsReport.from_json((tmp_path / "r.json").read_text())
    assert rep.tod_error_hours == pytest.approx(6.0, abs=0.75)
    assert rep.toy_error_days == pytest.approx(91.25, abs=12)

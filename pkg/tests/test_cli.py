"""End-to-end CLI workflows, exit codes, and reproducibility."""

import json
import os

import pytest

from graphdf.cli_harness import run_command


def run(*argv):
    return run_command(list(argv))


def read_json(path):
    with open(path) as handle:
        return json.load(handle)


PATH_KEYS = {"out", "panel", "graph", "model", "config"}


def strip_timing(obj, drop_paths=False):
    if isinstance(obj, dict):
        return {k: strip_timing(v, drop_paths) for k, v in obj.items()
                if k != "timing" and not (drop_paths and k in PATH_KEYS)}
    if isinstance(obj, list):
        return [strip_timing(v, drop_paths) for v in obj]
    return obj


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> build-graph -> train once; several tests read the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    synth_dir = str(root / "synth")
    graph_dir = str(root / "graph")
    train_dir = str(root / "train")
    assert run("synth", "--nodes", "8", "--steps", "40", "--seed", "7",
               "--out", synth_dir) == 0
    panel = os.path.join(synth_dir, "panel.json")
    assert run("build-graph", "--panel", panel, "--keep", "topk:2",
               "--out", graph_dir) == 0
    graph = os.path.join(graph_dir, "graph.csv")
    assert run("train", "--panel", panel, "--graph", graph, "--variant", "gg",
               "--k", "2", "--q", "3", "--r", "2", "--epochs", "15",
               "--seed", "7", "--out", train_dir) == 0
    return {"root": root, "panel": panel, "graph": graph,
            "model": os.path.join(train_dir, "model.json")}


class TestPipeline:
    def test_synth_outputs(self, workspace):
        synth_dir = os.path.dirname(workspace["panel"])
        names = set(os.listdir(synth_dir))
        assert {"panel.json", "graph.csv", "graph.csv.json", "manifest.json"} <= names

    def test_manifest_shape(self, workspace):
        manifest = read_json(os.path.join(os.path.dirname(workspace["panel"]),
                                          "manifest.json"))
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 7
        assert "timing" in manifest

    def test_forecast_and_evaluate(self, workspace):
        fc_dir = str(workspace["root"] / "forecast")
        assert run("forecast", "--model", workspace["model"], "--panel",
                   workspace["panel"], "--tau", "3", "--samples", "10",
                   "--seed", "1", "--out", fc_dir) == 0
        payload = read_json(os.path.join(fc_dir, "forecast.json"))
        assert payload["horizon"] == 3 and payload["num_samples"] == 10

        ev_dir = str(workspace["root"] / "eval")
        assert run("evaluate", "--model", workspace["model"], "--panel",
                   workspace["panel"], "--rho", "0.5", "--tau", "3",
                   "--samples", "10", "--seed", "1", "--out", ev_dir) == 0
        report = read_json(os.path.join(ev_dir, "evaluation.json"))
        assert "p50" in report["normalized_quantile_loss"]
        assert report["normalized_quantile_loss"]["p50"] >= 0

    def test_schedule_with_oracle(self, workspace):
        sc_dir = str(workspace["root"] / "sched")
        assert run("schedule", "--panel", workspace["panel"], "--graph",
                   workspace["graph"], "--forecaster", "oracle",
                   "--seed", "3", "--out", sc_dir) == 0
        summary = read_json(os.path.join(sc_dir, "summary.json"))
        assert summary["metrics"]["cancellation_ratio"] in (None, 0.0)

    def test_gradcheck_passes(self, workspace):
        gc_dir = str(workspace["root"] / "gc")
        assert run("gradcheck", "--nodes", "3", "--steps", "6", "--seed", "0",
                   "--out", gc_dir) == 0
        payload = read_json(os.path.join(gc_dir, "gradcheck.json"))
        assert payload["passed"] is True


class TestExitCodes:
    def test_unknown_command(self):
        assert run("frobnicate") == 1

    def test_no_command(self):
        assert run() == 1

    def test_bad_flag_value(self, tmp_path):
        assert run("synth", "--nodes", "-3", "--out", str(tmp_path / "x")) == 2

    def test_missing_file_is_data_error(self, tmp_path):
        assert run("build-graph", "--panel", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "g")) == 2

    def test_short_panel_is_data_error(self, tmp_path):
        out = str(tmp_path / "tiny")
        assert run("synth", "--nodes", "4", "--steps", "3", "--seed", "0",
                   "--out", out) == 0
        assert run("train", "--panel", os.path.join(out, "panel.json"),
                   "--graph", os.path.join(out, "graph.csv"),
                   "--out", str(tmp_path / "t")) == 2

    def test_bad_keep_rule_is_usage_error(self, workspace, tmp_path):
        assert run("build-graph", "--panel", workspace["panel"],
                   "--keep", "bogus:1", "--out", str(tmp_path / "g")) == 1


class TestConfigFile:
    def test_flags_override_config(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"nodes": 5, "steps": 30, "seed": 11}))
        out = str(tmp_path / "out")
        assert run("synth", "--config", str(config), "--nodes", "6",
                   "--out", out) == 0
        manifest = read_json(os.path.join(out, "manifest.json"))
        assert manifest["config"]["nodes"] == 6      # flag wins
        assert manifest["config"]["steps"] == 30     # config wins over default
        assert manifest["config"]["seed"] == 11


class TestDeterminism:
    def compare_dirs(self, a, b):
        names_a = sorted(os.listdir(a))
        names_b = sorted(os.listdir(b))
        assert names_a == names_b
        for name in names_a:
            pa, pb = os.path.join(a, name), os.path.join(b, name)
            if name == "manifest.json":
                # Manifests record resolved paths; drop those, keep the rest.
                assert strip_timing(read_json(pa), drop_paths=True) == \
                    strip_timing(read_json(pb), drop_paths=True), name
            elif name.endswith(".json"):
                assert strip_timing(read_json(pa)) == strip_timing(read_json(pb)), name
            else:
                with open(pa, "rb") as fa, open(pb, "rb") as fb:
                    assert fa.read() == fb.read(), name

    def test_full_pipeline_bitwise_reproducible(self, tmp_path):
        def pipeline(base):
            synth = str(base / "synth")
            graph = str(base / "graph")
            trained = str(base / "train")
            fc = str(base / "fc")
            ev = str(base / "ev")
            sc = str(base / "sc")
            assert run("synth", "--nodes", "6", "--steps", "30", "--seed", "5",
                       "--out", synth) == 0
            panel = os.path.join(synth, "panel.json")
            assert run("build-graph", "--panel", panel, "--keep", "topk:2",
                       "--out", graph) == 0
            gpath = os.path.join(graph, "graph.csv")
            assert run("train", "--panel", panel, "--graph", gpath,
                       "--k", "2", "--q", "3", "--r", "2", "--epochs", "8",
                       "--seed", "5", "--out", trained) == 0
            model = os.path.join(trained, "model.json")
            assert run("forecast", "--model", model, "--panel", panel,
                       "--tau", "2", "--samples", "5", "--seed", "5",
                       "--out", fc) == 0
            assert run("evaluate", "--model", model, "--panel", panel,
                       "--tau", "2", "--samples", "5", "--seed", "5",
                       "--out", ev) == 0
            assert run("schedule", "--panel", panel, "--graph", gpath,
                       "--forecaster", "oracle", "--seed", "5",
                       "--out", sc) == 0
            return [synth, graph, trained, fc, ev, sc]

        dirs_a = pipeline(tmp_path / "a")
        dirs_b = pipeline(tmp_path / "b")
        for da, db in zip(dirs_a, dirs_b):
            self.compare_dirs(da, db)


class TestBench:
    def test_bench_two_sizes(self, tmp_path):
        out = str(tmp_path / "bench")
        assert run("bench", "--sizes", "2,4", "--repeats", "1", "--nodes", "6",
                   "--steps", "12", "--epochs", "2", "--k", "2", "--q", "3",
                   "--r", "2", "--seed", "0", "--out", out) == 0
        lines = open(os.path.join(out, "bench.csv")).read().strip().splitlines()
        assert lines[0] == "window,seconds"
        assert len(lines) == 3
        windows = [int(l.split(",")[0]) for l in lines[1:]]
        seconds = [float(l.split(",")[1]) for l in lines[1:]]
        assert windows == [2, 4]
        assert seconds[0] <= seconds[1]

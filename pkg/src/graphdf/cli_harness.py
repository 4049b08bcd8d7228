"""Command-line entry point for reproducible end-to-end workflows.

Subcommands: synth, build-graph, train, forecast, evaluate, schedule,
gradcheck, bench. Every run resolves its configuration (flags over an
optional JSON config file over built-in defaults), seeds all randomness
from a single --seed, writes outputs atomically, and leaves exactly one
manifest recording the resolved config and input hashes. The GRAPHDF_LOG
environment variable (debug/info/warning/error) controls verbosity.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import evaluation, scheduler_sim
from . import params as pm
from .errors import DataError, NumericError
from .graph_build import (
    Threshold,
    TopK,
    build_rbf_graph,
    load_graph,
    save_graph,
    top_k_for_density,
)
from .graphdf_model import GraphDFModel, VariantConfig, load_model, save_model
from .panel_io import SynthConfig, atomic_write_text, load_panel, save_panel, synth_panel
from .training import TrainConfig, finite_diff_check, train

LOG = logging.getLogger("graphdf.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, config: dict, seed: int,
                    inputs: list[str], outputs: list[str], seconds: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "timing": {"wall_clock_seconds": seconds},
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, sort_keys=True))


def _resolve(args: argparse.Namespace, config_file: dict, defaults: dict) -> dict:
    """Flag > config file > default, keyed by the long option name."""
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = config_file.get(key, default)
        resolved[key] = value
    return resolved


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    with open(path) as handle:
        payload = json.load(handle)
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path!r} must hold a JSON object")
    return payload


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _variant_from(cfg: dict) -> VariantConfig:
    return VariantConfig.from_name(
        cfg["variant"], cell=cfg["cell"], k_factors=cfg["k"], q_hidden=cfg["q"],
        r_hidden=cfg["r"], cheb_order=cfg["cheb_order"], hops=cfg["hops"])


def _train_cfg_from(cfg: dict) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], patience=cfg["patience"],
                       lookback=cfg["lookback"], seed=cfg["seed"], batch=cfg["batch"],
                       clip=cfg["clip"])


_MODEL_DEFAULTS = {
    "variant": "gg", "cell": "gcrn", "k": 10, "q": 50, "r": 5,
    "cheb_order": 1, "hops": 1,
}
_FIT_DEFAULTS = {
    "lr": 1e-3, "epochs": 200, "patience": 10, "lookback": 6,
    "batch": None, "clip": None,
}


def _add_model_flags(parser) -> None:
    parser.add_argument("--variant", choices=["gg", "gr", "rg"])
    parser.add_argument("--cell", choices=["gcrn", "dcgru"])
    parser.add_argument("--k", type=int)
    parser.add_argument("--q", type=int)
    parser.add_argument("--r", type=int)
    parser.add_argument("--cheb-order", dest="cheb_order", type=int)
    parser.add_argument("--hops", type=int)


def _add_fit_flags(parser) -> None:
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--lookback", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--clip", type=float)


def _add_common(parser) -> None:
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="graphdf", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")

    p_synth = sub.add_parser("synth", help="generate a synthetic panel and graph")
    p_synth.add_argument("--nodes", type=int)
    p_synth.add_argument("--steps", type=int)
    p_synth.add_argument("--communities", type=int)
    p_synth.add_argument("--period-steps", dest="period_steps", type=int)
    p_synth.add_argument("--noise", type=float)
    _add_common(p_synth)

    p_graph = sub.add_parser("build-graph", help="RBF dependency graph from a panel")
    p_graph.add_argument("--panel", required=True)
    p_graph.add_argument("--length-scale", dest="length_scale", type=float)
    p_graph.add_argument("--keep", help="topk:K, thresh:T, or density:D")
    _add_common(p_graph)

    p_train = sub.add_parser("train", help="fit a model on a panel and graph")
    p_train.add_argument("--panel", required=True)
    p_train.add_argument("--graph", required=True)
    _add_model_flags(p_train)
    _add_fit_flags(p_train)
    _add_common(p_train)

    p_fc = sub.add_parser("forecast", help="sample forecast paths from a checkpoint")
    p_fc.add_argument("--model", required=True)
    p_fc.add_argument("--panel", required=True)
    p_fc.add_argument("--tau", type=int)
    p_fc.add_argument("--samples", type=int)
    _add_common(p_fc)

    p_eval = sub.add_parser("evaluate", help="normalized quantile loss on held-out steps")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--panel", required=True)
    p_eval.add_argument("--tau", type=int)
    p_eval.add_argument("--samples", type=int)
    p_eval.add_argument("--rho", type=float, action="append")
    _add_common(p_eval)

    p_sched = sub.add_parser("schedule", help="replay a trace through the scheduler")
    p_sched.add_argument("--panel", required=True)
    p_sched.add_argument("--graph", required=True)
    p_sched.add_argument("--epsilon", type=float)
    p_sched.add_argument("--lambda", dest="portion", type=float)
    p_sched.add_argument("--tau", type=int)
    p_sched.add_argument("--retrain-every", dest="retrain_every", type=int)
    p_sched.add_argument("--deadline", type=float)
    p_sched.add_argument("--forecaster", choices=["model", "oracle"])
    _add_model_flags(p_sched)
    _add_fit_flags(p_sched)
    _add_common(p_sched)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p_gc.add_argument("--nodes", type=int)
    p_gc.add_argument("--steps", type=int)
    p_gc.add_argument("--step-size", dest="step_size", type=float)
    p_gc.add_argument("--tolerance", type=float)
    _add_model_flags(p_gc)
    _add_common(p_gc)

    p_bench = sub.add_parser("bench", help="training-time scaling over window sizes")
    p_bench.add_argument("--sizes", help="comma list of window lengths")
    p_bench.add_argument("--repeats", type=int)
    p_bench.add_argument("--nodes", type=int)
    p_bench.add_argument("--steps", type=int)
    p_bench.add_argument("--epochs", type=int)
    _add_model_flags(p_bench)
    _add_common(p_bench)

    return parser


def _cmd_synth(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "nodes": 40, "steps": 300, "communities": 2, "period_steps": 24,
        "noise": 0.05, "seed": 0, "out": "graphdf_out/synth",
    })
    tick = time.perf_counter()
    out = _ensure_out(cfg["out"])
    panel, graph = synth_panel(SynthConfig(
        n_nodes=cfg["nodes"], n_steps=cfg["steps"], n_communities=cfg["communities"],
        factor_period_steps=cfg["period_steps"], noise_sigma=cfg["noise"],
        seed=cfg["seed"]))
    panel_path = os.path.join(out, "panel.json")
    graph_path = os.path.join(out, "graph.csv")
    save_panel(panel, panel_path)
    save_graph(graph, graph_path, metadata={"source": "synth", "seed": cfg["seed"]})
    _write_manifest(out, "synth", cfg, cfg["seed"], [],
                    [panel_path, graph_path, graph_path + ".json"],
                    time.perf_counter() - tick)
    LOG.info("synth: wrote %s nodes x %s steps to %s", panel.n_nodes, panel.n_steps, out)
    return 0


def _parse_keep_rule(spec: str | None, n_nodes: int):
    if spec is None:
        return TopK(4)
    kind, _, value = spec.partition(":")
    if kind == "topk":
        return TopK(int(value))
    if kind == "thresh":
        return Threshold(float(value))
    if kind == "density":
        return TopK(top_k_for_density(n_nodes, float(value)))
    raise UsageError(f"unknown keep rule {spec!r} (use topk:K, thresh:T, density:D)")


def _cmd_build_graph(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "panel": None, "length_scale": None, "keep": None, "seed": 0,
        "out": "graphdf_out/graph",
    })
    tick = time.perf_counter()
    panel = load_panel(cfg["panel"])
    rule = _parse_keep_rule(cfg["keep"], panel.n_nodes)
    graph = build_rbf_graph(panel, length_scale=cfg["length_scale"], keep_rule=rule)
    out = _ensure_out(cfg["out"])
    graph_path = os.path.join(out, "graph.csv")
    save_graph(graph, graph_path, metadata={
        "source": "rbf", "keep": cfg["keep"] or "topk:4",
        "length_scale": cfg["length_scale"], "seed": cfg["seed"]})
    _write_manifest(out, "build-graph", cfg, cfg["seed"], [cfg["panel"]],
                    [graph_path, graph_path + ".json"], time.perf_counter() - tick)
    LOG.info("build-graph: %d edges (density %.4f)", graph.n_edges, graph.density)
    return 0


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "panel": None, "graph": None, "seed": 0, "out": "graphdf_out/train",
        **_MODEL_DEFAULTS, **_FIT_DEFAULTS,
    })
    tick = time.perf_counter()
    panel = load_panel(cfg["panel"])
    graph = load_graph(cfg["graph"])
    model, report = train(_variant_from(cfg), panel, graph, _train_cfg_from(cfg))
    out = _ensure_out(cfg["out"])
    model_path = os.path.join(out, "model.json")
    report_path = os.path.join(out, "train_report.json")
    save_model(model, model_path)
    atomic_write_text(report_path, json.dumps(report.to_jsonable(), sort_keys=True))
    _write_manifest(out, "train", cfg, cfg["seed"],
                    [cfg["panel"], cfg["graph"], cfg["graph"] + ".json"],
                    [model_path, report_path], time.perf_counter() - tick)
    LOG.info("train: %d epochs, final loss %.4f, stop=%s",
             len(report.losses), report.losses[-1], report.stop_reason)
    return 0


def _cmd_forecast(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "model": None, "panel": None, "tau": 3, "samples": 100, "seed": 0,
        "threads": 1, "out": "graphdf_out/forecast",
    })
    tick = time.perf_counter()
    model = load_model(cfg["model"])
    panel = load_panel(cfg["panel"])
    dist = evaluation.forecast_samples(model, panel, tau=cfg["tau"],
                                       num_samples=cfg["samples"], seed=cfg["seed"],
                                       threads=cfg["threads"])
    out = _ensure_out(cfg["out"])
    fc_path = os.path.join(out, "forecast.json")
    payload = {
        "format": "graphdf-forecast",
        "version": 1,
        "base_timestamp": dist.base_timestamp,
        "horizon": dist.horizon,
        "num_samples": dist.num_samples,
        "seed": dist.seed,
        "node_ids": list(panel.node_ids),
        "samples": dist.samples.tolist(),
        "quantiles": {f"p{int(q * 100)}": evaluation.rho_quantile(dist, q).tolist()
                      for q in (0.1, 0.5, 0.9)},
    }
    atomic_write_text(fc_path, json.dumps(payload, sort_keys=True))
    _write_manifest(out, "forecast", cfg, cfg["seed"], [cfg["model"], cfg["panel"]],
                    [fc_path], time.perf_counter() - tick)
    LOG.info("forecast: %d paths over %d steps", dist.num_samples, dist.horizon)
    return 0


def _cmd_evaluate(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "model": None, "panel": None, "tau": 3, "samples": 100, "rho": None,
        "seed": 0, "threads": 1, "out": "graphdf_out/evaluate",
    })
    tick = time.perf_counter()
    model = load_model(cfg["model"])
    panel = load_panel(cfg["panel"])
    tau = cfg["tau"]
    rhos = tuple(cfg["rho"]) if cfg["rho"] else (0.1, 0.5, 0.9)
    if panel.n_steps <= tau + model.lookback:
        raise DataError(f"panel too short to hold out {tau} steps")
    history = panel.slice_steps(0, panel.n_steps - tau)
    actuals = panel.targets[:, panel.n_steps - tau:]
    dist = evaluation.forecast_samples(model, history, tau=tau,
                                       num_samples=cfg["samples"], seed=cfg["seed"],
                                       threads=cfg["threads"])
    report = evaluation.evaluate_forecast(dist, actuals, rhos=rhos)
    out = _ensure_out(cfg["out"])
    report_path = os.path.join(out, "evaluation.json")
    per_node = os.path.join(out, "per_node_p50.csv")
    evaluation.write_report(report, report_path)
    evaluation.write_per_node_losses(dist, actuals, 0.5, per_node)
    _write_manifest(out, "evaluate", cfg, cfg["seed"], [cfg["model"], cfg["panel"]],
                    [report_path, per_node], time.perf_counter() - tick)
    LOG.info("evaluate: %s", report["normalized_quantile_loss"])
    return 0


def _cmd_schedule(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "panel": None, "graph": None, "epsilon": 0.25, "portion": 0.75, "tau": 3,
        "retrain_every": 1, "deadline": None, "forecaster": "model", "seed": 0,
        "out": "graphdf_out/schedule",
        **_MODEL_DEFAULTS, **_FIT_DEFAULTS,
        "epochs": 30, "patience": 5,  # per-step refits favor speed
    })
    tick = time.perf_counter()
    panel = load_panel(cfg["panel"])
    graph = load_graph(cfg["graph"])
    sched_cfg = scheduler_sim.SchedulerConfig(
        lookback=cfg["lookback"], horizon=cfg["tau"], threshold=cfg["epsilon"],
        portion=cfg["portion"], retrain_every=cfg["retrain_every"],
        deadline_seconds=cfg["deadline"])
    if cfg["forecaster"] == "oracle":
        forecaster = scheduler_sim.OracleForecaster(panel)
    else:
        forecaster = scheduler_sim.GraphDFForecaster(
            _variant_from(cfg), _train_cfg_from(cfg), seed=cfg["seed"])
    report = scheduler_sim.run_schedule_sim(forecaster, panel, graph, sched_cfg)
    out = _ensure_out(cfg["out"])
    csv_path = os.path.join(out, "decisions.csv")
    summary_path = os.path.join(out, "summary.json")
    scheduler_sim.write_report_csv(report, csv_path)
    scheduler_sim.write_report_summary(report, summary_path)
    _write_manifest(out, "schedule", cfg, cfg["seed"],
                    [cfg["panel"], cfg["graph"], cfg["graph"] + ".json"],
                    [csv_path, summary_path], time.perf_counter() - tick)
    metrics = scheduler_sim.schedule_metrics(report)
    LOG.info("schedule: %s", metrics.to_jsonable())
    return 0


def _cmd_gradcheck(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "nodes": 4, "steps": 8, "step_size": 1e-5, "tolerance": 1e-4, "seed": 0,
        "out": "graphdf_out/gradcheck",
        **_MODEL_DEFAULTS,
        "k": 2, "q": 4, "r": 3,  # exhaustive differencing wants a tiny model
    })
    tick = time.perf_counter()
    panel, graph = synth_panel(SynthConfig(
        n_nodes=cfg["nodes"], n_steps=cfg["steps"], n_communities=2,
        noise_sigma=0.05, seed=cfg["seed"]))
    model = GraphDFModel.initialize(_variant_from(cfg), panel, graph,
                                    lookback=cfg["steps"] - 1, seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"] + 17)
    for _, arr in pm.named_arrays(model.params):
        arr[...] = 0.3 * rng.standard_normal(arr.shape)
    report = finite_diff_check(model, panel, step=cfg["step_size"],
                               tolerance=cfg["tolerance"])
    out = _ensure_out(cfg["out"])
    report_path = os.path.join(out, "gradcheck.json")
    atomic_write_text(report_path, json.dumps({
        "passed": report.passed,
        "max_error": report.max_error,
        "tolerance": report.tolerance,
        "step": report.step,
        "errors": {k: v for k, v in sorted(report.errors.items())},
    }, sort_keys=True))
    _write_manifest(out, "gradcheck", cfg, cfg["seed"], [], [report_path],
                    time.perf_counter() - tick)
    for name, err in report.worst():
        LOG.info("gradcheck %-40s %.3e", name, err)
    if not report.passed:
        LOG.error("gradcheck failed: max relative error %.3e > %.1e",
                  report.max_error, report.tolerance)
        raise NumericError(f"gradient check failed at {report.max_error:.3e}")
    print(f"gradcheck passed: max relative error {report.max_error:.3e}")
    return 0


def scalability_bench(sizes, panel, graph, variant: VariantConfig, epochs: int,
                      seed: int, repeats: int = 3):
    """Train once per window size, repeated; report the median seconds.

    Returns [(size, median_seconds, [all repeat seconds]), ...].
    """
    rows = []
    for size in sizes:
        times = []
        for rep in range(repeats):
            cfg = TrainConfig(epochs=epochs, patience=epochs, lookback=size,
                              seed=seed + rep)
            tick = time.perf_counter()
            train(variant, panel, graph, cfg)
            times.append(time.perf_counter() - tick)
        rows.append((size, float(np.median(times)), times))
    return rows


def _cmd_bench(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = _resolve(args, file_cfg, {
        "sizes": "2,4,8,16,32", "repeats": 3, "nodes": 40, "steps": 64,
        "epochs": 15, "seed": 0, "out": "graphdf_out/bench",
        **_MODEL_DEFAULTS,
    })
    tick = time.perf_counter()
    sizes = [int(s) for s in str(cfg["sizes"]).split(",") if s]
    panel, graph = synth_panel(SynthConfig(
        n_nodes=cfg["nodes"], n_steps=max(cfg["steps"], max(sizes) + 2),
        n_communities=2, noise_sigma=0.05, seed=cfg["seed"]))
    rows = scalability_bench(sizes, panel, graph, _variant_from(cfg),
                             epochs=cfg["epochs"], seed=cfg["seed"],
                             repeats=cfg["repeats"])
    out = _ensure_out(cfg["out"])
    csv_path = os.path.join(out, "bench.csv")
    lines = ["window,seconds"] + [f"{size},{med!r}" for size, med, _ in rows]
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    detail_path = os.path.join(out, "bench_detail.json")
    atomic_write_text(detail_path, json.dumps({
        "timing": {"rows": [{"window": s, "median": m, "repeats": r}
                            for s, m, r in rows]}}, sort_keys=True))
    _write_manifest(out, "bench", cfg, cfg["seed"], [], [csv_path, detail_path],
                    time.perf_counter() - tick)
    if len(rows) >= 2:
        logs = np.log([r[0] for r in rows]), np.log([r[1] for r in rows])
        slope = float(np.polyfit(logs[0], logs[1], 1)[0])
        LOG.info("bench: log-log slope %.3f", slope)
        print(f"log-log slope: {slope:.3f}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "build-graph": _cmd_build_graph,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "schedule": _cmd_schedule,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
}


def _setup_logging() -> None:
    level_name = os.environ.get("GRAPHDF_LOG", "warning").lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warning": logging.WARNING, "error": logging.ERROR}.get(level_name)
    if level is None:
        level = logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr, format="%(message)s")


def run_command(argv) -> int:
    """Execute one subcommand; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        handler = _COMMANDS[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()

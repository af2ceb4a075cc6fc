"""Command-line entry point.

Every setting is a flat dotted key (``market.lambda``, ``hybrid.tau``, ...)
read from defaults, an optional ``--profile``, an optional YAML ``--config``
file, the ``HYBRIDMATCH_SEED`` environment variable and finally
``--<key> VALUE`` flags. Exit codes: 0 success, 1 configuration error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import (
    DEFAULTS,
    ConfigError,
    experiment_from,
    grid_kwargs,
    load_settings,
    market_from,
    parse_list,
    train_params_from,
)
from .decision import GapModel, GridSpec, GradientCheckError, TrainingError
from .market import PolicyKind, SimulationError, simulate
from .policies import HybridConfig

log = logging.getLogger("hybridmatch")

COMMANDS = ("simulate", "sweep", "heatmap", "calibrate", "schedule", "reproduce")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "run k seeded runs of the configured policies at one market point",
        "sweep": "run a parameter sweep (sweep.axis over sweep.values)",
        "heatmap": "oracle gap heatmap plus oracle and fitted decision contours",
        "calibrate": "label the (mu, sigma) grid by simulation and train the gap model",
        "schedule": "per-window Hybrid policy choices over an interval",
        "reproduce": "calibrate, then write every report CSV into an output directory",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="YAML file of dotted keys")
        p.add_argument("--profile", choices=["desk", "paper"], help="horizon preset")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            p.add_argument("--trace", help="also write the first run's full trace as JSON")
        for key in DEFAULTS:
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    return parser


def _settings(ns) -> dict:
    overrides = {k: getattr(ns, k) for k in DEFAULTS}
    return load_settings(ns.config, ns.profile, overrides)


def cmd_simulate(settings: dict, ns) -> None:
    settings = dict(settings, **{"sweep.axis": "none"})
    cfg = experiment_from(settings)
    rows = harness.run_experiment(cfg)
    harness.write_text(cfg.output, harness.render_csv(rows, harness.SWEEP_COLUMNS, harness.comment_for(settings, "simulate")))
    if ns.trace:
        point = harness.expand_points(cfg)[0]
        model = harness.load_model(cfg.model_path) if point.policy == "hybrid" else None
        seed = harness.run_seed(cfg.seed, point.market, 0)
        trace = simulate(replace(point.market, seed=seed), harness.make_policy(point, model, cfg))
        harness.write_text(ns.trace, trace.to_text() + "\n")


def cmd_sweep(settings: dict, ns) -> None:
    cfg = experiment_from(settings)
    rows = harness.run_experiment(cfg)
    harness.write_text(cfg.output, harness.render_csv(rows, harness.SWEEP_COLUMNS, harness.comment_for(settings, "sweep")))


def cmd_calibrate(settings: dict, ns) -> None:
    out = settings["output.path"]
    model_path = Path("model.json" if out == "-" else out)
    dataset_path = model_path.with_suffix(".dataset.csv")
    grid = GridSpec(**grid_kwargs(settings))
    _, report = harness.run_calibration(
        grid, market_from(settings), int(settings["calibrate.k"]), train_params_from(settings),
        model_path, dataset_path, workers=int(settings["experiment.workers"]),
        comment=harness.comment_for(settings, "dataset"),
    )
    print(f"model: {model_path}  dataset: {dataset_path}")
    print(f"heldout_accuracy={report.heldout_accuracy:.4f} heldout_rmse={report.heldout_rmse:.4f} "
          f"epochs={report.epochs} grad_check={report.grad_check_error:.2e}")


def cmd_heatmap(settings: dict, ns) -> None:
    out = settings["output.path"]
    out_dir = Path("heatmap" if out == "-" else out)
    model = GapModel.load(settings["hybrid.model"]) if settings["hybrid.model"] else None
    files = harness.run_heatmap(
        GridSpec(**grid_kwargs(settings)), market_from(settings), int(settings["calibrate.k"]),
        parse_list(settings["heatmap.taus"]), model, out_dir, dataset_path=settings["heatmap.dataset"],
        workers=int(settings["experiment.workers"]), comment=harness.comment_for(settings, "heatmap"),
    )
    for f in files.values():
        print(f)


def _hybrid_config(settings: dict, model) -> HybridConfig:
    return HybridConfig(
        tau=float(settings["hybrid.tau"]), w=float(settings["hybrid.w"]), gap_model=model,
        min_samples=int(settings["hybrid.min_samples"]),
        initial_policy=PolicyKind(settings["hybrid.initial_policy"]),
        sample_source=str(settings["hybrid.sample_source"]),
    )


def cmd_schedule(settings: dict, ns) -> None:
    sim = market_from(settings)
    model = harness.load_model(settings["hybrid.model"])
    start = settings["schedule.start"] if settings["schedule.start"] is not None else max(0.0, sim.T - 5.0)
    end = settings["schedule.end"] if settings["schedule.end"] is not None else sim.T
    seed = harness.run_seed(sim.seed, sim, 0)
    rows, _ = harness.run_schedule_report(_hybrid_config(settings, model), replace(sim, seed=seed), start, end)
    harness.write_text(settings["output.path"],
                       harness.render_csv(rows, harness.SCHEDULE_COLUMNS, harness.comment_for(settings, "schedule")))


def cmd_reproduce(settings: dict, ns) -> None:
    out = settings["output.path"]
    out_dir = Path("reproduce" if out == "-" else out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = reproduce(settings, out_dir)
    for f in files:
        print(f)


def reproduce(settings: dict, out_dir: Path) -> list[Path]:
    """Calibrate, then write every report CSV into ``out_dir``."""
    written = []
    grid = GridSpec(**grid_kwargs(settings))
    sim = market_from(settings)
    model_path = out_dir / "model.json"
    dataset_path = out_dir / "dataset.csv"
    if settings["hybrid.model"]:
        model = GapModel.load(settings["hybrid.model"])
    else:
        model, _ = harness.run_calibration(
            grid, sim, int(settings["calibrate.k"]), train_params_from(settings), model_path, dataset_path,
            workers=int(settings["experiment.workers"]), comment=harness.comment_for(settings, "dataset"),
        )
        written += [model_path, dataset_path]
    taus = parse_list(settings["heatmap.taus"])
    files = harness.run_heatmap(grid, sim, int(settings["calibrate.k"]), taus, model, out_dir / "fig3",
                                dataset_path=dataset_path if dataset_path.exists() else None,
                                workers=int(settings["experiment.workers"]),
                                comment=harness.comment_for(settings, "heatmap"))
    written += list(files.values())

    ds = settings["sweep.values"] or "2,4,6,8,10"
    base = dict(settings, **{"sweep.axis": "d", "sweep.values": ds, "hybrid.w": 0.3})

    def sweep(name: str, parts: list[dict]):
        rows = []
        for over in parts:
            cfg = experiment_from(dict(base, **over))
            rows += harness.run_experiment(cfg, model=model)
        path = out_dir / name
        harness.write_text(path, harness.render_csv(rows, harness.SWEEP_COLUMNS, harness.comment_for(settings, name)))
        written.append(path)

    static = {"experiment.policy": "greedy,patient"}
    sweep("fig4_tau_sweep.csv", [static] + [{"experiment.policy": "hybrid", "hybrid.tau": t} for t in taus])
    ws = [0.1, 0.3, 1.0, 5.0]
    sweep("fig7_window_sweep.csv",
          [static] + [{"experiment.policy": "hybrid", "hybrid.tau": 0.1, "hybrid.w": w} for w in ws])
    T = float(settings["market.T"])
    usage = dict(settings, **{"experiment.policy": "hybrid", "hybrid.tau": 0.1, "sweep.axis": "w",
                              "sweep.values": ",".join(map(str, ws)),
                              "experiment.usage_start": max(float(settings["market.T0"]), T - 20.0)})
    rows = harness.run_experiment(experiment_from(usage), model=model)
    path = out_dir / "fig6_policy_usage.csv"
    harness.write_text(path, harness.render_csv(rows, harness.SWEEP_COLUMNS, harness.comment_for(settings, "fig6")))
    written.append(path)

    hyb = dict(settings, **{"hybrid.tau": 0.1, "hybrid.w": 0.3})
    seed = harness.run_seed(sim.seed, sim, 0)
    rows, _ = harness.run_schedule_report(_hybrid_config(hyb, model), replace(sim, seed=seed), max(0.0, T - 5.0), T)
    path = out_dir / "fig5_schedule.csv"
    harness.write_text(path, harness.render_csv(rows, harness.SCHEDULE_COLUMNS, harness.comment_for(settings, "fig5")))
    written.append(path)
    return written


HANDLERS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "calibrate": cmd_calibrate,
    "schedule": cmd_schedule,
    "reproduce": cmd_reproduce,
}


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = _settings(ns)
        HANDLERS[ns.command](settings, ns)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OSError, SimulationError, GradientCheckError, TrainingError, json.JSONDecodeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

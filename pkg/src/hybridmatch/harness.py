"""Seeded multi-run experiments, sweeps, calibration and CSV output."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, fingerprint
from .decision import (
    GapModel,
    GridSpec,
    TrainParams,
    TrainReport,
    build_training_grid,
    extract_decision_boundary,
    load_dataset,
    samples_surface,
    save_dataset,
    surface_contour,
    train,
)
from .market import LogNormalParams, MarketConfig, PolicyKind, simulate
from .metrics import compute_congestion, compute_loss, compute_mean_wait, compute_usage
from .policies import HybridConfig, HybridPolicy, static_policy
from .rng import derive_seed

log = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "policy", "tau", "w", "d", "lambda", "T", "T0", "k",
    "loss_mean", "loss_se", "wait_mean", "wait_se", "congestion_mean", "congestion_se",
    "usage_patient", "usage_greedy", "switch_count_mean", "mu", "sigma",
]
SCHEDULE_COLUMNS = ["window", "start", "end", "policy", "mu_hat", "sigma_hat", "score_hat", "n_samples"]
HEATMAP_COLUMNS = ["mu", "sigma", "loss_greedy", "loss_patient", "score", "capped_flag"]
CONTOUR_COLUMNS = ["tau", "mu", "sigma"]


def market_key(m: MarketConfig) -> str:
    """Identity of a sweep point's market; seeds hang off this, not its position."""
    return f"lambda={m.lam!r}|p={m.p!r}|T={m.T!r}|T0={m.T0!r}|mu={m.departure.mu!r}|sigma={m.departure.sigma!r}"


def run_seed(master: int, market: MarketConfig, run: int) -> int:
    return derive_seed(master, market_key(market), run)


@dataclass(frozen=True)
class Point:
    policy: str
    market: MarketConfig
    tau: float | None
    w: float | None


@dataclass
class RunMetrics:
    loss: float
    wait: float
    congestion: float
    usage_patient: float
    usage_greedy: float
    switches: int


def make_policy(point: Point, model, cfg: ExperimentConfig):
    if point.policy == "hybrid":
        return HybridPolicy(HybridConfig(
            tau=point.tau, w=point.w, gap_model=model, min_samples=cfg.min_samples,
            initial_policy=PolicyKind(cfg.initial_policy), sample_source=cfg.sample_source,
        ))
    return static_policy(point.policy)


def _run_one(args) -> RunMetrics:
    point, seed, model, cfg = args
    trace = simulate(replace(point.market, seed=seed), make_policy(point, model, cfg))
    usage_start = cfg.usage_start if cfg.usage_start is not None else trace.T0
    usage, switches = compute_usage(trace, usage_start, trace.T)
    return RunMetrics(
        loss=compute_loss(trace),
        wait=compute_mean_wait(trace),
        congestion=compute_congestion(trace),
        usage_patient=usage.get(PolicyKind.PATIENT, 0.0),
        usage_greedy=usage.get(PolicyKind.GREEDY, 0.0),
        switches=switches,
    )


def mean_se(xs) -> tuple[float, float]:
    a = np.asarray(xs, float)
    if len(a) < 2:
        return float(a.mean()), 0.0
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(len(a)))


def expand_points(cfg: ExperimentConfig) -> list[Point]:
    base = cfg.market
    if cfg.axis == "none":
        markets = [(base, cfg.tau, cfg.w)]
    elif cfg.axis == "d":
        markets = [(replace(base, p=d / base.lam), cfg.tau, cfg.w) for d in cfg.values]
    elif cfg.axis == "tau":
        markets = [(base, float(t), cfg.w) for t in cfg.values]
    elif cfg.axis == "w":
        markets = [(base, cfg.tau, float(w)) for w in cfg.values]
    else:
        markets = [(replace(base, departure=LogNormalParams(mu, s)), cfg.tau, cfg.w) for mu, s in cfg.values]
    points = []
    for pol in cfg.policies:
        for market, tau, w in markets:
            hybrid = pol == "hybrid"
            points.append(Point(pol, market, tau if hybrid else None, w if hybrid else None))
    return points


def load_model(path: str | None):
    if path is None:
        raise ConfigError("hybrid runs need hybrid.model (a trained model file)")
    if not Path(path).exists():
        raise ConfigError(f"model file not found: {path}")
    return GapModel.load(path)


def run_points(cfg: ExperimentConfig, model=None) -> list[tuple[Point, list[RunMetrics]]]:
    """Per-run metrics for every (policy, sweep point), in sweep order.

    Runs for the same market share seeds across policies, so policy
    comparisons are paired.
    """
    if "hybrid" in cfg.policies and model is None:
        model = load_model(cfg.model_path)
    points = expand_points(cfg)
    tasks = [(pt, run_seed(cfg.seed, pt.market, r), model, cfg) for pt in points for r in range(cfg.k)]
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_run_one, tasks, chunksize=max(1, cfg.k)))
    else:
        results = [_run_one(t) for t in tasks]
    return [(pt, results[i * cfg.k:(i + 1) * cfg.k]) for i, pt in enumerate(points)]


def run_experiment(cfg: ExperimentConfig, model=None) -> list[dict]:
    """k seeded runs per (policy, sweep point); one aggregated row each."""
    rows = []
    for pt, runs in run_points(cfg, model):
        loss = mean_se([r.loss for r in runs])
        wait = mean_se([r.wait for r in runs])
        cong = mean_se([r.congestion for r in runs])
        rows.append({
            "policy": pt.policy,
            "tau": pt.tau,
            "w": pt.w,
            "d": pt.market.d,
            "lambda": pt.market.lam,
            "T": pt.market.T,
            "T0": pt.market.T0,
            "k": cfg.k,
            "loss_mean": loss[0], "loss_se": loss[1],
            "wait_mean": wait[0], "wait_se": wait[1],
            "congestion_mean": cong[0], "congestion_se": cong[1],
            "usage_patient": float(np.mean([r.usage_patient for r in runs])),
            "usage_greedy": float(np.mean([r.usage_greedy for r in runs])),
            "switch_count_mean": float(np.mean([r.switches for r in runs])),
            "mu": pt.market.departure.mu,
            "sigma": pt.market.departure.sigma,
        })
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(rows: list[dict], columns: list[str], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_text(path: str | Path, text: str):
    if str(path) == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def read_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# --- calibration and heatmap -------------------------------------------------


def run_calibration(grid: GridSpec, sim: MarketConfig, k: int, hp: TrainParams, model_path: str | Path,
                    dataset_path: str | Path | None = None, workers: int = 1,
                    comment: str | None = None) -> tuple[GapModel, TrainReport]:
    samples = build_training_grid(grid, sim, k, workers=workers)
    if dataset_path is not None:
        save_dataset(samples, dataset_path, comment=comment)
    model, report = train(samples, hp)
    model.save(model_path)
    report_path = Path(model_path).with_suffix(".report.json")
    rep = asdict(report)
    rep.pop("history")
    report_path.write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    return model, report


def run_heatmap(grid: GridSpec, sim: MarketConfig, k: int, taus: list[float], model, out_dir: str | Path,
                dataset_path: str | Path | None = None, workers: int = 1,
                comment: str | None = None) -> dict[str, Path]:
    """Oracle gap per grid point, oracle contours and model contours per tau."""
    if dataset_path is not None and Path(dataset_path).exists():
        samples = load_dataset(dataset_path)
    else:
        samples = build_training_grid(grid, sim, k, workers=workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    heat_rows = [
        {"mu": s.mu, "sigma": s.sigma, "loss_greedy": s.loss_greedy, "loss_patient": s.loss_patient,
         "score": s.score, "capped_flag": s.capped}
        for s in samples
    ]
    surface = samples_surface(samples, grid)
    oracle_rows, fitted_rows = [], []
    for tau in taus:
        oracle_rows += [{"tau": tau, "mu": m, "sigma": s} for m, s in surface_contour(surface, grid.mus, grid.sigmas, tau)]
        if model is not None:
            fitted_rows += [{"tau": tau, "mu": m, "sigma": s} for m, s in extract_decision_boundary(model, tau, grid)]
    files = {
        "heatmap": out / "heatmap.csv",
        "oracle": out / "contours_oracle.csv",
        "fitted": out / "contours_fitted.csv",
    }
    write_text(files["heatmap"], render_csv(heat_rows, HEATMAP_COLUMNS, comment))
    write_text(files["oracle"], render_csv(oracle_rows, CONTOUR_COLUMNS, comment))
    write_text(files["fitted"], render_csv(fitted_rows, CONTOUR_COLUMNS, comment))
    return files


# --- schedules --------------------------------------------------------------


def schedule_rows(trace, start: float, end: float) -> list[dict]:
    sched = trace.policy_schedule
    rows = []
    for i, e in enumerate(sched):
        w_end = sched[i + 1].start if i + 1 < len(sched) else trace.T
        if start - 1e-9 <= e.start < end - 1e-9:
            rows.append({
                "window": e.index, "start": e.start, "end": w_end, "policy": e.kind.value,
                "mu_hat": None if math.isnan(e.mu) else e.mu,
                "sigma_hat": None if math.isnan(e.sigma) else e.sigma,
                "score_hat": None if math.isnan(e.score) else e.score,
                "n_samples": e.n_samples,
            })
    return rows


def run_schedule_report(hybrid: HybridConfig, sim: MarketConfig, start: float, end: float) -> tuple[list[dict], object]:
    trace = simulate(sim, HybridPolicy(hybrid))
    return schedule_rows(trace, start, end), trace


def comment_for(settings: dict, what: str) -> str:
    return f"hybridmatch {what} config_fingerprint={fingerprint(settings)}"

"""Loss-gap surface: simulation oracle, grid labelling and a small MLP.

The gap score is ``L_greedy / L_patient - 1``. A trained :class:`GapModel`
maps departure parameters ``(mu, sigma)`` to a predicted score (or, in
classifier mode, directly to a policy at the training threshold).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .market import LogNormalParams, MarketConfig, simulate
from .metrics import compute_loss
from .policies import GreedyPolicy, PatientPolicy
from .rng import derive_seed

SCORE_CAP = 10.0
MODEL_FORMAT_VERSION = 1
DATASET_COLUMNS = ["mu", "sigma", "loss_greedy", "loss_patient", "score", "k", "d", "capped_flag"]


class GradientCheckError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class GapSample:
    mu: float
    sigma: float
    loss_greedy: float
    loss_patient: float
    score: float
    k: int
    d: float
    capped: bool = False


def gap_score(loss_greedy: float, loss_patient: float) -> float:
    if loss_patient > 0:
        return loss_greedy / loss_patient - 1.0
    return 0.0 if loss_greedy == 0 else math.inf


def oracle_seeds(master: int, k: int) -> list[int]:
    return [derive_seed(master, "oracle", r) for r in range(k)]


def score_oracle(params: LogNormalParams, sim: MarketConfig, k: int) -> GapSample:
    """Average Greedy and Patient loss over ``k`` paired runs.

    Run ``r`` uses the same seed for both policies (and for every grid
    point), so arrivals, standard-normal sojourn draws and the compatibility
    graph are shared; only the policy and the departure scale differ.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lg, lp = [], []
    for seed in oracle_seeds(sim.seed, k):
        cfg = replace(sim, seed=seed, departure=params)
        lg.append(compute_loss(simulate(cfg, GreedyPolicy())))
        lp.append(compute_loss(simulate(cfg, PatientPolicy())))
    g, p = float(np.mean(lg)), float(np.mean(lp))
    return GapSample(params.mu, params.sigma, g, p, gap_score(g, p), k, sim.d)


@dataclass(frozen=True)
class GridSpec:
    mu_min: float = -2.0
    mu_max: float = 2.0
    mu_step: float = 0.2
    sigma_min: float = 0.05
    sigma_max: float = 2.0
    sigma_step: float = 0.05

    @staticmethod
    def _axis(lo: float, hi: float, step: float) -> np.ndarray:
        n = int(round((hi - lo) / step)) + 1
        return np.round(lo + step * np.arange(n), 10)

    @property
    def mus(self) -> np.ndarray:
        return self._axis(self.mu_min, self.mu_max, self.mu_step)

    @property
    def sigmas(self) -> np.ndarray:
        return self._axis(self.sigma_min, self.sigma_max, self.sigma_step)

    def points(self) -> list[tuple[float, float]]:
        return [(float(m), float(s)) for s in self.sigmas for m in self.mus]


def _label_point(args):
    mu, sigma, sim, k = args
    return score_oracle(LogNormalParams(mu, sigma), sim, k)


def build_training_grid(
    grid: GridSpec, sim: MarketConfig, k: int, workers: int = 1, path: str | Path | None = None
) -> list[GapSample]:
    tasks = [(mu, s, sim, k) for mu, s in grid.points()]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            samples = list(ex.map(_label_point, tasks, chunksize=8))
    else:
        samples = [_label_point(t) for t in tasks]
    for s in samples:
        if not math.isfinite(s.score):
            s.score, s.capped = SCORE_CAP, True
        elif s.score > SCORE_CAP:
            s.score, s.capped = SCORE_CAP, True
    if path is not None:
        save_dataset(samples, path)
    return samples


def save_dataset(samples: list[GapSample], path: str | Path, comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for s in samples:
            w.writerow([repr(s.mu), repr(s.sigma), repr(s.loss_greedy), repr(s.loss_patient),
                        repr(s.score), s.k, repr(s.d), int(s.capped)])


def load_dataset(path: str | Path) -> list[GapSample]:
    with open(path) as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [
            GapSample(float(r["mu"]), float(r["sigma"]), float(r["loss_greedy"]),
                      float(r["loss_patient"]), float(r["score"]), int(r["k"]),
                      float(r["d"]), bool(int(r["capped_flag"])))
            for r in rows
        ]


# --- the network -----------------------------------------------------------


@dataclass
class GapModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    box_lo: np.ndarray
    box_hi: np.ndarray
    mode: str = "regress"
    tau: float | None = None
    # regress mode fits asinh(score); predictions are mapped back with sinh
    target: str = "asinh"

    def __post_init__(self):
        if self.layer_sizes[0] != 2 or self.layer_sizes[-1] != 1:
            raise ValueError(f"layer sizes must run 2 -> ... -> 1, got {self.layer_sizes}")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[l], self.layer_sizes[l + 1]) or b.shape != (self.layer_sizes[l + 1],):
                raise ValueError(f"layer {l} has shapes {W.shape}, {b.shape}")
        if np.any(self.box_hi <= self.box_lo):
            raise ValueError("normalisation box is degenerate")
        if self.mode not in ("regress", "classify"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "classify" and self.tau is None:
            raise ValueError("classify mode needs its training tau")

    @classmethod
    def init(cls, layer_sizes, box_lo, box_hi, seed: int = 0, **kw) -> GapModel:
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(list(layer_sizes), weights, biases, np.asarray(box_lo, float), np.asarray(box_hi, float), **kw)

    def normalise(self, X: np.ndarray) -> np.ndarray:
        X = np.clip(X, self.box_lo, self.box_hi)
        return 2.0 * (X - self.box_lo) / (self.box_hi - self.box_lo) - 1.0

    def raw(self, X: np.ndarray) -> np.ndarray:
        """Network output before the output link, shape (n,)."""
        h = self.normalise(np.atleast_2d(np.asarray(X, float)))
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        z = self.raw(X)
        if self.mode == "classify":
            # +inf / -inf make the runtime threshold inert: the class is the decision
            return np.where(z >= 0.0, math.inf, -math.inf)
        return np.sinh(z) if self.target == "asinh" else z

    def predict(self, mu: float, sigma: float) -> float:
        return float(self.predict_many(np.array([[mu, sigma]]))[0])

    def probability(self, X: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.raw(X)))

    # --- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "layer_sizes": self.layer_sizes,
            "activation": {"hidden": "tanh", "output": "identity" if self.mode == "regress" else "logistic"},
            "mode": self.mode,
            "tau": self.tau,
            "target": self.target,
            "box": {"lo": self.box_lo.tolist(), "hi": self.box_hi.tolist()},
            "weights": [W.ravel(order="C").tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> GapModel:
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')!r}")
        sizes = d["layer_sizes"]
        weights = [np.asarray(w, float).reshape(a, b) for w, a, b in zip(d["weights"], sizes[:-1], sizes[1:])]
        biases = [np.asarray(b, float) for b in d["biases"]]
        return cls(sizes, weights, biases, np.asarray(d["box"]["lo"], float), np.asarray(d["box"]["hi"], float),
                   mode=d["mode"], tau=d["tau"], target=d.get("target", "identity"))

    @classmethod
    def load(cls, path: str | Path) -> GapModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ConstantGap:
    """Stand-in gap model that predicts the same score everywhere."""

    value: float

    def predict(self, mu: float, sigma: float) -> float:
        return self.value


# --- training ---------------------------------------------------------------


def _params(model: GapModel) -> list[np.ndarray]:
    return [a for pair in zip(model.weights, model.biases) for a in pair]


def loss_and_grads(model: GapModel, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Objective and back-propagated gradients for every weight and bias.

    Regress mode uses 0.5 * mean squared error on the raw output; classify
    mode uses mean binary cross-entropy with a logistic output.
    """
    hs = [model.normalise(X)]
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        hs.append(np.tanh(hs[-1] @ W + b))
    z = (hs[-1] @ model.weights[-1] + model.biases[-1])[:, 0]
    n = len(y)
    if model.mode == "regress":
        r = z - y
        loss = 0.5 * float(np.mean(r * r))
        dz = r / n
    else:
        # log(1 + e^z) - y z, stable form
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (1.0 / (1.0 + np.exp(-z)) - y) / n
    delta = dz[:, None]
    grads_w, grads_b = [], []
    for l in range(len(model.weights) - 1, -1, -1):
        grads_w.append(hs[l].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if l > 0:
            delta = (delta @ model.weights[l].T) * (1.0 - hs[l] ** 2)
    grads_w.reverse()
    grads_b.reverse()
    return loss, [g for pair in zip(grads_w, grads_b) for g in pair]


def gradient_check(model: GapModel, X: np.ndarray, y: np.ndarray, n_coords: int = 10,
                   eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    params = _params(model)
    _, grads = loss_and_grads(model, X, y)
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(n_coords):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[which].reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + eps
        up, _ = loss_and_grads(model, X, y)
        flat[idx] = orig - eps
        down, _ = loss_and_grads(model, X, y)
        flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[which].reshape(-1)[idx]
        denom = max(abs(numeric), abs(analytic), 1e-7)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


@dataclass
class TrainParams:
    layer_sizes: tuple[int, ...] = (2, 16, 16, 1)
    lr: float = 0.05
    epochs: int = 20000
    holdout: float = 0.2
    mode: str = "regress"
    tau: float = 0.10
    seed: int = 0
    patience: int = 2000
    min_delta: float = 1e-7


@dataclass
class TrainReport:
    final_loss: float
    heldout_accuracy: float
    heldout_rmse: float
    epochs: int
    grad_check_error: float
    n_train: int
    n_heldout: int
    history: list[float] = field(default_factory=list, repr=False)


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_held = int(round(holdout * n))
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def train_arrays(X: np.ndarray, scores: np.ndarray, hp: TrainParams,
                 box: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[GapModel, TrainReport]:
    X = np.asarray(X, float)
    scores = np.asarray(scores, float)
    if len(X) == 0:
        raise TrainingError("empty dataset")
    lo, hi = box if box is not None else (X.min(axis=0), X.max(axis=0))
    lo, hi = np.asarray(lo, float).copy(), np.asarray(hi, float).copy()
    flat = hi <= lo
    lo[flat] -= 0.5
    hi[flat] += 0.5
    model = GapModel.init(hp.layer_sizes, lo, hi, seed=hp.seed, mode=hp.mode,
                          tau=hp.tau if hp.mode == "classify" else None)
    if hp.mode == "regress":
        y = np.arcsinh(scores)
    else:
        y = (scores >= hp.tau).astype(float)
    if hp.holdout > 0 and len(X) >= 5:
        tr, ho = split_indices(len(X), hp.holdout, hp.seed)
    else:
        tr, ho = np.arange(len(X)), np.arange(0)

    check = gradient_check(model, X[tr], y[tr], seed=hp.seed)
    if not check < 1e-4:
        raise GradientCheckError(f"analytic gradient disagrees with finite differences (rel err {check:.3e})")

    params = _params(model)
    history = []
    best = math.inf
    since_best = 0
    epoch = 0
    loss = math.nan
    for epoch in range(1, hp.epochs + 1):
        loss, grads = loss_and_grads(model, X[tr], y[tr])
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        for p_, g in zip(params, grads):
            p_ -= hp.lr * g
        history.append(loss)
        if loss < best - hp.min_delta:
            best, since_best = loss, 0
        else:
            since_best += 1
            if since_best >= hp.patience:
                break
    loss, _ = loss_and_grads(model, X[tr], y[tr])

    if len(ho):
        pred = model.predict_many(X[ho])
        tau = hp.tau
        acc = float(np.mean((pred >= tau) == (scores[ho] >= tau)))
        rmse = float(np.sqrt(np.mean((pred - scores[ho]) ** 2))) if hp.mode == "regress" else math.nan
    else:
        acc, rmse = math.nan, math.nan
    return model, TrainReport(loss, acc, rmse, epoch, check, len(tr), len(ho), history)


def train(dataset: list[GapSample], hp: TrainParams) -> tuple[GapModel, TrainReport]:
    X = np.array([[s.mu, s.sigma] for s in dataset])
    scores = np.array([s.score for s in dataset])
    return train_arrays(X, scores, hp)


def predict_score(model, params: LogNormalParams) -> float:
    return float(model.predict(params.mu, params.sigma))


# --- decision boundaries ----------------------------------------------------


def crossings_along(xs: np.ndarray, values: np.ndarray, tau: float) -> list[float]:
    """Positions where ``values - tau`` changes sign, linearly interpolated."""
    out = []
    f = np.asarray(values, float) - tau
    for a in range(len(xs) - 1):
        fa, fb = f[a], f[a + 1]
        if fa == 0.0:
            out.append(float(xs[a]))
        elif fa * fb < 0:
            out.append(float(xs[a] + (xs[a + 1] - xs[a]) * fa / (fa - fb)))
    if len(f) and f[-1] == 0.0:
        out.append(float(xs[-1]))
    return out


def surface_contour(surface: np.ndarray, mus: np.ndarray, sigmas: np.ndarray, tau: float) -> list[tuple[float, float]]:
    """(mu, sigma) points where a surface indexed [sigma, mu] crosses ``tau``."""
    pts = []
    for si, s in enumerate(sigmas):
        pts.extend((m, float(s)) for m in crossings_along(mus, surface[si], tau))
    return pts


def model_surface(model, grid: GridSpec) -> np.ndarray:
    mus, sigmas = grid.mus, grid.sigmas
    X = np.array([[m, s] for s in sigmas for m in mus])
    if hasattr(model, "predict_many"):
        vals = model.predict_many(X)
    else:
        vals = np.array([model.predict(m, s) for m, s in X])
    return vals.reshape(len(sigmas), len(mus))


def samples_surface(samples: list[GapSample], grid: GridSpec) -> np.ndarray:
    lookup = {(round(s.mu, 6), round(s.sigma, 6)): s.score for s in samples}
    return np.array([[lookup[(round(float(m), 6), round(float(s), 6))] for m in grid.mus] for s in grid.sigmas])


def extract_decision_boundary(model, tau: float, grid: GridSpec) -> list[tuple[float, float]]:
    return surface_contour(model_surface(model, grid), grid.mus, grid.sigmas, tau)


def boundary_displacement(fitted: list[tuple[float, float]], oracle: list[tuple[float, float]]) -> float:
    """Mean |mu| distance from each fitted crossing to the nearest oracle
    crossing on the same sigma line (lines missing from either side skipped)."""
    by_sigma: dict[float, list[float]] = {}
    for m, s in oracle:
        by_sigma.setdefault(round(s, 6), []).append(m)
    dists = []
    for m, s in fitted:
        ref = by_sigma.get(round(s, 6))
        if ref:
            dists.append(min(abs(m - r) for r in ref))
    return float(np.mean(dists)) if dists else math.nan

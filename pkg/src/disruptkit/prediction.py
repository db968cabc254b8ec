"""Incident-duration regression benchmark.

Each model is cross-validated against two targets for the same incidents:
the duration estimated from the speed disruption and the reported duration.
Hyper-parameters are picked by a deterministic grid search inside every
training fold, and features are z-scored with training-fold statistics.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import ValidationError

log = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-6
TARGETS = ("estimated", "reported")


# ---------------------------------------------------------------------------
# Scores


def _scores_input(actual, predicted):
    a = np.asarray(actual, dtype=float)
    f = np.asarray(predicted, dtype=float)
    if a.shape != f.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {f.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, f


def rmse(actual, predicted) -> float:
    a, f = _scores_input(actual, predicted)
    return float(np.sqrt(np.mean((a - f) ** 2)))


def mape(actual, predicted) -> float:
    """Mean absolute percentage error against the actual values, in percent."""
    a, f = _scores_input(actual, predicted)
    if np.any(a <= 0):
        raise ValueError("MAPE needs strictly positive actual values")
    return float(100.0 * np.mean(np.abs(a - f) / a))


def kfold_indices(n: int, k: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Shuffle 0..n-1 with ``seed`` and cut it into ``k`` folds differing in size by at most one."""
    if k < 2:
        raise ValueError("need at least two folds")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


# ---------------------------------------------------------------------------
# Models


class KNNRegressor:
    """Mean target of the k nearest training rows (Euclidean; ties by row order)."""

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValueError("k must be positive")
        self.k = int(k)

    def fit(self, X, y):
        self.X_ = np.asarray(X, dtype=float)
        self.y_ = np.asarray(y, dtype=float)
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        k = min(self.k, len(self.X_))
        d2 = (
            np.sum(X**2, axis=1)[:, None]
            - 2 * X @ self.X_.T
            + np.sum(self.X_**2, axis=1)[None, :]
        )
        d2 = np.maximum(d2, 0.0)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return self.y_[nn].mean(axis=1)


class LinearLeastSquares:
    """Ordinary least squares with intercept.

    A rank-deficient design falls back to ridge with a tiny penalty on the
    slopes; ``ridge_fallback_`` records whether that happened.
    """

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        A = np.column_stack([np.ones(len(X)), X])
        self.ridge_fallback_ = np.linalg.matrix_rank(A) < A.shape[1]
        if self.ridge_fallback_:
            log.info("singular design matrix; using ridge with lambda=%g", RIDGE_FALLBACK)
            penalty = RIDGE_FALLBACK * np.eye(A.shape[1])
            penalty[0, 0] = 0.0
            self.coef_ = np.linalg.solve(A.T @ A + penalty, A.T @ y)
        else:
            self.coef_ = np.linalg.lstsq(A, y, rcond=None)[0]
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return self.coef_[0] + X @ self.coef_[1:]


class GradientBoostedTrees:
    """Least-squares gradient boosting over histogram-binned regression trees.

    Features are cut into at most ``n_bins`` quantile bins once per fit; each
    tree grows depth-first to ``max_depth`` choosing the split with the largest
    squared-error reduction. With ``subsample < 1`` every tree sees a seeded
    random subset of rows.
    """

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int = 3,
        learning_rate: float = 0.1,
        min_leaf: int = 5,
        n_bins: int = 64,
        subsample: float = 1.0,
        seed: int = 0,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_leaf = min_leaf
        self.n_bins = n_bins
        self.subsample = subsample
        self.seed = seed

    def _bin_edges(self, X):
        edges = []
        qs = np.linspace(0, 1, self.n_bins + 1)[1:-1]
        for j in range(X.shape[1]):
            u = np.unique(X[:, j])
            if len(u) <= self.n_bins:
                e = (u[:-1] + u[1:]) / 2
            else:
                e = np.unique(np.quantile(X[:, j], qs))
            edges.append(e)
        return edges

    def _binned(self, X):
        return np.column_stack([np.searchsorted(e, X[:, j], side="right") for j, e in enumerate(self.edges_)])

    def _grow(self, B, g, rows, depth):
        # node: ("leaf", value) or ("split", feature, threshold_bin, left, right)
        value = float(g[rows].mean())
        if depth >= self.max_depth or len(rows) < 2 * self.min_leaf:
            return ("leaf", value)
        nb = self.n_bins + 1
        Br = B[rows]
        n_f = B.shape[1]
        flat = Br + np.arange(n_f) * nb
        sums = np.bincount(flat.ravel(), weights=np.repeat(g[rows], n_f), minlength=n_f * nb).reshape(n_f, nb)
        cnts = np.bincount(flat.ravel(), minlength=n_f * nb).reshape(n_f, nb)
        ls, lc = np.cumsum(sums, axis=1)[:, :-1], np.cumsum(cnts, axis=1)[:, :-1]
        total_s, total_c = sums[0].sum(), len(rows)
        rs, rc = total_s - ls, total_c - lc
        valid = (lc >= self.min_leaf) & (rc >= self.min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(valid, ls**2 / lc + rs**2 / rc, -np.inf)
        j, b = np.unravel_index(np.argmax(gain), gain.shape)
        if not np.isfinite(gain[j, b]) or gain[j, b] <= total_s**2 / total_c + 1e-12:
            return ("leaf", value)
        go_left = Br[:, j] <= b
        return (
            "split",
            int(j),
            int(b),
            self._grow(B, g, rows[go_left], depth + 1),
            self._grow(B, g, rows[~go_left], depth + 1),
        )

    def _apply(self, node, B):
        out = np.empty(len(B))
        stack = [(node, np.arange(len(B)))]
        while stack:
            nd, idx = stack.pop()
            if nd[0] == "leaf":
                out[idx] = nd[1]
                continue
            _, j, b, left, right = nd
            m = B[idx, j] <= b
            stack.append((left, idx[m]))
            stack.append((right, idx[~m]))
        return out

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self.edges_ = self._bin_edges(X)
        B = self._binned(X)
        rng = np.random.default_rng(self.seed)
        self.init_ = float(y.mean())
        pred = np.full(len(y), self.init_)
        self.trees_ = []
        all_rows = np.arange(len(y))
        for _ in range(self.n_trees):
            resid = y - pred
            if self.subsample < 1.0:
                m = max(2 * self.min_leaf, int(round(self.subsample * len(y))))
                rows = np.sort(rng.choice(len(y), size=m, replace=False))
            else:
                rows = all_rows
            tree = self._grow(B, resid, rows, 0)
            self.trees_.append(tree)
            pred = pred + self.learning_rate * self._apply(tree, B)
        return self

    def predict(self, X):
        B = self._binned(np.asarray(X, dtype=float))
        out = np.full(len(B), self.init_)
        for tree in self.trees_:
            out += self.learning_rate * self._apply(tree, B)
        return out


class _SVRPlugin:
    """Support-vector regression via scikit-learn, if installed."""

    def __init__(self, C: float = 100.0, epsilon: float = 5.0, gamma: str | float = "scale"):
        try:
            from sklearn.svm import SVR
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ValidationError("the svm model needs scikit-learn (pip install artifact[svm])") from exc
        self._model = SVR(C=C, epsilon=epsilon, gamma=gamma)

    def fit(self, X, y):
        self._model.fit(X, y)
        return self

    def predict(self, X):
        return self._model.predict(X)


@dataclass(frozen=True)
class ModelSpec:
    """A named model family with fixed parameters and a tuning grid."""

    name: str
    factory: Callable[..., object]
    params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def candidates(self) -> list[dict]:
        if not self.grid:
            return [dict(self.params)]
        keys = sorted(self.grid)
        return [{**self.params, **dict(zip(keys, vals))} for vals in product(*(self.grid[k] for k in keys))]

    def build(self, **params):
        return self.factory(**params)


MODEL_REGISTRY: dict[str, ModelSpec] = {
    "knn": ModelSpec("knn", KNNRegressor, grid={"k": [3, 5, 10, 20]}),
    "linear": ModelSpec("linear", LinearLeastSquares),
    "tree": ModelSpec(
        "tree",
        GradientBoostedTrees,
        params={"n_trees": 100, "learning_rate": 0.1},
        grid={"max_depth": [2, 3]},
    ),
    "svm": ModelSpec("svm", _SVRPlugin, grid={"C": [10.0, 100.0]}),
}
MANDATORY_MODELS = ("knn", "linear", "tree")


def register_model(spec: ModelSpec) -> None:
    """Make a plug-in model available by name to :func:`run_comparison` and the CLI."""
    MODEL_REGISTRY[spec.name] = spec


def resolve_model(model) -> ModelSpec:
    """Accept a :class:`ModelSpec`, a registry name, or ``name:key=value,...``."""
    if isinstance(model, ModelSpec):
        return model
    name, _, rest = str(model).partition(":")
    if name not in MODEL_REGISTRY:
        raise ValidationError(f"unknown model {name!r}; available: {', '.join(sorted(MODEL_REGISTRY))}")
    base = MODEL_REGISTRY[name]
    if not rest:
        return base
    fixed = {}
    for item in rest.split(";"):
        key, _, val = item.partition("=")
        fixed[key.strip()] = json.loads(val)
    grid = {k: v for k, v in base.grid.items() if k not in fixed}
    return ModelSpec(str(model), base.factory, {**base.params, **fixed}, grid)


def _standardize(X_train, X_test):
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X_train - mu) / sd, (X_test - mu) / sd


def _with_seed(spec: ModelSpec, params: dict, seed: int) -> dict:
    if spec.factory is GradientBoostedTrees and "seed" not in params:
        return {**params, "seed": seed}
    return params


def fit_predict(model, X_train, y_train, X_test, params: dict | None = None, seed: int = 0) -> np.ndarray:
    """Fit on training rows only and predict the test rows (features z-scored on training stats)."""
    spec = resolve_model(model)
    X_train = np.asarray(X_train, dtype=float)
    X_test = np.asarray(X_test, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    if not (np.all(np.isfinite(X_train)) and np.all(np.isfinite(X_test)) and np.all(np.isfinite(y_train))):
        raise ValidationError("inputs must be finite")
    if len(X_train) != len(y_train):
        raise ValidationError("X_train and y_train differ in length")
    Xtr, Xte = _standardize(X_train, X_test)
    params = spec.candidates()[0] if params is None else params
    est = spec.build(**_with_seed(spec, params, seed))
    est.fit(Xtr, y_train)
    return np.asarray(est.predict(Xte), dtype=float)


def tune(spec: ModelSpec, X, y, seed: int, nested: bool = False, inner_folds: int = 3) -> dict:
    """Pick the grid point with the lowest validation RMSE, using training rows only.

    Default validation is one seeded 80/20 hold-out split; ``nested`` switches
    to an inner k-fold. Ties go to the first grid point.
    """
    cands = spec.candidates()
    if len(cands) == 1:
        return cands[0]
    n = len(y)
    if nested and n >= inner_folds * 2:
        splits = kfold_indices(n, inner_folds, seed)
        pairs = [(np.setdiff1d(np.arange(n), f), f) for f in splits]
    else:
        perm = np.random.default_rng(seed).permutation(n)
        cut = max(1, int(round(0.2 * n)))
        pairs = [(np.sort(perm[cut:]), np.sort(perm[:cut]))]
    best, best_score = cands[0], math.inf
    for params in cands:
        errs = [rmse(y[va], fit_predict(spec, X[tr], y[tr], X[va], params, seed)) for tr, va in pairs]
        score = float(np.mean(errs))
        if score < best_score:
            best, best_score = params, score
    return best


# ---------------------------------------------------------------------------
# Dataset and comparison


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y_reported: np.ndarray
    y_estimated: np.ndarray
    feature_names: tuple[str, ...] = ()
    incident_ids: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        yr = np.asarray(self.y_reported, dtype=float)
        ye = np.asarray(self.y_estimated, dtype=float)
        if X.ndim != 2 or not (len(X) == len(yr) == len(ye)):
            raise ValidationError("X, y_reported and y_estimated must have matching row counts")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(yr)) and np.all(np.isfinite(ye))):
            raise ValidationError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y_reported", yr)
        object.__setattr__(self, "y_estimated", ye)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "incident_ids", tuple(self.incident_ids))

    def __len__(self):
        return len(self.X)

    def target(self, name: str) -> np.ndarray:
        if name == "estimated":
            return self.y_estimated
        if name == "reported":
            return self.y_reported
        raise ValueError(f"unknown target {name!r}")


@dataclass
class CellResult:
    model: str
    target: str
    rmse: float
    mape: float
    fold_rmse: list[float]
    fold_mape: list[float]
    fold_params: list[dict]


@dataclass
class EvaluationReport:
    """Cross-validated scores per (model, target); RMSE/MAPE are means over folds."""

    cells: list[CellResult]
    seed: int
    n_folds: int
    n_rows: int
    nested: bool = False
    feature_names: list[str] = field(default_factory=list)

    def cell(self, model: str, target: str) -> CellResult:
        for c in self.cells:
            if c.model == model and c.target == target:
                return c
        raise KeyError((model, target))

    @property
    def models(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.model not in seen:
                seen.append(c.model)
        return seen

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_folds": self.n_folds,
            "n_rows": self.n_rows,
            "nested": self.nested,
            "feature_names": list(self.feature_names),
            "cells": [asdict(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            cells=[CellResult(**c) for c in d["cells"]],
            seed=d["seed"],
            n_folds=d["n_folds"],
            n_rows=d["n_rows"],
            nested=d.get("nested", False),
            feature_names=list(d.get("feature_names", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))

    def table_rows(self) -> list[dict]:
        rows = []
        for m in self.models:
            est, rep = self.cell(m, "estimated"), self.cell(m, "reported")
            rows.append({"model": m, "RMSE_est": est.rmse, "RMSE_rep": rep.rmse, "MAPE_est": est.mape, "MAPE_rep": rep.mape})
        return rows

    def write_table(self, path) -> None:
        cols = ("model", "RMSE_est", "RMSE_rep", "MAPE_est", "MAPE_rep")
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.table_rows():
                writer.writerow([r["model"], *(f"{r[c]:.4f}" for c in cols[1:])])


def _run_cell(spec: ModelSpec, dataset: Dataset, target: str, folds, seed: int, nested: bool) -> CellResult:
    y = dataset.target(target)
    n = len(y)
    f_rmse, f_mape, f_params = [], [], []
    for i, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        if len(train) < 2:
            raise ValidationError(f"fold {i} leaves fewer than two training rows")
        Xtr, ytr = dataset.X[train], y[train]
        params = tune(spec, Xtr, ytr, seed + 1000 * (i + 1), nested)
        pred = fit_predict(spec, Xtr, ytr, dataset.X[test], params, seed)
        f_rmse.append(rmse(y[test], pred))
        f_mape.append(mape(y[test], pred))
        f_params.append(params)
    return CellResult(spec.name, target, float(np.mean(f_rmse)), float(np.mean(f_mape)), f_rmse, f_mape, f_params)


def run_comparison(
    dataset: Dataset,
    models: Sequence = MANDATORY_MODELS,
    k: int = 10,
    seed: int = 7,
    nested: bool = False,
    threads: int = 1,
) -> EvaluationReport:
    """Cross-validate every model on both targets with shared folds."""
    if not models:
        raise ValidationError("no models requested")
    specs = [resolve_model(m) for m in models]
    folds = kfold_indices(len(dataset), k, seed)
    jobs = [(s, t) for s in specs for t in TARGETS]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(lambda j: _run_cell(j[0], dataset, j[1], folds, seed, nested), jobs))
    else:
        cells = [_run_cell(s, dataset, t, folds, seed, nested) for s, t in jobs]
    return EvaluationReport(cells, seed, k, len(dataset), nested, list(dataset.feature_names))

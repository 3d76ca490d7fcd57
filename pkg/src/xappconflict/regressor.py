"""Gradient-boosted regression trees with exact greedy splits (squared error).

Trees are stored as flat node arrays; node 0 is the root and a leaf has
``feature == -1``. A sample goes left when ``x[feature] <= threshold``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from xappconflict.dataset import Dataset
from xappconflict.errors import DataError, EstimationError, ParseError

log = logging.getLogger(__name__)

MODEL_FORMAT = "xappconflict.gbt/1"


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise DataError(f"invalid boosting parameters {self}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise DataError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows, np.where(inner, f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_nested(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"value": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_nested(int(self.left[i])),
            "right": self.to_nested(int(self.right[i])),
        }

    @classmethod
    def from_nested(cls, root: Mapping) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "value" in node:
                value[i] = float(node["value"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                left[i] = add(node["left"])
                right[i] = add(node["right"])
            return i

        add(root)
        return cls(
            np.asarray(feature, dtype=np.int64),
            np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
            np.asarray(value, dtype=np.float64),
        )


@dataclass
class GbtModel:
    target: str
    feature_names: list[str]
    trees: list[Tree]
    base_prediction: float
    learning_rate: float
    params: GbtParams = field(default_factory=GbtParams)
    n_train: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d = len(self.feature_names)
        for t in self.trees:
            if (t.feature >= d).any():
                raise DataError(f"tree splits on a feature index >= {d}")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise DataError(f"expected a feature vector of length {self.n_features}, got shape {x.shape}")
        return float(self.predict_batch(x[None, :])[0])

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected an (n, {self.n_features}) feature matrix, got shape {X.shape}")
        total = np.zeros(len(X))
        for t in self.trees:
            total += t.predict(X)
        return self.base_prediction + self.learning_rate * total

    __call__ = predict_batch

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "target": self.target,
            "feature_names": list(self.feature_names),
            "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate,
            "params": asdict(self.params),
            "n_train": self.n_train,
            "metadata": self.metadata,
            "trees": [t.to_nested() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GbtModel":
        if d.get("format") != MODEL_FORMAT:
            raise ParseError(f"unsupported model format {d.get('format')!r}")
        return cls(
            target=d["target"],
            feature_names=list(d["feature_names"]),
            trees=[Tree.from_nested(t) for t in d["trees"]],
            base_prediction=float(d["base_prediction"]),
            learning_rate=float(d["learning_rate"]),
            params=GbtParams(**d["params"]),
            n_train=int(d.get("n_train", 0)),
            metadata=dict(d.get("metadata", {})),
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GbtModel":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ParseError("model file not found", path=path) from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed model: {exc}", path=path) from exc


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    """Highest-gain ``(gain, feature, threshold)`` or ``None``.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    n = len(r)
    total = r.sum()
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        cs = np.cumsum(r[order])[:-1]
        n_left = np.arange(1, n)
        gain = cs**2 / n_left + (total - cs) ** 2 / (n - n_left) - total**2 / n
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0]:
            best = (float(gain[k]), j, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _grow(X: np.ndarray, r: np.ndarray, params: GbtParams) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def node(idx, depth):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[idx].mean()))
        if depth < params.max_depth and len(idx) >= 2 * params.min_samples_leaf:
            split = _best_split(X[idx], r[idx], params.min_samples_leaf)
            if split is not None and split[0] > 0.0:
                _, j, thr = split
                go_left = X[idx, j] <= thr
                feature[i] = j
                threshold[i] = thr
                left[i] = node(idx[go_left], depth + 1)
                right[i] = node(idx[~go_left], depth + 1)
        return i

    node(np.arange(len(r)), 0)
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value),
    )


def fit_arrays(
    X: np.ndarray,
    y: np.ndarray,
    feature_names: Sequence[str],
    target: str,
    params: GbtParams = GbtParams(),
    history: list | None = None,
) -> GbtModel:
    """Boost ``params.n_trees`` trees on residuals of the squared-error loss.

    Rows are put into a canonical order first, so the fitted model does not
    depend on the order of the training records. ``history`` (when given)
    receives the training SSE after every round, starting with round 0.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or X.shape[1] != len(feature_names):
        raise DataError(f"shape mismatch: X {X.shape}, y {y.shape}, {len(feature_names)} feature names")
    if len(np.unique(y)) < 2:
        raise EstimationError(f"degenerate target {target!r}: fewer than two distinct values")
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]

    base = float(y.mean())
    pred = np.full(len(y), base)
    trees = []
    if history is not None:
        history.append(float(((y - pred) ** 2).sum()))
    for _ in range(params.n_trees):
        tree = _grow(X, y - pred, params)
        trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
        if history is not None:
            history.append(float(((y - pred) ** 2).sum()))
    return GbtModel(target, list(feature_names), trees, base, params.learning_rate, params, n_train=len(y))


def feature_columns(data: Dataset, include_context: bool = True) -> list[str]:
    roles = ("rcp", "context") if include_context else ("rcp",)
    return [c.name for c in data.schema if c.role in roles]


def fit(
    train: Dataset,
    target: str,
    params: GbtParams = GbtParams(),
    features: Sequence[str] | None = None,
    include_context: bool = True,
) -> GbtModel:
    """Fit a boosted model of KPI ``target`` on the RCP (and context) columns."""
    if target not in train:
        raise DataError(f"unknown target {target!r}")
    if train.column(target).role != "kpi":
        raise DataError(f"target {target!r} is not a kpi column")
    names = list(features) if features is not None else feature_columns(train, include_context)
    model = fit_arrays(train.matrix(names), train[target], names, target, params)
    log.debug("fitted %s on %d rows, %d features", target, len(train), len(names))
    return model


@dataclass(frozen=True)
class FitReport:
    target: str
    r2: float
    rmse: float
    mae: float
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)


def regression_metrics(y: np.ndarray, pred: np.ndarray) -> tuple[float, float, float]:
    """``(r2, rmse, mae)``. With a constant target, R² is 1 for a perfect fit and 0 otherwise."""
    y = np.asarray(y, dtype=np.float64)
    resid = y - np.asarray(pred, dtype=np.float64)
    sse = float((resid**2).sum())
    sst = float(((y - y.mean()) ** 2).sum())
    if sst > 0:
        r2 = 1.0 - sse / sst
    else:
        r2 = 1.0 if sse == 0 else 0.0
    return r2, float(np.sqrt(sse / len(y))), float(np.abs(resid).mean())


def evaluate(model: GbtModel, test: Dataset) -> FitReport:
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    missing = [n for n in model.feature_names + [model.target] if n not in test]
    if missing:
        raise DataError(f"test set lacks columns {missing}")
    r2, rmse, mae = regression_metrics(test[model.target], model.predict_batch(test.matrix(model.feature_names)))
    return FitReport(model.target, r2, rmse, mae, model.n_train, len(test))

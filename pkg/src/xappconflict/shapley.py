"""Exact Shapley attribution by full coalition enumeration.

The value of a coalition ``S`` for a sample ``x`` is the interventional
expectation ``v(S) = mean_b f(x_S, b_rest)`` over background rows ``b``.
For :class:`GbtModel` the expectation is evaluated leaf by leaf: a leaf
contributes when ``x`` satisfies the leaf's conditions on the features in
``S`` and ``b`` satisfies the remaining ones, so ``v(S)`` is exact without
materializing the ``n_samples * n_background * 2^d`` hybrid rows. Any other
model is treated as a black-box callable on ``(n, d)`` arrays.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from xappconflict.dataset import Dataset
from xappconflict.errors import DataError, ParseError
from xappconflict.regressor import GbtModel

MAX_FEATURES = 16


def _check(d: int, background: np.ndarray) -> None:
    if d > MAX_FEATURES:
        raise DataError(f"exact enumeration supports at most {MAX_FEATURES} features, got {d}")
    if len(background) == 0:
        raise DataError("background sample is empty")


def _popcount(masks: np.ndarray) -> np.ndarray:
    return np.array([bin(int(m)).count("1") for m in masks], dtype=np.int64)


def shapley_from_values(v: np.ndarray, d: int) -> np.ndarray:
    """Combine coalition values ``v[:, mask]`` into Shapley values ``(n, d)``."""
    masks = np.arange(2**d)
    sizes = _popcount(masks)
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) if s < d else 0.0 for s in range(d + 1)])
    phi = np.empty((v.shape[0], d))
    for i in range(d):
        without = masks[(masks >> i) & 1 == 0]
        phi[:, i] = (v[:, without | (1 << i)] - v[:, without]) @ weight[sizes[without]]
    return phi


def _leaf_boxes(model: GbtModel):
    """``(lo, hi, value)`` of every leaf: a row reaches it iff ``lo < x <= hi`` on every feature."""
    d = model.n_features
    los, his, vals = [], [], []
    for tree in model.trees:
        stack = [(0, np.full(d, -np.inf), np.full(d, np.inf))]
        while stack:
            i, lo, hi = stack.pop()
            j = tree.feature[i]
            if j < 0:
                los.append(lo)
                his.append(hi)
                vals.append(tree.value[i])
                continue
            t = tree.threshold[i]
            lhi = hi.copy()
            lhi[j] = min(hi[j], t)
            rlo = lo.copy()
            rlo[j] = max(lo[j], t)
            stack.append((tree.right[i], rlo, hi))
            stack.append((tree.left[i], lo, lhi))
    if not vals:
        return np.empty((0, d)), np.empty((0, d)), np.empty(0)
    return np.array(los), np.array(his), np.array(vals)


def _subset_products(passes: np.ndarray, d: int) -> np.ndarray:
    """For a boolean ``(..., d)`` array, the AND over each coalition's features, shape ``(..., 2^d)``."""
    out = np.empty(passes.shape[:-1] + (2**d,), dtype=bool)
    out[..., 0] = True
    for m in range(1, 2**d):
        low = (m & -m).bit_length() - 1
        out[..., m] = out[..., m & (m - 1)] & passes[..., low]
    return out


def _tree_coalition_values(model: GbtModel, X: np.ndarray, background: np.ndarray, chunk: int = 64) -> np.ndarray:
    d = model.n_features
    lo, hi, val = _leaf_boxes(model)
    full = 2**d - 1
    if len(val) == 0:
        return np.full((len(X), 2**d), model.base_prediction)
    # background share of each leaf restricted to the features outside the coalition
    pb = (background[:, None, :] > lo) & (background[:, None, :] <= hi)
    bg_frac = np.empty((len(val), 2**d))
    prods = _subset_products(pb, d)
    comp = full ^ np.arange(2**d)
    bg_frac[:] = prods[..., comp].mean(axis=0)
    weights = val[:, None] * bg_frac
    out = np.empty((len(X), 2**d))
    for start in range(0, len(X), chunk):
        xs = X[start : start + chunk]
        px = (xs[:, None, :] > lo) & (xs[:, None, :] <= hi)
        sub = _subset_products(px, d)
        out[start : start + chunk] = np.einsum("nlm,lm->nm", sub.astype(np.float64), weights)
    return model.base_prediction + model.learning_rate * out


def _generic_coalition_values(f: Callable, X: np.ndarray, background: np.ndarray) -> np.ndarray:
    n, d = X.shape
    m = len(background)
    out = np.empty((n, 2**d))
    for mask in range(2**d):
        sel = np.array([(mask >> j) & 1 for j in range(d)], dtype=bool)
        hybrid = np.broadcast_to(background, (n, m, d)).copy()
        hybrid[:, :, sel] = X[:, None, sel]
        out[:, mask] = np.asarray(f(hybrid.reshape(n * m, d)), dtype=np.float64).reshape(n, m).mean(axis=1)
    return out


def coalition_values(model, X: np.ndarray, background: np.ndarray) -> np.ndarray:
    """``v[i, mask]``: interventional value of coalition ``mask`` (bit j = feature j) for row i."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    _check(X.shape[1], background)
    if background.shape[1] != X.shape[1]:
        raise DataError(f"background has {background.shape[1]} features, samples have {X.shape[1]}")
    if isinstance(model, GbtModel):
        if model.n_features != X.shape[1]:
            raise DataError(f"model expects {model.n_features} features, got {X.shape[1]}")
        return _tree_coalition_values(model, X, background)
    return _generic_coalition_values(model, X, background)


def exact_shapley(model, sample: Sequence[float], background) -> tuple[np.ndarray, float]:
    """Shapley values of one sample and the base value ``v(empty set)``."""
    x = np.asarray(sample, dtype=np.float64)
    v = coalition_values(model, x[None, :], background)
    return shapley_from_values(v, x.shape[0])[0], float(v[0, 0])


@dataclass
class AttributionMatrix:
    kpi: str
    feature_names: list[str]
    phi: np.ndarray
    base_value: float
    background_size: int
    predictions: np.ndarray

    def efficiency_gap(self) -> np.ndarray:
        """Per-sample ``|sum(phi) + base - f(x)|``."""
        return np.abs(self.phi.sum(axis=1) + self.base_value - self.predictions)


def attribute(model, samples: np.ndarray, background: np.ndarray, kpi: str = "", feature_names=None) -> AttributionMatrix:
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    v = coalition_values(model, X, background)
    d = X.shape[1]
    names = list(feature_names or getattr(model, "feature_names", [f"x{j}" for j in range(d)]))
    return AttributionMatrix(
        kpi=kpi or getattr(model, "target", ""),
        feature_names=names,
        phi=shapley_from_values(v, d),
        base_value=float(v[0, 0]),
        background_size=len(background),
        predictions=v[:, -1],
    )


@dataclass(frozen=True)
class ImportanceRow:
    kpi: str
    feature: str
    mean_abs_phi: float
    normalized_share: float


class ImportanceTable:
    """Per-(feature, KPI) mean absolute Shapley values and their within-KPI shares."""

    def __init__(self, rows: Sequence[ImportanceRow] = (), degenerate: Sequence[str] = ()):
        self.rows = list(rows)
        self.degenerate = set(degenerate)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, ImportanceTable) and self.rows == other.rows and self.degenerate == other.degenerate

    def extend(self, other: "ImportanceTable") -> None:
        self.rows.extend(other.rows)
        self.degenerate |= other.degenerate

    @property
    def kpis(self) -> list[str]:
        return list(dict.fromkeys(r.kpi for r in self.rows))

    def for_kpi(self, kpi: str) -> list[ImportanceRow]:
        return [r for r in self.rows if r.kpi == kpi]

    def share(self, feature: str, kpi: str) -> float:
        for r in self.rows:
            if r.kpi == kpi and r.feature == feature:
                return r.normalized_share
        raise KeyError((feature, kpi))

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kpi", "feature", "mean_abs_phi", "normalized_share"])
        for r in self.rows:
            w.writerow([r.kpi, r.feature, repr(r.mean_abs_phi), repr(r.normalized_share)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def load(cls, path) -> "ImportanceTable":
        path = Path(path)
        if not path.exists():
            raise ParseError("importance table not found", path=path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["kpi", "feature", "mean_abs_phi", "normalized_share"]:
            raise ParseError("unexpected header", path=path, row=1)
        out = []
        for lineno, r in enumerate(rows[1:], start=2):
            try:
                out.append(ImportanceRow(r[0], r[1], float(r[2]), float(r[3])))
            except (IndexError, ValueError):
                raise ParseError(f"malformed row {r!r}", path=path, row=lineno) from None
        table = cls(out)
        for kpi in table.kpis:
            if all(row.mean_abs_phi == 0 for row in table.for_kpi(kpi)):
                table.degenerate.add(kpi)
        return table


def background_sample(data: Dataset, size: int = 100, seed: int = 0) -> Dataset:
    """Seeded subsample without replacement (the whole dataset if it is smaller)."""
    if size >= len(data):
        return data
    idx = np.sort(np.random.default_rng(seed).choice(len(data), size=size, replace=False))
    return data.take(idx)


def importance_from_phi(phi: np.ndarray, feature_names: Sequence[str], kpi: str) -> ImportanceTable:
    mean_abs = np.abs(phi).mean(axis=0)
    total = float(mean_abs.sum())
    degenerate = total == 0.0
    shares = np.zeros_like(mean_abs) if degenerate else mean_abs / total
    rows = [ImportanceRow(kpi, f, float(m), float(s)) for f, m, s in zip(feature_names, mean_abs, shares)]
    return ImportanceTable(rows, degenerate=[kpi] if degenerate else [])


def global_importance(
    model,
    eval_samples: Dataset,
    background: Dataset,
    kpi: str | None = None,
    min_background: int = 10,
) -> ImportanceTable:
    """Mean |phi| per feature over ``eval_samples`` and its share of the KPI total.

    An all-zero attribution gives shares of 0 and marks the KPI as degenerate.
    """
    if len(eval_samples) == 0:
        raise DataError("no evaluation samples")
    if len(background) < min_background:
        raise DataError(f"background needs at least {min_background} rows, got {len(background)}")
    names = list(model.feature_names)
    am = attribute(model, eval_samples.matrix(names), background.matrix(names), kpi or model.target, names)
    return importance_from_phi(am.phi, names, am.kpi)

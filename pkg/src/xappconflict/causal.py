"""Backdoor-adjusted treatment effects of RCPs on KPIs.

Two estimators share one interface:

stratified
    Adjustment covariates are discretized (discrete columns by level, other
    columns into quantile bins) and crossed into cells. In every cell with at
    least ``min_n`` records and two distinct treatment values the outcome is
    regressed on the treatment; the ATE is the record-weighted mean slope.
linear
    One least-squares fit of the outcome on treatment, covariates and an
    intercept; the ATE is the treatment coefficient.

Uncertainty comes from a seeded percentile bootstrap over records.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from xappconflict.confgraph import CausalDag, ConflictReport, backdoor_sets
from xappconflict.dataset import Dataset, StratumSpec, stratify
from xappconflict.errors import DataError, EstimationError

log = logging.getLogger(__name__)

ESTIMATORS = ("stratified", "linear")
DEFAULT_SCALES = {"num_tx_antennas": "log2"}


@dataclass(frozen=True)
class EstimateOptions:
    n_boot: int = 200
    min_n: int = 20
    n_quantiles: int = 5
    seed: int = 0
    max_adjustment_size: int = 4
    adjustment: tuple | None = None
    scales: Mapping = field(default_factory=lambda: dict(DEFAULT_SCALES))
    weight_column: str | None = None
    bins: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.n_boot < 0 or self.min_n < 1 or self.n_quantiles < 1:
            raise DataError(f"invalid estimation options {self}")
        if self.adjustment is not None:
            object.__setattr__(self, "adjustment", tuple(self.adjustment))


@dataclass
class EffectEstimate:
    treatment: str
    outcome: str
    adjustment_set: list[str]
    estimator: str
    ate_per_unit: float
    stderr_boot: float
    ci95: tuple[float, float]
    n_used: int
    scale: str = "linear"
    n_boot: int = 0
    seed: int = 0
    diagnostics: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["type"] = "ate"
        d["ci95"] = list(self.ci95)
        return _json_safe(d)


@dataclass
class StratumEffect:
    label: str
    effect: float | None
    stderr: float | None
    ci95: tuple | None
    n: int
    n_used: int
    flagged: bool = False
    note: str = ""


@dataclass
class CateEstimate:
    treatment: str
    outcome: str
    adjustment_set: list[str]
    estimator: str
    condition: StratumSpec
    per_stratum: list[StratumEffect]
    pooled: float
    scale: str = "linear"
    n_boot: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return _json_safe(
            {
                "type": "cate",
                "treatment": self.treatment,
                "outcome": self.outcome,
                "adjustment_set": list(self.adjustment_set),
                "estimator": self.estimator,
                "condition": self.condition.to_dict(),
                "per_stratum": [asdict(s) for s in self.per_stratum],
                "pooled": self.pooled,
                "scale": self.scale,
                "n_boot": self.n_boot,
                "seed": self.seed,
            }
        )


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def treatment_values(data: Dataset, treatment: str, scales: Mapping) -> tuple[np.ndarray, str]:
    t = data[treatment].astype(np.float64)
    scale = scales.get(treatment, "linear")
    if scale == "log2":
        if (t <= 0).any():
            raise DataError(f"log2 scale needs positive {treatment} values")
        return np.log2(t), scale
    if scale != "linear":
        raise DataError(f"unknown treatment scale {scale!r}")
    return t, scale


def discretize(data: Dataset, covariates: Sequence[str], options: EstimateOptions) -> np.ndarray:
    """Cell id of every record after crossing the discretized covariates."""
    n = len(data)
    if not covariates:
        return np.zeros(n, dtype=np.int64)
    codes = []
    for c in covariates:
        values = data[c]
        if c in options.bins:
            spec = options.bins[c]
            codes.append(spec.assign(values))
        elif data.column(c).kind == "discrete-set":
            codes.append(np.unique(values, return_inverse=True)[1])
        else:
            probs = np.arange(1, options.n_quantiles) / options.n_quantiles
            edges = np.unique(np.quantile(values.astype(np.float64), probs))
            codes.append(np.searchsorted(edges, values, side="right"))
    return np.unique(np.column_stack(codes), axis=0, return_inverse=True)[1].reshape(-1)


@dataclass
class _CellFit:
    ate: float
    n_used: int
    w_used: float
    per_cell: dict


def _stratified(t, y, w, cells, min_n: int, n_cells: int) -> _CellFit | None:
    W = np.bincount(cells, weights=w, minlength=n_cells)
    count = np.bincount(cells, minlength=n_cells)
    safe_W = np.where(W > 0, W, 1.0)
    t_mean = np.bincount(cells, weights=w * t, minlength=n_cells) / safe_W
    y_mean = np.bincount(cells, weights=w * y, minlength=n_cells) / safe_W
    dt = t - t_mean[cells]
    stt = np.bincount(cells, weights=w * dt * dt, minlength=n_cells)
    sty = np.bincount(cells, weights=w * dt * (y - y_mean[cells]), minlength=n_cells)
    t_min = np.full(n_cells, np.inf)
    t_max = np.full(n_cells, -np.inf)
    np.minimum.at(t_min, cells, t)
    np.maximum.at(t_max, cells, t)
    usable = (count >= min_n) & (t_max > t_min) & (stt > 0) & (W > 0)
    if not usable.any():
        return None
    slope = np.where(usable, sty / np.where(usable, stt, 1.0), 0.0)
    w_used = float(W[usable].sum())
    ate = float((W[usable] * slope[usable]).sum() / w_used)
    per_cell = {int(c): (int(count[c]), float(slope[c]) if usable[c] else None) for c in np.flatnonzero(count)}
    return _CellFit(ate, int(count[usable].sum()), w_used, per_cell)


def _linear(t, y, w, X) -> float:
    design = np.column_stack([t, X, np.ones_like(t)]) if X.size else np.column_stack([t, np.ones_like(t)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return float(coef[0])


@dataclass
class _Prepared:
    t: np.ndarray
    y: np.ndarray
    w: np.ndarray
    cells: np.ndarray
    n_cells: int
    X: np.ndarray
    scale: str


def _prepare(data: Dataset, treatment: str, outcome: str, adjustment: Sequence[str], options: EstimateOptions) -> _Prepared:
    for c in [treatment, outcome, *adjustment]:
        if c not in data:
            raise DataError(f"unknown column {c!r}")
    t, scale = treatment_values(data, treatment, options.scales)
    y = data[outcome].astype(np.float64)
    w = data[options.weight_column].astype(np.float64) if options.weight_column else np.ones(len(data))
    if (w < 0).any():
        raise DataError("weights must be non-negative")
    cells = discretize(data, list(adjustment), options)
    X = data.matrix(list(adjustment))
    return _Prepared(t, y, w, cells, int(cells.max()) + 1 if len(cells) else 1, X, scale)


def _point(p: _Prepared, idx, estimator: str, min_n: int):
    """Point estimate on the records ``idx`` (``None`` means all); returns (ate, fit-or-None)."""
    t, y, w, cells, X = (p.t, p.y, p.w, p.cells, p.X) if idx is None else (p.t[idx], p.y[idx], p.w[idx], p.cells[idx], p.X[idx])
    if estimator == "stratified":
        fit = _stratified(t, y, w, cells, min_n, p.n_cells)
        return (fit.ate, fit) if fit is not None else (math.nan, None)
    if estimator == "linear":
        if t.max() == t.min():
            return math.nan, None
        return _linear(t, y, w, X), None
    raise DataError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


def _bootstrap(p: _Prepared, base_idx: np.ndarray, estimator: str, options: EstimateOptions, seed: int):
    rng = np.random.default_rng(seed)
    n = len(base_idx)
    reps = []
    for _ in range(options.n_boot):
        idx = base_idx[rng.integers(0, n, n)]
        est, _ = _point(p, idx, estimator, options.min_n)
        if math.isfinite(est):
            reps.append(est)
    return np.asarray(reps)


def _interval(ate: float, reps: np.ndarray) -> tuple[float, tuple[float, float]]:
    if len(reps) < 2:
        return 0.0, (ate, ate)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    # the point estimate is always reported inside its interval
    return float(reps.std(ddof=1)), (float(min(lo, ate)), float(max(hi, ate)))


def choose_adjustment(dag: CausalDag, treatment: str, outcome: str, max_size: int = 4) -> list[str]:
    """Smallest valid backdoor set, ties broken lexicographically."""
    sets = backdoor_sets(dag, treatment, outcome, max_size)
    if not sets:
        raise EstimationError(f"no backdoor adjustment set of size <= {max_size} for {treatment} -> {outcome}")
    return list(sets[0])


def _adjustment(dag: CausalDag | None, treatment: str, outcome: str, options: EstimateOptions) -> list[str]:
    if options.adjustment is not None:
        return list(options.adjustment)
    if dag is None:
        raise DataError("either a DAG or an explicit adjustment set is required")
    return choose_adjustment(dag, treatment, outcome, options.max_adjustment_size)


def estimate_ate(
    data: Dataset,
    dag: CausalDag | None,
    treatment: str,
    outcome: str,
    estimator: str = "stratified",
    options: EstimateOptions = EstimateOptions(),
) -> EffectEstimate:
    """Average per-unit effect of ``treatment`` on ``outcome``."""
    if estimator not in ESTIMATORS:
        raise DataError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    adjustment = _adjustment(dag, treatment, outcome, options)
    p = _prepare(data, treatment, outcome, adjustment, options)
    if len(p.t) == 0 or p.t.max() == p.t.min():
        raise EstimationError(f"degenerate treatment: {treatment!r} is constant")
    ate, fit = _point(p, None, estimator, options.min_n)
    if not math.isfinite(ate):
        raise EstimationError(
            f"no adjustment stratum for {treatment} -> {outcome} has >= {options.min_n} records and a varying treatment"
        )
    reps = _bootstrap(p, np.arange(len(p.t)), estimator, options, options.seed)
    stderr, ci = _interval(ate, reps)
    diagnostics = {"n_boot_valid": int(len(reps))}
    if fit is not None:
        diagnostics["strata"] = [{"n": n, "slope": s} for _, (n, s) in sorted(fit.per_cell.items())]
        diagnostics["n_strata_used"] = sum(1 for _, s in fit.per_cell.values() if s is not None)
    return EffectEstimate(
        treatment=treatment,
        outcome=outcome,
        adjustment_set=list(adjustment),
        estimator=estimator,
        ate_per_unit=ate,
        stderr_boot=stderr,
        ci95=ci,
        n_used=fit.n_used if fit is not None else len(p.t),
        scale=p.scale,
        n_boot=options.n_boot,
        seed=options.seed,
        diagnostics=diagnostics,
    )


def estimate_cate(
    data: Dataset,
    dag: CausalDag | None,
    treatment: str,
    outcome: str,
    condition: StratumSpec,
    estimator: str = "stratified",
    options: EstimateOptions = EstimateOptions(),
) -> CateEstimate:
    """Per-stratum effects of ``treatment`` on ``outcome`` given a network-state stratification.

    Adjustment bins are computed once on the whole dataset, so the pooled value
    (stratum effects weighted by the records they used) coincides with the
    stratified ATE that also adjusts for the conditioning variable's bins.
    """
    if condition.variable in (treatment, outcome):
        raise DataError(f"cannot condition on {condition.variable!r}, it is the treatment or outcome")
    adjustment = [c for c in _adjustment(dag, treatment, outcome, options) if c != condition.variable]
    p = _prepare(data, treatment, outcome, adjustment, options)
    strata = stratify(data, condition)
    per = []
    num = den = 0.0
    for k, (label, idx) in enumerate(strata.items()):
        n = len(idx)
        if n < options.min_n:
            per.append(StratumEffect(label, None, None, None, n, 0, True, f"fewer than {options.min_n} records"))
            continue
        ate, fit = _point(p, idx, estimator, options.min_n)
        if not math.isfinite(ate):
            per.append(StratumEffect(label, None, None, None, n, 0, True, "no usable adjustment cell"))
            continue
        reps = _bootstrap(p, idx, estimator, options, options.seed + 7919 * (k + 1))
        stderr, ci = _interval(ate, reps)
        n_used = fit.n_used if fit is not None else n
        weight = fit.w_used if fit is not None else float(p.w[idx].sum())
        per.append(StratumEffect(label, ate, stderr, ci, n, n_used))
        num += weight * ate
        den += weight
    pooled = num / den if den > 0 else math.nan
    return CateEstimate(
        treatment=treatment,
        outcome=outcome,
        adjustment_set=adjustment,
        estimator=estimator,
        condition=condition,
        per_stratum=per,
        pooled=pooled,
        scale=p.scale,
        n_boot=options.n_boot,
        seed=options.seed,
    )


def conflict_pairs(report: ConflictReport) -> list[tuple[str, str]]:
    pairs = set()
    for f in report.findings:
        if f.kind in ("indirect", "implicit"):
            pairs.update(f.effect_pairs())
    return sorted(pairs)


def effect_matrix(
    data: Dataset,
    dag: CausalDag,
    report: ConflictReport,
    options: EstimateOptions = EstimateOptions(),
    estimator: str = "stratified",
) -> list[EffectEstimate]:
    """One estimate per (RCP, KPI) pair of every indirect or implicit finding.

    Pairs that cannot be estimated are returned with ``error`` set instead of raising.
    """
    out = []
    for treatment, outcome in conflict_pairs(report):
        try:
            out.append(estimate_ate(data, dag, treatment, outcome, estimator, options))
        except (EstimationError, DataError) as exc:
            log.warning("effect %s -> %s not estimable: %s", treatment, outcome, exc)
            out.append(
                EffectEstimate(
                    treatment, outcome, [], estimator, math.nan, math.nan, (math.nan, math.nan), 0,
                    scale=options.scales.get(treatment, "linear"), n_boot=options.n_boot, seed=options.seed, error=str(exc),
                )
            )
    return out

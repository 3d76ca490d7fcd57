"""Pipeline stages. Each stage reads only the files of earlier stages plus the config."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from xappconflict import dataset as ds
from xappconflict import regressor, shapley, simkernel
from xappconflict.causal import effect_matrix, estimate_cate
from xappconflict.confgraph import CausalDag, ConflictGraph, ConflictReport, build_dag, classify_conflicts, to_dot
from xappconflict.config import PipelineConfig, dump_config
from xappconflict.errors import DataError
from xappconflict.regressor import GbtModel
from xappconflict.shapley import ImportanceTable

log = logging.getLogger(__name__)

DATASET = "dataset.csv"
DATASET_META = "dataset.meta.json"
MODELS_DIR = "models"
FIT_REPORT = "fit_report.json"
IMPORTANCE = "importance.csv"
IMPORTANCE_META = "importance.meta.json"
GRAPH_DOT = "graph.dot"
DAG_DOT = "dag.dot"
CONFLICTS = "conflicts.json"
EFFECTS = "effects.json"
REPORT = "report.md"
CONFIG_COPY = "config.json"

STAGES = ("simulate", "train", "explain", "graph", "estimate", "report")

# which stage produces each input file, for error messages
_PRODUCER = {
    DATASET: "simulate",
    DATASET_META: "simulate",
    FIT_REPORT: "train",
    IMPORTANCE: "explain",
    CONFLICTS: "graph",
    EFFECTS: "estimate",
}


def _require(out: Path, name: str) -> Path:
    path = out / name
    if not path.exists():
        stage = _PRODUCER.get(name, "train" if name.startswith(MODELS_DIR) else "an earlier")
        raise DataError(f"{path} not found; run the '{stage}' stage first")
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def _stamp(cfg: PipelineConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed}


def _load_dataset(out: Path) -> ds.Dataset:
    _require(out, DATASET_META)
    return ds.load(_require(out, DATASET))


def cmd_simulate(cfg: PipelineConfig, out: Path) -> ds.Dataset:
    out.mkdir(parents=True, exist_ok=True)
    data = simkernel.generate_dataset(cfg.sim, created_at=cfg.io.created_at)
    data.provenance.update(_stamp(cfg))
    ds.save(data, out / DATASET)
    (out / CONFIG_COPY).write_text(dump_config(cfg), encoding="utf-8")
    print(f"simulated {len(data)} episodes; num_prbs clamps: {data.provenance['prb_clamps']}")
    return data


def _split(cfg: PipelineConfig, data: ds.Dataset):
    return ds.split(data, cfg.model.train_fraction, cfg.split_seed)


def cmd_train(cfg: PipelineConfig, out: Path) -> dict[str, GbtModel]:
    data = _load_dataset(out)
    train, test = _split(cfg, data)
    models, reports = {}, []
    (out / MODELS_DIR).mkdir(exist_ok=True)
    for kpi in data.names_with_role("kpi"):
        model = regressor.fit(train, kpi, cfg.model.params, include_context=cfg.model.include_context)
        model.metadata.update(_stamp(cfg))
        model.save(out / MODELS_DIR / f"{kpi}.json")
        rep = regressor.evaluate(model, test)
        reports.append(rep.to_dict())
        models[kpi] = model
        print(f"{kpi}: held-out R2={rep.r2:.4f} RMSE={rep.rmse:.4g} MAE={rep.mae:.4g}")
    _write_json(
        out / FIT_REPORT,
        {**_stamp(cfg), "train_fraction": cfg.model.train_fraction, "n_train": len(train), "n_test": len(test), "reports": reports},
    )
    return models


def _load_models(out: Path, kpis) -> dict[str, GbtModel]:
    return {k: GbtModel.load(_require(out, f"{MODELS_DIR}/{k}.json")) for k in kpis}


def cmd_explain(cfg: PipelineConfig, out: Path) -> ImportanceTable:
    data = _load_dataset(out)
    models = _load_models(out, data.names_with_role("kpi"))
    train, test = _split(cfg, data)
    background = shapley.background_sample(train, cfg.shap.background_size, cfg.background_seed)
    evals = shapley.background_sample(test, cfg.shap.eval_size, cfg.background_seed + 1) if cfg.shap.eval_size else test
    table = ImportanceTable()
    worst_gap = 0.0
    rng = np.random.default_rng(cfg.background_seed + 2)
    for kpi, model in models.items():
        names = model.feature_names
        am = shapley.attribute(model, evals.matrix(names), background.matrix(names), kpi, names)
        table.extend(shapley.importance_from_phi(am.phi, names, kpi))
        picks = rng.choice(len(evals), size=min(cfg.shap.spot_checks, len(evals)), replace=False)
        gap = float(np.max(np.abs(am.phi[picks].sum(axis=1) + am.base_value - model.predict_batch(evals.matrix(names)[picks]))))
        worst_gap = max(worst_gap, gap)
        log.info("%s: efficiency check on %d samples, max |sum(phi)+base-f(x)| = %.3g", kpi, len(picks), gap)
    table.save(out / IMPORTANCE)
    _write_json(
        out / IMPORTANCE_META,
        {
            **_stamp(cfg),
            "background_size": len(background),
            "eval_size": len(evals),
            "tau": cfg.shap.tau,
            "degenerate_kpis": sorted(table.degenerate),
            "efficiency_spot_check_max_gap": worst_gap,
        },
    )
    print(f"importance rows: {len(table)}; efficiency spot check max gap {worst_gap:.3g}")
    return table


def scenario_dag(cfg: PipelineConfig, table: ImportanceTable) -> CausalDag:
    return build_dag(
        table,
        structural_edges=cfg.scenario.structural_edges,
        tau=cfg.shap.tau,
        rcps=simkernel.rcp_names(cfg.sim),
        context=simkernel.CONTEXT_NAMES,
        include_context=cfg.shap.include_context_nodes,
        deny_edges=cfg.scenario.deny_edges,
        declared_edges=cfg.scenario.declared_edges,
    )


def cmd_graph(cfg: PipelineConfig, out: Path) -> tuple[ConflictGraph, CausalDag, ConflictReport]:
    table = ImportanceTable.load(_require(out, IMPORTANCE))
    dag = scenario_dag(cfg, table)
    graph = ConflictGraph.from_scenario(list(cfg.scenario.xapps), dag)
    report = classify_conflicts(graph, dag)
    (out / GRAPH_DOT).write_text(to_dot(graph), encoding="utf-8")
    (out / DAG_DOT).write_text(to_dot(dag), encoding="utf-8")
    _write_json(
        out / CONFLICTS,
        {
            **_stamp(cfg),
            "tau": cfg.shap.tau,
            "xapps": [a.to_dict() for a in cfg.scenario.xapps],
            "dag": dag.to_dict(),
            **report.to_dict(),
        },
    )
    counts = {k: len(report.of_kind(k)) for k in ("direct", "indirect", "implicit")}
    print(f"conflicts: {counts}")
    return graph, dag, report


def cmd_estimate(cfg: PipelineConfig, out: Path) -> list[dict]:
    data = _load_dataset(out)
    doc = _read_json(_require(out, CONFLICTS))
    dag = CausalDag.from_dict(doc["dag"])
    report = ConflictReport.from_dict(doc)
    opts = cfg.causal.options(cfg.bootstrap_seed)
    estimator = cfg.causal.estimator
    records = []
    for est in effect_matrix(data, dag, report, opts, estimator):
        records.append({**est.to_dict(), "config_hash": cfg.config_hash})
        if est.error:
            continue
        for cond in cfg.causal.conditions:
            if cond.variable in (est.treatment, est.outcome):
                continue
            try:
                cate = estimate_cate(data, dag, est.treatment, est.outcome, cond, estimator, opts)
            except DataError as exc:
                log.warning("CATE %s -> %s | %s skipped: %s", est.treatment, est.outcome, cond.variable, exc)
                continue
            records.append({**cate.to_dict(), "config_hash": cfg.config_hash})
    _write_json(out / EFFECTS, records)
    n_ate = sum(r["type"] == "ate" for r in records)
    print(f"effects: {n_ate} ATE and {len(records) - n_ate} CATE records")
    return records


def _fmt(x, spec=".4g") -> str:
    return "n/a" if x is None else format(x, spec)


def cmd_report(cfg: PipelineConfig, out: Path) -> str:
    fit = _read_json(_require(out, FIT_REPORT))
    table = ImportanceTable.load(_require(out, IMPORTANCE))
    conflicts = _read_json(_require(out, CONFLICTS))
    effects = _read_json(_require(out, EFFECTS))

    lines = ["# xApp conflict evaluation report", ""]
    lines += [f"- config hash: `{cfg.config_hash}`", f"- master seed: {cfg.seed}", f"- episodes: {cfg.sim.n_episodes}", ""]
    lines += ["## Scenario", "", "| xApp | controls | targets |", "|---|---|---|"]
    for a in conflicts["xapps"]:
        lines.append(f"| {a['id']} | {', '.join(a['controls'])} | {', '.join(a['targets'])} |")
    lines += ["", "## Regression fit (held-out)", "", "| KPI | R² | RMSE | MAE | n_train | n_test |", "|---|---|---|---|---|---|"]
    for r in fit["reports"]:
        lines.append(f"| {r['target']} | {r['r2']:.4f} | {r['rmse']:.4g} | {r['mae']:.4g} | {r['n_train']} | {r['n_test']} |")
    lines += ["", f"## Shapley importance (edge threshold τ = {conflicts['tau']})", "", "| KPI | feature | mean abs phi | share |", "|---|---|---|---|"]
    for r in table:
        lines.append(f"| {r.kpi} | {r.feature} | {r.mean_abs_phi:.4g} | {r.normalized_share:.3f} |")
    lines += ["", "## Conflict findings", ""]
    if not conflicts["findings"]:
        lines.append("No conflicts found.")
    for f in conflicts["findings"]:
        a, b = f["participants"]
        if f["kind"] == "direct":
            lines.append(f"- **direct**: {a} and {b} both control `{f['rcps'][0]}`")
        elif f["kind"] == "indirect":
            lines.append(f"- **indirect**: {a} and {b} via `{f['rcps'][0]}`, `{f['rcps'][1]}` on `{f['kpi']}`")
        else:
            lines.append(f"- **implicit**: {a} and {b} via path `{' -> '.join(f['path'])}`")
    lines += [
        "",
        "## Effects (per unit of treatment)",
        "",
        "| # | treatment | outcome | scale | adjustment | ATE | stderr | 95% CI | n |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for i, e in enumerate(effects):
        if e["type"] != "ate":
            continue
        adj = ", ".join(e["adjustment_set"]) or "∅"
        if e.get("error"):
            lines.append(f"| {i} | {e['treatment']} | {e['outcome']} | {e['scale']} | {adj} | error: {e['error']} | | | |")
            continue
        lo, hi = e["ci95"]
        lines.append(
            f"| {i} | {e['treatment']} | {e['outcome']} | {e['scale']} | {adj} | {_fmt(e['ate_per_unit'])} | "
            f"{_fmt(e['stderr_boot'])} | [{_fmt(lo)}, {_fmt(hi)}] | {e['n_used']} |"
        )
    lines += ["", "## Conditional effects", "", "| # | treatment | outcome | stratum | effect | stderr | n |", "|---|---|---|---|---|---|---|"]
    for i, e in enumerate(effects):
        if e["type"] != "cate":
            continue
        for s in e["per_stratum"]:
            eff = _fmt(s["effect"]) + (" (flagged)" if s["flagged"] else "")
            lines.append(f"| {i} | {e['treatment']} | {e['outcome']} | {s['label']} | {eff} | {_fmt(s['stderr'])} | {s['n']} |")
    text = "\n".join(lines) + "\n"
    (out / REPORT).write_text(text, encoding="utf-8")
    print(f"wrote {out / REPORT}")
    return text


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "explain": cmd_explain,
    "graph": cmd_graph,
    "estimate": cmd_estimate,
    "report": cmd_report,
}


def run_stage(name: str, cfg: PipelineConfig, out: Path):
    return _COMMANDS[name](cfg, Path(out))


def cmd_pipeline(cfg: PipelineConfig, out: Path, stages=STAGES) -> None:
    for name in STAGES:
        if name in stages:
            run_stage(name, cfg, out)

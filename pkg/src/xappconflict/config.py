"""Pipeline configuration: one versioned JSON document, hashed for provenance."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from xappconflict.causal import ESTIMATORS, EstimateOptions
from xappconflict.confgraph import XApp
from xappconflict.dataset import StratumSpec
from xappconflict.errors import ConfigError, DataError
from xappconflict.regressor import GbtParams
from xappconflict.simkernel import BANDWIDTHS_MHZ, CONTEXT_NAMES, KPI_NAMES, SimConfig, rcp_names

SCHEMA_VERSION = 1

DEFAULT_XAPPS = (
    XApp("energy_saver", "Energy saver", ("tx_power",), ("throughput",)),
    XApp("power_control", "Coverage power control", ("tx_power",), ("bler",)),
    XApp("se_optimizer", "Spectral-efficiency optimizer", ("bandwidth",), ("spectral_efficiency",)),
    XApp("throughput_booster", "Throughput booster", ("num_prbs", "num_tx_antennas"), ("throughput",)),
)


@dataclass(frozen=True)
class Scenario:
    xapps: tuple = DEFAULT_XAPPS
    structural_edges: tuple = (("bandwidth", "num_prbs"),)
    deny_edges: tuple = ()
    declared_edges: tuple = ()


@dataclass(frozen=True)
class ModelSettings:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    train_fraction: float = 0.8
    include_context: bool = True

    @property
    def params(self) -> GbtParams:
        return GbtParams(self.n_trees, self.max_depth, self.learning_rate, self.min_samples_leaf)


@dataclass(frozen=True)
class ShapSettings:
    background_size: int = 100
    eval_size: int = 200
    tau: float = 0.10
    include_context_nodes: bool = False
    spot_checks: int = 10


@dataclass(frozen=True)
class CausalSettings:
    estimator: str = "stratified"
    n_boot: int = 200
    min_n: int = 20
    n_quantiles: int = 5
    max_adjustment_size: int = 4
    conditions: tuple = (
        StratumSpec("ue_distance", edges=(10.0, 100.0, 200.0, 300.0)),
        StratumSpec("bandwidth", levels=BANDWIDTHS_MHZ),
    )

    def options(self, seed: int) -> EstimateOptions:
        return EstimateOptions(
            n_boot=self.n_boot,
            min_n=self.min_n,
            n_quantiles=self.n_quantiles,
            seed=seed,
            max_adjustment_size=self.max_adjustment_size,
        )


@dataclass(frozen=True)
class IoSettings:
    out: str = "out"
    created_at: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    sim: SimConfig = field(default_factory=SimConfig)
    scenario: Scenario = field(default_factory=Scenario)
    model: ModelSettings = field(default_factory=ModelSettings)
    shap: ShapSettings = field(default_factory=ShapSettings)
    causal: CausalSettings = field(default_factory=CausalSettings)
    io: IoSettings = field(default_factory=IoSettings)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.sim.master_seed != self.seed:
            object.__setattr__(self, "sim", self.sim.replace(master_seed=int(self.seed)))

    # derived seeds; the split uses the master seed itself
    @property
    def split_seed(self) -> int:
        return self.seed

    @property
    def background_seed(self) -> int:
        return self.seed + 1

    @property
    def bootstrap_seed(self) -> int:
        return self.seed + 2

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=int(seed))

    def with_out(self, out) -> "PipelineConfig":
        return dataclasses.replace(self, io=dataclasses.replace(self.io, out=str(out)))

    def to_dict(self) -> dict:
        sim = self.sim.to_dict()
        sim.pop("master_seed")
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "sim": sim,
            "scenario": {
                "xapps": [a.to_dict() for a in self.scenario.xapps],
                "structural_edges": [list(e) for e in self.scenario.structural_edges],
                "deny_edges": [list(e) for e in self.scenario.deny_edges],
                "declared_edges": [list(e) for e in self.scenario.declared_edges],
            },
            "model": dataclasses.asdict(self.model),
            "shap": dataclasses.asdict(self.shap),
            "causal": {
                **{k: v for k, v in dataclasses.asdict(self.causal).items() if k != "conditions"},
                "conditions": [c.to_dict() for c in self.causal.conditions],
            },
            "io": dataclasses.asdict(self.io),
        }

    @property
    def config_hash(self) -> str:
        """SHA-256 of the canonical config, ignoring the output directory."""
        d = self.to_dict()
        d["io"] = {k: v for k, v in d["io"].items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def validate(self) -> None:
        schema_names = set(rcp_names(self.sim)) | set(CONTEXT_NAMES) | set(KPI_NAMES)
        rcps = set(rcp_names(self.sim))
        if not 0.0 < self.shap.tau < 1.0:
            raise ConfigError(f"shap.tau must lie in (0, 1), got {self.shap.tau}")
        if self.shap.background_size < 10:
            raise ConfigError("shap.background_size must be at least 10")
        if not 0.0 < self.model.train_fraction < 1.0:
            raise ConfigError(f"model.train_fraction must lie in (0, 1), got {self.model.train_fraction}")
        if self.causal.estimator not in ESTIMATORS:
            raise ConfigError(f"causal.estimator must be one of {ESTIMATORS}")
        ids = [a.id for a in self.scenario.xapps]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate xApp ids in scenario: {ids}")
        for a in self.scenario.xapps:
            for p in a.controls:
                if p not in rcps:
                    raise ConfigError(f"xApp {a.id!r} controls {p!r}, which is not an RCP column")
            for k in a.targets:
                if k not in KPI_NAMES:
                    raise ConfigError(f"xApp {a.id!r} targets {k!r}, which is not a KPI column")
        for group in ("structural_edges", "deny_edges", "declared_edges"):
            for e in getattr(self.scenario, group):
                if len(e) != 2 or any(n not in schema_names for n in e):
                    raise ConfigError(f"scenario.{group} entry {list(e)} names unknown columns")
        for u, v in self.scenario.structural_edges:
            if u not in rcps or v not in rcps:
                raise ConfigError(f"structural edge {u}->{v} must join two RCPs")
        for c in self.causal.conditions:
            if c.variable not in schema_names:
                raise ConfigError(f"causal condition on unknown column {c.variable!r}")
        try:
            self.model.params
        except DataError as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {"sim", "scenario", "model", "shap", "causal", "io"}


def _section(cls, d: Mapping, name: str, convert=None):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{name} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}")
    kwargs = dict(d)
    if convert:
        kwargs = convert(kwargs)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def config_from_dict(d: Mapping[str, Any]) -> PipelineConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("config must be a JSON object")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}; expected {SCHEMA_VERSION}")
    unknown = sorted(set(d) - _SECTIONS - {"schema_version", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    seed = d.get("seed", 42)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed!r}")

    sim_d = dict(d.get("sim", {}))
    if "master_seed" in sim_d:
        raise ConfigError("set the seed at the top level, not in sim.master_seed")
    try:
        sim = SimConfig.from_dict({**sim_d, "master_seed": seed})
    except (DataError, TypeError) as exc:
        raise ConfigError(f"invalid sim section: {exc}") from exc

    def scenario_conv(k):
        if "xapps" in k:
            try:
                k["xapps"] = tuple(XApp.from_dict(a) for a in k["xapps"])
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"malformed xApp entry: {exc}") from exc
        for g in ("structural_edges", "deny_edges", "declared_edges"):
            if g in k:
                k[g] = tuple(tuple(e) for e in k[g])
        return k

    def causal_conv(k):
        if "conditions" in k:
            try:
                k["conditions"] = tuple(StratumSpec.from_dict(c) for c in k["conditions"])
            except (KeyError, DataError) as exc:
                raise ConfigError(f"malformed causal condition: {exc}") from exc
        return k

    cfg = PipelineConfig(
        seed=seed,
        sim=sim,
        scenario=_section(Scenario, d.get("scenario", {}), "scenario", scenario_conv),
        model=_section(ModelSettings, d.get("model", {}), "model"),
        shap=_section(ShapSettings, d.get("shap", {}), "shap"),
        causal=_section(CausalSettings, d.get("causal", {}), "causal", causal_conv),
        io=_section(IoSettings, d.get("io", {}), "io"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"

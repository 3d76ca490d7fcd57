"""Single-cell, single-UE surrogate RAN simulator.

RCPs are sampled per episode from the configuration domains of the reference
setup (bandwidth, PRBs, Tx power, Tx antennas); KPIs come out of an analytic
link budget followed by per-frame block-error draws. Every episode owns
counter-based random streams keyed by ``(master_seed, episode_id, draw_index)``,
so episodes can be produced in any order, and interventional runs replay the
exact same exogenous draws as the observational run they are paired with.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from xappconflict.dataset import Column, Dataset
from xappconflict.errors import DomainError, EstimationError

log = logging.getLogger(__name__)

BANDWIDTHS_MHZ = (5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
ANTENNA_COUNTS = (1, 2, 4, 8, 16)
TX_POWER_RANGE_DBM = (1, 40)
MIN_PRBS = 4
SCS_KHZ = 15
SUBCARRIERS_PER_PRB = 12

# 3GPP TS 38.104 Table 5.3.2-1, FR1, 15 kHz subcarrier spacing.
_NRB_15KHZ = {5: 25, 10: 52, 15: 79, 20: 106, 25: 133, 30: 160, 35: 188, 40: 216, 45: 242, 50: 270}

RCP_NAMES = ("bandwidth", "num_prbs", "tx_power", "num_tx_antennas")
DUMMY_RCP = "dummy"
CONTEXT_NAMES = ("ue_distance", "shadowing")
KPI_NAMES = ("throughput", "spectral_efficiency", "bler")

# draw_index values of the per-episode streams
_ASSIGN, _CONTEXT, _FADING, _DUMMY = 0, 1, 2, 3


def prb_max(bandwidth_mhz, scs_khz: int = SCS_KHZ) -> int:
    """Maximum transmission bandwidth in PRBs for a channel bandwidth."""
    if scs_khz != SCS_KHZ:
        raise DomainError(f"only {SCS_KHZ} kHz subcarrier spacing is tabulated, got {scs_khz}")
    try:
        bw = float(bandwidth_mhz)
    except (TypeError, ValueError):
        bw = float("nan")
    if not bw.is_integer() or int(bw) not in _NRB_15KHZ:
        raise DomainError(f"unsupported bandwidth {bandwidth_mhz!r} MHz; expected one of {BANDWIDTHS_MHZ}")
    return _NRB_15KHZ[int(bw)]


_PRB_LOOKUP = np.zeros(max(BANDWIDTHS_MHZ) + 1, dtype=np.int64)
for _bw, _n in _NRB_15KHZ.items():
    _PRB_LOOKUP[_bw] = _n


@dataclass(frozen=True)
class RcpAssignment:
    bandwidth: int
    num_prbs: int
    tx_power: int
    num_tx_antennas: int
    dummy: int | None = None

    def __post_init__(self):
        if self.bandwidth not in BANDWIDTHS_MHZ:
            raise DomainError(f"bandwidth={self.bandwidth!r} not in {BANDWIDTHS_MHZ}")
        if not MIN_PRBS <= self.num_prbs <= prb_max(self.bandwidth):
            raise DomainError(
                f"num_prbs={self.num_prbs} outside [{MIN_PRBS}, {prb_max(self.bandwidth)}] for {self.bandwidth} MHz"
            )
        lo, hi = TX_POWER_RANGE_DBM
        if not lo <= self.tx_power <= hi:
            raise DomainError(f"tx_power={self.tx_power} outside [{lo}, {hi}] dBm")
        if self.num_tx_antennas not in ANTENNA_COUNTS:
            raise DomainError(f"num_tx_antennas={self.num_tx_antennas!r} not in {ANTENNA_COUNTS}")


@dataclass(frozen=True)
class ContextState:
    ue_distance: float
    shadowing: float
    episode_id: int


@dataclass(frozen=True)
class KpiRecord:
    throughput: float
    spectral_efficiency: float
    bler: float


@dataclass(frozen=True)
class SimConfig:
    """Simulation size, seed, link-budget constants and optional ``do()`` overrides."""

    n_episodes: int = 1000
    frames_per_episode: int = 100
    master_seed: int = 42
    pathloss_intercept_db: float = 32.4
    pathloss_distance_coeff: float = 21.0
    pathloss_frequency_coeff: float = 20.0
    carrier_ghz: float = 2.6
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0
    shadowing_sigma_db: float = 4.0
    fade_sigma_db: float = 2.0
    margin_db: float = 3.0
    se_cap: float = 7.4
    distance_range_m: tuple = (10.0, 300.0)
    include_dummy_rcp: bool = False
    do_overrides: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n_episodes) != self.n_episodes or self.n_episodes < 1:
            raise DomainError(f"n_episodes must be a positive integer, got {self.n_episodes!r}")
        if int(self.frames_per_episode) != self.frames_per_episode or self.frames_per_episode < 1:
            raise DomainError(f"frames_per_episode must be a positive integer, got {self.frames_per_episode!r}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise DomainError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed!r}")
        lo, hi = self.distance_range_m
        if not 0 < lo <= hi:
            raise DomainError(f"invalid distance range {self.distance_range_m!r}")
        object.__setattr__(self, "distance_range_m", (float(lo), float(hi)))
        for name, value in dict(self.do_overrides).items():
            check_override(name, value, self.include_dummy_rcp)
        object.__setattr__(self, "do_overrides", dict(self.do_overrides))

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["distance_range_m"] = list(self.distance_range_m)
        d["do_overrides"] = dict(sorted(self.do_overrides.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DomainError(f"unknown simulation settings: {unknown}")
        kwargs = dict(d)
        if "distance_range_m" in kwargs:
            kwargs["distance_range_m"] = tuple(kwargs["distance_range_m"])
        return cls(**kwargs)


def rcp_names(config: SimConfig) -> tuple[str, ...]:
    return RCP_NAMES + ((DUMMY_RCP,) if config.include_dummy_rcp else ())


def check_override(name: str, value, allow_dummy: bool = False) -> None:
    """Validate a ``do()`` value against the global domain of an RCP.

    ``num_prbs`` only needs to be a positive integer here; its bandwidth-dependent
    upper limit is enforced later by clamping.
    """
    if name == "bandwidth":
        ok = value in BANDWIDTHS_MHZ
    elif name == "num_prbs":
        ok = float(value) == int(value) and value >= 1
    elif name == "tx_power":
        ok = float(value) == int(value) and TX_POWER_RANGE_DBM[0] <= value <= TX_POWER_RANGE_DBM[1]
    elif name == "num_tx_antennas":
        ok = value in ANTENNA_COUNTS
    elif name == DUMMY_RCP and allow_dummy:
        ok = float(value) == int(value) and 0 <= value <= 9
    else:
        raise DomainError(f"cannot intervene on unknown RCP {name!r}")
    if not ok:
        raise DomainError(f"override {name}={value!r} outside the RCP's domain")


class EpisodeStreams(NamedTuple):
    assignment: np.random.Generator
    context: np.random.Generator
    fading: np.random.Generator
    dummy: np.random.Generator


def _stream(master_seed: int, episode_id: int, draw_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(master_seed), counter=[0, 0, int(episode_id), draw_index]))


def episode_streams(master_seed: int, episode_id: int) -> EpisodeStreams:
    if episode_id < 0:
        raise DomainError(f"episode_id must be non-negative, got {episode_id}")
    return EpisodeStreams(*(_stream(master_seed, episode_id, k) for k in (_ASSIGN, _CONTEXT, _FADING, _DUMMY)))


@dataclass
class SampleStats:
    prb_clamps: int = 0


def apply_overrides(assignment: RcpAssignment, overrides: Mapping, stats: SampleStats | None = None) -> RcpAssignment:
    """Force the named RCPs, then clamp ``num_prbs`` into the feasible range."""
    if not overrides:
        return assignment
    values = dataclasses.asdict(assignment)
    values.update(overrides)
    cap = prb_max(values["bandwidth"])
    prbs = int(values["num_prbs"])
    clamped = min(max(prbs, MIN_PRBS), cap)
    if clamped != prbs:
        if stats is not None:
            stats.prb_clamps += 1
        values["num_prbs"] = clamped
    return RcpAssignment(**{k: (int(v) if v is not None else None) for k, v in values.items()})


def sample_assignment(
    streams: EpisodeStreams,
    config: SimConfig,
    episode_id: int,
    stats: SampleStats | None = None,
) -> tuple[RcpAssignment, ContextState]:
    g = streams.assignment
    bw = BANDWIDTHS_MHZ[int(g.integers(len(BANDWIDTHS_MHZ)))]
    prbs = int(g.integers(MIN_PRBS, prb_max(bw) + 1))
    tx = int(g.integers(TX_POWER_RANGE_DBM[0], TX_POWER_RANGE_DBM[1] + 1))
    ant = ANTENNA_COUNTS[int(g.integers(len(ANTENNA_COUNTS)))]
    dummy = int(streams.dummy.integers(0, 10)) if config.include_dummy_rcp else None
    for name in config.do_overrides:
        check_override(name, config.do_overrides[name], config.include_dummy_rcp)
    assignment = apply_overrides(RcpAssignment(bw, prbs, tx, ant, dummy), config.do_overrides, stats)

    lo, hi = config.distance_range_m
    c = streams.context
    ctx = ContextState(
        ue_distance=float(c.uniform(lo, hi)),
        shadowing=float(c.normal(0.0, config.shadowing_sigma_db)),
        episode_id=int(episode_id),
    )
    return assignment, ctx


@dataclass(frozen=True)
class LinkBudget:
    pathloss_db: np.ndarray
    antenna_gain_db: np.ndarray
    noise_dbm: np.ndarray
    sinr_db: np.ndarray
    se_selected: np.ndarray
    threshold_db: np.ndarray


def link_budget(bandwidth, num_tx_antennas, tx_power, ue_distance, shadowing, config: SimConfig) -> LinkBudget:
    """Deterministic part of the link: SINR, selected spectral efficiency, error threshold.

    Accepts scalars or equally shaped arrays.
    """
    bw = np.asarray(bandwidth, dtype=np.float64)
    ant = np.asarray(num_tx_antennas, dtype=np.float64)
    tx = np.asarray(tx_power, dtype=np.float64)
    d = np.asarray(ue_distance, dtype=np.float64)
    sh = np.asarray(shadowing, dtype=np.float64)
    pl = (
        config.pathloss_intercept_db
        + config.pathloss_distance_coeff * np.log10(d)
        + config.pathloss_frequency_coeff * np.log10(config.carrier_ghz)
    )
    gain = 10.0 * np.log10(ant)
    # noise is integrated over the whole channel, not just the allocated PRBs
    noise = config.noise_psd_dbm_hz + 10.0 * np.log10(bw * 1e6) + config.noise_figure_db
    sinr = tx + gain - pl - sh - noise
    se = np.minimum(np.log2(1.0 + 10.0 ** ((sinr - config.margin_db) / 10.0)), config.se_cap)
    with np.errstate(divide="ignore"):
        theta = 10.0 * np.log10(np.exp2(se) - 1.0)
    return LinkBudget(pl, gain, noise, sinr, se, theta)


def frame_fades(streams: EpisodeStreams, config: SimConfig) -> np.ndarray:
    return streams.fading.normal(0.0, config.fade_sigma_db, config.frames_per_episode)


def kpis_from_link(se_selected, num_prbs, bandwidth, sinr_db, threshold_db, fades) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized KPI computation; ``fades`` has shape ``(..., frames)``."""
    sinr_db = np.asarray(sinr_db, dtype=np.float64)
    threshold_db = np.asarray(threshold_db, dtype=np.float64)
    errors = np.count_nonzero(sinr_db[..., None] + fades < threshold_db[..., None], axis=-1)
    bler = errors / fades.shape[-1]
    throughput = (
        np.asarray(se_selected, dtype=np.float64)
        * np.asarray(num_prbs, dtype=np.float64)
        * SUBCARRIERS_PER_PRB
        * SCS_KHZ
        * 1000.0
        * (1.0 - bler)
        / 1e6
    )
    spectral_efficiency = throughput * 1e6 / (np.asarray(bandwidth, dtype=np.float64) * 1e6)
    return throughput, spectral_efficiency, bler


def simulate_episode(
    assignment: RcpAssignment,
    ctx: ContextState,
    config: SimConfig,
    rng: np.random.Generator | None = None,
    fades: np.ndarray | None = None,
) -> KpiRecord:
    """KPIs of one episode. Fades are drawn from ``rng`` unless given explicitly."""
    if fades is None:
        if rng is None:
            rng = episode_streams(config.master_seed, ctx.episode_id).fading
        fades = rng.normal(0.0, config.fade_sigma_db, config.frames_per_episode)
    lb = link_budget(
        assignment.bandwidth, assignment.num_tx_antennas, assignment.tx_power, ctx.ue_distance, ctx.shadowing, config
    )
    thr, se, bler = kpis_from_link(lb.se_selected, assignment.num_prbs, assignment.bandwidth, lb.sinr_db, lb.threshold_db, np.asarray(fades))
    return KpiRecord(float(thr), float(se), float(bler))


def ran_schema(config: SimConfig) -> list[Column]:
    cols = [
        Column("bandwidth", "rcp", "discrete-set", levels=BANDWIDTHS_MHZ, unit="MHz"),
        Column("num_prbs", "rcp", "integer-range", bounds=(MIN_PRBS, max(_NRB_15KHZ.values())), unit="PRB"),
        Column("tx_power", "rcp", "integer-range", bounds=TX_POWER_RANGE_DBM, unit="dBm"),
        Column("num_tx_antennas", "rcp", "discrete-set", levels=ANTENNA_COUNTS),
    ]
    if config.include_dummy_rcp:
        cols.append(Column(DUMMY_RCP, "rcp", "integer-range", bounds=(0, 9)))
    cols += [
        Column("ue_distance", "context", "real", bounds=config.distance_range_m, unit="m"),
        Column("shadowing", "context", "real", unit="dB"),
        Column("throughput", "kpi", "real", bounds=(0.0, None), unit="Mbps"),
        Column("spectral_efficiency", "kpi", "real", bounds=(0.0, None), unit="bit/s/Hz"),
        Column("bler", "kpi", "real", bounds=(0.0, 1.0)),
    ]
    return cols


@dataclass
class _Draws:
    episode_ids: np.ndarray
    rcps: dict
    ue_distance: np.ndarray
    shadowing: np.ndarray
    fades: np.ndarray
    stats: SampleStats


def _draw_episodes(config: SimConfig, episode_ids: Sequence[int]) -> _Draws:
    stats = SampleStats()
    names = rcp_names(config)
    rcps = {n: np.empty(len(episode_ids), dtype=np.int64) for n in names}
    dist = np.empty(len(episode_ids))
    shadow = np.empty(len(episode_ids))
    fades = np.empty((len(episode_ids), config.frames_per_episode))
    for k, eid in enumerate(episode_ids):
        streams = episode_streams(config.master_seed, eid)
        a, ctx = sample_assignment(streams, config, eid, stats)
        for n in names:
            rcps[n][k] = getattr(a, n)
        dist[k] = ctx.ue_distance
        shadow[k] = ctx.shadowing
        fades[k] = frame_fades(streams, config)
    return _Draws(np.asarray(episode_ids, dtype=np.int64), rcps, dist, shadow, fades, stats)


def _kpis(rcps: Mapping, draws: _Draws, config: SimConfig):
    lb = link_budget(rcps["bandwidth"], rcps["num_tx_antennas"], rcps["tx_power"], draws.ue_distance, draws.shadowing, config)
    return kpis_from_link(lb.se_selected, rcps["num_prbs"], rcps["bandwidth"], lb.sinr_db, lb.threshold_db, draws.fades)


def generate_dataset(config: SimConfig, episode_ids: Sequence[int] | None = None, created_at: str | None = None) -> Dataset:
    """Simulate ``config.n_episodes`` episodes (or the given subset of episode ids)."""
    ids = list(range(config.n_episodes)) if episode_ids is None else [int(e) for e in episode_ids]
    draws = _draw_episodes(config, ids)
    thr, se, bler = _kpis(draws.rcps, draws, config)
    columns = dict(draws.rcps)
    columns.update(ue_distance=draws.ue_distance, shadowing=draws.shadowing, throughput=thr, spectral_efficiency=se, bler=bler)
    provenance = {
        "generator": "xappconflict.simkernel",
        "sim_config": config.to_dict(),
        "prb_clamps": draws.stats.prb_clamps,
        "created_at": created_at,
    }
    if draws.stats.prb_clamps:
        log.info("clamped num_prbs override in %d of %d episodes", draws.stats.prb_clamps, len(ids))
    return Dataset(ran_schema(config), columns, draws.episode_ids, provenance)


def treatment_scale(name: str) -> str:
    """Natural unit in which per-unit effects of an RCP are expressed."""
    return "log2" if name == "num_tx_antennas" else "linear"


def _shift(name: str, values: np.ndarray, delta: float, bandwidth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shifted treatment values and a mask of pairs that stay inside the domain."""
    v = values.astype(np.float64)
    if treatment_scale(name) == "log2":
        new = v * 2.0**delta
    else:
        new = v + delta
    if name == "bandwidth":
        ok = np.isin(new, BANDWIDTHS_MHZ)
    elif name == "num_tx_antennas":
        ok = np.isin(new, ANTENNA_COUNTS)
    elif name == "num_prbs":
        ok = (new >= MIN_PRBS) & (new <= _PRB_LOOKUP[bandwidth])
    elif name == "tx_power":
        ok = (new >= TX_POWER_RANGE_DBM[0]) & (new <= TX_POWER_RANGE_DBM[1])
    elif name == DUMMY_RCP:
        ok = (new >= 0) & (new <= 9)
    else:
        raise DomainError(f"unknown treatment {name!r}")
    return new, ok


@dataclass(frozen=True)
class OracleResult:
    treatment: str
    outcome: str
    delta: float
    ate_per_unit: float
    stderr: float
    n_used: int
    n_excluded: int
    scale: str


def oracle_ate_detail(
    treatment: str,
    delta: float,
    outcome: str,
    config: SimConfig,
    n_episodes: int | None = None,
    base_shift: float = 0.0,
    mask=None,
) -> OracleResult:
    """Interventional ground truth by paired common-random-number Monte Carlo.

    Each episode is simulated at its natural treatment value (optionally moved
    by ``base_shift`` first) and at that value plus ``delta``, with every other
    draw held fixed. Pairs that leave the treatment's domain are dropped.
    ``mask`` optionally takes a callable ``f(draws_dict) -> bool array`` to restrict
    the average to a sub-population (e.g. a distance band).
    """
    if delta == 0:
        raise DomainError("delta must be non-zero")
    if outcome not in KPI_NAMES:
        raise DomainError(f"unknown outcome {outcome!r}; expected one of {KPI_NAMES}")
    if treatment not in rcp_names(config):
        raise DomainError(f"unknown treatment {treatment!r}; expected one of {rcp_names(config)}")
    n = config.n_episodes if n_episodes is None else int(n_episodes)
    draws = _draw_episodes(config, range(n))

    base = dict(draws.rcps)
    keep = np.ones(n, dtype=bool)
    if base_shift:
        base[treatment], ok = _shift(treatment, base[treatment], base_shift, base["bandwidth"])
        keep &= ok
    hi = dict(base)
    hi[treatment], ok = _shift(treatment, base[treatment], delta, base["bandwidth"])
    keep &= ok
    for arm in (base, hi):
        # a narrower channel may no longer fit the sampled PRBs
        bw = np.where(keep, arm["bandwidth"], BANDWIDTHS_MHZ[0]).astype(np.int64)
        keep &= arm["num_prbs"] <= _PRB_LOOKUP[bw]
    if mask is not None:
        keep &= np.asarray(mask({**draws.rcps, "ue_distance": draws.ue_distance, "shadowing": draws.shadowing}), dtype=bool)
    if not keep.any():
        raise EstimationError("empty oracle sample: every paired intervention left the treatment domain")

    idx = {"throughput": 0, "spectral_efficiency": 1, "bler": 2}[outcome]
    safe = {k: np.where(keep, v, draws.rcps[k]) for k, v in hi.items()}
    safe_base = {k: np.where(keep, v, draws.rcps[k]) for k, v in base.items()}
    y_hi = _kpis(safe, draws, config)[idx][keep]
    y_lo = _kpis(safe_base, draws, config)[idx][keep]
    diff = (y_hi - y_lo) / delta
    m = len(diff)
    return OracleResult(
        treatment=treatment,
        outcome=outcome,
        delta=float(delta),
        ate_per_unit=float(diff.mean()),
        stderr=float(diff.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0,
        n_used=int(m),
        n_excluded=int(n - m),
        scale=treatment_scale(treatment),
    )


def oracle_ate(treatment: str, delta: float, outcome: str, config: SimConfig, **kwargs) -> float:
    """Ground-truth average effect per unit of ``treatment`` on ``outcome``."""
    return oracle_ate_detail(treatment, delta, outcome, config, **kwargs).ate_per_unit


# Causal structure of the simulator itself: which RCPs reach which KPIs.
DGP_STRUCTURAL_EDGES = (("bandwidth", "num_prbs"),)
DGP_INFLUENCE_EDGES = (
    ("bandwidth", "throughput"),
    ("bandwidth", "spectral_efficiency"),
    ("bandwidth", "bler"),
    ("num_prbs", "throughput"),
    ("num_prbs", "spectral_efficiency"),
    ("tx_power", "throughput"),
    ("tx_power", "spectral_efficiency"),
    ("tx_power", "bler"),
    ("num_tx_antennas", "throughput"),
    ("num_tx_antennas", "spectral_efficiency"),
    ("num_tx_antennas", "bler"),
)
DGP_CONTEXT_EDGES = tuple((c, k) for c in CONTEXT_NAMES for k in KPI_NAMES)

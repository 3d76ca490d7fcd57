import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xappconflict import simkernel as sk
from xappconflict.errors import DomainError, EstimationError


# 3GPP 15 kHz transmission-bandwidth table, transcribed independently of the module
NRB_15KHZ = {5: 25, 10: 52, 15: 79, 20: 106, 25: 133, 30: 160, 35: 188, 40: 216, 45: 242, 50: 270}

SMALL = sk.SimConfig(n_episodes=200)


def scalar_link(bw, ant, tx, d, sh):
    """Hand evaluation of the link budget with the math module."""
    pl = 32.4 + 21 * math.log10(d) + 20 * math.log10(2.6)
    g = 10 * math.log10(ant)
    n = -174 + 10 * math.log10(bw * 1e6) + 7
    sinr = tx + g - pl - sh - n
    se = min(math.log2(1 + 10 ** ((sinr - 3) / 10)), 7.4)
    theta = 10 * math.log10(2**se - 1)
    return pl, g, n, sinr, se, theta


@pytest.mark.parametrize("bw,expected", [(5, 25), (20, 106), (50, 270)])
def test_prb_max_examples(bw, expected):
    assert sk.prb_max(bw) == expected


def test_prb_max_full_table():
    assert {bw: sk.prb_max(bw) for bw in sk.BANDWIDTHS_MHZ} == NRB_15KHZ


@pytest.mark.parametrize("bw", [0, 7, 60, 100])
def test_prb_max_rejects_unknown_bandwidth(bw):
    with pytest.raises(DomainError, match=str(bw)):
        sk.prb_max(bw)


def test_link_budget_frozen_values():
    # frozen from scalar_link: 20 MHz, 4 antennas, 30 dBm, 100 m, no shadowing
    lb = sk.link_budget(20, 4, 30, 100.0, 0.0, sk.SimConfig())
    assert float(lb.pathloss_db) == pytest.approx(82.69946695941637, abs=1e-12)
    assert float(lb.noise_dbm) == pytest.approx(-93.98970004336019, abs=1e-12)
    assert float(lb.sinr_db) == pytest.approx(47.31083299722344, abs=1e-12)
    assert float(lb.se_selected) == 7.4
    assert float(lb.threshold_db) == pytest.approx(22.250429687287088, abs=1e-12)
    # uncapped regime: threshold sits exactly the margin below the SINR
    lb = sk.link_budget(50, 1, 1, 300.0, 6.0, sk.SimConfig())
    assert float(lb.sinr_db) == pytest.approx(-7.708713351889472, abs=1e-12)
    assert float(lb.se_selected) == pytest.approx(0.11761952750029571, rel=1e-12)
    assert float(lb.threshold_db) == pytest.approx(float(lb.sinr_db) - 3.0, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    bw=st.sampled_from(sk.BANDWIDTHS_MHZ),
    ant=st.sampled_from(sk.ANTENNA_COUNTS),
    tx=st.integers(1, 40),
    d=st.floats(10, 300),
    sh=st.floats(-12, 12),
)
def test_link_budget_matches_scalar_oracle(bw, ant, tx, d, sh):
    got = sk.link_budget(bw, ant, tx, d, sh, sk.SimConfig())
    want = scalar_link(bw, ant, tx, d, sh)
    for g, w in zip(dataclasses.astuple(got), want):
        assert float(g) == pytest.approx(w, rel=1e-12, abs=1e-9)


def test_throughput_hand_example():
    thr, se, bler = sk.kpis_from_link(5.0, 100, 20, 50.0, 0.0, np.zeros((1, 100)))
    assert float(thr[0]) == pytest.approx(90.0, abs=1e-12)
    assert float(se[0]) == pytest.approx(90.0 / 20, abs=1e-12)
    assert float(bler[0]) == 0.0


def test_total_loss_and_deep_fade():
    # every frame below threshold
    thr, se, bler = sk.kpis_from_link(5.0, 100, 20, 0.0, 10.0, np.zeros((1, 100)))
    assert float(bler[0]) == 1.0 and float(thr[0]) == 0.0 and float(se[0]) == 0.0
    a = sk.RcpAssignment(50, 4, 1, 1)
    ctx = sk.ContextState(ue_distance=1e7, shadowing=40.0, episode_id=0)
    k = sk.simulate_episode(a, ctx, sk.SimConfig())
    assert 0.0 <= k.throughput < 1e-6
    assert 0.0 <= k.spectral_efficiency < 1e-6


def test_assignment_validation():
    with pytest.raises(DomainError):
        sk.RcpAssignment(5, 26, 10, 1)
    with pytest.raises(DomainError):
        sk.RcpAssignment(5, 3, 10, 1)
    with pytest.raises(DomainError):
        sk.RcpAssignment(5, 10, 41, 1)
    with pytest.raises(DomainError):
        sk.RcpAssignment(5, 10, 10, 3)


def test_sim_config_rejects_zero_episodes():
    with pytest.raises(DomainError):
        sk.SimConfig(n_episodes=0)
    with pytest.raises(DomainError):
        sk.SimConfig(frames_per_episode=0)


def test_sample_assignment_deterministic():
    cfg = sk.SimConfig()
    a = sk.sample_assignment(sk.episode_streams(42, 17), cfg, 17)
    b = sk.sample_assignment(sk.episode_streams(42, 17), cfg, 17)
    assert a == b
    assert sk.sample_assignment(sk.episode_streams(43, 17), cfg, 17) != a


def test_override_forces_value():
    cfg = sk.SimConfig(n_episodes=50, do_overrides={"tx_power": 30})
    data = sk.generate_dataset(cfg)
    assert np.all(data["tx_power"] == 30)


def test_prb_override_clamped_at_5mhz():
    cfg = sk.SimConfig(do_overrides={"num_prbs": 300})
    stats = sk.SampleStats()
    eid = next(e for e in range(1000) if sk.sample_assignment(sk.episode_streams(42, e), sk.SimConfig(), e)[0].bandwidth == 5)
    a, _ = sk.sample_assignment(sk.episode_streams(42, eid), cfg, eid, stats)
    assert a.bandwidth == 5 and a.num_prbs == 25
    assert stats.prb_clamps == 1


def test_override_outside_global_domain():
    with pytest.raises(DomainError):
        sk.SimConfig(do_overrides={"tx_power": 99})
    with pytest.raises(DomainError):
        sk.SimConfig(do_overrides={"bandwidth": 12})
    with pytest.raises(DomainError):
        sk.SimConfig(do_overrides={"num_prbs": 0})


def test_dataset_default_size_and_ids(default_data):
    assert len(default_data) == 1000
    assert np.array_equal(default_data.episode_ids, np.arange(1000))


def test_generate_dataset_deterministic():
    assert sk.generate_dataset(SMALL) == sk.generate_dataset(SMALL)


def test_episode_order_independence():
    full = sk.generate_dataset(SMALL)
    ids = np.random.default_rng(1).permutation(200)
    shuffled = sk.generate_dataset(SMALL, episode_ids=ids)
    order = np.argsort(shuffled.episode_ids)
    for name in full.names:
        assert np.array_equal(full[name], shuffled[name][order])


def test_feasibility_and_domains(default_data):
    prb_cap = np.array([NRB_15KHZ[b] for b in default_data["bandwidth"]])
    assert np.all(default_data["num_prbs"] <= prb_cap)
    assert np.all(default_data["num_prbs"] >= 4)
    assert np.all((default_data["ue_distance"] >= 10) & (default_data["ue_distance"] <= 300))
    assert set(np.unique(default_data["bandwidth"])) <= set(sk.BANDWIDTHS_MHZ)
    assert set(np.unique(default_data["num_tx_antennas"])) <= set(sk.ANTENNA_COUNTS)


def test_kpi_algebraic_invariants(default_data):
    d = default_data
    lb = sk.link_budget(d["bandwidth"], d["num_tx_antennas"], d["tx_power"], d["ue_distance"], d["shadowing"], sk.SimConfig())
    thr = lb.se_selected * d["num_prbs"] * 12 * 15000 * (1 - d["bler"]) / 1e6
    np.testing.assert_allclose(d["throughput"], thr, rtol=1e-9, atol=0)
    np.testing.assert_allclose(d["spectral_efficiency"], d["throughput"] * 1e6 / (d["bandwidth"] * 1e6), rtol=1e-9, atol=0)
    frames = d["bler"] * 100
    np.testing.assert_allclose(frames, np.round(frames), atol=1e-9)
    assert np.all((d["bler"] >= 0) & (d["bler"] <= 1))


def test_simulate_episode_matches_dataset(default_data):
    cfg = sk.SimConfig()
    for eid in (0, 5, 999):
        streams = sk.episode_streams(42, eid)
        a, ctx = sk.sample_assignment(streams, cfg, eid)
        k = sk.simulate_episode(a, ctx, cfg, streams.fading)
        assert k.throughput == default_data["throughput"][eid]
        assert k.bler == default_data["bler"][eid]


@settings(max_examples=50, deadline=None)
@given(
    bw=st.sampled_from(sk.BANDWIDTHS_MHZ),
    ant=st.sampled_from(sk.ANTENNA_COUNTS),
    tx=st.integers(1, 39),
    d=st.floats(10, 300),
    sh=st.floats(-12, 12),
)
def test_sinr_monotone_in_power_and_bandwidth(bw, ant, tx, d, sh):
    cfg = sk.SimConfig()
    base = float(sk.link_budget(bw, ant, tx, d, sh, cfg).sinr_db)
    assert float(sk.link_budget(bw, ant, tx + 1, d, sh, cfg).sinr_db) >= base
    wider = [b for b in sk.BANDWIDTHS_MHZ if b > bw]
    for b in wider:
        assert float(sk.link_budget(b, ant, tx, d, sh, cfg).sinr_db) <= base


def test_oracle_tx_power_positive():
    assert sk.oracle_ate("tx_power", 1, "throughput", sk.SimConfig(n_episodes=2000)) > 0


def test_oracle_dummy_null():
    cfg = sk.SimConfig(include_dummy_rcp=True)
    res = sk.oracle_ate_detail("dummy", 1, "throughput", cfg, n_episodes=2000)
    # the dummy never enters the link budget, so paired differences vanish identically
    assert res.ate_per_unit == 0.0
    assert res.n_excluded > 0


def test_oracle_symmetry():
    cfg = sk.SimConfig()
    up = sk.oracle_ate_detail("tx_power", 1, "throughput", cfg, n_episodes=4000)
    down = sk.oracle_ate_detail("tx_power", -1, "throughput", cfg, n_episodes=4000, base_shift=1)
    tol = 4 * math.hypot(up.stderr, down.stderr) + 0.02 * abs(up.ate_per_unit)
    assert abs(up.ate_per_unit - down.ate_per_unit) <= tol


def test_oracle_preconditions():
    cfg = sk.SimConfig(n_episodes=20)
    with pytest.raises(DomainError):
        sk.oracle_ate("tx_power", 0, "throughput", cfg)
    with pytest.raises(DomainError):
        sk.oracle_ate("nope", 1, "throughput", cfg)
    with pytest.raises(DomainError):
        sk.oracle_ate("tx_power", 1, "latency", cfg)
    with pytest.raises(EstimationError, match="empty oracle sample"):
        sk.oracle_ate("tx_power", 100, "throughput", cfg)


def test_oracle_antennas_log2_scale():
    res = sk.oracle_ate_detail("num_tx_antennas", 1, "throughput", sk.SimConfig(), n_episodes=2000)
    assert res.scale == "log2"
    # doubling from 16 leaves the antenna set, so those pairs drop out
    assert res.n_excluded > 0 and res.ate_per_unit > 0


def test_oracle_prb_pairs_respect_cap():
    res = sk.oracle_ate_detail("bandwidth", -5, "throughput", sk.SimConfig(), n_episodes=2000)
    assert res.n_used + res.n_excluded == 2000
    assert res.n_excluded > 200  # 5 MHz cannot shrink and large PRB counts no longer fit

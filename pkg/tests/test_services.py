"""Congestion flagging and bid estimation mechanics."""

import json
import math

import numpy as np
import pytest

from gridmpnn.mpnn import NodePrediction
from gridmpnn.services import (CongestionEvent, detect_congestions,
                               estimate_bid, estimate_bids, phi,
                               write_jsonl, write_plot_csv)
from gridmpnn.imputation import ImputationProblem, impute

from conftest import chain_schemas


def test_phi_standard_values():
    assert phi(0.0) == pytest.approx(0.5, abs=1e-12)
    assert phi(1.0) == pytest.approx(0.8413, abs=5e-5)
    assert abs(phi(1.0) - 0.8413447460685429) < 1e-12


def test_phi_symmetry():
    for z in np.linspace(-4, 4, 33):
        assert phi(-z) == pytest.approx(1.0 - phi(z), abs=1e-12)
    assert phi(math.inf) == 1.0
    assert phi(-math.inf) == 0.0


def _volt_pred(mu, sigma):
    return {"p": NodePrediction("p", np.array([mu]),
                                np.array([sigma ** 2]))}


def _volt_schema():
    from gridmpnn.gridgraph import NodeSchema
    return {"p": NodeSchema("p", [("voltage", "voltage")], [], [], p=1)}


def test_detect_flags_one_sigma_exceedance():
    events = detect_congestions(_volt_pred(242.0, 2.0), _volt_schema(),
                                threshold_v=240.0, z=1.0, timestamp=77)
    assert len(events) == 1
    ev = events[0]
    assert ev.z_score == pytest.approx(1.0)
    assert ev.exceedance_probability == pytest.approx(0.8413, abs=5e-5)
    assert ev.node_id == "p" and ev.phase == "voltage" and ev.timestamp == 77


def test_detect_does_not_flag_at_threshold_mean():
    events = detect_congestions(_volt_pred(240.0, 2.0), _volt_schema(),
                                threshold_v=240.0, z=1.0)
    assert events == []


def test_detect_flags_far_exceedance():
    events = detect_congestions(_volt_pred(245.0, 1.0), _volt_schema(),
                                threshold_v=240.0, z=1.0)
    assert len(events) == 1
    assert events[0].z_score == pytest.approx(5.0)


def test_detect_zero_sigma_degenerates_to_mean_comparison():
    assert detect_congestions(_volt_pred(240.5, 0.0), _volt_schema(),
                              threshold_v=240.0, z=1.0)
    assert not detect_congestions(_volt_pred(240.0, 0.0), _volt_schema(),
                                  threshold_v=240.0, z=1.0)


def test_undervoltage_mode():
    events = detect_congestions(_volt_pred(214.0, 2.0), _volt_schema(),
                                threshold_v=218.0, z=1.0, direction="under")
    assert len(events) == 1
    assert events[0].z_score == pytest.approx(2.0)


def test_flag_monotonicity_in_mu_and_threshold():
    rng = np.random.default_rng(5)
    for _ in range(200):
        mu = rng.uniform(230, 250)
        sigma = rng.uniform(0.1, 4.0)
        thr = rng.uniform(235, 245)
        z = rng.uniform(0.5, 2.0)
        flagged = bool(detect_congestions(_volt_pred(mu, sigma),
                                          _volt_schema(), thr, z))
        higher = bool(detect_congestions(_volt_pred(mu + 1.0, sigma),
                                         _volt_schema(), thr, z))
        stricter = bool(detect_congestions(_volt_pred(mu, sigma),
                                           _volt_schema(), thr + 1.0, z))
        if flagged:
            assert higher
        if stricter:
            assert flagged


def test_event_probability_consistent_with_z_score():
    rng = np.random.default_rng(6)
    for _ in range(100):
        mu, sigma, thr = rng.uniform(238, 246), rng.uniform(0.2, 3), 240.0
        events = detect_congestions(_volt_pred(mu, sigma), _volt_schema(),
                                    thr, z=0.0)
        for ev in events:
            assert abs(ev.exceedance_probability - phi(ev.z_score)) < 1e-4


# ---------------------------------------------------------------------------
# Bids (mechanics on the chain model; physics checks live in acceptance)


def test_nothing_masked_preserves_energy_delta_zero(quick_chain_model):
    feats = {"g": np.array([0.7]), "s": np.array([0.2]),
             "f": np.array([0.1])}
    obs = {nid: np.array([True]) for nid in feats}
    result = impute(quick_chain_model, ImputationProblem(
        features=feats, observed=obs))
    assert result.iterations == 0
    assert result.values["s"][0] - feats["s"][0] == 0.0


def test_bid_groups_events_per_feeder_timestamp(quick_pilot_bid_world):
    model, feats, obs, events = quick_pilot_bid_world
    bids = estimate_bids(model, feats, obs, events)
    keys = {(b.feeder_id, b.timestamp) for b in bids}
    assert len(bids) == len(keys)
    two_event_bids = [b for b in bids if len(b.event_ids) == 2]
    assert two_event_bids, "expected one merged bid for the shared feeder"


def test_bid_delta_definition_and_determinism(quick_pilot_bid_world):
    model, feats, obs, events = quick_pilot_bid_world
    a = estimate_bids(model, feats, obs, events)
    b = estimate_bids(model, feats, obs, events)
    for x, y in zip(a, b):
        assert x.delta == y.delta
        assert x.delta == pytest.approx(x.constrained_energy
                                        - x.baseline_energy)
        assert x.substation_id == model.topology.parent[x.feeder_id]


def test_single_event_wrapper(quick_pilot_bid_world):
    model, feats, obs, events = quick_pilot_bid_world
    bid = estimate_bid(model, feats, obs, events[0])
    assert bid.event_ids == [events[0].event_id]


# ---------------------------------------------------------------------------
# exports


def test_jsonl_and_plot_csv_writers(tmp_path):
    ev = CongestionEvent("p", "voltage", 1000, 240.0, 242.0, 2.0, 1.0,
                         phi(1.0))
    path = str(tmp_path / "events.jsonl")
    write_jsonl(path, [ev], meta={"seed": 3})
    lines = open(path).read().splitlines()
    assert json.loads(lines[0]) == {"meta": {"seed": 3}}
    rec = json.loads(lines[1])
    assert rec["event_id"] == "p:voltage@1000"
    assert rec["exceedance_probability"] == pytest.approx(0.8413, abs=5e-5)

    rows = [{"timestamp": 1000, "node_id": "p", "phase": "voltage",
             "actual": 241.2, "mu": 242.0, "lo": 238.0, "hi": 246.0,
             "threshold": 240.0, "flagged": 1}]
    cpath = str(tmp_path / "plot.csv")
    write_plot_csv(cpath, rows, header_comment="meta")
    lines = open(cpath).read().splitlines()
    assert lines[0] == "# meta"
    assert lines[1].split(",") == ["timestamp", "node_id", "phase", "actual",
                                   "mu", "lo", "hi", "threshold", "flagged"]
    assert lines[2].startswith("1000,p,voltage,241.2,242,238,246,240,1")

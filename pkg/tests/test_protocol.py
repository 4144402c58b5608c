import itertools
import math
import struct
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nqr import embedder as em
from nqr import matching as mt
from nqr import protocol as pr
from nqr.protocol import TxAction


def _policy_oracle(delta_below, c):
    if not delta_below or c >= 20:
        return TxAction.STOP
    return TxAction.SEND16 if c < 10 else TxAction.SEND128


def test_policy_examples():
    assert pr.tx_decide(0.5, 3, 1.0) is TxAction.SEND16
    assert pr.tx_decide(0.5, 12, 1.0) is TxAction.SEND128
    assert pr.tx_decide(2.0, 3, 1.0) is TxAction.STOP
    for alpha in (-math.inf, 0.0, 1.0, math.inf):
        assert pr.tx_decide(0.5, 20, alpha) is TxAction.STOP


def test_policy_truth_table():
    for below, c in itertools.product((True, False), range(0, 25)):
        alpha = 1.0
        delta = 0.5 if below else 1.0   # equality counts as cleared
        assert pr.tx_decide(delta, c, alpha) is _policy_oracle(below, c), (below, c)


def test_undefined_gap_always_transmits():
    for alpha in (-math.inf, -1.0, 0.0, 2.0, math.inf):
        assert pr.tx_decide(pr.UNDEFINED, 0, alpha) is TxAction.SEND16
    assert pr.tx_decide(pr.UNDEFINED, 20, 1.0) is TxAction.STOP


def test_action_dims():
    assert [a.dim for a in TxAction] == [16, 128, 0]


def test_packet_wire_format():
    payload = np.arange(16, dtype=np.float32) / 7
    pkt = pr.Packet(robot=70000, slot=3, pass_index=11, dim=16, payload=payload)
    raw = pkt.encode()
    assert len(raw) == pr.HEADER_SIZE + 64 == pkt.nbytes
    assert raw[:16] == struct.pack("<IHHH", 70000, 3, 11, 16) + bytes(6)
    assert raw[16:20] == struct.pack("<f", payload[0])
    back = pr.Packet.decode(raw)
    assert (back.robot, back.slot, back.pass_index, back.dim) == (70000, 3, 11, 16)
    assert np.array_equal(back.payload, payload)


def test_packet_payload_length_checked():
    with pytest.raises(ValueError):
        pr.Packet(0, 0, 0, 16, np.zeros(15, dtype=np.float32))


def _entry(q, robot, dim, slot=0, p=0):
    return pr.LedgerEntry(q, pr.Packet(robot, slot, p, dim, np.zeros(dim, dtype=np.float32)))


def test_bandwidth_totals():
    empty = pr.bandwidth_totals([])
    assert (empty["dims"], empty["bytes"], empty["packets"]) == (0, 0, 0)
    one = pr.bandwidth_totals([_entry(0, 1, 128)])
    assert (one["dims"], one["bytes"], one["packets"]) == (128, 528, 1)
    full = [_entry(0, 1, 16 if p < 10 else 128, p=p) for p in range(20)]
    t = pr.bandwidth_totals(full)
    assert t["dims"] == 1440 and t["packets"] == 20 and t["bytes"] == 1440 * 4 + 20 * 16
    mixed = pr.bandwidth_totals([_entry(0, 1, 16), _entry(1, 1, 16), _entry(1, 2, 128)])
    assert mixed["per_query"][1]["dims"] == 144 and mixed["per_robot"][1]["packets"] == 2


def test_network_delivers_in_time_order():
    got = []

    class Sink:
        def receive(self, msg, net):
            got.append((round(net.now, 9), msg))

    net = pr.Network(latency=lambda n: n * 1e-3)
    net.attach("s", Sink())
    net.send("s", "big", 10)
    net.send("s", "small", 1)
    net.send("s", "small2", 1)
    net.run()
    assert [m for _, m in got] == ["small", "small2", "big"]


@pytest.fixture(scope="module")
def setup(small_prepared):
    params = em.init_params(np.random.default_rng(0), 3, head_dims=(16, 128))
    return small_prepared, params, mt.FeatureCache(params, small_prepared)


def test_unbounded_threshold_sends_everything(setup):
    data, params, cache = setup
    t = time.perf_counter()
    rep = pr.run_session(data, params, math.inf, cache=cache)
    assert time.perf_counter() - t < 1.0
    n_cand = data.n_candidates
    for q in rep.queries:
        assert q.passes == 20 and q.dims_per_candidate == 1440
        assert q.packets == 20 * n_cand
    per = {}
    for e in rep.ledger:
        key = (e.query, e.packet.robot, e.packet.slot)
        per.setdefault(key, []).append(e.packet.dim)
    assert all(d == [16] * 10 + [128] * 10 for d in per.values())
    assert rep.summary()["avg_packets"] == 20 and rep.summary()["total_dims"] == 1440


def test_negative_threshold_sends_one_pass(setup):
    data, params, cache = setup
    rep = pr.run_session(data, params, -math.inf, cache=cache)
    assert all(q.passes == 1 and q.dims_per_candidate == 16 for q in rep.queries)
    assert len(rep.ledger) == len(data.seed) * data.n_candidates


def test_bandwidth_nondecreasing_in_threshold(setup):
    data, params, cache = setup
    dims = [pr.bandwidth_totals(pr.run_session(data, params, a, cache=cache).ledger)["dims"]
            for a in (-math.inf, 0.25, 0.5, 1.0, 2.0, math.inf)]
    assert dims == sorted(dims)


def test_packet_limits_and_order(setup):
    data, params, cache = setup
    rep = pr.run_session(data, params, 1.0, cache=cache)
    for q in rep.queries:
        entries = [e for e in rep.ledger if e.query == q.query]
        assert len(entries) == q.packets
        keys = [(e.packet.pass_index, e.packet.robot, e.packet.slot) for e in entries]
        assert keys == sorted(keys)
        # nothing after the stop round
        assert max(k[0] for k in keys) == q.passes - 1
        counts = {}
        for e in entries:
            counts[(e.packet.robot, e.packet.slot)] = counts.get((e.packet.robot, e.packet.slot), 0) + 1
        assert max(counts.values()) <= 20


def test_session_matches_offline_evaluation(setup):
    data, params, cache = setup
    # one round uses the same locations and 16-d head as a single offline pass
    one = pr.run_session(data, params, -math.inf, seed=3, cache=cache)
    ev = mt.evaluate(data, params, 3, 16, 1, seed=3, cache=cache)
    assert [q.true_rank for q in one.queries] == ev["ranks"]
    assert all(q.complete for q in one.queries)


def test_session_is_deterministic(setup, tmp_path):
    data, params, cache = setup
    for n in (1, 2):
        rep = pr.run_session(data, params, 0.5, seed=5, cache=cache)
        pr.write_ledger(rep.ledger, tmp_path / f"l{n}.bin")
        pr.write_session_csv(rep, tmp_path / f"s{n}.csv")
    assert (tmp_path / "l1.bin").read_bytes() == (tmp_path / "l2.bin").read_bytes()
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()


def test_ledger_round_trip(setup, tmp_path):
    data, params, cache = setup
    rep = pr.run_session(data, params, 0.5, cache=cache)
    pr.write_ledger(rep.ledger, tmp_path / "ledger.bin")
    back = pr.read_ledger(tmp_path / "ledger.bin")
    assert len(back) == len(rep.ledger)
    for a, b in zip(rep.ledger, back):
        assert a.query == b.query and a.packet.encode() == b.packet.encode()


def test_failed_robot_marks_queries_incomplete(setup):
    data, params, cache = setup
    rep = pr.run_session(data, params, math.inf, cache=cache, failed_robots=[1])
    assert all(not q.complete for q in rep.queries)
    assert all(e.packet.robot != 1 for e in rep.ledger)
    live = sum(1 for r, _ in data.grow_locations if r != 1)
    assert all(q.packets == 20 * live for q in rep.queries)
    for q in rep.queries:
        truth = data.assignment[q.query]
        if data.grow_locations[truth][0] == 1:
            assert q.true_rank is None
        else:
            assert q.true_rank is not None


def test_raw_gap_scale(setup):
    data, params, cache = setup
    rep = pr.run_session(data, params, 2.01, cache=cache, gap_scale="raw")
    # unit embeddings are at most 2 apart, so a raw threshold above 2 never stops early
    assert all(q.passes == 20 for q in rep.queries)


# -- cost model -------------------------------------------------------------

def test_reference_cost_numbers():
    cm = pr.REFERENCE_COSTS
    c = pr.cost_model(cm, "centralized")
    d = pr.cost_model(cm, "decentralized")
    assert c["latency_s"] == pytest.approx(1310.0)
    assert d["latency_s"] == pytest.approx(64.0)
    assert c["latency_s"] / d["latency_s"] == pytest.approx(20.47, abs=0.05)
    assert c["bandwidth_bytes"] / d["bandwidth_bytes"] == pytest.approx(12.5, abs=0.1)
    assert pr.compare_modes(cm, ledger_bytes=4e6)["bandwidth_reduction"] == pytest.approx(25.0)


def test_stage_sums_without_reported_totals():
    cm = pr.CostModel(strong=pr.REFERENCE_COSTS.strong, weak=pr.REFERENCE_COSTS.weak)
    assert cm.total("strong") == pytest.approx(13.2)
    assert cm.total("weak") == pytest.approx(64.0)


def test_cost_model_rejects_nonpositive_times():
    with pytest.raises(ValueError):
        pr.CostModel(strong={**pr.REFERENCE_COSTS.strong, "bbox": 0.0}, weak=pr.REFERENCE_COSTS.weak)
    with pytest.raises(ValueError):
        pr.cost_model(pr.REFERENCE_COSTS, "hybrid")


def test_large_deployment_extrapolation():
    cm = pr.CostModel(**{**pr.REFERENCE_COSTS.__dict__, "n_robots": 3000})
    r = pr.compare_modes(cm)
    assert r["speedup"] == pytest.approx(3000 * 13.1 / 64.0)
    assert r["bandwidth_reduction"] == pytest.approx(375.0)


@given(st.dictionaries(st.sampled_from(pr.STAGES), st.floats(0.01, 100)),
       st.dictionaries(st.sampled_from(pr.STAGES), st.floats(0.01, 100)), st.integers(0, 50))
def test_decentralized_never_slower_past_break_even(strong, weak, extra):
    s = {k: strong.get(k, 1.0) for k in pr.STAGES}
    w = {k: weak.get(k, 1.0) for k in pr.STAGES}
    base = pr.CostModel(strong=s, weak=w)
    n = pr.break_even_robots(base) + extra
    cm = pr.CostModel(strong=s, weak=w, n_robots=n)
    assert pr.cost_model(cm, "decentralized")["latency_s"] <= \
        pr.cost_model(cm, "centralized")["latency_s"] * (1 + 1e-12)

import math
import random
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from chord_churn.simulator import (
    EventKind,
    Network,
    SimConfig,
    Simulation,
    SimulationAborted,
    bootstrap,
    estimate_finger,
    next_event,
    perfect_network,
    run,
)


def sim_on(keys, bits=6, S=1, **kw):
    cfg = SimConfig(n0=max(S + 2, 3), bits=bits, S=S, **kw)
    return Simulation(cfg, net=perfect_network(keys, bits, S))


def wrong_count(net: Network) -> int:
    return sum(net.s1_wrong(k) for k in net.ring)


# -- configuration and bootstrap ----------------------------------------------------

@pytest.mark.parametrize(
    "kw", [dict(n0=1), dict(n0=7, S=6), dict(n0=64, bits=6), dict(alpha=1.5), dict(r=-1), dict(lambda_f=0)],
)
def test_bad_config_rejected(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_burnin_defaults():
    cfg = SimConfig()
    assert cfg.events_per_unit_time == 1000 * 502
    assert cfg.effective_burnin >= 20 * cfg.n0
    assert cfg.effective_burnin >= 5 * cfg.relaxation_time() * cfg.events_per_unit_time
    assert SimConfig(burnin_events=7).effective_burnin == 7


def test_bootstrap_is_perfect():
    cfg = SimConfig(n0=8, bits=6)
    net = bootstrap(cfg, random.Random(0))
    assert len(net) == 8
    net.check_coherent()
    for key in net.ring:
        node = net.nodes[key]
        assert node.successors[0] == net.true_successor(key)
        assert len(node.successors) == 6 and len(set(node.successors)) == 6
        assert node.predecessor == net.true_predecessor(key)
    sample = Simulation(cfg).sample()
    assert sample.w1 == sample.d1 == 0 and not any(sample.f)


def test_prebuilt_network_must_match_config():
    with pytest.raises(ValueError):
        Simulation(SimConfig(n0=8, bits=7), net=perfect_network([1, 2, 3], 6, 6))


def test_ring_queries():
    net = perfect_network([4, 20, 40], 6, 2)
    assert net.owner(20) == 20 and net.owner(21) == 40 and net.owner(41) == 4
    assert net.true_successor(20) == 40 and net.true_successor(50) == 4
    assert net.true_predecessor(20) == 4 and net.true_predecessor(4) == 40
    assert net.gaps().tolist() == [16, 20, 28]


# -- event generation ----------------------------------------------------------------

def test_no_stabilization_without_r():
    rng = random.Random(1)
    kinds = {next_event(0.0, SimConfig(r=0), 1000, rng).kind for _ in range(2000)}
    assert kinds == {EventKind.JOIN, EventKind.FAIL}


def test_no_finger_stabilization_at_alpha_one():
    rng = random.Random(2)
    kinds = Counter(next_event(0.0, SimConfig(alpha=1.0), 1000, rng).kind for _ in range(20000))
    assert kinds[EventKind.STABILIZE_FINGER] == 0
    assert kinds[EventKind.STABILIZE_SUCCESSOR] > 0


def test_event_kind_frequencies():
    cfg = SimConfig(r=1000, alpha=0.5)
    rng = random.Random(3)
    draws = 10**6
    counts = Counter(next_event(0.0, cfg, 1000, rng).kind for _ in range(draws))
    total = 2 + cfg.r
    probs = {
        EventKind.JOIN: 1 / total,
        EventKind.FAIL: 1 / total,
        EventKind.STABILIZE_SUCCESSOR: cfg.r * cfg.alpha / total,
        EventKind.STABILIZE_FINGER: cfg.r * (1 - cfg.alpha) / total,
    }
    for kind, prob in probs.items():
        sd = math.sqrt(draws * prob * (1 - prob))
        assert abs(counts[kind] - draws * prob) < 3 * sd, kind


def test_event_times_are_exponential():
    cfg = SimConfig(r=10, lambda_f=2.0)
    rng = random.Random(4)
    clock = 0.0
    gaps = []
    for _ in range(5000):
        ev = next_event(clock, cfg, 50, rng)
        assert ev.time >= clock
        gaps.append(ev.time - clock)
        clock = ev.time
    rate = cfg.lambda_f * 50 * (2 + cfg.r)
    assert stats.kstest(gaps, stats.expon(scale=1 / rate).cdf).pvalue > 0.01


def test_next_event_needs_nodes():
    with pytest.raises(ValueError):
        next_event(0.0, SimConfig(), 0, random.Random())


# -- join ----------------------------------------------------------------------------

def test_join_into_two_node_ring():
    sim = sim_on([0, 32])
    net = sim.net
    assert sim.join(10, contact=0)
    assert net.nodes[10].successors[0] == 32
    assert not net.s1_wrong(10)
    assert net.s1_wrong(0)
    assert wrong_count(net) == 1
    assert net.nodes[32].predecessor == 10
    assert net.nodes[10].predecessor == 0


def test_join_behind_wrong_predecessor_leaves_w1():
    sim = sim_on([0, 32])
    sim.join(10, contact=0)
    before = wrong_count(sim.net)
    sim.join(20, contact=32)
    # 0 still points at 32 and stays wrong; 10 becomes wrong; 20 is right.
    assert sim.net.s1_wrong(0) and sim.net.s1_wrong(10) and not sim.net.s1_wrong(20)
    assert wrong_count(sim.net) == before + 1


def test_join_sets_covered_fingers_to_successor():
    sim = sim_on([0, 32], bits=6)
    sim.join(1, contact=0)
    fingers = sim.net.nodes[1].fingers
    # starts 2, 3, 5, 9, 17 lie in (1, 32]; start 33 falls past 32.
    assert fingers[:5] == [32] * 5
    assert fingers[5] == 0


def test_join_rejects_taken_key():
    sim = sim_on([0, 32])
    with pytest.raises(KeyError):
        sim.join(32)


@pytest.mark.parametrize(
    "start, expected",
    [
        (5, (9, 0)),      # inside (owner, successor]
        (10, (20, 2)),    # entries 2 and 3 both hit 20; lower index wins
        (25, (30, 4)),
        (31, (9, 1)),     # wraps around to the smallest clockwise distance
    ],
)
def test_estimate_finger(start, expected):
    table = [9, 20, 20, 30]
    assert estimate_finger(start, 3, 9, table, 32) == expected


# -- failure -------------------------------------------------------------------------

def test_fail_in_three_node_ring():
    sim = sim_on([0, 20, 40])
    sim.fail(20)
    net = sim.net
    assert 20 not in net
    assert net.nodes[0].successors[0] == 20
    assert net.s1_wrong(0) and wrong_count(net) == 1


def test_fail_wrong_node_behind_wrong_predecessor():
    sim = sim_on([0, 8, 16, 32], S=2)
    sim.fail(8)       # 0 now points at a dead node
    sim.join(20, contact=16)   # 16 now points past 20
    assert sim.net.s1_wrong(0) and sim.net.s1_wrong(16)
    before = wrong_count(sim.net)
    sim.fail(16)
    assert wrong_count(sim.net) == before - 1


def test_failing_fresh_joiner_repairs_predecessor():
    # Not one of the tabulated transitions: x is wrong because y joined in
    # front of it, y is correct, and y's failure makes x correct again.
    sim = sim_on([0, 32])
    sim.join(10, contact=0)
    before = wrong_count(sim.net)
    sim.fail(10)
    assert not sim.net.s1_wrong(0)
    assert wrong_count(sim.net) == before - 1


def test_extinction_guard():
    sim = Simulation(SimConfig(n0=8, bits=8, S=6, r=0, seed=1))
    with pytest.raises(SimulationAborted):
        for _ in range(1000):
            sim.step()


# -- stabilization ----------------------------------------------------------------------

def test_stabilize_repairs_wrong_alive_successor():
    sim = sim_on([0, 32], S=2)
    sim.join(10, contact=0)
    assert sim.net.s1_wrong(0)
    sim.stabilize_successor(0)
    assert sim.net.nodes[0].successors == [10, 32]
    assert not sim.net.s1_wrong(0)


def test_stabilize_skips_dead_successors():
    sim = sim_on([0, 10, 20, 30], S=3)
    sim.fail(10)
    sim.stabilize_successor(0)
    # 20's own list still carries the dead 10 until 30 ... 0 refresh it
    assert sim.net.nodes[0].successors == [20, 30, 10]
    assert sim.net.nodes[20].predecessor == 0


def test_stabilize_correct_successor_is_noop():
    sim = sim_on([0, 10, 20, 30], S=3)
    before = [list(n.successors) for n in sim.net.nodes.values()]
    for key in list(sim.net.ring):
        sim.stabilize_successor(key)
    assert [n.successors for n in sim.net.nodes.values()] == before


def test_stabilize_with_whole_list_dead_aborts():
    sim = sim_on([0, 10, 20, 30], S=2)
    sim.fail(10)
    sim.fail(20)
    with pytest.raises(SimulationAborted):
        sim.stabilize_successor(0)


def test_stabilize_finger_repairs_dead_entry():
    sim = sim_on([0, 10, 20, 40], bits=6, S=2)
    sim.fail(20)
    node = sim.net.nodes[0]
    assert node.fingers[4] == 20  # start 16
    sim.stabilize_finger(0, 5)
    assert node.fingers[4] == 40
    sim.stabilize_finger(0, 5)
    assert node.fingers[4] == 40


class CountingSimulation(Simulation):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.finger_stabs = 0
        self.dead_hits = 0

    def stabilize_finger(self, n, i=None):
        i = self.rng.randint(1, self.net.M) if i is None else i
        self.finger_stabs += 1
        self.dead_hits += self.net.nodes[n].fingers[i - 1] not in self.net.nodes
        super().stabilize_finger(n, i)


def test_finger_stabilization_hits_dead_fingers_at_their_frequency():
    cfg = SimConfig(n0=300, bits=14, r=200, seed=6, probe_lookups_per_sample=0)
    sim = CountingSimulation(cfg)
    sim.advance(cfg.effective_burnin)
    sim.finger_stabs = sim.dead_hits = 0
    fs = [np.mean(s.f) for s in sim.measure(60_000)]
    hit_rate = sim.dead_hits / sim.finger_stabs
    sd = math.sqrt(hit_rate * (1 - hit_rate) / sim.finger_stabs)
    assert abs(hit_rate - np.mean(fs)) < 4 * sd + 0.1 * np.mean(fs)


# -- lookup -------------------------------------------------------------------------

def test_lookup_to_successor_is_one_hop():
    net = perfect_network([0, 10, 20, 30], 6, 3)
    res = net.lookup(0, 10)
    assert (res.result, res.hops, res.timeouts) == (10, 1, 0)


def test_lookup_own_key_costs_nothing():
    net = perfect_network([0, 10, 20, 30], 6, 3)
    assert net.lookup(10, 10).cost == 0


def test_lookup_past_dead_successor_costs_two():
    net = perfect_network([0, 10, 20, 30], 6, 3)
    net.remove(10)
    res = net.lookup(0, 1)
    assert res.result == 20
    assert (res.hops, res.timeouts, res.cost) == (1, 1, 2)


def test_lookup_counts_each_dead_node_once():
    net = perfect_network([0, 1, 2, 40], 6, 3)
    net.remove(40)
    net.remove(2)
    # node 0's fingers 3..6 all hold 40 and finger 2 holds 2; node 1 then
    # meets the same two dead nodes again and wraps round to 0.
    res = net.lookup(0, 50)
    assert res.result == 0 == net.owner(50)
    assert (res.hops, res.timeouts) == (2, 2)


def test_lookup_budget_exhaustion_fails():
    net = perfect_network(list(range(0, 64, 4)), 6, 1)
    res = net.lookup(0, 60, budget=1)
    assert not res.ok


def test_lookup_never_mutates():
    sim = Simulation(SimConfig(n0=100, bits=12, r=100, seed=2))
    sim.advance(5000)
    snapshot = {k: (list(n.successors), list(n.fingers), n.predecessor) for k, n in sim.net.nodes.items()}
    sim.sample(probes=500)
    assert snapshot == {k: (list(n.successors), list(n.fingers), n.predecessor) for k, n in sim.net.nodes.items()}


# -- runs ---------------------------------------------------------------------------

def test_run_is_deterministic():
    cfg = SimConfig(n0=100, bits=12, r=100, seed=9, burnin_events=2000, measure_events=3000)
    assert run(cfg) == run(cfg)
    assert run(cfg) != run(SimConfig(n0=100, bits=12, r=100, seed=10, burnin_events=2000, measure_events=3000))


def test_samples_are_consistent_during_churn():
    cfg = SimConfig(n0=200, bits=14, r=100, seed=4, burnin_events=5000, measure_events=20_000)
    sim = Simulation(cfg)
    sim.advance(cfg.effective_burnin)
    for s in sim.measure(cfg.effective_measure):
        sim.net.check_coherent()
        assert 0 <= s.d1 <= s.w1 <= 1
        assert all(0 <= x <= 1 for x in s.f)
        assert 0 <= s.probe_inconsistency <= 1
        assert s.probe_cost_mean >= 1


def test_churn_free_fixed_point():
    cfg = SimConfig(n0=100, bits=12, r=100, seed=5)
    sim = Simulation(cfg)
    sim.advance(10_000)
    assert sim.sample().w1 > 0 or any(sim.sample().f)
    sim.churn = False
    sim.advance(120_000)
    s = sim.sample()
    assert s.w1 == 0 and s.d1 == 0 and not any(s.f) and s.probe_inconsistency == 0


def test_burn_in_brings_w1_towards_theory():
    # w1 relaxes within ~1/(r alpha) time units, so look at a short window.
    theory = 2 / (3 + 200 * 0.5)
    cold, warm = [], []
    for seed in range(4):
        common = dict(n0=300, bits=16, r=200, seed=seed, measure_events=1200, sample_every=100,
                      probe_lookups_per_sample=0)
        cold.append(np.mean([s.w1 for s in run(SimConfig(burnin_events=0, **common))]))
        warm.append(np.mean([s.w1 for s in run(SimConfig(**common))]))
    assert abs(np.mean(warm) - theory) < abs(np.mean(cold) - theory)


def test_ledger_records_tabulated_cases():
    cfg = SimConfig(n0=300, bits=14, r=100, seed=8, instrument=True, probe_lookups_per_sample=0)
    sim = Simulation(cfg)
    sim.advance(cfg.effective_burnin)
    sim.start_ledger()
    sim.advance(40_000)
    led = sim.ledger
    assert led.deltas[("join_correct", 1)] == led.cases["join_correct"]
    assert led.deltas[("fail_cc", 1)] == led.cases["fail_cc"]
    assert led.deltas[("stab_correct", 0)] == led.cases["stab_correct"]
    # the running count tracks the true number of wrong pointers
    assert sim._w1_count == wrong_count(sim.net)

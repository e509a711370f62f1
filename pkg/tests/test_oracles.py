"""Monte Carlo oracles against the closed forms, at test-suite sample sizes."""

import random

import numpy as np
import pytest

from chord_churn import analytics as A
from chord_churn import oracles as O
from chord_churn.simulator import SimConfig, bootstrap

PAPER = A.ChurnParams(N=1000, bits=20, alpha=0.5, r=500)
SMALL = A.ChurnParams(N=64, bits=12, alpha=0.5, r=500)


def test_ratio_estimate_pools_clusters():
    est = O._ratio_estimate(np.array([1, 3, 2]), np.array([10, 10, 10]))
    assert est.mean == pytest.approx(0.2)
    assert est.n == 30
    assert est.stderr > 0


def test_zscores():
    est = O.Estimate(0.5, 0.1, 100)
    assert est.zscore(0.3) == pytest.approx(2.0)
    zero = O.Estimate(0.0, 0.0, 10_000)
    assert zero.zscore(0.01) == float("inf")
    # binomial floor: sqrt(0.01 * 0.99 / 1e4) ~ 1e-3
    assert zero.proportion_zscore(0.01) == pytest.approx(-0.01 / np.sqrt(0.01 * 0.99 / 10_000))


def test_finger_targets_on_hand_ring():
    keys = np.array([1, 4, 9, 14])
    # K = 16; finger 3 starts at 5, 8, 13, 2 -> nodes 9, 9, 14, 4
    assert O.finger_targets(keys, 16, 3).tolist() == [2, 2, 3, 1]
    assert O.finger_targets(keys, 16, 1).tolist() == [1, 2, 3, 0]


def test_route_static_matches_simulator_lookup():
    cfg = SimConfig(n0=60, bits=10)
    net = bootstrap(cfg, random.Random(4))
    keys = np.array(net.ring)
    rng = np.random.default_rng(4)
    origin = rng.integers(len(keys), size=400)
    target = rng.integers(cfg.K, size=400)
    hops = O.route_static(keys, cfg.K, cfg.M, origin, target)
    for o, t, h in zip(origin, target, hops):
        res = net.lookup(int(keys[o]), int(t))
        assert res.timeouts == 0
        assert res.result == net.owner(int(t))
        assert res.hops == h


@pytest.mark.parametrize("k, order", [(5, 2), (3, 1), (7, 3), (9, 1)])
def test_share_prob_oracle(k, order):
    est = O.share_prob_oracle(k, order, SMALL, 30_000, np.random.default_rng(k * 10 + order))
    assert abs(est.proportion_zscore(A.share_prob(k, order, SMALL))) < 3.5


@pytest.mark.parametrize("k", [10, 13])
def test_join_replication_oracle(k):
    est = O.join_replication_oracle(k, PAPER, 20_000, np.random.default_rng(k))
    assert abs(est.proportion_zscore(A.join_replication_prob(k, PAPER))) < 3.5


def test_fallback_oracle():
    f = A.fk_vector(PAPER)
    h = A.fallback_table(8, PAPER, f)
    means, errs = O.fallback_oracle(8, PAPER, f, 20_000, np.random.default_rng(8))
    assert means.sum() == pytest.approx(1.0)
    for i in range(8):
        assert abs(O.Estimate(means[i], errs[i], 20_000).proportion_zscore(h[i])) < 3.5


def test_static_cost_oracle():
    p = A.ChurnParams(N=32, bits=10, alpha=0.5, r=500)
    table = A.lookup_cost_table(p, f=np.zeros(p.M), d=[0.0] * p.S)
    est = O.static_cost_oracle(p, 40_000, np.random.default_rng(10))
    assert abs(est.zscore(table[1:].mean())) < 3.5


@pytest.mark.parametrize("t", [1, 7, 64, 300])
def test_static_cost_at_distance(t):
    p = A.ChurnParams(N=32, bits=10, alpha=0.5, r=500)
    table = A.lookup_cost_table(p, f=np.zeros(p.M), d=[0.0] * p.S)
    est = O.static_cost_at(p, t, 20_000, np.random.default_rng(t))
    assert abs(est.zscore(table[t])) < 3.5

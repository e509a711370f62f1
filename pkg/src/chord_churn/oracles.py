"""Monte Carlo estimates used to validate the closed forms in ``analytics``.

Rings are drawn with every key occupied independently with probability
``N / K``, the occupancy model under which inter-node distances follow the
geometric law.  Several samples come from each ring, so standard errors
are cluster-robust over rings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analytics import ChurnParams
from .simulator import estimate_finger


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    def zscore(self, value: float) -> float:
        if self.stderr == 0.0:
            return 0.0 if value == self.mean else float("inf")
        return (self.mean - value) / self.stderr

    def proportion_zscore(self, p: float) -> float:
        """z-score against a predicted probability ``p``.

        The standard error is floored at the binomial error under ``p`` so
        that rare events with no observed hits are not judged on a zero
        spread.
        """
        se = max(self.stderr, math.sqrt(p * (1.0 - p) / self.n)) if self.n else self.stderr
        if se == 0.0:
            return 0.0 if p == self.mean else float("inf")
        return (self.mean - p) / se


def _ratio_estimate(num: np.ndarray, den: np.ndarray) -> Estimate:
    """Pooled ratio sum(num)/sum(den) with a cluster-robust standard error."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    total = den.sum()
    mean = num.sum() / total
    g = len(den)
    if g < 2:
        return Estimate(mean, float("inf"), int(total))
    resid = num - mean * den
    var = g / (g - 1) * np.sum(resid**2) / total**2
    return Estimate(float(mean), float(np.sqrt(var)), int(total))


def sample_ring(p: ChurnParams, rng: np.random.Generator, min_nodes: int = 4) -> np.ndarray:
    """Sorted node keys of one ring with independent key occupancy."""
    while True:
        keys = np.flatnonzero(rng.random(p.K) < p.N / p.K)
        if len(keys) >= min_nodes:
            return keys


def finger_targets(keys: np.ndarray, K: int, k: int) -> np.ndarray:
    """Index (into ``keys``) of each node's correct k-th finger."""
    starts = (keys + (1 << (k - 1))) % K
    return np.searchsorted(keys, starts, side="left") % len(keys)


def share_prob_oracle(k: int, order: int, p: ChurnParams, samples: int, rng: np.random.Generator) -> Estimate:
    """Fraction of nodes whose ``order`` nearest predecessors hit the same
    k-th finger node as they do."""
    hits: list[int] = []
    counts: list[int] = []
    seen = 0
    while seen < samples:
        keys = sample_ring(p, rng, min_nodes=order + 2)
        tgt = finger_targets(keys, p.K, k)
        same = np.ones(len(keys), dtype=bool)
        for back in range(1, order + 1):
            same &= np.roll(tgt, back) == tgt
        hits.append(int(same.sum()))
        counts.append(len(keys))
        seen += len(keys)
    return _ratio_estimate(np.array(hits), np.array(counts))


def join_replication_oracle(k: int, p: ChurnParams, samples: int, rng: np.random.Generator,
                            joins_per_ring: int = 200) -> Estimate:
    """Fraction of joins in which the joiner's k-th finger is taken from
    the k-th entry of its successor's finger table, using the simulator's
    join rule on rings with correct routing state."""
    K = p.K
    hits: list[int] = []
    counts: list[int] = []
    seen = 0
    while seen < samples:
        keys = sample_ring(p, rng)
        table = np.stack([keys[finger_targets(keys, K, j)] for j in range(1, p.M + 1)], axis=1)
        occupied = set(keys.tolist())
        batch = min(joins_per_ring, samples - seen)
        h = 0
        done = 0
        while done < batch:
            u = int(rng.integers(K))
            if u in occupied:
                continue
            vi = int(np.searchsorted(keys, u)) % len(keys)
            v = int(keys[vi])
            start = (u + (1 << (k - 1))) % K
            _, source = estimate_finger(start, u, v, table[vi].tolist(), K)
            h += source == k
            done += 1
        hits.append(h)
        counts.append(done)
        seen += done
    return _ratio_estimate(np.array(hits), np.array(counts))


def fallback_oracle(k: int, p: ChurnParams, f: np.ndarray, samples: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of fallback depth after a dead k-th finger.

    For random nodes on sampled rings, finger k is dead; every lower finger
    repeats the liveness of the finger above when it points at the same
    node and is otherwise dead with probability f_j.  The scan moves down
    until it meets a live new node (depth k - j) or runs out of fingers
    (depth k).  Every node of each ring is used once.  Returns (means,
    stderrs), each of shape (k,).
    """
    f = np.asarray(f, dtype=float)
    K = p.K
    per_ring: list[np.ndarray] = []
    counts: list[int] = []
    seen = 0
    while seen < samples:
        keys = sample_ring(p, rng)
        nodes = np.stack([finger_targets(keys, K, j) for j in range(1, k + 1)], axis=1)
        origin = np.arange(len(keys))
        batch = len(origin)
        fn = nodes[origin]  # (batch, k): finger j at column j-1
        hist = np.zeros(k)
        draws = rng.random((batch, k))
        for b in range(batch):
            dead = True
            depth = k
            for j in range(k - 1, 0, -1):
                if fn[b, j - 1] != fn[b, j]:
                    dead = draws[b, j - 1] < f[j - 1]
                if not dead:
                    depth = k - j
                    break
            hist[depth - 1] += 1
        per_ring.append(hist)
        counts.append(batch)
        seen += batch
    hist = np.array(per_ring)
    den = np.array(counts)
    out = [_ratio_estimate(hist[:, i], den) for i in range(k)]
    return np.array([e.mean for e in out]), np.array([e.stderr for e in out])


def route_static(keys: np.ndarray, K: int, M: int, origin: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Hop counts of greedy finger routing on a ring with correct state.

    Vectorised over lookups: each round, every unfinished lookup jumps to
    its farthest finger that still precedes the target, or to its
    successor (finishing) when none does.
    """
    n = len(keys)
    fingers = np.stack([finger_targets(keys, K, j) for j in range(1, M + 1)], axis=1)
    cur = origin.copy()
    hops = np.zeros(len(origin), dtype=np.int64)
    active = (target - keys[cur]) % K != 0
    while active.any():
        idx = np.flatnonzero(active)
        c = cur[idx]
        span = (target[idx] - keys[c]) % K
        fd = (keys[fingers[c]] - keys[c][:, None]) % K
        ok = (fd > 0) & (fd < span[:, None])
        has = ok.any(axis=1)
        best = M - 1 - np.argmax(ok[:, ::-1], axis=1)
        nxt = np.where(has, fingers[c, best], (c + 1) % n)
        hops[idx] += 1
        cur[idx] = nxt
        active[idx[~has]] = False
    return hops


def static_cost_oracle(p: ChurnParams, samples: int, rng: np.random.Generator) -> Estimate:
    """Mean hop count over uniform target distances 1..K-1 on failure-free
    rings, one lookup from every node of each ring."""
    totals: list[float] = []
    counts: list[int] = []
    seen = 0
    while seen < samples:
        keys = sample_ring(p, rng)
        origin = np.arange(len(keys))
        batch = len(origin)
        dist = rng.integers(1, p.K, size=batch)
        target = (keys[origin] + dist) % p.K
        hops = route_static(keys, p.K, p.M, origin, target)
        totals.append(float(hops.sum()))
        counts.append(batch)
        seen += batch
    return _ratio_estimate(np.array(totals), np.array(counts))


def static_cost_at(p: ChurnParams, t: int, samples: int, rng: np.random.Generator) -> Estimate:
    """Mean hop count to the key exactly ``t`` past each node."""
    totals: list[float] = []
    counts: list[int] = []
    seen = 0
    while seen < samples:
        keys = sample_ring(p, rng)
        origin = np.arange(len(keys))
        batch = len(origin)
        target = (keys[origin] + t) % p.K
        hops = route_static(keys, p.K, p.M, origin, target)
        totals.append(float(hops.sum()))
        counts.append(batch)
        seen += batch
    return _ratio_estimate(np.array(totals), np.array(counts))

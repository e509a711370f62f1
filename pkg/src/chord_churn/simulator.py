"""Event-driven simulation of a Chord ring under churn.

Joins, ungraceful failures, successor stabilizations and finger
stabilizations arrive as one aggregate Poisson stream whose rates scale
with the current node count.  Message delays are ignored: every event
completes atomically before the next one.

Keys are plain ints in ``[0, 2**bits)``.  A pointer to a key that is no
longer in ``Network.nodes`` is a pointer to a dead node.
"""

from __future__ import annotations

import bisect
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)


class SimulationAborted(RuntimeError):
    """The run left the regime the model describes (extinction, isolation)."""


class EventKind(Enum):
    JOIN = "join"
    FAIL = "fail"
    STABILIZE_SUCCESSOR = "stabilize_successor"
    STABILIZE_FINGER = "stabilize_finger"
    SAMPLE = "sample"


@dataclass(frozen=True)
class Event:
    time: float
    kind: EventKind


@dataclass(frozen=True)
class SimConfig:
    n0: int = 1000
    bits: int = 20
    S: int = 6
    r: float = 500.0
    alpha: float = 0.5
    lambda_f: float = 1.0
    seed: int = 0
    burnin_events: int | None = None
    measure_events: int | None = None
    probe_lookups_per_sample: int = 100
    sample_every: int | None = None
    instrument: bool = False

    def __post_init__(self) -> None:
        if self.bits < 2:
            raise ValueError("bits must be >= 2")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.n0 < self.S + 2:
            raise ValueError(f"n0 must be >= S + 2 = {self.S + 2}, got {self.n0}")
        if self.n0 >= self.K:
            raise ValueError(f"n0 must be < K = {self.K}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.r < 0:
            raise ValueError("r must be >= 0")
        if self.lambda_f <= 0:
            raise ValueError("lambda_f must be > 0")
        for name in ("burnin_events", "measure_events", "sample_every"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.probe_lookups_per_sample < 0:
            raise ValueError("probe_lookups_per_sample must be >= 0")

    @property
    def K(self) -> int:
        return 1 << self.bits

    @property
    def M(self) -> int:
        return self.bits

    @property
    def events_per_unit_time(self) -> float:
        """Expected events per unit of time at the nominal size n0."""
        return self.n0 * self.lambda_f * (2.0 + self.r)

    def relaxation_time(self) -> float:
        """Slowest pointer relaxation time, in units of 1 / lambda_f.

        Dead fingers are evicted at (1 - alpha) r / M per failure time;
        joins and failures replace every node on the unit scale.
        """
        rate = 1.0 + (1.0 - self.alpha) * self.r / self.M
        return 1.0 / (self.lambda_f * rate)

    @property
    def effective_burnin(self) -> int:
        if self.burnin_events is not None:
            return self.burnin_events
        relax = math.ceil(5.0 * self.relaxation_time() * self.events_per_unit_time)
        return max(20 * self.n0, relax)

    @property
    def effective_measure(self) -> int:
        if self.measure_events is not None:
            return self.measure_events
        return math.ceil(2.0 * self.relaxation_time() * self.events_per_unit_time)


@dataclass(slots=True)
class NodeState:
    key: int
    successors: list[int]
    fingers: list[int]
    predecessor: int | None = None


@dataclass
class LookupResult:
    result: int | None
    hops: int
    timeouts: int

    @property
    def ok(self) -> bool:
        return self.result is not None

    @property
    def cost(self) -> int:
        return self.hops + self.timeouts


@dataclass
class MetricsSample:
    time: float
    n_now: int
    w1: float
    d1: float
    f: list[float]
    probe_inconsistency: float
    probe_cost_mean: float
    probes: int = 0
    failed_probes: int = 0


class Network:
    """Alive nodes plus the sorted key list used as ground truth."""

    def __init__(self, bits: int, S: int):
        self.bits = bits
        self.K = 1 << bits
        self.M = bits
        self.S = S
        self.nodes: dict[int, NodeState] = {}
        self.ring: list[int] = []

    def __len__(self) -> int:
        return len(self.ring)

    def __contains__(self, key: int) -> bool:
        return key in self.nodes

    def is_alive(self, key: int | None) -> bool:
        return key is not None and key in self.nodes

    def owner(self, key: int) -> int:
        """First alive node at or after ``key``."""
        ring = self.ring
        i = bisect.bisect_left(ring, key)
        return ring[i] if i < len(ring) else ring[0]

    def true_successor(self, key: int) -> int:
        """First alive node strictly after ``key``."""
        ring = self.ring
        i = bisect.bisect_right(ring, key)
        return ring[i] if i < len(ring) else ring[0]

    def true_predecessor(self, key: int) -> int:
        """Last alive node strictly before ``key``."""
        ring = self.ring
        i = bisect.bisect_left(ring, key)
        return ring[i - 1]

    def add(self, node: NodeState) -> None:
        if node.key in self.nodes:
            raise KeyError(f"key {node.key} already taken")
        self.nodes[node.key] = node
        bisect.insort(self.ring, node.key)

    def remove(self, key: int) -> None:
        del self.nodes[key]
        i = bisect.bisect_left(self.ring, key)
        del self.ring[i]

    def s1_wrong(self, key: int) -> bool:
        node = self.nodes[key]
        return node.successors[0] != self.true_successor(key)

    def gaps(self) -> np.ndarray:
        """Clockwise distances between consecutive alive nodes."""
        keys = np.asarray(self.ring, dtype=np.int64)
        return np.diff(np.append(keys, keys[0] + self.K))

    def check_coherent(self) -> None:
        assert self.ring == sorted(self.nodes), "ground-truth ring out of sync"

    # -- routing ------------------------------------------------------------

    def lookup(self, origin: int, target: int, budget: int | None = None) -> LookupResult:
        """Iterative Chord lookup for the node responsible for ``target``.

        At each node the fingers are scanned from the farthest one that
        precedes the target downwards; a dead finger costs a timeout and the
        scan moves on.  If no finger makes progress the successor list is
        walked.  A dead node already timed out on in this lookup is not
        contacted again.  Routing state is never modified.
        """
        nodes = self.nodes
        K = self.K
        M = self.M
        if budget is None:
            budget = 4 * M
        cur = origin
        hops = 0
        timeouts = 0
        dead: set[int] | None = None
        for _ in range(budget):
            span = (target - cur) % K
            if span == 0:
                return LookupResult(cur, hops, timeouts)
            node = nodes[cur]
            fingers = node.fingers
            nxt = -1
            j = min(M, (span - 1).bit_length()) - 1
            while j >= 0:
                fk = fingers[j]
                d = (fk - cur) % K
                if 0 < d < span:
                    if fk in nodes:
                        nxt = fk
                        break
                    if dead is None:
                        dead = {fk}
                        timeouts += 1
                    elif fk not in dead:
                        dead.add(fk)
                        timeouts += 1
                j -= 1
            if nxt >= 0:
                hops += 1
                cur = nxt
                continue
            for s in node.successors:
                if s in nodes:
                    hops += 1
                    if (s - cur) % K >= span:
                        return LookupResult(s, hops, timeouts)
                    cur = s
                    break
                if dead is None:
                    dead = {s}
                    timeouts += 1
                elif s not in dead:
                    dead.add(s)
                    timeouts += 1
            else:
                return LookupResult(None, hops, timeouts)
        return LookupResult(None, hops, timeouts)


def perfect_network(keys, bits: int, S: int) -> Network:
    """A network on ``keys`` whose routing state is entirely correct."""
    net = Network(bits, S)
    keys = sorted(set(keys))
    if len(keys) < 2:
        raise ValueError("need at least two nodes")
    if keys[0] < 0 or keys[-1] >= net.K:
        raise ValueError(f"keys must lie in [0, {net.K})")
    net.ring = keys
    n = len(keys)
    for idx, key in enumerate(keys):
        succ = [keys[(idx + i) % n] for i in range(1, min(S, n - 1) + 1)]
        fingers = [net.owner((key + (1 << j)) % net.K) for j in range(net.M)]
        net.nodes[key] = NodeState(key, succ, fingers, keys[idx - 1])
    return net


def bootstrap(cfg: SimConfig, rng: random.Random) -> Network:
    """A network of ``n0`` random distinct keys with fully correct state."""
    if cfg.n0 < cfg.S + 2:
        raise ValueError(f"n0 must be >= S + 2 = {cfg.S + 2}")
    return perfect_network(rng.sample(range(cfg.K), cfg.n0), cfg.bits, cfg.S)


def estimate_finger(start: int, owner: int, successor: int, table: list[int], K: int) -> tuple[int, int]:
    """A joiner's guess for the node at or after ``start``.

    Returns ``(node, source)``: ``source`` is 0 when the joiner's successor
    already covers ``start`` and otherwise the 1-based index of the entry of
    the successor's finger table that was copied.  Ties go to the lower
    index, i.e. the finger that reaches the node first.
    """
    if 0 < (start - owner) % K <= (successor - owner) % K:
        return successor, 0
    best = -1
    best_d = K
    for j, node in enumerate(table):
        d = (node - start) % K
        if d < best_d:
            best_d = d
            best = j
    return table[best], best + 1


def next_event(clock: float, cfg: SimConfig, n_now: int, rng: random.Random) -> Event:
    """Draw the next churn or stabilization event after ``clock``.

    Joins and failures each occur at ``lambda_f * n_now``; stabilizations at
    ``r * lambda_f * n_now``, split ``alpha`` / ``1 - alpha`` between
    successors and fingers.
    """
    if n_now < 1:
        raise ValueError("need at least one node")
    weight = 2.0 + cfg.r
    dt = rng.expovariate(cfg.lambda_f * n_now * weight)
    u = rng.random() * weight
    if u < 1.0:
        kind = EventKind.JOIN
    elif u < 2.0:
        kind = EventKind.FAIL
    elif u < 2.0 + cfg.r * cfg.alpha:
        kind = EventKind.STABILIZE_SUCCESSOR
    else:
        kind = EventKind.STABILIZE_FINGER
    return Event(clock + dt, kind)


@dataclass
class W1Ledger:
    """Counts of successor-pointer transitions, by pre-event case.

    Cases: ``join_correct`` / ``join_wrong`` (state of the joiner's
    predecessor), ``fail_cc``, ``fail_ww``, ``fail_wc``, ``fail_cw``
    (predecessor then victim), ``stab_wrong`` / ``stab_correct``.  The
    ``expected_*`` sums accumulate the per-event probabilities of the four
    W1-changing cases evaluated at the current w1, with matching
    Bernoulli variances.
    """

    deltas: Counter = field(default_factory=Counter)
    cases: Counter = field(default_factory=Counter)
    expected: Counter = field(default_factory=Counter)
    variance: Counter = field(default_factory=Counter)

    def record(self, case: str, delta: int) -> None:
        self.cases[case] += 1
        self.deltas[(case, delta)] += 1

    def expect(self, case: str, prob: float) -> None:
        self.expected[case] += prob
        self.variance[case] += prob * (1.0 - prob)


class Simulation:
    """One run: a network, a clock, and the two random streams."""

    def __init__(self, cfg: SimConfig, *, churn: bool = True, net: Network | None = None):
        self.cfg = cfg
        churn_seed, probe_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
        self.rng = random.Random(int(churn_seed))
        self.probe_rng = random.Random(int(probe_seed))
        if net is not None and (net.bits != cfg.bits or net.S != cfg.S):
            raise ValueError("network does not match the configuration")
        self.net = bootstrap(cfg, self.rng) if net is None else net
        self.clock = 0.0
        self.events = 0
        self.churn = churn
        self.counts: Counter = Counter()
        self.ledger = W1Ledger() if cfg.instrument else None
        self._w1_count = 0

    # -- protocol operations -----------------------------------------------

    def stabilize_successor(self, n: int) -> None:
        """Reconcile ``n`` with its first live successor and notify it."""
        net = self.net
        nodes = net.nodes
        K = net.K
        node = nodes[n]
        s = -1
        for cand in node.successors:
            if cand in nodes and cand != n:
                s = cand
                break
        if s < 0:
            raise SimulationAborted(f"node {n} lost its whole successor list")
        sn = nodes[s]
        p = sn.predecessor
        if p is not None and p != n and p in nodes and 0 < (p - n) % K < (s - n) % K:
            merged = [p, s] + sn.successors
        else:
            merged = [s] + sn.successors
        new: list[int] = []
        for key in merged:
            if key != n and key not in new:
                new.append(key)
                if len(new) == net.S:
                    break
        node.successors = new
        head = nodes[new[0]]
        hp = head.predecessor
        if hp is None or hp not in nodes or 0 < (n - hp) % K < (new[0] - hp) % K:
            head.predecessor = n

    def stabilize_finger(self, n: int, i: int | None = None) -> None:
        """Re-resolve finger ``i`` (1-based; random when omitted) of ``n``."""
        net = self.net
        if i is None:
            i = self.rng.randint(1, net.M)
        res = net.lookup(n, (n + (1 << (i - 1))) % net.K)
        if res.ok:
            net.nodes[n].fingers[i - 1] = res.result
        else:
            self.counts["failed_finger_lookup"] += 1

    def join(self, u: int, contact: int | None = None) -> bool:
        """Insert a node at key ``u``.  Returns False if routing failed."""
        net = self.net
        nodes = net.nodes
        K = net.K
        if u in nodes:
            raise KeyError(f"key {u} already taken")
        if contact is None:
            contact = self.rng.choice(net.ring)
        res = net.lookup(contact, u)
        if not res.ok or res.result == u:
            self.counts["failed_join"] += 1
            return False
        v = res.result
        vn = nodes[v]
        table = vn.fingers
        fingers = [estimate_finger((u + (1 << j)) % K, u, v, table, K)[0] for j in range(net.M)]
        pred = vn.predecessor
        if pred is not None and 0 < (pred - u) % K < (v - u) % K:
            pred = None
        net.add(NodeState(u, [v], fingers, pred))
        self.stabilize_successor(u)
        return True

    def fail(self, victim: int) -> None:
        self.net.remove(victim)

    # -- event loop ---------------------------------------------------------

    def _check_size(self) -> None:
        n = len(self.net)
        if n < self.cfg.S + 2 or n > 2 * self.cfg.n0:
            raise SimulationAborted(f"node count {n} left [{self.cfg.S + 2}, {2 * self.cfg.n0}]")

    def step(self) -> Event:
        cfg = self.cfg
        net = self.net
        rng = self.rng
        while True:
            ev = next_event(self.clock, cfg, len(net), rng)
            if self.churn or ev.kind in (EventKind.STABILIZE_SUCCESSOR, EventKind.STABILIZE_FINGER):
                break
        self.clock = ev.time
        self.events += 1
        self.counts[ev.kind.value] += 1
        kind = ev.kind
        if kind is EventKind.STABILIZE_FINGER:
            self.stabilize_finger(rng.choice(net.ring))
        elif kind is EventKind.STABILIZE_SUCCESSOR:
            n = rng.choice(net.ring)
            if self.ledger is None:
                self.stabilize_successor(n)
            else:
                self._tracked_stabilize(n)
        elif kind is EventKind.JOIN:
            u = rng.randrange(net.K)
            while u in net.nodes:
                u = rng.randrange(net.K)
            if self.ledger is None:
                self.join(u)
            else:
                self._tracked_join(u)
        else:
            victim = rng.choice(net.ring)
            if self.ledger is None:
                self.fail(victim)
            else:
                self._tracked_fail(victim)
            self._check_size()
        if kind is EventKind.JOIN:
            self._check_size()
        return ev

    # -- W1 instrumentation -------------------------------------------------

    def _w1(self) -> float:
        return self._w1_count / len(self.net)

    def start_ledger(self) -> None:
        self.ledger = W1Ledger()
        net = self.net
        self._w1_count = sum(net.s1_wrong(k) for k in net.ring)

    def _tracked_join(self, u: int) -> None:
        net = self.net
        w1 = self._w1()
        self.ledger.expect("join_correct", 1.0 - w1)
        x = net.true_predecessor(u) if len(net) else None
        x_before = net.s1_wrong(x)
        if not self.join(u):
            return
        delta = (net.s1_wrong(x) - x_before) + net.s1_wrong(u)
        self._w1_count += delta
        self.ledger.record("join_wrong" if x_before else "join_correct", delta)

    def _tracked_fail(self, y: int) -> None:
        net = self.net
        w1 = self._w1()
        self.ledger.expect("fail_cc", (1.0 - w1) ** 2)
        self.ledger.expect("fail_ww", w1 * w1)
        x = net.true_predecessor(y)
        x_before = net.s1_wrong(x)
        y_before = net.s1_wrong(y)
        self.fail(y)
        delta = (net.s1_wrong(x) - x_before) - y_before
        self._w1_count += delta
        case = "fail_" + ("w" if x_before else "c") + ("w" if y_before else "c")
        self.ledger.record(case, delta)

    def _tracked_stabilize(self, n: int) -> None:
        net = self.net
        self.ledger.expect("stab_wrong", self._w1())
        before = net.s1_wrong(n)
        self.stabilize_successor(n)
        delta = net.s1_wrong(n) - before
        self._w1_count += delta
        self.ledger.record("stab_wrong" if before else "stab_correct", delta)

    # -- measurement --------------------------------------------------------

    def sample(self, probes: int | None = None) -> MetricsSample:
        """Measure pointer states and run probe lookups.  Never mutates state."""
        net = self.net
        nodes = net.nodes
        ring = net.ring
        n = len(ring)
        M = net.M
        wrong = 0
        dead_s1 = 0
        dead_f = [0] * M
        for idx, key in enumerate(ring):
            node = nodes[key]
            s1 = node.successors[0]
            if s1 != ring[(idx + 1) % n]:
                wrong += 1
                if s1 not in nodes:
                    dead_s1 += 1
            for j, fk in enumerate(node.fingers):
                if fk not in nodes:
                    dead_f[j] += 1
        if probes is None:
            probes = self.cfg.probe_lookups_per_sample
        prng = self.probe_rng
        inconsistent = 0
        cost = 0
        done = 0
        failed = 0
        for _ in range(probes):
            origin = ring[prng.randrange(n)]
            target = prng.randrange(net.K)
            res = net.lookup(origin, target)
            if not res.ok:
                failed += 1
                continue
            done += 1
            cost += res.cost
            if res.result != net.owner(target):
                inconsistent += 1
        return MetricsSample(
            time=self.clock,
            n_now=n,
            w1=wrong / n,
            d1=dead_s1 / n,
            f=[c / n for c in dead_f],
            probe_inconsistency=inconsistent / done if done else 0.0,
            probe_cost_mean=cost / done if done else float("nan"),
            probes=done,
            failed_probes=failed,
        )

    def advance(self, events: int) -> None:
        for _ in range(events):
            self.step()

    def measure(self, events: int) -> Iterator[MetricsSample]:
        """Process ``events`` events, sampling every ``sample_every`` (or N_now)."""
        every = self.cfg.sample_every
        since = 0
        for _ in range(events):
            self.step()
            since += 1
            if since >= (every or len(self.net)):
                since = 0
                yield self.sample()


def run(cfg: SimConfig) -> list[MetricsSample]:
    """Bootstrap, burn in, then measure; deterministic given ``cfg.seed``."""
    sim = Simulation(cfg)
    sim.advance(cfg.effective_burnin)
    if cfg.instrument:
        sim.start_ledger()
    return list(sim.measure(cfg.effective_measure))

"""Steady-state predictions for Chord under churn.

Everything here is a pure function of :class:`ChurnParams`.  Keys are
treated as independently occupied with probability ``1 - rho`` where
``rho = (K - N) / K``; that occupancy model is what makes inter-node
distances geometric and every closed form below exact within it.

Quantities are indexed the way Chord indexes fingers: finger ``k`` starts
``2**(k-1)`` keys after its owner, ``k = 1..M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _costkernel

#: Number of terms kept in the replication sum P_rep(k) = p1 + p2 + p3.
SHARE_ORDERS = 3


class NoSteadyState(ArithmeticError):
    """The dead-finger balance equation has no real root for these parameters."""


@dataclass(frozen=True)
class ChurnParams:
    """Parameters of one operating point.

    ``r`` is the stabilization-to-failure rate ratio and ``alpha`` the share
    of stabilizations spent on successors.  Joins balance failures, so the
    join rate never appears separately.
    """

    N: float
    bits: int
    alpha: float
    r: float
    S: int = 6

    def __post_init__(self) -> None:
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if not 0 < self.N <= self.K:
            raise ValueError(f"need 0 < N <= K, got N={self.N}, K={self.K}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.r < 0:
            raise ValueError(f"r must be non-negative, got {self.r}")
        if self.S < 1:
            raise ValueError("S must be >= 1")

    @property
    def K(self) -> int:
        return 1 << self.bits

    @property
    def M(self) -> int:
        return self.bits

    @property
    def rho(self) -> float:
        return (self.K - self.N) / self.K


def _check_finger(k: int, p: ChurnParams) -> None:
    if not 1 <= k <= p.M:
        raise ValueError(f"finger index {k} outside 1..{p.M}")


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def _rho_pow(x: float, p: ChurnParams) -> float:
    """rho**x, accurate for rho close to 1."""
    rho = p.rho
    if rho == 0.0:
        return 1.0 if x == 0 else 0.0
    return math.exp(x * math.log(rho))


# -- inter-node distances ---------------------------------------------------

def interval_pdf(x: int, p: ChurnParams) -> float:
    if x < 1:
        raise ValueError(f"interval length must be >= 1, got {x}")
    return _rho_pow(x - 1, p) * (1.0 - p.rho)


def at_least_one(x: int, p: ChurnParams) -> float:
    """a(x): probability that x consecutive keys hold at least one node."""
    if x < 0:
        raise ValueError("x must be >= 0")
    if p.rho == 0.0:
        return 0.0 if x == 0 else 1.0
    return -math.expm1(x * math.log(p.rho))


def first_node_at(i: int, p: ChurnParams) -> float:
    """b(i): probability that the first node after a key sits i keys later."""
    if i < 0:
        raise ValueError("i must be >= 0")
    return _rho_pow(i, p) * (1.0 - p.rho)


def first_node_conditional(i: int, x: int, p: ChurnParams) -> float:
    """bc(i, x) = b(i) / a(x), for 0 <= i < x."""
    if x < 1:
        raise ValueError("conditioning window must hold at least one key")
    if not 0 <= i < x:
        raise ValueError(f"need 0 <= i < x, got i={i}, x={x}")
    return first_node_at(i, p) / at_least_one(x, p)


# -- pointer sharing and replication ----------------------------------------

def _binom_tail(n: int, q: float, m: int) -> float:
    """P(Binomial(n, q) >= m)."""
    if m <= 0:
        return 1.0
    if n < m:
        return 0.0
    if q >= 1.0:
        return 1.0
    log_fail = math.log1p(-q)
    head = 0.0
    for j in range(m):
        head += math.comb(n, j) * q**j * math.exp((n - j) * log_fail)
    return _clamp(1.0 - head)


def share_prob(k: int, order: int, p: ChurnParams) -> float:
    """Probability that a node and its ``order`` immediate predecessors all
    point their k-th finger at the same node.

    With gaps x_1..x_order to the predecessors, sharing needs the gaps to
    total less than 2**(k-1) and an equally long run of empty keys ahead of
    the finger start.  Summing over gap totals s gives
    ``(rho/(1+rho))**order * P(Bin(2**(k-1) - 1, 1 - rho**2) >= order)``.
    """
    _check_finger(k, p)
    if order < 1:
        raise ValueError("order must be >= 1")
    rho = p.rho
    base = (rho / (1.0 + rho)) ** order
    q = 1.0 - rho * rho
    return _clamp(base * _binom_tail((1 << (k - 1)) - 1, q, order))


def replication_sum(k: int, p: ChurnParams) -> float:
    """P_rep(k) = p1(k) + p2(k) + p3(k)."""
    return sum(share_prob(k, o, p) for o in range(1, SHARE_ORDERS + 1))


def join_replication_prob(k: int, p: ChurnParams) -> float:
    """Probability that a joiner copies its successor's k-th finger entry."""
    _check_finger(k, p)
    n = (1 << (k - 2)) - 2 if k >= 2 else -1.5
    if n <= 0:
        return 0.0
    rho = p.rho
    rn = _rho_pow(n, p)
    value = (
        rho * (1.0 - rn)
        + (1.0 - rho) * (1.0 - rn)
        - (1.0 - rho) * rho * n * _rho_pow(n - 1, p)
    )
    return _clamp(value)


# -- successor pointers -----------------------------------------------------

def w1_theory(p: ChurnParams) -> float:
    return 2.0 / (3.0 + p.r * p.alpha)


def d1_theory(p: ChurnParams) -> float:
    return 0.5 * w1_theory(p)


def inconsistency_theory(p: ChurnParams) -> float:
    return w1_theory(p) - d1_theory(p)


# -- finger pointers --------------------------------------------------------

def _fk_coefficients(k: int, p: ChurnParams) -> tuple[float, float]:
    prep = replication_sum(k, p)
    lead = 1.0 + prep
    mid = 2.0 * prep + 2.0 - join_replication_prob(k, p) + p.r * (1.0 - p.alpha) / p.M
    return lead, mid


def fk_theory(k: int, p: ChurnParams) -> float:
    """Steady-state fraction of dead k-th fingers.

    Smaller root of ``(1+P) f**2 - B f + (1+P) = 0``.  The roots multiply to
    one, so the smaller is the only candidate in [0, 1].
    """
    _check_finger(k, p)
    lead, mid = _fk_coefficients(k, p)
    disc = mid * mid - 4.0 * lead * lead
    if disc < 0.0:
        raise NoSteadyState(f"no real steady state for finger {k} at {p}")
    # (B - sqrt(disc)) / 2a, rewritten to avoid cancellation when disc ~ B**2
    root = 2.0 * lead / (mid + math.sqrt(disc))
    return _clamp(root)


def fk_balance_residual(f: float, k: int, p: ChurnParams) -> float:
    """Gain minus loss of dead k-th fingers per unit failure rate.

    Gains: joiners copying a dead entry, and failures of a live finger
    target, which kill ``1 + P_rep`` fingers on average.  Losses: finger
    stabilization evicting the dead entry.
    """
    _check_finger(k, p)
    prep = replication_sum(k, p)
    gain = join_replication_prob(k, p) * f + (1.0 - f) ** 2 * (1.0 + prep)
    loss = (1.0 - p.alpha) * p.r * f / p.M
    return gain - loss


def fk_vector(p: ChurnParams) -> np.ndarray:
    """f_k for k = 1..M (index 0 holds finger 1)."""
    return np.array([fk_theory(k, p) for k in range(1, p.M + 1)])


# -- lookup cost ------------------------------------------------------------

def c1_theory(p: ChurnParams, d: Sequence[float] | None = None) -> float:
    """Expected cost of reaching the adjacent key.

    ``d[j]`` is the probability that successor j+1 is dead; the series stops
    at the end of ``d``.  Without ``d`` every successor uses d1.
    """
    if d is None:
        d = [d1_theory(p)] * p.S
    if len(d) == 0:
        raise ValueError("need at least one successor death probability")
    total = 0.0
    all_dead_before = 1.0
    for j, dj in enumerate(d, start=1):
        total += j * all_dead_before * (1.0 - dj)
        all_dead_before *= dj
    return total


def _self_share(j: int, p: ChurnParams) -> float:
    """Probability that finger j points at the same node as finger j+1."""
    return _rho_pow(1 << (j - 1), p)


def fallback_table(k: int, p: ChurnParams, f: Sequence[float] | None = None) -> np.ndarray:
    """h_k(i) for i = 1..k (index i-1).

    Once finger k is found dead, each lower finger either repeats the node
    of the finger above it (and so is dead too) or points at a new node that
    is dead with probability f_j.  The lookup settles on the first new, live
    finger; i = k means every finger failed and the successor list is used.
    """
    _check_finger(k, p)
    if f is None:
        f = fk_vector(p)
    h = np.zeros(k)
    carry = 1.0
    for i in range(1, k):
        j = k - i
        share = _self_share(j, p)
        h[i - 1] = carry * (1.0 - share) * (1.0 - f[j - 1])
        carry *= share + (1.0 - share) * f[j - 1]
    h[k - 1] = carry
    return h


def fallback_prob(k: int, i: int, p: ChurnParams, f: Sequence[float] | None = None) -> float:
    _check_finger(k, p)
    if not 1 <= i <= k:
        raise ValueError(f"fallback depth {i} outside 1..{k}")
    return float(fallback_table(k, p, f)[i - 1])


def lookup_cost_table(
    p: ChurnParams,
    f: Sequence[float] | None = None,
    d: Sequence[float] | None = None,
) -> np.ndarray:
    """Expected cost C_t (hops plus timeouts) to reach the key t away.

    Returns an array of length K with entry 0 unused (zero).  A target t is
    split as t = xi + m with xi the largest finger start strictly below t,
    so m >= 1 and every right-hand term refers to a shorter distance.
    """
    if f is None:
        f = fk_vector(p)
    f = np.asarray(f, dtype=float)
    if f.shape != (p.M,):
        raise ValueError(f"need {p.M} finger death fractions, got {f.shape}")
    h = np.zeros((p.M, p.M))
    for k in range(1, p.M + 1):
        h[k - 1, :k] = fallback_table(k, p, f)
    c1 = c1_theory(p, d)
    return _costkernel.cost_table(p.K, p.rho, f, h, c1)


def mean_lookup_cost(p: ChurnParams, table: np.ndarray | None = None) -> float:
    """Mean of C_t over t = 1..K-1."""
    if table is None:
        table = lookup_cost_table(p)
    return float(table[1:].mean())


# -- bundled predictions ----------------------------------------------------

@dataclass
class TheoryPoint:
    params: ChurnParams
    rho: float
    w1: float
    d1: float
    inconsistency: float
    f: np.ndarray
    p_join: np.ndarray
    p_share: np.ndarray
    c1: float
    L: float
    cost: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self, with_cost: bool = False) -> dict:
        p = self.params
        out = {
            "N": p.N,
            "bits": p.bits,
            "K": p.K,
            "alpha": p.alpha,
            "r": p.r,
            "S": p.S,
            "rho": self.rho,
            "w1": self.w1,
            "d1": self.d1,
            "inconsistency": self.inconsistency,
            "f": self.f.tolist(),
            "p_join": self.p_join.tolist(),
            "p_share": self.p_share.tolist(),
            "c1": self.c1,
            "L": self.L,
        }
        if with_cost and self.cost is not None:
            out["cost"] = self.cost[1:].tolist()
        return out


def theory_point(p: ChurnParams, keep_cost: bool = False) -> TheoryPoint:
    f = fk_vector(p)
    table = lookup_cost_table(p, f)
    return TheoryPoint(
        params=p,
        rho=p.rho,
        w1=w1_theory(p),
        d1=d1_theory(p),
        inconsistency=inconsistency_theory(p),
        f=f,
        p_join=np.array([join_replication_prob(k, p) for k in range(1, p.M + 1)]),
        p_share=np.array(
            [[share_prob(k, o, p) for o in range(1, SHARE_ORDERS + 1)] for k in range(1, p.M + 1)]
        ),
        c1=float(table[1]),
        L=mean_lookup_cost(p, table),
        cost=table if keep_cost else None,
    )

"""Client graph construction and pairing solvers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .channel import ChannelParams, ClientProfile, comm_rate

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 12


@dataclass(frozen=True)
class WeightParams:
    alpha: float = 1.0
    beta: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")


@dataclass(frozen=True)
class NormStats:
    """Graph-wide extrema of the two edge-weight terms."""

    freq_min: float
    freq_max: float
    rate_min: float
    rate_max: float


@dataclass
class ClientGraph:
    vertices: List[int]
    edges: List[Tuple[int, int, float]]

    def __post_init__(self):
        seen = set()
        for i, j, w in self.edges:
            if i == j:
                raise ValueError(f"self-loop on {i}")
            if i > j:
                raise ValueError(f"edge ({i}, {j}) must be stored with i < j")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            if not math.isfinite(w):
                raise ValueError(f"edge ({i}, {j}) has non-finite weight")
            seen.add((i, j))

    def weight_map(self) -> Dict[Tuple[int, int], float]:
        return {(i, j): w for i, j, w in self.edges}


@dataclass
class Matching:
    pairs: List[Tuple[int, int]]
    unpaired: List[int] = field(default_factory=list)

    def objective(self, graph: ClientGraph) -> float:
        wm = graph.weight_map()
        return math.fsum(wm[p] for p in self.pairs)

    def covered(self) -> List[int]:
        return [v for p in self.pairs for v in p]


def validate_matching(matching: Matching, vertices: Iterable[int]) -> None:
    """Raise if ``matching`` is not a vertex-disjoint selection covering ``vertices``."""
    covered = matching.covered()
    if len(covered) != len(set(covered)):
        raise ValueError("a client appears in more than one pair")
    for i, j in matching.pairs:
        if not i < j:
            raise ValueError(f"pair ({i}, {j}) not ordered")
    everything = covered + list(matching.unpaired)
    if len(everything) != len(set(everything)) or set(everything) != set(vertices):
        raise ValueError("pairs and unpaired clients must partition the vertex set")


def _minmax(value: float, lo: float, hi: float, term: str) -> float:
    if hi <= lo:
        logger.warning("degenerate %s range [%g, %g]; term contributes 0", term, lo, hi)
        return 0.0
    return (value - lo) / (hi - lo)


def edge_weight(
    ci: ClientProfile,
    cj: ClientProfile,
    rate_ij: float,
    wp: WeightParams,
    norm_stats: Optional[NormStats] = None,
) -> float:
    """``alpha * (f_i - f_j)^2 + beta * r_ij``, optionally min-max scaled per term."""
    if not rate_ij > 0:
        raise ValueError("rate must be positive")
    freq_term = (ci.cpu_freq_f - cj.cpu_freq_f) ** 2
    rate_term = rate_ij
    if wp.normalize:
        if norm_stats is None:
            raise ValueError("normalized weights need graph-wide norm_stats")
        freq_term = _minmax(freq_term, norm_stats.freq_min, norm_stats.freq_max, "frequency")
        rate_term = _minmax(rate_term, norm_stats.rate_min, norm_stats.rate_max, "rate")
    return wp.alpha * freq_term + wp.beta * rate_term


def _check_positions(clients: Sequence[ClientProfile]) -> None:
    seen = {}
    for c in clients:
        key = tuple(float(v) for v in c.position_p)
        if key in seen:
            raise ValueError(f"clients {seen[key]} and {c.id} share position {key}")
        seen[key] = c.id


def build_graph(
    clients: Sequence[ClientProfile], params: ChannelParams, wp: WeightParams
) -> ClientGraph:
    if len(clients) < 2:
        raise ValueError("need at least 2 clients to build a pairing graph")
    _check_positions(clients)
    ordered = sorted(clients, key=lambda c: c.id)
    raw = []
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            ci, cj = ordered[a], ordered[b]
            rate = comm_rate(ci.position_p, cj.position_p, params)
            raw.append((ci, cj, rate))
    stats = None
    if wp.normalize:
        fterms = [(ci.cpu_freq_f - cj.cpu_freq_f) ** 2 for ci, cj, _ in raw]
        rates = [r for _, _, r in raw]
        stats = NormStats(min(fterms), max(fterms), min(rates), max(rates))
    edges = [(ci.id, cj.id, edge_weight(ci, cj, r, wp, stats)) for ci, cj, r in raw]
    return ClientGraph([c.id for c in ordered], edges)


def greedy_pairing(graph: ClientGraph) -> Matching:
    """Scan edges by descending weight, keeping each edge whose endpoints are both free."""
    if not graph.vertices:
        raise ValueError("empty graph")
    order = sorted(graph.edges, key=lambda e: (-e[2], e[0], e[1]))
    covered = set()
    pairs = []
    for i, j, _ in order:
        if i not in covered and j not in covered:
            pairs.append((i, j))
            covered.update((i, j))
    unpaired = sorted(v for v in graph.vertices if v not in covered)
    return Matching(pairs, unpaired)


def optimal_pairing_bruteforce(graph: ClientGraph) -> Matching:
    """Exact maximum-weight matching by exhaustive recursion over the lowest free vertex.

    Only edges present in the graph may be selected. Among equal optima the
    lexicographically smallest sorted pair list wins.
    """
    n = len(graph.vertices)
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} vertices, got {n}")
    verts = sorted(graph.vertices)
    wm = graph.weight_map()

    @lru_cache(maxsize=None)
    def best(free: FrozenSet[int]) -> Tuple[float, Tuple[Tuple[int, int], ...]]:
        if len(free) < 2:
            return 0.0, ()
        v = min(free)
        rest = free - {v}
        # option: leave v unmatched
        cand = [best(rest)]
        for u in sorted(rest):
            key = (v, u)
            if key in wm:
                val, sel = best(rest - {u})
                cand.append((val + wm[key], tuple(sorted(((v, u),) + sel))))
        return max(cand, key=lambda c: (c[0], _neg_lex(c[1])))

    _, sel = best(frozenset(verts))
    covered = {x for p in sel for x in p}
    return Matching(list(sel), [v for v in verts if v not in covered])


def _neg_lex(sel: Tuple[Tuple[int, int], ...]) -> Tuple:
    # larger key wins in max(); negate so the lexicographically smallest selection wins
    return tuple((-a, -b) for a, b in sel)


def baseline_pairing(
    strategy: str,
    clients: Sequence[ClientProfile],
    params: ChannelParams,
    seed: int = 0,
) -> Matching:
    """Reference pairings: ``random``, ``location`` (rate only) or ``compute`` (frequency gap only)."""
    ids = sorted(c.id for c in clients)
    if strategy == "random":
        rng = np.random.default_rng(seed)
        order = [ids[k] for k in rng.permutation(len(ids))]
        pairs = [tuple(sorted(order[k : k + 2])) for k in range(0, len(order) - 1, 2)]
        unpaired = sorted(order[len(pairs) * 2 :])
        return Matching(sorted(pairs), unpaired)
    if strategy == "location":
        wp = WeightParams(alpha=0.0, beta=1.0, normalize=False)
    elif strategy == "compute":
        wp = WeightParams(alpha=1.0, beta=0.0, normalize=False)
    else:
        raise ValueError(f"unknown pairing strategy {strategy!r}")
    return greedy_pairing(build_graph(clients, params, wp))

"""Maximum clique search on small undirected graphs.

Adjacency is a list of Python ints used as bitsets: bit ``j`` of ``adj[i]`` is
set iff ``i`` and ``j`` are adjacent. Graphs here are consistency graphs of a
few hundred correspondences, where bitset arithmetic is the fastest thing
plain Python offers.
"""

from __future__ import annotations

import time
from typing import Optional, Sequence

import numpy as np


class _Timeout(Exception):
    pass


def adjacency_from_edges(n: int, edges: np.ndarray) -> list[int]:
    adj = [0] * n
    for i, j in np.asarray(edges, dtype=np.int64).reshape(-1, 2).tolist():
        if i == j:
            continue
        adj[i] |= 1 << j
        adj[j] |= 1 << i
    return adj


def _bits(x: int):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


def is_clique(adj: Sequence[int], vertices) -> bool:
    vs = list(vertices)
    mask = 0
    for v in vs:
        mask |= 1 << v
    return all((adj[v] | (1 << v)) & mask == mask for v in vs)


def core_numbers(adj: Sequence[int]) -> tuple[list[int], list[int]]:
    """Degeneracy ordering (removal order) and core number per vertex."""
    n = len(adj)
    deg = [a.bit_count() for a in adj]
    maxdeg = max(deg, default=0)
    buckets = [set() for _ in range(maxdeg + 1)]
    for v, d in enumerate(deg):
        buckets[d].add(v)
    removed = [False] * n
    order, core = [], [0] * n
    k = 0
    for _ in range(n):
        d = next(i for i in range(maxdeg + 1) if buckets[i])
        v = min(buckets[d])
        buckets[d].discard(v)
        k = max(k, d)
        core[v] = k
        removed[v] = True
        order.append(v)
        for u in _bits(adj[v]):
            if not removed[u]:
                buckets[deg[u]].discard(u)
                deg[u] -= 1
                buckets[deg[u]].add(u)
    return order, core


def greedy_clique(adj: Sequence[int]) -> list[int]:
    """Start from the highest-degree vertex and keep adding the candidate with
    the most neighbors among the remaining candidates."""
    n = len(adj)
    if n == 0:
        return []
    deg = [a.bit_count() for a in adj]
    seed = max(range(n), key=lambda v: (deg[v], -v))
    clique = [seed]
    cand = adj[seed]
    while cand:
        v = max(_bits(cand), key=lambda u: ((adj[u] & cand).bit_count(), -u))
        clique.append(v)
        cand &= adj[v]
    return sorted(clique)


def local_search(adj: Sequence[int], clique: list[int]) -> list[int]:
    """Plain additions and (1, 2)-swaps until neither applies."""
    C = set(clique)
    full = (1 << len(adj)) - 1
    while True:
        cmask = sum(1 << v for v in C)
        common = full & ~cmask
        for v in C:
            common &= adj[v]
        if common:
            v = max(_bits(common), key=lambda u: ((adj[u] & common).bit_count(), -u))
            C.add(v)
            continue
        swapped = False
        for x in sorted(C):
            tight = full & ~cmask
            for v in C:
                if v != x:
                    tight &= adj[v]
            tight &= ~(1 << x)
            for u in _bits(tight):
                pair = adj[u] & tight
                if pair:
                    w = (pair & -pair).bit_length() - 1
                    C.discard(x)
                    C.update((u, w))
                    swapped = True
                    break
            if swapped:
                break
        if not swapped:
            return sorted(C)


def _color_sort(adj, P):
    out = []
    color = 0
    Q = P
    while Q:
        color += 1
        avail = Q
        while avail:
            low = avail & -avail
            v = low.bit_length() - 1
            out.append((v, color))
            avail &= ~adj[v]
            avail ^= low
            Q ^= low
    return out


def exact_max_clique(adj: Sequence[int], initial: Sequence[int] = (),
                     deadline: Optional[float] = None) -> list[int]:
    """Branch and bound with a greedy-coloring bound over a degeneracy ordering.

    Raises ``_Timeout`` when ``deadline`` (a ``time.monotonic`` value) passes.
    """
    order, core = core_numbers(adj)
    pos = {v: i for i, v in enumerate(order)}
    best = list(initial)
    calls = 0

    def expand(R, P):
        nonlocal best, calls
        calls += 1
        if deadline is not None and calls % 256 == 0 and time.monotonic() > deadline:
            raise _Timeout
        for v, c in reversed(_color_sort(adj, P)):
            if len(R) + c <= len(best):
                return
            newP = P & adj[v]
            if newP:
                expand(R + [v], newP)
            elif len(R) + 1 > len(best):
                best = R + [v]
            P &= ~(1 << v)

    for v in reversed(order):
        if core[v] + 1 <= len(best):
            continue
        later = 0
        for u in _bits(adj[v]):
            if pos[u] > pos[v]:
                later |= 1 << u
        if later.bit_count() + 1 <= len(best):
            continue
        if later:
            expand([v], later)
        elif not best:
            best = [v]
    if not best and len(adj):
        best = [0]
    return sorted(best)


def max_clique(adj: Sequence[int], exact_limit: int = 150,
               time_cap: float = 5.0) -> tuple[list[int], str]:
    """Return ``(clique, method)`` with method ``"exact"`` or ``"greedy"``.

    Graphs with at most ``exact_limit`` vertices are always solved exactly;
    larger ones are tried exactly under ``time_cap`` seconds and otherwise fall
    back to greedy construction refined by local search.
    """
    greedy = local_search(adj, greedy_clique(adj))
    if len(adj) <= exact_limit:
        return exact_max_clique(adj, greedy), "exact"
    try:
        return exact_max_clique(adj, greedy, time.monotonic() + time_cap), "exact"
    except _Timeout:
        return greedy, "greedy"

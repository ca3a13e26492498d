"""Random point-to-point overlay with per-class degree targets."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import SimConfig

MERGER, SIGNER, FULL = "merger", "signer", "full"


class InfeasibleDegrees(ValueError):
    pass


def node_classes(config: SimConfig) -> list[str]:
    """Node index -> class; mergers first, then signers, then full nodes."""
    return [MERGER] * config.n_mergers + [SIGNER] * config.n_signers + [FULL] * config.n_full


def build_topology(config: SimConfig, rng: np.random.Generator) -> list[list[int]]:
    deg = {MERGER: config.degree_merger, SIGNER: config.degree_signer, FULL: config.degree_full}
    return random_topology([deg[c] for c in node_classes(config)], rng)


def random_topology(targets: Sequence[int], rng: np.random.Generator) -> list[list[int]]:
    """Connected simple graph whose node degrees match ``targets`` in expectation.

    Configuration model: every node gets ``target`` stubs, stubs are paired at
    random and duplicate or self pairs are retried; stubs still unpaired after
    that go to weight-sampled partners. Components are finally
    joined by degree-preserving edge swaps. Returns sorted adjacency lists.
    """
    n = len(targets)
    if n == 0:
        return []
    if any(t < 0 for t in targets):
        raise InfeasibleDegrees("negative degree")
    if any(t > n - 1 for t in targets):
        raise InfeasibleDegrees(f"degree above {n - 1} with {n} nodes")
    if n > 1 and (min(targets) == 0 or sum(targets) < 2 * (n - 1)):
        raise InfeasibleDegrees("targets too small for a connected graph")

    adj: list[set[int]] = [set() for _ in range(n)]

    def link(a: int, b: int) -> bool:
        if a == b or b in adj[a]:
            return False
        adj[a].add(b)
        adj[b].add(a)
        return True

    stubs = [i for i in range(n) for _ in range(targets[i])]
    for _ in range(20):
        if len(stubs) < 2:
            break
        order = rng.permutation(len(stubs))
        left = []
        for k in range(0, len(order) - 1, 2):
            a, b = stubs[order[k]], stubs[order[k + 1]]
            if not link(a, b):
                left.extend((a, b))
        if len(order) % 2:
            left.append(stubs[order[-1]])
        if len(left) == len(stubs):
            break
        stubs = left
    if stubs:
        # dense nodes keep colliding with themselves; give their last stubs to
        # random partners chosen by target weight
        p = np.asarray(targets, dtype=float)
        p /= p.sum()
        for a in stubs:
            for b in rng.choice(n, size=16, p=p).tolist():
                if link(a, b):
                    break

    _connect(adj, rng)
    return [sorted(s) for s in adj]


def _components(adj: list[set[int]]) -> list[list[int]]:
    seen = [False] * len(adj)
    comps = []
    for s in range(len(adj)):
        if seen[s]:
            continue
        seen[s] = True
        comp = [s]
        for u in comp:
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    comp.append(v)
        comps.append(comp)
    comps.sort(key=len, reverse=True)
    return comps


def _connect(adj: list[set[int]], rng: np.random.Generator) -> None:
    """Join every smaller component to the largest one."""
    swaps = 0
    while True:
        comps = _components(adj)
        if len(comps) <= 1:
            return
        main, small = comps[0], comps[1]
        u = main[int(rng.integers(len(main)))]
        x = small[int(rng.integers(len(small)))]
        if adj[u] and adj[x] and swaps < 4 * len(adj):
            swaps += 1
            # swap (u,v),(x,y) for (u,x),(v,y): degrees stay the same
            v = sorted(adj[u])[int(rng.integers(len(adj[u])))]
            y = sorted(adj[x])[int(rng.integers(len(adj[x])))]
            if v != y and y not in adj[v] and x not in adj[u]:
                adj[u].discard(v)
                adj[v].discard(u)
                adj[x].discard(y)
                adj[y].discard(x)
                for a, b in ((u, x), (v, y)):
                    adj[a].add(b)
                    adj[b].add(a)
            continue
        adj[u].add(x)
        adj[x].add(u)


def is_connected(adj: Sequence[Sequence[int]]) -> bool:
    return len(_components([set(a) for a in adj])) <= 1


def mean_degrees(adj: list[list[int]], classes: Sequence[str]) -> dict[str, float]:
    out: dict[str, list[int]] = {}
    for i, nbrs in enumerate(adj):
        out.setdefault(classes[i], []).append(len(nbrs))
    return {c: sum(v) / len(v) for c, v in out.items()}

"""Physical topologies and their compilation into a routing automaton.

Every directed link ``i -> j`` is split by a virtual state: the packet first
reaches ``Virtual(i, j)``, which then delivers it to ``j`` with probability
``1 - drop`` or loses it to the shared dump state.  Forwarding choices at
physical nodes are the controllable transitions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import ContractError, ModelValidationError, TopologyGenerationError
from .pfsa import IDLE, Pfsa

DUMP_SYMBOL = "D"


class Physical(NamedTuple):
    node: int


class Virtual(NamedTuple):
    src: int
    dst: int


class Dump(NamedTuple):
    pass


def link_symbol(i: int, j: int) -> tuple:
    return ("s", i, j)


@dataclass(frozen=True, eq=True)
class NetworkTopology:
    """Nodes ``0..n-1``, directed links with drop probabilities, one sink.

    Neighbor lists are kept sorted so equal topologies compare and compile
    identically.
    """

    n: int
    neighbors: tuple
    drop: Mapping[tuple, float]
    sink: int

    def __post_init__(self):
        nbrs = tuple(tuple(sorted(int(j) for j in row)) for row in self.neighbors)
        object.__setattr__(self, "neighbors", nbrs)
        object.__setattr__(self, "drop", {(int(i), int(j)): float(p) for (i, j), p in dict(self.drop).items()})
        if self.n < 1:
            raise ModelValidationError("a topology needs at least one node")
        if len(nbrs) != self.n:
            raise ModelValidationError("neighbor map must have one entry per node")
        if not 0 <= self.sink < self.n:
            raise ModelValidationError(f"sink {self.sink} is not a node")
        for i, row in enumerate(nbrs):
            if len(set(row)) != len(row):
                raise ModelValidationError(f"node {i} lists a neighbor twice")
            for j in row:
                if j == i:
                    raise ModelValidationError(f"node {i} lists itself as a neighbor")
                if not 0 <= j < self.n:
                    raise ModelValidationError(f"node {i} lists unknown neighbor {j}")
                if (i, j) not in self.drop:
                    raise ModelValidationError(f"link {i}->{j} has no drop probability")
        for (i, j), p in self.drop.items():
            if not (0.0 <= p <= 1.0):
                raise ModelValidationError(f"drop probability {p!r} on link {i}->{j} is outside [0, 1]")
            if not (0 <= i < self.n) or j not in nbrs[i]:
                raise ModelValidationError(f"drop probability given for missing link {i}->{j}")

    def __hash__(self):
        return hash((self.n, self.neighbors, self.sink, tuple(sorted(self.drop.items()))))

    @classmethod
    def from_links(cls, n: int, sink: int, links: Iterable) -> "NetworkTopology":
        """Build from ``(from, to, drop)`` triples."""
        neighbors = [[] for _ in range(n)]
        drop = {}
        for i, j, p in links:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ModelValidationError(f"link {i}->{j} references a node outside 0..{n - 1}")
            if (i, j) in drop:
                raise ModelValidationError(f"link {i}->{j} given twice")
            neighbors[i].append(j)
            drop[(i, j)] = p
        return cls(n, tuple(map(tuple, neighbors)), drop, sink)

    @property
    def links(self) -> list:
        return [(i, j, self.drop[(i, j)]) for i in range(self.n) for j in self.neighbors[i]]

    @property
    def n_links(self) -> int:
        return sum(len(row) for row in self.neighbors)

    @property
    def max_degree(self) -> int:
        return max((len(row) for row in self.neighbors), default=0)

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def with_sink(self, sink: int) -> "NetworkTopology":
        return NetworkTopology(self.n, self.neighbors, self.drop, sink)

    def with_drops(self, drop: Mapping) -> "NetworkTopology":
        return NetworkTopology(self.n, self.neighbors, drop, self.sink)

    def reaches_sink(self) -> np.ndarray:
        """Mask of nodes with a directed path to the sink."""
        preds = [[] for _ in range(self.n)]
        for i, row in enumerate(self.neighbors):
            for j in row:
                preds[j].append(i)
        seen = np.zeros(self.n, dtype=bool)
        seen[self.sink] = True
        stack = [self.sink]
        while stack:
            j = stack.pop()
            for i in preds[j]:
                if not seen[i]:
                    seen[i] = True
                    stack.append(i)
        return seen

    def hop_distance(self) -> np.ndarray:
        """Directed hop count to the sink (``-1`` when unreachable)."""
        preds = [[] for _ in range(self.n)]
        for i, row in enumerate(self.neighbors):
            for j in row:
                preds[j].append(i)
        dist = np.full(self.n, -1, dtype=int)
        dist[self.sink] = 0
        frontier = [self.sink]
        while frontier:
            nxt = []
            for j in frontier:
                for i in preds[j]:
                    if dist[i] < 0:
                        dist[i] = dist[j] + 1
                        nxt.append(i)
            frontier = nxt
        return dist

    def to_json(self) -> str:
        doc = {"n": self.n, "sink": self.sink,
               "links": [{"from": i, "to": j, "drop": p} for i, j, p in self.links]}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetworkTopology":
        try:
            doc = json.loads(text)
            return cls.from_links(int(doc["n"]), int(doc["sink"]),
                                  [(e["from"], e["to"], float(e["drop"])) for e in doc["links"]])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ModelValidationError(f"malformed topology document: {exc}") from exc


def load_topology(path) -> NetworkTopology:
    return NetworkTopology.from_json(Path(path).read_text())


def save_topology(topo: NetworkTopology, path) -> None:
    Path(path).write_text(topo.to_json() + "\n")


class StateIndex:
    """Bijection between automaton state labels and dense indices.

    Physical nodes come first (by id), then virtual nodes in lexicographic
    ``(src, dst)`` order, then the dump state.
    """

    def __init__(self, topo: NetworkTopology):
        labels = [Physical(i) for i in range(topo.n)]
        labels += [Virtual(i, j) for i in range(topo.n) for j in topo.neighbors[i]]
        labels.append(Dump())
        self.labels = tuple(labels)
        self.position = {label: k for k, label in enumerate(self.labels)}
        self.topology = topo
        self.n_nodes = topo.n
        self.sink = topo.sink

    def __len__(self):
        return len(self.labels)

    def physical(self, i: int) -> int:
        return i

    def virtual(self, i: int, j: int) -> int:
        return self.position[Virtual(i, j)]

    @property
    def dump(self) -> int:
        return len(self.labels) - 1

    @property
    def sink_state(self) -> int:
        return self.sink


class NetworkPfsa(NamedTuple):
    pfsa: Pfsa
    index: StateIndex


def build_pfsa(topo: NetworkTopology) -> NetworkPfsa:
    """Compile ``topo`` into its routing automaton and state index."""
    index = StateIndex(topo)
    transitions, morph = {}, {}
    alphabet = []
    dump = Dump()
    for i in range(topo.n):
        row = topo.neighbors[i]
        node = Physical(i)
        if not row:
            transitions[(node, IDLE)] = node
            morph[(node, IDLE)] = 1.0
            continue
        m = len(row)
        for j in row:
            s = link_symbol(i, j)
            alphabet.append(s)
            v = Virtual(i, j)
            transitions[(node, s)] = v
            morph[(node, s)] = 1.0 / m
            lam = topo.drop[(i, j)]
            transitions[(v, s)] = Physical(j)
            morph[(v, s)] = 1.0 - lam
            transitions[(v, DUMP_SYMBOL)] = dump
            morph[(v, DUMP_SYMBOL)] = lam
    transitions[(dump, DUMP_SYMBOL)] = dump
    morph[(dump, DUMP_SYMBOL)] = 1.0
    alphabet += [DUMP_SYMBOL, IDLE]
    chi = np.zeros(len(index))
    chi[topo.sink] = 1.0
    controllable = {(Physical(i), link_symbol(i, j)) for i in range(topo.n) for j in topo.neighbors[i]}
    pfsa = Pfsa(index.labels, alphabet, transitions, morph, chi, controllable)
    return NetworkPfsa(pfsa, index)


def random_topology(n: int, max_degree: int, drop_range=(0.05, 0.6), connectivity: float = 0.5,
                    seed: int = 0, sink: int = 0) -> NetworkTopology:
    """Reproducible random topology with every node able to reach the sink.

    A random spanning tree (respecting ``max_degree``) guarantees
    reachability; ``connectivity`` in ``[0, 1]`` then fills that fraction of
    the remaining degree budget with extra links.  Physical links are
    bidirectional, but each direction draws its own drop probability
    uniformly from ``drop_range``.
    """
    lo, hi = drop_range
    if n < 1:
        raise ContractError("n must be at least 1")
    if not 0.0 <= lo <= hi <= 1.0:
        raise ContractError(f"invalid drop range {drop_range!r}")
    if not 0.0 <= connectivity <= 1.0:
        raise ContractError("connectivity must lie in [0, 1]")
    if not 0 <= sink < n:
        raise ContractError(f"sink {sink} outside 0..{n - 1}")
    if n > 1 and max_degree < 1:
        raise TopologyGenerationError("max_degree 0 cannot connect more than one node",
                                      unreachable=set(range(n)) - {sink})
    if n > 2 and max_degree < 2:
        raise TopologyGenerationError("max_degree 1 cannot connect more than two nodes",
                                      unreachable=set(range(n)) - {sink})
    rng = np.random.default_rng(seed)
    degree = np.zeros(n, dtype=int)
    edges = set()
    order = [sink] + [int(v) for v in rng.permutation([v for v in range(n) if v != sink])]
    for k in range(1, n):
        v = order[k]
        candidates = [u for u in order[:k] if degree[u] < max_degree]
        if not candidates:
            placed = set(order[:k])
            raise TopologyGenerationError("degree budget exhausted while attaching nodes",
                                          unreachable=set(range(n)) - placed)
        u = candidates[int(rng.integers(len(candidates)))]
        edges.add((min(u, v), max(u, v)))
        degree[u] += 1
        degree[v] += 1
    budget = (n * max_degree) // 2 - (n - 1)
    target = int(round(connectivity * max(budget, 0))) if n > 1 else 0
    attempts = 0
    while target > 0 and attempts < 50 * n + 100:
        attempts += 1
        u, v = (int(x) for x in rng.choice(n, size=2, replace=False))
        key = (min(u, v), max(u, v))
        if key in edges or degree[u] >= max_degree or degree[v] >= max_degree:
            continue
        edges.add(key)
        degree[u] += 1
        degree[v] += 1
        target -= 1
    links = []
    for u, v in sorted(edges):
        links.append((u, v, float(rng.uniform(lo, hi))))
        links.append((v, u, float(rng.uniform(lo, hi))))
    topo = NetworkTopology.from_links(n, sink, links)
    reach = topo.reaches_sink()
    if not reach.all():
        raise TopologyGenerationError("sink unreachable from some nodes",
                                      unreachable=set(np.flatnonzero(~reach).tolist()))
    return topo


def kill_nodes(topo: NetworkTopology, victims: Iterable[int]) -> tuple:
    """Remove ``victims`` and re-index the survivors.

    Returns ``(topology, mapping)`` where ``mapping`` sends each surviving old
    id to its new id.
    """
    victims = {int(v) for v in victims}
    if topo.sink in victims:
        raise ContractError("the sink cannot be killed")
    if not victims:
        return topo, {i: i for i in range(topo.n)}
    unknown = {v for v in victims if not 0 <= v < topo.n}
    if unknown:
        raise ContractError(f"unknown victims {sorted(unknown)}")
    survivors = [i for i in range(topo.n) if i not in victims]
    mapping = {old: new for new, old in enumerate(survivors)}
    links = [(mapping[i], mapping[j], p) for i, j, p in topo.links
             if i in mapping and j in mapping]
    return NetworkTopology.from_links(len(survivors), mapping[topo.sink], links), mapping

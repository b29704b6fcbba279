"""Packet-level simulation, windowed drop estimation and scripted scenarios.

Packets hop between physical nodes following a forwarding policy: at each
node the next hop is drawn uniformly from the enabled neighbors and the hop
survives with probability ``1 - drop``.  A dropped packet is gone (no
retransmission); a node with no enabled neighbor cannot deliver.

Scenarios interleave distributed-engine rounds with timed events (sink
moves, drop-probability noise, node kills, report attenuation, traffic) and
record the recovery of the delivery-probability vector.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .central import Policy, rho_physical, theta_for_epsilon
from .engine import DistributedEngine, Schedule, run_to_convergence
from .errors import ContractError, ModelValidationError
from .network import NetworkTopology, kill_nodes

NOISE_CLIP = (0.01, 0.99)
SETTLE_QUIET = 3


@dataclass(frozen=True)
class PacketOutcome:
    source: int
    path: tuple
    delivered: bool
    hops: int

    def to_json(self) -> str:
        return json.dumps({"source": self.source, "path": list(self.path),
                           "delivered": self.delivered, "hops": self.hops})


@dataclass
class DeliveryReport:
    """Per-source delivery rates, per-node arrival counts and optional packet log."""

    rates: dict
    delivered: dict
    sent: dict
    arrivals: np.ndarray
    outcomes: list | None = None

    def standard_error(self, source: int) -> float:
        p = self.rates[source]
        return float(np.sqrt(p * (1.0 - p) / self.sent[source]))

    def write_log(self, path) -> None:
        if self.outcomes is None:
            raise ContractError("simulation ran without a packet log")
        with open(path, "w") as fh:
            for o in self.outcomes:
                fh.write(o.to_json() + "\n")


def _forwarding_arrays(topo: NetworkTopology, policy: Policy, drops: Mapping | None):
    drops = topo.drop if drops is None else drops
    width = max(max((len(r) for r in policy.enabled), default=0), 1)
    nxt = np.zeros((topo.n, width), dtype=int)
    lam = np.zeros((topo.n, width))
    count = np.zeros(topo.n, dtype=int)
    for i, row in enumerate(policy.enabled):
        row = sorted(row)
        count[i] = len(row)
        nxt[i, :len(row)] = row
        lam[i, :len(row)] = [drops[(i, j)] for j in row]
    return nxt, lam, count


def simulate_packets(topo: NetworkTopology, policy: Policy, sources: Iterable[int], n_packets: int,
                     seed: int = 0, drops: Mapping | None = None, log: bool = False) -> DeliveryReport:
    """Send ``n_packets`` from every source under ``policy``.

    Parameters
    ----------
    drops : mapping, optional
        Link drop probabilities to simulate with; defaults to ``topo.drop``.
    log : bool
        Keep a :class:`PacketOutcome` (with full path) per packet.

    Raises
    ------
    ContractError
        If the policy has a forwarding loop or ``n_packets < 1``.
    """
    if n_packets < 1:
        raise ContractError("n_packets must be at least 1")
    policy.validate(topo)
    if not policy.is_loop_free():
        raise ContractError("policy contains a forwarding loop")
    sources = [int(s) for s in sources]
    nxt, lam, count = _forwarding_arrays(topo, policy, drops)
    rng = np.random.default_rng(seed)
    arrivals = np.zeros(topo.n, dtype=np.int64)
    rates, delivered_n, sent, outcomes = {}, {}, {}, [] if log else None
    for s in sources:
        pos = np.full(n_packets, s)
        active = np.ones(n_packets, dtype=bool)
        delivered = np.zeros(n_packets, dtype=bool)
        hops = np.zeros(n_packets, dtype=int)
        paths = [[s] for _ in range(n_packets)] if log else None
        # loop-freedom bounds every path by n hops
        for _ in range(topo.n + 1):
            at_sink = active & (pos == topo.sink)
            delivered |= at_sink
            active &= ~at_sink
            stuck = active & (count[pos] == 0)
            active &= ~stuck
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            here = pos[idx]
            slot = (rng.random(idx.size) * count[here]).astype(int)
            survive = rng.random(idx.size) >= lam[here, slot]
            target = nxt[here, slot]
            hops[idx] += 1
            moved = idx[survive]
            pos[moved] = target[survive]
            np.add.at(arrivals, target[survive], 1)
            active[idx[~survive]] = False
            if log:
                for k, t, ok in zip(idx.tolist(), target.tolist(), survive.tolist()):
                    if ok:
                        paths[k].append(t)
        sent[s] = n_packets
        delivered_n[s] = int(delivered.sum())
        rates[s] = delivered_n[s] / n_packets
        if log:
            outcomes += [PacketOutcome(s, tuple(p), bool(d), int(h))
                         for p, d, h in zip(paths, delivered, hops)]
    return DeliveryReport(rates, delivered_n, sent, arrivals, outcomes)


class DropEstimator:
    """Sliding-window drop-rate estimate per directed link.

    Until a link has ``min_samples`` outcomes its estimate is the prior 0.5.
    """

    PRIOR = 0.5

    def __init__(self, links: Sequence[tuple], window: int = 100, min_samples: int | None = None):
        if window < 1:
            raise ContractError("window must be at least 1")
        self.window = int(window)
        self.min_samples = max(1, window // 4) if min_samples is None else int(min_samples)
        if not 1 <= self.min_samples <= self.window:
            raise ContractError("min_samples must lie in [1, window]")
        self.links = [tuple(l) for l in links]
        self.slot = {l: k for k, l in enumerate(self.links)}
        self._buf = np.zeros((len(self.links), self.window), dtype=bool)
        self._n = np.zeros(len(self.links), dtype=np.int64)

    def record(self, link: tuple, dropped: bool) -> None:
        k = self.slot[tuple(link)]
        self._buf[k, self._n[k] % self.window] = bool(dropped)
        self._n[k] += 1

    def record_batch(self, dropped: np.ndarray) -> None:
        """Record ``dropped[k, :]`` (same count per link) for every link ``k`` in order."""
        dropped = np.asarray(dropped, dtype=bool)
        if dropped.ndim == 1:
            dropped = dropped[:, None]
        per = dropped.shape[1]
        cols = (self._n[:, None] + np.arange(per)[None, :]) % self.window
        rows = np.broadcast_to(np.arange(len(self.links))[:, None], cols.shape)
        if per > self.window:
            dropped, rows, cols = dropped[:, -self.window:], rows[:, -self.window:], cols[:, -self.window:]
        self._buf[rows, cols] = dropped
        self._n += per

    def estimates(self) -> np.ndarray:
        filled = np.minimum(self._n, self.window)
        drops = self._buf.sum(axis=1)
        est = np.where(filled > 0, drops / np.maximum(filled, 1), self.PRIOR)
        return np.where(filled >= self.min_samples, est, self.PRIOR)

    def estimate(self, link: tuple) -> float:
        return float(self.estimates()[self.slot[tuple(link)]])

    def as_dict(self) -> dict:
        return dict(zip(self.links, self.estimates().tolist()))


def estimate_drops(outcomes: Mapping, window: int, min_samples: int | None = None) -> dict:
    """Windowed drop-rate estimate from per-link outcome streams (``True`` = dropped)."""
    est = DropEstimator(list(outcomes), window, min_samples)
    for link, stream in outcomes.items():
        for d in list(stream)[-window:]:
            est.record(link, d)
    return est.as_dict()


# -- scenarios ----------------------------------------------------------------


@dataclass(frozen=True)
class MoveSink:
    at: int
    node: int
    tag = "move_sink"


@dataclass(frozen=True)
class SetDropNoise:
    at: int
    sigma: float
    tag = "set_drop_noise"


@dataclass(frozen=True)
class KillNodes:
    """Kill an explicit node set, or a fraction of nodes in BFS clusters."""

    at: int
    nodes: tuple = ()
    fraction: float = 0.0
    cluster_size: int = 1
    tag = "kill_nodes"


@dataclass(frozen=True)
class SetZeta:
    at: int
    node: int
    value: float
    tag = "set_zeta"


@dataclass(frozen=True)
class InjectTraffic:
    at: int
    sources: tuple
    packets_per_round: int
    tag = "inject_traffic"


EVENT_TYPES = {cls.tag: cls for cls in (MoveSink, SetDropNoise, KillNodes, SetZeta, InjectTraffic)}


@dataclass(frozen=True)
class ScenarioScript:
    events: tuple
    horizon: int
    seed: int = 0
    probes: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.probes is not None:
            object.__setattr__(self, "probes", tuple(int(p) for p in self.probes))
        if self.horizon < 0:
            raise ModelValidationError("horizon must be non-negative")
        last = 0
        for ev in self.events:
            if ev.at < last:
                raise ModelValidationError("event times must be non-decreasing")
            if ev.at > self.horizon:
                raise ModelValidationError(f"event at round {ev.at} lies beyond the horizon")
            last = ev.at
            if isinstance(ev, KillNodes):
                if not 0.0 <= ev.fraction <= 1.0:
                    raise ModelValidationError("kill fraction must lie in [0, 1]")
                if ev.cluster_size < 1:
                    raise ModelValidationError("cluster_size must be at least 1")
            if isinstance(ev, SetDropNoise) and ev.sigma < 0:
                raise ModelValidationError("noise sigma must be non-negative")
            if isinstance(ev, SetZeta) and not 0.0 <= ev.value <= 1.0:
                raise ModelValidationError("zeta must lie in [0, 1]")
            if isinstance(ev, InjectTraffic) and ev.packets_per_round < 0:
                raise ModelValidationError("packets_per_round must be non-negative")

    def to_json(self) -> str:
        evs = []
        for ev in self.events:
            d = {"type": ev.tag, **asdict(ev)}
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            evs.append(d)
        doc = {"horizon": self.horizon, "seed": self.seed, "events": evs}
        if self.probes is not None:
            doc["probes"] = list(self.probes)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioScript":
        try:
            doc = json.loads(text)
            events = []
            for e in doc.get("events", []):
                e = dict(e)
                kind = EVENT_TYPES[e.pop("type")]
                for k in ("nodes", "sources"):
                    if k in e:
                        e[k] = tuple(int(x) for x in e[k])
                events.append(kind(**e))
            probes = doc.get("probes")
            return cls(tuple(events), int(doc["horizon"]), int(doc.get("seed", 0)),
                       None if probes is None else tuple(probes))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ModelValidationError(f"malformed scenario document: {exc}") from exc


def load_scenario(path) -> ScenarioScript:
    return ScenarioScript.from_json(Path(path).read_text())


def default_probes(topo: NetworkTopology, k: int = 3) -> tuple:
    """The ``k`` nodes farthest (in hops) from the sink, ties by id."""
    dist = topo.hop_distance()
    order = sorted(range(topo.n), key=lambda i: (-dist[i], i))
    return tuple(i for i in order if i != topo.sink)[:k]


def cluster_victims(topo: NetworkTopology, fraction: float, cluster_size: int, rng,
                    protected: Iterable[int] = ()) -> set:
    """Pick ``round(fraction * n)`` victims as BFS balls around random centers."""
    protected = set(protected) | {topo.sink}
    target = min(int(round(fraction * topo.n)), topo.n - len(protected))
    victims: set = set()
    undirected = [set(row) for row in topo.neighbors]
    for i, row in enumerate(topo.neighbors):
        for j in row:
            undirected[j].add(i)
    while len(victims) < target:
        pool = [v for v in range(topo.n) if v not in victims and v not in protected]
        center = pool[int(rng.integers(len(pool)))]
        ball, queue, seen = [], deque([center]), {center}
        while queue and len(ball) < cluster_size and len(victims) + len(ball) < target:
            u = queue.popleft()
            ball.append(u)
            for w in sorted(undirected[u]):
                if w not in seen and w not in victims and w not in protected:
                    seen.add(w)
                    queue.append(w)
        victims.update(ball)
    return victims


@dataclass(frozen=True)
class MetricRow:
    round: int
    event_tag: str
    rho_norm: float
    corrections: int
    probe_rho: tuple


@dataclass
class EventSummary:
    tag: str
    round: int
    rho_norm_before: float
    rho_norm_after: float
    settle_rounds: int | None


@dataclass
class ScenarioResult:
    rows: list
    events: list
    probes: tuple
    loop_free: bool
    topology: NetworkTopology
    engine: DistributedEngine = field(repr=False)
    packet_log: list = field(default_factory=list, repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "event_tag", "rho_norm", "corrections"]
                       + [f"probe_{p}" for p in self.probes])
            for r in self.rows:
                w.writerow([r.round, r.event_tag, repr(r.rho_norm), r.corrections]
                           + [repr(v) for v in r.probe_rho])

    def write_packet_log(self, path) -> None:
        with open(path, "w") as fh:
            for o in self.packet_log:
                fh.write(o.to_json() + "\n")


class _Runner:
    """Mutable scenario state: topology, engine, probes, noise and estimators."""

    def __init__(self, topo, theta, probes, seed, schedule, closed_loop, window, probes_per_link):
        self.topo = topo
        self.base = topo
        self.theta = theta
        self.schedule = schedule
        self.closed_loop = closed_loop
        self.window = window
        self.probes_per_link = probes_per_link
        self.rng = np.random.default_rng(seed)
        self.probes = tuple(probes)
        self.sigma = 0.0
        self.traffic = None
        self.engine = DistributedEngine(topo, theta)
        self._links()

    def _links(self):
        eng = self.engine
        self.slots = np.argwhere(eng.mask)
        self.link_ids = [(int(i), int(eng.nbr[i, s])) for i, s in self.slots]
        self.base_lam = eng.lam[eng.mask].copy()
        self.estimator = DropEstimator(self.link_ids, self.window)

    def rho(self) -> np.ndarray:
        return rho_physical(self.topo, self.engine.policy())

    def estimating(self) -> bool:
        return self.sigma > 0.0 or self.closed_loop

    def kill(self, victims: set):
        eng = self.engine
        new_topo, mapping = kill_nodes(self.topo, victims)
        keep = sorted(mapping, key=mapping.get)
        init = eng.nu[keep]
        zeta = eng.zeta[keep]
        self.topo = new_topo
        self.engine = DistributedEngine(new_topo, self.theta, init=init, zeta=zeta)
        self.engine.chi[:] = 0.0
        self.engine.chi[new_topo.sink] = 1.0
        self.probes = tuple(mapping[p] for p in self.probes)
        if self.traffic is not None:
            srcs, ppr = self.traffic
            self.traffic = (tuple(mapping[s] for s in srcs if s in mapping), ppr)
        self._links()
        return mapping

    def step(self) -> int:
        eng = self.engine
        if self.sigma > 0.0:
            true_lam = np.clip(self.base_lam + self.rng.normal(0.0, self.sigma, self.base_lam.size),
                               *NOISE_CLIP)
        else:
            true_lam = self.base_lam
        if self.estimating():
            dropped = self.rng.random((true_lam.size, self.probes_per_link)) < true_lam[:, None]
            self.estimator.record_batch(dropped)
            lam = np.zeros_like(eng.lam)
            lam[eng.mask] = self.estimator.estimates()
            eng.set_drops(lam)
        _, changes = eng.round(self.schedule)
        return int(changes.sum())


def run_scenario(script: ScenarioScript, topo: NetworkTopology, epsilon: float,
                 schedule: Schedule | None = None, closed_loop: bool = False, record_every: int = 1,
                 window: int = 100, probes_per_link: int = 4, log_packets: bool = False) -> ScenarioResult:
    """Run ``script.horizon`` engine rounds, applying events at their rounds.

    A metrics row is emitted every ``record_every`` rounds and at every
    event; its ``corrections`` column totals forwarding-bit flips since the
    previous row.  Delivery probabilities are always evaluated with the
    topology's nominal drop probabilities.

    Raises
    ------
    ModelValidationError
        Unknown nodes in events, attempts to kill the sink or a probe.
    """
    schedule = schedule or Schedule()
    if record_every < 1:
        raise ContractError("record_every must be at least 1")
    theta = theta_for_epsilon(epsilon, topo)
    probes = script.probes if script.probes is not None else default_probes(topo)
    for p in probes:
        if not 0 <= p < topo.n:
            raise ModelValidationError(f"probe {p} is not a node")
    run = _Runner(topo, theta, probes, script.seed, schedule, closed_loop, window, probes_per_link)
    rows, summaries, packet_log = [], [], []
    loop_free = True
    pending = list(script.events)
    pending_corr = 0
    open_summary = None
    last_change = 0

    def snapshot(k, tag):
        nonlocal loop_free, pending_corr
        pol = run.engine.policy()
        loop_free &= pol.is_loop_free()
        rho = rho_physical(run.topo, pol)
        row = MetricRow(k, tag, float(np.linalg.norm(rho)), pending_corr,
                        tuple(float(rho[p]) for p in run.probes))
        pending_corr = 0
        rows.append(row)
        return row

    def close(summary, k):
        if summary is None:
            return
        summary.rho_norm_after = float(np.linalg.norm(run.rho()))
        # settled only if the segment ends with a few correction-free rounds
        settled = last_change <= k - 1 - SETTLE_QUIET
        summary.settle_rounds = (last_change - summary.round) if settled else None

    snapshot(0, "start")
    for k in range(1, script.horizon + 1):
        tags = []
        while pending and pending[0].at <= k:
            ev = pending.pop(0)
            close(open_summary, k)
            before = float(np.linalg.norm(run.rho()))
            _apply(run, ev)
            tags.append(ev.tag)
            open_summary = EventSummary(ev.tag, k, before, float("nan"), None)
            summaries.append(open_summary)
            last_change = k
        c = run.step()
        pending_corr += c
        if c:
            last_change = k
        if run.traffic is not None and run.traffic[1] > 0 and run.traffic[0]:
            rep = simulate_packets(run.topo, run.engine.policy(), run.traffic[0], run.traffic[1],
                                   seed=int(run.rng.integers(2 ** 31)), log=log_packets)
            if log_packets:
                packet_log += rep.outcomes
        if tags or k % record_every == 0 or k == script.horizon:
            snapshot(k, "+".join(tags))
    close(open_summary, script.horizon + 1)
    return ScenarioResult(rows, summaries, run.probes, loop_free, run.topo, run.engine, packet_log)


def _apply(run: _Runner, ev) -> None:
    n = run.topo.n
    if isinstance(ev, MoveSink):
        if not 0 <= ev.node < n:
            raise ModelValidationError(f"cannot move the sink to unknown node {ev.node}")
        run.engine.set_sink(ev.node)
        run.topo = run.topo.with_sink(ev.node)
    elif isinstance(ev, SetDropNoise):
        run.sigma = float(ev.sigma)
    elif isinstance(ev, KillNodes):
        if ev.nodes:
            victims = set(ev.nodes)
            bad = [v for v in victims if not 0 <= v < n]
            if bad:
                raise ModelValidationError(f"cannot kill unknown nodes {sorted(bad)}")
            if run.topo.sink in victims:
                raise ModelValidationError("the sink cannot be killed")
            if victims & set(run.probes):
                raise ModelValidationError("probe nodes must survive every kill")
        else:
            victims = cluster_victims(run.topo, ev.fraction, ev.cluster_size, run.rng,
                                      protected=run.probes)
        run.kill(victims)
    elif isinstance(ev, SetZeta):
        if not 0 <= ev.node < n:
            raise ModelValidationError(f"unknown node {ev.node}")
        run.engine.set_zeta(ev.node, ev.value)
    elif isinstance(ev, InjectTraffic):
        bad = [s for s in ev.sources if not 0 <= s < n]
        if bad:
            raise ModelValidationError(f"unknown traffic sources {bad}")
        run.traffic = (tuple(ev.sources), int(ev.packets_per_round))
    else:
        raise ModelValidationError(f"unknown event {ev!r}")


@dataclass
class NoiseReport:
    corrections: np.ndarray
    rho_norm: np.ndarray
    cv: float
    warmup: int
    estimates_in_range: bool


def noise_robustness_run(topo: NetworkTopology, epsilon: float, noise_sigma: float, rounds: int,
                         warmup: int | None = None, window: int = 100, probes_per_link: int = 4,
                         seed: int = 0, schedule: Schedule | None = None) -> NoiseReport:
    """Drive a converged network through ``rounds`` rounds of noisy drop probabilities.

    Each round every link's true drop probability is its nominal value plus
    zero-mean Gaussian noise, clipped to ``[0.01, 0.99]``; the engine sees
    only windowed estimates from per-link probes.  The coefficient of
    variation of the nominal-drop delivery norm is taken after ``warmup``
    rounds (default: two windows' worth of probes).
    """
    if noise_sigma < 0:
        raise ContractError("noise sigma must be non-negative")
    if rounds < 1:
        raise ContractError("rounds must be positive")
    schedule = schedule or Schedule()
    theta = theta_for_epsilon(epsilon, topo)
    if warmup is None:
        warmup = min(rounds // 2, 2 * -(-window // probes_per_link))
    run = _Runner(topo, theta, default_probes(topo), seed, schedule, False, window, probes_per_link)
    run.engine = run_to_convergence(topo, theta, schedule, record=False).engine
    run._links()
    run.sigma = float(noise_sigma)
    corr = np.zeros(rounds, dtype=np.int64)
    norm = np.zeros(rounds)
    in_range = True
    for k in range(rounds):
        corr[k] = run.step()
        norm[k] = np.linalg.norm(run.rho())
        if run.estimating():
            est = run.estimator.estimates()
            in_range &= bool(np.all((est >= 0.0) & (est <= 1.0)))
    tail = norm[warmup:]
    cv = float(tail.std() / tail.mean()) if tail.size and tail.mean() > 0 else 0.0
    return NoiseReport(corr, norm, cv, warmup, in_range)

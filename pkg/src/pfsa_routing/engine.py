"""Distributed measure propagation over a simulated neighbor-query layer.

Each physical node keeps only a small table: its neighbors' last reported
measures, its outgoing drop probabilities and one forwarding bit per
neighbor.  An update

1. reads every neighbor's reported measure (``zeta * measure``);
2. derives the measure of the virtual state on each link,
   ``(1 - theta) * (1 - drop) * reported``;
3. disables a link when that virtual measure is strictly below the node's
   current measure and enables it otherwise;
4. recomputes its own measure from the enabled links and the self-loop mass
   left by the disabled ones.

:func:`node_step` is the single-node reference.  :class:`DistributedEngine`
runs whole networks; its synchronous round is vectorized but performs the
same floating-point operations in the same order as :func:`node_step`, so the
two agree bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .central import Policy, theta_for_epsilon
from .errors import ContractError, ConvergenceError, ProtocolError
from .network import NetworkTopology, random_topology

SCHEDULE_ALIASES = {
    "sync": "sync", "synchronous-rounds": "sync",
    "perm": "perm", "random-permutation-per-round": "perm",
    "poisson": "poisson", "independent-poisson-clock": "poisson",
}


@dataclass(frozen=True)
class NeighborEntry:
    id: int
    last_seen_measure: float
    drop_prob: float
    forwarding_bit: bool = False
    enabled_for_propagation: bool = True


@dataclass(frozen=True)
class NodeState:
    self_id: int
    self_measure: float
    chi: float
    neighbor_table: tuple = ()
    zeta: float = 1.0

    def table(self) -> list:
        """Rows ``(id, measure, drop, forwarding)``, self first with drop 0 and decision 0."""
        rows = [(self.self_id, self.self_measure, 0.0, 0)]
        rows += [(e.id, e.last_seen_measure, e.drop_prob, int(e.forwarding_bit))
                 for e in self.neighbor_table]
        return rows


class Report(NamedTuple):
    id: int
    reported_measure: float
    drop_prob: float


def reported_measure(state: NodeState) -> float:
    """What a node advertises to its neighbors."""
    if not 0.0 <= state.zeta <= 1.0:
        raise ContractError(f"zeta must lie in [0, 1], got {state.zeta!r}")
    return state.zeta * state.self_measure


def virtual_measure(reported: float, drop: float, theta: float) -> float:
    """Measure of the virtual state on a link, from the far end's report."""
    return (1.0 - theta) * (1.0 - drop) * reported


def _update(nu: float, chi: float, reported: Sequence[float], drops: Sequence[float], theta: float):
    omt = 1.0 - theta
    m = len(reported)
    if m == 0:
        # a lone self-loop: nu = omt * nu + theta * chi has the exact solution chi
        return chi, [], [], []
    inv_m = 1.0 / m
    acc = 0.0
    n_disabled = 0
    virtual, enabled = [], []
    for r, lam in zip(reported, drops):
        vv = omt * (1.0 - lam) * r
        on = not (vv < nu)
        if on:
            acc += inv_m * vv
        else:
            n_disabled += 1
        virtual.append(vv)
        enabled.append(on)
    self_mass = n_disabled / m
    new = omt * (acc + self_mass * nu) + theta * chi
    bits = [vv > new for vv in virtual]
    return new, virtual, enabled, bits


def node_step(state: NodeState, reports: Iterable[Report], theta: float) -> NodeState:
    """One asynchronous update of a single node.

    ``reports`` must name every neighbor in the table exactly once.
    """
    if not 0.0 < theta < 1.0:
        raise ContractError(f"theta must lie in (0, 1), got {theta!r}")
    by_id = {}
    for rep in reports:
        rep = Report(*rep)
        if rep.id in by_id:
            raise ProtocolError(f"node {state.self_id} got two reports from {rep.id}")
        by_id[rep.id] = rep
    expected = [e.id for e in state.neighbor_table]
    if set(by_id) != set(expected):
        raise ProtocolError(f"node {state.self_id} expected reports from {sorted(expected)}, "
                            f"got {sorted(by_id)}")
    ordered = [by_id[j] for j in expected]
    new, _, enabled, bits = _update(state.self_measure, state.chi,
                                    [r.reported_measure for r in ordered],
                                    [r.drop_prob for r in ordered], theta)
    table = tuple(NeighborEntry(r.id, r.reported_measure, r.drop_prob, b, e)
                  for r, e, b in zip(ordered, enabled, bits))
    return replace(state, self_measure=new, neighbor_table=table)


def _forwarding_row(own: float, virtual: Sequence[float], reported: Sequence[float]) -> list:
    """Slots a node forwards on, given its measure and per-neighbor values."""
    better = [k for k, v in enumerate(virtual) if v > own]
    if better:
        return better
    # transient lag: no successor beats the node's own measure yet, so use the
    # best successor among neighbors whose measure is still strictly higher
    ahead = [k for k, r in enumerate(reported) if r > own]
    if not ahead:
        return []
    return [max(ahead, key=lambda k: (virtual[k], -k))]


def extract_policy(states: Sequence[NodeState], theta: float) -> Policy:
    """Forwarding sets read off a consistent snapshot of node states.

    Node ``i`` forwards to every ``j`` whose link's virtual state measures
    strictly more than ``i`` itself.  If there is none (a transient after the
    node's inputs dropped), it forwards to the neighbor with the best virtual
    measure among those reporting strictly more than ``i``.  Either way the
    measure strictly increases along every forwarding hop, so the result is
    loop-free.
    """
    by_id = {s.self_id: s for s in states}
    omt = 1.0 - theta
    rows = []
    for s in sorted(states, key=lambda x: x.self_id):
        reported, virtual = [], []
        for e in s.neighbor_table:
            if e.id not in by_id:
                raise ProtocolError(f"node {s.self_id} lists unknown neighbor {e.id}")
            r = reported_measure(by_id[e.id])
            reported.append(r)
            virtual.append(omt * (1.0 - e.drop_prob) * r)
        slots = _forwarding_row(s.self_measure, virtual, reported)
        rows.append([s.neighbor_table[k].id for k in slots])
    return Policy(tuple(rows))


@dataclass(frozen=True)
class Schedule:
    mode: str = "sync"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SCHEDULE_ALIASES:
            raise ContractError(f"unknown schedule mode {self.mode!r}")
        object.__setattr__(self, "mode", SCHEDULE_ALIASES[self.mode])


@dataclass(frozen=True)
class ConvergenceCriterion:
    tol: float = 1e-12
    quiet_rounds: int = 3

    def __post_init__(self):
        if not self.tol > 0.0 or self.quiet_rounds < 1:
            raise ContractError("need tol > 0 and quiet_rounds >= 1")


class DistributedEngine:
    """Array-backed network of node tables.

    Parameters
    ----------
    topo : NetworkTopology
    theta : float in (0, 1)
    init : array_like, optional
        Initial physical-node measures in ``[0, 1]``; zeros by default.
    zeta : array_like, optional
        Report attenuation per node; ones by default.
    """

    def __init__(self, topo: NetworkTopology, theta: float, init=None, zeta=None):
        if not 0.0 < theta < 1.0:
            raise ContractError(f"theta must lie in (0, 1), got {theta!r}")
        self.topo = topo
        self.theta = float(theta)
        n = topo.n
        width = max(topo.max_degree, 1)
        self.nbr = np.zeros((n, width), dtype=int)
        self.mask = np.zeros((n, width), dtype=bool)
        self.lam = np.zeros((n, width))
        for i, row in enumerate(topo.neighbors):
            k = len(row)
            self.nbr[i, :k] = row
            self.mask[i, :k] = True
            self.lam[i, :k] = [topo.drop[(i, j)] for j in row]
        self.deg = np.array([len(r) for r in topo.neighbors], dtype=float)
        self._has_nbrs = self.deg > 0
        self._inv_m = np.where(self._has_nbrs, 1.0 / np.maximum(self.deg, 1.0), 0.0)
        self.chi = np.zeros(n)
        self.chi[topo.sink] = 1.0
        if init is None:
            self.nu = np.zeros(n)
        else:
            self.nu = np.array(init, dtype=float)
            if self.nu.shape != (n,) or np.any(self.nu < 0.0) or np.any(self.nu > 1.0):
                raise ContractError("init must hold one value in [0, 1] per node")
        self.zeta = np.ones(n) if zeta is None else np.array(zeta, dtype=float)
        if np.any(self.zeta < 0.0) or np.any(self.zeta > 1.0):
            raise ContractError("zeta values must lie in [0, 1]")
        self.last_seen = np.zeros((n, width))
        self.enabled = self.mask.copy()
        self.bits = np.zeros((n, width), dtype=bool)
        self._sched_rng = None
        self._fired_since_cover = 0
        self._covered = np.zeros(n, dtype=bool)

    @property
    def n(self) -> int:
        return self.topo.n

    def set_drops(self, lam) -> None:
        """Replace link drop probabilities (array shaped like ``self.lam``)."""
        lam = np.where(self.mask, np.asarray(lam, dtype=float), 0.0)
        if np.any(lam < 0.0) or np.any(lam > 1.0):
            raise ContractError("drop probabilities must lie in [0, 1]")
        self.lam = lam

    def set_sink(self, sink: int) -> None:
        self.chi[:] = 0.0
        self.chi[sink] = 1.0
        self.topo = self.topo.with_sink(sink)

    def set_zeta(self, node: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ContractError("zeta must lie in [0, 1]")
        self.zeta[node] = value

    def link_drops(self) -> dict:
        return {(i, int(self.nbr[i, s])): float(self.lam[i, s])
                for i in range(self.n) for s in range(self.nbr.shape[1]) if self.mask[i, s]}

    # -- updates ------------------------------------------------------------

    def sync_round(self):
        """Every node updates from the previous round's reports."""
        theta = self.theta
        omt = 1.0 - theta
        nu = self.nu
        reported = self.zeta * nu
        seen = reported[self.nbr]
        vv = omt * (1.0 - self.lam) * seen
        enabled = ~(vv < nu[:, None]) & self.mask
        inv_m = self._inv_m
        acc = np.zeros(self.n)
        for s in range(vv.shape[1]):
            acc = acc + np.where(enabled[:, s], inv_m * vv[:, s], 0.0)
        n_disabled = (self.mask & ~enabled).sum(axis=1).astype(float)
        self_mass = np.where(self._has_nbrs, n_disabled / np.maximum(self.deg, 1.0), 1.0)
        new = omt * (acc + self_mass * nu) + theta * self.chi
        new = np.where(self._has_nbrs, new, self.chi)
        bits = (vv > new[:, None]) & self.mask
        changes = (bits != self.bits).sum(axis=1)
        delta = np.abs(new - nu)
        self.nu = new
        self.last_seen = np.where(self.mask, seen, 0.0)
        self.enabled = enabled
        self.bits = bits
        return delta, changes

    def update_node(self, i: int) -> tuple:
        """Gauss-Seidel update of node ``i`` using current neighbor values."""
        k = int(self.deg[i])
        cols = self.nbr[i, :k]
        reported = (self.zeta[cols] * self.nu[cols]).tolist()
        drops = self.lam[i, :k].tolist()
        old = float(self.nu[i])
        new, _, enabled, bits = _update(old, float(self.chi[i]), reported, drops, self.theta)
        self.nu[i] = new
        self.last_seen[i, :k] = reported
        self.enabled[i, :k] = enabled
        bits = np.array(bits, dtype=bool)
        changes = int((bits != self.bits[i, :k]).sum())
        self.bits[i, :k] = bits
        return abs(new - old), changes

    def round(self, schedule: Schedule):
        """One round under ``schedule``; returns per-node (delta, bit changes)."""
        if schedule.mode == "sync":
            return self.sync_round()
        if self._sched_rng is None:
            self._sched_rng = np.random.default_rng(schedule.seed)
        rng = self._sched_rng
        delta = np.zeros(self.n)
        changes = np.zeros(self.n, dtype=int)
        if schedule.mode == "perm":
            order = rng.permutation(self.n)
        else:
            order = self._poisson_firings(rng)
        for i in order:
            d, c = self.update_node(int(i))
            delta[i] = max(delta[i], d)
            changes[i] += c
        return delta, changes

    def _poisson_firings(self, rng) -> list:
        # superposed unit-rate clocks: each firing picks a uniformly random node
        fired = []
        for i in rng.integers(self.n, size=self.n):
            fired.append(int(i))
            self._covered[i] = True
            self._fired_since_cover += 1
            if self._covered.all():
                self._covered[:] = False
                self._fired_since_cover = 0
            elif self._fired_since_cover >= 3 * self.n:
                lagging = np.flatnonzero(~self._covered).tolist()
                fired.extend(lagging)
                self._covered[:] = False
                self._fired_since_cover = 0
        return fired

    # -- views --------------------------------------------------------------

    def states(self) -> list:
        out = []
        for i in range(self.n):
            k = int(self.deg[i])
            table = tuple(NeighborEntry(int(self.nbr[i, s]), float(self.last_seen[i, s]),
                                        float(self.lam[i, s]), bool(self.bits[i, s]),
                                        bool(self.enabled[i, s])) for s in range(k))
            out.append(NodeState(i, float(self.nu[i]), float(self.chi[i]), table, float(self.zeta[i])))
        return out

    def reports_for(self, i: int) -> list:
        k = int(self.deg[i])
        return [Report(int(j), float(self.zeta[j] * self.nu[j]), float(self.lam[i, s]))
                for s, j in enumerate(self.nbr[i, :k])]

    def policy(self) -> Policy:
        """Vectorized :func:`extract_policy` on the current snapshot."""
        omt = 1.0 - self.theta
        reported = np.where(self.mask, (self.zeta * self.nu)[self.nbr], -1.0)
        vv = np.where(self.mask, omt * (1.0 - self.lam) * reported, -1.0)
        own = self.nu[:, None]
        fwd = vv > own
        lagging = ~fwd.any(axis=1) & (reported > own).any(axis=1)
        for i in np.flatnonzero(lagging):
            k = self.deg[i].astype(int)
            fwd[i, _forwarding_row(self.nu[i], vv[i, :k].tolist(), reported[i, :k].tolist())] = True
        return Policy(tuple(self.nbr[i][fwd[i]].tolist() for i in range(self.n)))

    def propagation_disabled(self) -> Policy:
        """Links currently enabled for measure propagation, as a policy."""
        return Policy(tuple(self.nbr[i][self.enabled[i] & self.mask[i]].tolist() for i in range(self.n)))


@dataclass
class ConvergenceTrace:
    """Result of :func:`run_to_convergence`.

    ``measures`` has one row per round (row 0 is the initial vector) when
    recording is on.  ``rounds_used`` counts rounds up to the last one whose
    largest change reached the tolerance.
    """

    rounds_used: int
    rounds_executed: int
    final: np.ndarray
    policy: Policy
    propagation: Policy
    measures: np.ndarray | None = None
    corrections: np.ndarray | None = None
    engine: DistributedEngine | None = field(default=None, repr=False)

    def to_csv(self, path) -> None:
        """Write ``round,node_id,measure,num_forwarding_changes`` rows."""
        if self.measures is None:
            raise ContractError("trace was run without recording")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "node_id", "measure", "num_forwarding_changes"])
            for k, row in enumerate(self.measures):
                for i, v in enumerate(row):
                    c = 0 if k == 0 else int(self.corrections[k - 1, i])
                    w.writerow([k, i, repr(float(v)), c])


def run_to_convergence(topo: NetworkTopology, theta: float, schedule: Schedule | None = None,
                       crit: ConvergenceCriterion | None = None, init=None, zeta=None,
                       max_rounds: int = 10_000_000, record: bool = True) -> ConvergenceTrace:
    """Iterate rounds until the largest per-node change stays below ``crit.tol``
    for ``crit.quiet_rounds`` consecutive rounds.

    Raises
    ------
    ConvergenceError
        After ``max_rounds`` rounds, naming the node that moved most.
    """
    schedule = schedule or Schedule()
    crit = crit or ConvergenceCriterion()
    eng = DistributedEngine(topo, theta, init=init, zeta=zeta)
    history = [eng.nu.copy()] if record else None
    corrections = [] if record else None
    quiet = 0
    last_active = 0
    delta = np.zeros(topo.n)
    for k in range(1, max_rounds + 1):
        delta, changes = eng.round(schedule)
        if record:
            history.append(eng.nu.copy())
            corrections.append(changes)
        if delta.max(initial=0.0) < crit.tol:
            quiet += 1
            if quiet >= crit.quiet_rounds:
                return ConvergenceTrace(
                    rounds_used=last_active, rounds_executed=k, final=eng.nu.copy(),
                    policy=eng.policy(), propagation=eng.propagation_disabled(),
                    measures=np.array(history) if record else None,
                    corrections=np.array(corrections) if record else None, engine=eng)
        else:
            quiet = 0
            last_active = k
    worst = int(np.argmax(delta))
    raise ConvergenceError(f"no convergence within {max_rounds} rounds; node {worst} still moves "
                           f"by {delta[worst]:.3e}", worst_node=worst, rounds=max_rounds)


@dataclass(frozen=True)
class ProfileRow:
    n: int
    epsilon: float
    mean_rounds: float
    min_rounds: int
    max_rounds: int


def convergence_rounds_profile(n_values: Sequence[int], epsilon_values: Sequence[float], trials: int,
                               seed: int = 0, max_degree: int = 4, drop_range=(0.05, 0.6),
                               connectivity: float = 0.5, schedule: Schedule | None = None,
                               crit: ConvergenceCriterion | None = None) -> list:
    """Rounds to convergence over random topologies for a grid of sizes and epsilons.

    Trial ``t`` at size ``n`` uses the same topology for every epsilon.
    """
    if not n_values or not epsilon_values:
        raise ContractError("the sweep grid is empty")
    if trials < 1:
        raise ContractError("trials must be positive")
    rows = []
    for n in n_values:
        topos = [random_topology(n, max_degree, drop_range, connectivity,
                                 seed=int(np.random.SeedSequence([seed, n, t]).generate_state(1)[0]))
                 for t in range(trials)]
        for eps in epsilon_values:
            rounds = [run_to_convergence(t, theta_for_epsilon(eps, t), schedule, crit,
                                         record=False).rounds_used for t in topos]
            rows.append(ProfileRow(n, eps, float(np.mean(rounds)), int(min(rounds)), int(max(rounds))))
    return rows

"""Centralized oracles for the routing automaton.

* :func:`optimize_centralized` runs the measure-improving disabling fixpoint
  on the full automaton (policy iteration on dense solves).
* :func:`performance_vector` gives the exact per-node delivery probability
  of a forwarding policy.
* :func:`enumerate_policies` sweeps the whole power set of controllable
  transitions to get the utopian envelope used as ground truth.

The enumeration evaluates policies on the physical-node chain (virtual and
dump states eliminated), batched through ``numpy.linalg.solve``.  The full
automaton path in :func:`performance_vector` stays the reference; the test
suite pins the two against each other.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, ConvergenceError, ModelValidationError
from .network import NetworkPfsa, NetworkTopology, Physical, link_symbol
from .pfsa import (MeasureVector, absorbing_states, absorption_probabilities, apply_disabling,
                   build_transition_matrix, compute_measure, reachability_to)

ENUMERATION_CAP = 24


@dataclass(frozen=True)
class Policy:
    """Enabled forwarding neighbors per physical node."""

    enabled: tuple

    def __post_init__(self):
        object.__setattr__(self, "enabled", tuple(frozenset(int(j) for j in row) for row in self.enabled))

    @classmethod
    def all_enabled(cls, topo: NetworkTopology) -> "Policy":
        return cls(tuple(topo.neighbors))

    @classmethod
    def from_mask(cls, topo: NetworkTopology, mask) -> "Policy":
        """Build from a boolean vector aligned with ``topo.links``."""
        rows = [[] for _ in range(topo.n)]
        for (i, j, _), on in zip(topo.links, mask):
            if on:
                rows[i].append(j)
        return cls(tuple(rows))

    def mask(self, topo: NetworkTopology) -> np.ndarray:
        return np.array([j in self.enabled[i] for i, j, _ in topo.links], dtype=bool)

    def validate(self, topo: NetworkTopology) -> None:
        if len(self.enabled) != topo.n:
            raise ModelValidationError("policy does not cover every node")
        for i, row in enumerate(self.enabled):
            extra = row - set(topo.neighbors[i])
            if extra:
                raise ModelValidationError(f"node {i} enables non-neighbors {sorted(extra)}")

    def disabling(self, topo: NetworkTopology) -> frozenset:
        """The equivalent set of disabled ``(state, symbol)`` pairs."""
        return frozenset((Physical(i), link_symbol(i, j))
                         for i in range(topo.n) for j in topo.neighbors[i]
                         if j not in self.enabled[i])

    @property
    def n_enabled(self) -> int:
        return sum(len(row) for row in self.enabled)

    def is_loop_free(self) -> bool:
        n = len(self.enabled)
        indeg = np.zeros(n, dtype=int)
        for row in self.enabled:
            for j in row:
                indeg[j] += 1
        stack = [i for i in range(n) if indeg[i] == 0]
        seen = 0
        while stack:
            i = stack.pop()
            seen += 1
            for j in self.enabled[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    stack.append(j)
        return seen == n

    def to_json(self) -> str:
        return json.dumps({"enabled": [sorted(row) for row in self.enabled]})

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        return cls(tuple(json.loads(text)["enabled"]))


@dataclass(frozen=True)
class PerformanceVector:
    """Probability that a packet injected at each node reaches the sink."""

    values: np.ndarray

    def __getitem__(self, i):
        return self.values[i]

    def to_csv(self) -> str:
        lines = ["node_id,rho"] + [f"{i},{r!r}" for i, r in enumerate(self.values.tolist())]
        return "\n".join(lines) + "\n"


def policy_from_disabling(model: NetworkPfsa, disabled) -> Policy:
    topo = model.index.topology
    disabled = frozenset(disabled)
    rows = [[j for j in topo.neighbors[i] if (Physical(i), link_symbol(i, j)) not in disabled]
            for i in range(topo.n)]
    return Policy(tuple(rows))


def theta_for_epsilon(epsilon: float, topo: NetworkTopology) -> float:
    """Discount giving an epsilon-optimal limiting policy: ``epsilon / m**2``."""
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    m = topo.max_degree
    if m == 0:
        warnings.warn("topology has no links; any theta works, using 0.5", stacklevel=2)
        return 0.5
    return epsilon / m ** 2


def optimize_centralized(model: NetworkPfsa, theta: float, history: list | None = None):
    """Iterate measure solves and local disabling decisions to a fixpoint.

    Each pass solves for the measure under the current disabling set, then
    disables ``i -> Virtual(i, j)`` exactly when the virtual state's measure
    is strictly below that of ``i`` and enables it otherwise.

    Parameters
    ----------
    model : NetworkPfsa
    theta : float in (0, 1)
    history : list, optional
        Receives the :class:`MeasureVector` of every pass.

    Returns
    -------
    (Policy, MeasureVector)
    """
    if not 0.0 < theta < 1.0:
        raise ContractError(f"theta must lie in (0, 1), got {theta!r}")
    pfsa, index = model
    topo = index.topology
    pairs = [(i, j, index.virtual(i, j)) for i in range(topo.n) for j in topo.neighbors[i]]
    disabled = frozenset()
    cap = 10 * max(len(pairs), 1)
    for _ in range(cap):
        pi = build_transition_matrix(apply_disabling(pfsa, disabled))
        nu = compute_measure(pi, pfsa.characteristic, theta)
        if history is not None:
            history.append(nu)
        v = nu.values
        new = frozenset((Physical(i), link_symbol(i, j)) for i, j, k in pairs if v[k] < v[i])
        if new == disabled:
            return policy_from_disabling(model, disabled), nu
        disabled = new
    raise ConvergenceError(f"disabling fixpoint not reached in {cap} passes", rounds=cap)


def controlled_matrix(model: NetworkPfsa, policy: Policy) -> np.ndarray:
    """Transition matrix of the automaton under ``policy``."""
    topo = model.index.topology
    policy.validate(topo)
    return build_transition_matrix(apply_disabling(model.pfsa, policy.disabling(topo)))


def performance_vector(model: NetworkPfsa, policy: Policy) -> PerformanceVector:
    """Exact sink-delivery probability per physical node under ``policy``.

    The sink row is replaced by a pure self-loop; states that cannot reach
    any absorbing state (closed loss-free loops) score zero.
    """
    index = model.index
    pi = controlled_matrix(model, policy)
    s = index.sink_state
    pi[s] = 0.0
    pi[s, s] = 1.0
    absorbing = absorbing_states(pi)
    live = reachability_to(pi, absorbing)
    rho = np.zeros(pi.shape[0])
    if live.all():
        probs = absorption_probabilities(pi, absorbing)
        rho = probs[:, int(np.flatnonzero(absorbing == s)[0])]
    else:
        # mass entering states that never absorb is never delivered
        rho[s] = 1.0
        trans = np.flatnonzero(live & ~np.isin(np.arange(pi.shape[0]), absorbing))
        q = pi[np.ix_(trans, trans)]
        rho[trans] = np.linalg.solve(np.eye(trans.size) - q, pi[trans, s])
    return PerformanceVector(rho[: index.n_nodes].copy())


# -- physical-node chain -----------------------------------------------------

class LinkArrays(NamedTuple):
    src: np.ndarray
    dst: np.ndarray
    drop: np.ndarray
    degree: np.ndarray


def link_arrays(topo: NetworkTopology) -> LinkArrays:
    links = topo.links
    src = np.array([i for i, _, _ in links], dtype=int)
    dst = np.array([j for _, j, _ in links], dtype=int)
    drop = np.array([p for _, _, p in links], dtype=float)
    degree = np.array([topo.degree(i) for i in range(topo.n)], dtype=int)
    return LinkArrays(src, dst, drop, degree)


def _rho_systems(topo, la, masks):
    """Assemble ``A rho = b`` on physical nodes for a batch of link masks."""
    b_count, n = masks.shape[0], topo.n
    enabled_count = np.zeros((b_count, n))
    np.add.at(enabled_count.T, la.src, masks.T.astype(float))
    a = np.zeros((b_count, n, n))
    a[:, np.arange(n), np.arange(n)] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(masks, (1.0 - la.drop)[None, :] / enabled_count[:, la.src], 0.0)
    not_sink = la.src != topo.sink
    np.add.at(a.transpose(1, 2, 0), (la.src[not_sink], la.dst[not_sink]), -w[:, not_sink].T)
    rhs = np.zeros((b_count, n))
    rhs[:, topo.sink] = 1.0
    return a, rhs


def rho_physical(topo: NetworkTopology, policy_or_mask, la: LinkArrays | None = None) -> np.ndarray:
    """Delivery probability per node via the physical-node chain.

    Same quantity as :func:`performance_vector`, on an ``n x n`` system.
    """
    la = la or link_arrays(topo)
    mask = policy_or_mask.mask(topo) if isinstance(policy_or_mask, Policy) else np.asarray(policy_or_mask, bool)
    n = topo.n
    pi = np.zeros((n, n))
    count = np.bincount(la.src[mask], minlength=n).astype(float)
    w = (1.0 - la.drop[mask]) / np.maximum(count[la.src[mask]], 1.0)
    np.add.at(pi, (la.src[mask], la.dst[mask]), w)
    pi[topo.sink] = 0.0
    # zero rows: stranded nodes act as absorbing with value 0
    live = reachability_to(pi, [topo.sink])
    rho = np.zeros(n)
    keep = np.flatnonzero(live)
    sub = pi[np.ix_(keep, keep)]
    rhs = np.zeros(keep.size)
    rhs[np.flatnonzero(keep == topo.sink)[0]] = 1.0
    rho[keep] = np.linalg.solve(np.eye(keep.size) - sub, rhs)
    return rho


def rho_physical_batch(topo: NetworkTopology, masks, la: LinkArrays | None = None) -> np.ndarray:
    """Batched :func:`rho_physical`; needs every drop probability positive."""
    la = la or link_arrays(topo)
    masks = np.asarray(masks, dtype=bool)
    if np.any(la.drop <= 0.0):
        return np.array([rho_physical(topo, m, la) for m in masks])
    a, rhs = _rho_systems(topo, la, masks)
    return np.linalg.solve(a, rhs[..., None])[..., 0]


def measure_physical_batch(topo: NetworkTopology, masks, theta: float,
                           la: LinkArrays | None = None) -> np.ndarray:
    """Physical-node measures for a batch of link masks at discount ``theta``."""
    la = la or link_arrays(topo)
    masks = np.asarray(masks, dtype=bool)
    b_count, n = masks.shape[0], topo.n
    m = la.degree.astype(float)
    a = np.zeros((b_count, n, n))
    diag = np.arange(n)
    a[:, diag, diag] = 1.0
    disabled = np.zeros((b_count, n))
    np.add.at(disabled.T, la.src, (~masks).T.astype(float))
    selfloop = np.where(m > 0, disabled / np.maximum(m, 1.0), 1.0)
    a[:, diag, diag] -= (1.0 - theta) * selfloop
    w = np.where(masks, ((1.0 - theta) * (1.0 - theta) * (1.0 - la.drop) / m[la.src])[None, :], 0.0)
    np.add.at(a.transpose(1, 2, 0), (la.src, la.dst), -w.T)
    rhs = np.zeros((b_count, n))
    rhs[:, topo.sink] = theta
    return np.linalg.solve(a, rhs[..., None])[..., 0]


@dataclass
class Enumeration:
    """Outcome of the exhaustive policy sweep."""

    envelope: np.ndarray
    argmax: list
    n_policies: int
    masks: np.ndarray | None = None
    rho: np.ndarray | None = None
    measures: np.ndarray | None = None


def enumerate_policies(model: NetworkPfsa, theta: float | None = None, keep_all: bool = False,
                       chunk: int = 4096) -> Enumeration:
    """Evaluate every subset of controllable transitions.

    Parameters
    ----------
    model : NetworkPfsa
    theta : float, optional
        When given together with ``keep_all``, per-policy measures are kept.
    keep_all : bool
        Keep masks, performance vectors (and measures) of every policy.

    Raises
    ------
    ContractError
        When there are more than 24 controllable transitions.
    """
    topo = model.index.topology
    n_ctrl = topo.n_links
    if n_ctrl > ENUMERATION_CAP:
        raise ContractError(f"refusing to enumerate 2**{n_ctrl} policies (cap is 2**{ENUMERATION_CAP})")
    la = link_arrays(topo)
    total = 1 << n_ctrl
    envelope = np.full(topo.n, -np.inf)
    best = np.zeros(topo.n, dtype=np.int64)
    bits = 1 << np.arange(n_ctrl, dtype=np.int64)
    kept_rho, kept_nu = [], []
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        masks = (codes[:, None] & bits[None, :]) != 0
        rho = rho_physical_batch(topo, masks, la)
        better = rho > envelope[None, :] + 0.0
        if better.any():
            k = np.argmax(rho, axis=0)
            top = rho[k, np.arange(topo.n)]
            upd = top > envelope
            envelope[upd] = top[upd]
            best[upd] = codes[k[upd]]
        if keep_all:
            kept_rho.append(rho)
            if theta is not None:
                kept_nu.append(measure_physical_batch(topo, masks, theta, la))
    argmax = [Policy.from_mask(topo, (int(c) & bits) != 0) for c in best]
    out = Enumeration(envelope, argmax, total)
    if keep_all:
        codes = np.arange(total, dtype=np.int64)
        out.masks = (codes[:, None] & bits[None, :]) != 0
        out.rho = np.concatenate(kept_rho)
        if theta is not None:
            out.measures = np.concatenate(kept_nu)
    return out


def write_rho_csv(rho: PerformanceVector | Sequence[float], path) -> None:
    values = rho.values if isinstance(rho, PerformanceVector) else np.asarray(rho)
    with open(path, "w") as fh:
        fh.write(PerformanceVector(np.asarray(values)).to_csv())

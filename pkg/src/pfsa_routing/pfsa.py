r"""Probabilistic finite state automata and the linear algebra around them.

A :class:`Pfsa` carries states, symbols, a partial transition map, the
per-state symbol generation probabilities (the *morph*), a characteristic
weight per state and the set of controllable transitions.  Everything else in
this module works on the dense transition matrix :math:`\Pi` derived from it:

* the discounted measure :math:`\nu_\theta = \theta[I-(1-\theta)\Pi]^{-1}\chi`,
* absorption probabilities of absorbing chains (and the Cesaro limit built
  from them),
* structural checks (strong absorption) and spectral diagnostics.

Matrices are plain ``float64`` ndarrays; dense solves are deliberate.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ModelValidationError, NumericError, StructuralError

ROW_TOL = 1e-12
RESIDUAL_TOL = 1e-10
UNIT_EIG_TOL = 1e-9

# symbol used for the self-loop of states that have nothing else to emit
IDLE = "idle"

DisablingSet = frozenset


@dataclass(frozen=True, eq=False)
class Pfsa:
    """The automaton sextuple.

    Parameters
    ----------
    states : sequence of hashable
        State identifiers; their order fixes matrix indices.
    alphabet : sequence of hashable
        Symbol identifiers.
    transitions : mapping
        Partial map ``(state, symbol) -> state``.
    morph : mapping
        ``(state, symbol) -> probability`` for every defined transition.
    characteristic : array_like
        Weight in ``[-1, 1]`` per state, aligned with ``states``.
    controllable : iterable of ``(state, symbol)``
        Transitions a supervisor may disable.
    """

    states: tuple
    alphabet: tuple
    transitions: Mapping[tuple, Hashable]
    morph: Mapping[tuple, float]
    characteristic: np.ndarray
    controllable: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        object.__setattr__(self, "transitions", dict(self.transitions))
        object.__setattr__(self, "morph", dict(self.morph))
        object.__setattr__(self, "controllable", frozenset(self.controllable))
        chi = np.array(self.characteristic, dtype=float)
        chi.setflags(write=False)
        object.__setattr__(self, "characteristic", chi)
        object.__setattr__(self, "_index", {q: i for i, q in enumerate(self.states)})
        self._validate()

    def _validate(self):
        if len(self._index) != len(self.states):
            raise ModelValidationError("duplicate state identifiers")
        if self.characteristic.shape != (len(self.states),):
            raise ModelValidationError("characteristic vector does not match the state count")
        if np.any(self.characteristic < -1.0) or np.any(self.characteristic > 1.0):
            raise ModelValidationError("characteristic values must lie in [-1, 1]")
        symbols = set(self.alphabet)
        totals = dict.fromkeys(self.states, 0.0)
        for (q, s), target in self.transitions.items():
            if q not in self._index or target not in self._index:
                raise ModelValidationError(f"transition {(q, s)} -> {target} uses an unknown state")
            if s not in symbols:
                raise ModelValidationError(f"transition {(q, s)} uses an unknown symbol")
            if (q, s) not in self.morph:
                raise ModelValidationError(f"transition {(q, s)} has no morph probability")
        for key, p in self.morph.items():
            if key not in self.transitions:
                raise ModelValidationError(f"morph entry {key} has no transition")
            if not 0.0 <= p <= 1.0:
                raise ModelValidationError(f"morph probability {p} at {key} is outside [0, 1]")
            totals[key[0]] += p
        for q, total in totals.items():
            if abs(total - 1.0) > ROW_TOL:
                raise ModelValidationError(
                    f"morph row of state {q!r} sums to {total!r}, not 1", )
        for key in self.controllable:
            if key not in self.transitions:
                raise ModelValidationError(f"controllable pair {key} is not a transition")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def index(self, state) -> int:
        return self._index[state]


def build_transition_matrix(pfsa: Pfsa) -> np.ndarray:
    """Return the dense row-stochastic matrix of ``pfsa``.

    Entry ``(i, j)`` sums the morph probabilities of every symbol carrying
    state ``i`` to state ``j``.
    """
    n = pfsa.n_states
    pi = np.zeros((n, n))
    for (q, s), target in pfsa.transitions.items():
        pi[pfsa.index(q), pfsa.index(target)] += pfsa.morph[(q, s)]
    check_stochastic(pi, labels=pfsa.states)
    return pi


def check_stochastic(pi, labels: Sequence | None = None) -> np.ndarray:
    """Validate that ``pi`` is square, non-negative and row-stochastic."""
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
        raise ModelValidationError(f"transition matrix must be square, got shape {pi.shape}")
    if np.any(pi < 0.0) or np.any(pi > 1.0 + ROW_TOL):
        raise ModelValidationError("transition matrix entries must lie in [0, 1]")
    sums = pi.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        i = int(bad[0])
        name = labels[i] if labels is not None else i
        raise ModelValidationError(f"row of state {name!r} sums to {sums[i]!r}, not 1")
    return pi


def apply_disabling(pfsa: Pfsa, disabled: Iterable) -> Pfsa:
    """Return a copy of ``pfsa`` where every disabled pair becomes a self-loop.

    The occurrence probability of each disabled symbol is unchanged; only its
    target moves back onto the emitting state.
    """
    disabled = frozenset(disabled)
    stray = disabled - pfsa.controllable
    if stray:
        raise ContractError(f"cannot disable non-controllable transitions: {sorted(map(repr, stray))[:3]}")
    if not disabled:
        return pfsa
    transitions = dict(pfsa.transitions)
    for q, s in disabled:
        transitions[(q, s)] = q
    return Pfsa(pfsa.states, pfsa.alphabet, transitions, pfsa.morph,
                pfsa.characteristic, pfsa.controllable)


def reachability_to(pi: np.ndarray, targets) -> np.ndarray:
    """Boolean mask of states with a directed path (length >= 0) into ``targets``."""
    n = pi.shape[0]
    reach = np.zeros(n, dtype=bool)
    targets = np.atleast_1d(np.asarray(targets))
    if targets.dtype == bool:
        targets = np.flatnonzero(targets)
    reach[targets] = True
    preds = [np.flatnonzero(col) for col in (pi > 0.0).T]
    queue = deque(int(t) for t in targets)
    while queue:
        j = queue.popleft()
        for i in preds[j]:
            if not reach[i]:
                reach[i] = True
                queue.append(int(i))
    return reach


@dataclass(frozen=True)
class MeasureVector:
    """Per-state discounted measure for a given ``theta``."""

    theta: float
    values: np.ndarray

    def __getitem__(self, i):
        return self.values[i]

    def __len__(self):
        return len(self.values)


def compute_measure(pi, chi, theta: float) -> MeasureVector:
    r"""Solve :math:`\nu = \theta[I-(1-\theta)\Pi]^{-1}\chi` densely.

    States with no path to a state of non-zero characteristic get exactly
    zero, which keeps ties on zero plateaus exact for the policy rules.

    Raises
    ------
    ContractError
        If ``theta`` is outside ``(0, 1]``.
    NumericError
        If the solve fails or its residual exceeds ``1e-10``.
    """
    if not 0.0 < theta <= 1.0:
        raise ContractError(f"theta must lie in (0, 1], got {theta!r}")
    pi = np.asarray(pi, dtype=float)
    chi = np.asarray(chi, dtype=float)
    n = pi.shape[0]
    a = np.eye(n) - (1.0 - theta) * pi
    try:
        x = np.linalg.solve(a, chi)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"measure solve failed: {exc}", condition=np.inf) from exc
    residual = np.max(np.abs(a @ x - chi), initial=0.0)
    if not np.isfinite(residual) or residual >= RESIDUAL_TOL:
        raise NumericError(f"measure residual {residual:.3e} too large",
                           condition=float(np.linalg.cond(a)))
    # theta * [I - (1-theta) Pi]^-1 is row-stochastic, so |nu| <= max |chi| exactly
    bound = np.max(np.abs(chi), initial=0.0)
    nu = np.clip(theta * x, -bound, bound)
    support = np.flatnonzero(chi != 0.0)
    if support.size < n:
        nu[~reachability_to(pi, support)] = 0.0
    return MeasureVector(theta=float(theta), values=nu)


def absorbing_states(pi, tol: float = ROW_TOL) -> np.ndarray:
    """Indices of pure self-loop rows."""
    return np.flatnonzero(np.abs(np.diag(np.asarray(pi)) - 1.0) <= tol)


def absorption_probabilities(pi, absorbing) -> np.ndarray:
    """Probability of eventual absorption at each listed state.

    Parameters
    ----------
    pi : ndarray, shape (n, n)
        Row-stochastic matrix.
    absorbing : sequence of int
        Indices of absorbing (pure self-loop) states.

    Returns
    -------
    ndarray, shape (n, len(absorbing))
        Column ``k`` holds the probability of ending in ``absorbing[k]``.
    """
    pi = check_stochastic(pi)
    absorbing = np.asarray(list(absorbing), dtype=int)
    n = pi.shape[0]
    if absorbing.size == 0:
        raise StructuralError("no absorbing states given")
    for a in absorbing:
        if abs(pi[a, a] - 1.0) > ROW_TOL:
            raise ContractError(f"state {int(a)} is not a pure self-loop")
    reach = reachability_to(pi, absorbing)
    if not reach.all():
        bad = int(np.flatnonzero(~reach)[0])
        raise StructuralError(f"state {bad} cannot reach any absorbing state", state=bad)
    is_abs = np.zeros(n, dtype=bool)
    is_abs[absorbing] = True
    transient = np.flatnonzero(~is_abs)
    out = np.zeros((n, absorbing.size))
    out[absorbing, np.arange(absorbing.size)] = 1.0
    if transient.size:
        q = pi[np.ix_(transient, transient)]
        r = pi[np.ix_(transient, absorbing)]
        try:
            out[transient] = np.linalg.solve(np.eye(transient.size) - q, r)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"absorption solve failed: {exc}", condition=np.inf) from exc
    return out


def cesaro_limit(pi, max_power: int = 100_000, tol: float = 1e-8) -> np.ndarray:
    """Long-run average of the powers of ``pi``.

    Chains where every state drains into pure self-loops use the exact
    absorption solve.  Anything else falls back to averaging powers, which
    is slow and only meant for diagnostics.
    """
    pi = check_stochastic(pi)
    n = pi.shape[0]
    absorbing = absorbing_states(pi)
    if absorbing.size and reachability_to(pi, absorbing).all():
        limit = np.zeros((n, n))
        limit[:, absorbing] = absorption_probabilities(pi, absorbing)
        return limit
    power = np.eye(n)
    total = np.eye(n)
    checkpoint, previous = 64, None
    for k in range(1, max_power + 1):
        power = power @ pi
        total += power
        if k + 1 == checkpoint:
            avg = total / (k + 1)
            if previous is not None and np.max(np.abs(avg - previous)) < tol:
                return avg
            previous, checkpoint = avg, checkpoint * 2
    return total / (max_power + 1)


def _has_cycle(adjacency: list) -> tuple:
    """Kahn's algorithm; returns (has_cycle, a node left on a cycle or None)."""
    n = len(adjacency)
    indeg = np.zeros(n, dtype=int)
    for succ in adjacency:
        for j in succ:
            indeg[j] += 1
    queue = deque(np.flatnonzero(indeg == 0).tolist())
    seen = 0
    while queue:
        i = queue.popleft()
        seen += 1
        for j in adjacency[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    if seen == n:
        return False, None
    return True, int(np.flatnonzero(indeg > 0)[0])


def is_strongly_absorbing(pi) -> tuple[bool, str]:
    """Check the three strong-absorption conditions.

    1. some state is a pure self-loop;
    2. every state reaches one of them;
    3. ignoring self-loops, the transition graph has no directed cycle.

    Returns ``(ok, diagnostic)`` where the diagnostic names the first failed
    condition, or is ``"ok"``.
    """
    pi = check_stochastic(pi)
    absorbing = absorbing_states(pi)
    if absorbing.size == 0:
        return False, "condition 1: no absorbing state"
    reach = reachability_to(pi, absorbing)
    if not reach.all():
        return False, f"condition 2: state {int(np.flatnonzero(~reach)[0])} cannot reach an absorbing state"
    off = pi > 0.0
    np.fill_diagonal(off, False)
    adjacency = [np.flatnonzero(row).tolist() for row in off]
    cyclic, node = _has_cycle(adjacency)
    if cyclic:
        return False, f"condition 3: state {node} lies on a directed cycle"
    return True, "ok"


@dataclass(frozen=True)
class SpectralReport:
    max_nonunit_eigenvalue: float
    max_nonunit_diagonal: float
    holds: bool


def spectral_bound_report(pi) -> SpectralReport:
    """Compare non-unity eigenvalue magnitudes with non-unity diagonal entries.

    Only defined for strongly absorbing chains; anything else raises
    :class:`ContractError`.
    """
    ok, why = is_strongly_absorbing(pi)
    if not ok:
        raise ContractError(f"spectral bound needs a strongly absorbing chain ({why})")
    pi = np.asarray(pi, dtype=float)
    mags = np.abs(np.linalg.eigvals(pi))
    nonunit = mags[np.abs(mags - 1.0) > UNIT_EIG_TOL]
    diag = np.diag(pi)
    below = diag[diag < 1.0 - ROW_TOL]
    mu = float(nonunit.max()) if nonunit.size else 0.0
    d = float(below.max()) if below.size else 0.0
    return SpectralReport(mu, d, mu <= d + UNIT_EIG_TOL)


def cesaro_deviation(pi, theta: float) -> tuple[float, float]:
    r"""Both sides of :math:`\|\theta[I-(1-\theta)\Pi]^{-1}-\mathcal P\|_\infty \le \theta/(1-|\mu|)`.

    Returns ``(lhs, rhs)``.
    """
    if not 0.0 < theta < 1.0:
        raise ContractError(f"theta must lie in (0, 1), got {theta!r}")
    report = spectral_bound_report(pi)
    pi = np.asarray(pi, dtype=float)
    n = pi.shape[0]
    resolvent = theta * np.linalg.inv(np.eye(n) - (1.0 - theta) * pi)
    lhs = float(np.max(np.abs(resolvent - cesaro_limit(pi)).sum(axis=1)))
    rhs = theta / (1.0 - report.max_nonunit_eigenvalue)
    return lhs, rhs


def cesaro_deviation_bound_check(pi, theta: float) -> bool:
    """True when the resolvent-to-Cesaro deviation bound holds within 1e-9."""
    lhs, rhs = cesaro_deviation(pi, theta)
    return lhs <= rhs + 1e-9


def dump_debug(pi, chi, nu, labels: Sequence | None = None) -> str:
    """JSON dump of a chain, its characteristic and measure (row-major)."""
    pi = np.asarray(pi, dtype=float)
    doc = {
        "n": int(pi.shape[0]),
        "states": [repr(s) for s in labels] if labels is not None else list(range(pi.shape[0])),
        "pi": pi.ravel().tolist(),
        "chi": np.asarray(chi, dtype=float).tolist(),
        "nu": np.asarray(getattr(nu, "values", nu), dtype=float).tolist(),
    }
    return json.dumps(doc, sort_keys=True)


def load_debug(text: str) -> dict:
    doc = json.loads(text)
    n = doc["n"]
    return {
        "states": doc["states"],
        "pi": np.array(doc["pi"]).reshape(n, n),
        "chi": np.array(doc["chi"]),
        "nu": np.array(doc["nu"]),
    }

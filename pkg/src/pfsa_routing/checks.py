"""One-shot property battery over seeded random instances.

Each check returns :class:`CheckResult` rows naming the property, the seed of
the instance that exercised it and whether it held.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .central import (ENUMERATION_CAP, controlled_matrix, enumerate_policies, optimize_centralized,
                      rho_physical, theta_for_epsilon)
from .engine import Schedule, run_to_convergence
from .network import build_pfsa, random_topology
from .pfsa import compute_measure, is_strongly_absorbing, spectral_bound_report


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} seed={self.seed}  {self.detail}"


def _instance(seed: int, n_max: int = 30, max_degree: int = 5):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    return random_topology(n, int(rng.integers(2, max_degree + 1)), (0.05, 0.6), float(rng.random()), seed=seed)


def check_convergence_instance(seed: int, theta: float = 0.05) -> list:
    """Bounds, monotonicity, oracle agreement, loop-freedom and spectral bound on one instance."""
    topo = _instance(seed)
    tr = run_to_convergence(topo, theta)
    model = build_pfsa(topo)
    out = []
    ms = tr.measures
    out.append(CheckResult("bounds", seed, bool(np.all((ms >= 0.0) & (ms <= 1.0)))))
    out.append(CheckResult("monotone_from_zero", seed, bool(np.all(np.diff(ms, axis=0) >= -1e-12))))
    pi = controlled_matrix(model, tr.propagation)
    nu = compute_measure(pi, model.pfsa.characteristic, theta).values[:topo.n]
    gap = float(np.abs(nu - tr.final).max())
    out.append(CheckResult("oracle_equivalence", seed, gap <= 1e-9, f"gap={gap:.2e}"))
    _, central = optimize_centralized(model, theta)
    cgap = float(np.abs(central.values[:topo.n] - tr.final).max())
    out.append(CheckResult("matches_centralized", seed, cgap <= 1e-9, f"gap={cgap:.2e}"))
    pol = tr.policy
    hops_up = all(tr.final[j] > tr.final[i] for i, row in enumerate(pol.enabled) for j in row)
    out.append(CheckResult("loop_free", seed, pol.is_loop_free() and hops_up))
    ok, why = is_strongly_absorbing(pi)
    if ok:
        rep = spectral_bound_report(pi)
        out.append(CheckResult("spectral_bound", seed, rep.holds,
                               f"|mu|={rep.max_nonunit_eigenvalue:.3g} diag={rep.max_nonunit_diagonal:.3g}"))
    else:
        out.append(CheckResult("spectral_bound", seed, False, why))
    return out


def check_init_independence(seed: int, theta: float = 0.05) -> CheckResult:
    topo = _instance(seed)
    alpha = np.random.default_rng(seed + 1).random(topo.n)
    a = run_to_convergence(topo, theta, record=False).final
    b = run_to_convergence(topo, theta, init=alpha, record=False).final
    gap = float(np.abs(a - b).max())
    return CheckResult("init_independence", seed, gap < 1e-8, f"gap={gap:.2e}")


def check_schedule_independence(seed: int, theta: float = 0.05) -> CheckResult:
    topo = _instance(seed)
    finals = [run_to_convergence(topo, theta, Schedule(mode, seed), record=False).final
              for mode in ("sync", "perm", "poisson")]
    gap = float(max(np.abs(f - finals[0]).max() for f in finals))
    return CheckResult("schedule_independence", seed, gap < 1e-8, f"gap={gap:.2e}")


def check_epsilon_optimality(seed: int, epsilon: float = 0.05, max_links: int = 14) -> CheckResult:
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        topo = random_topology(int(rng.integers(3, 8)), 3, (0.05, 0.6), float(rng.random()),
                               seed=seed * 1000 + attempt)
        if topo.n_links <= min(max_links, ENUMERATION_CAP):
            break
    theta = theta_for_epsilon(epsilon, topo)
    env = enumerate_policies(build_pfsa(topo)).envelope
    rho = rho_physical(topo, run_to_convergence(topo, theta, record=False).policy)
    gap = float(np.max(env - rho))
    return CheckResult("epsilon_optimality", seed, gap <= epsilon, f"gap={gap:.2e} links={topo.n_links}")


def run_battery(seeds) -> list:
    results = []
    for s in seeds:
        results += check_convergence_instance(s)
        results.append(check_init_independence(s))
        results.append(check_schedule_independence(s))
        results.append(check_epsilon_optimality(s))
    return results

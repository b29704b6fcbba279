"""Measure-based routing on probabilistic automata.

Submodules
----------
pfsa       generic automaton, transition matrices and measures
network    topologies and their compilation into routing automata
central    centralized optimization and exact policy evaluation
engine     distributed measure propagation
sim        packet simulation, drop estimation and scripted scenarios
cli        command-line front end
"""

from .central import Policy, optimize_centralized, performance_vector, theta_for_epsilon
from .engine import ConvergenceCriterion, Schedule, node_step, run_to_convergence
from .network import NetworkTopology, build_pfsa, random_topology
from .pfsa import Pfsa, build_transition_matrix, compute_measure

__all__ = [
    "ConvergenceCriterion", "NetworkTopology", "Pfsa", "Policy", "Schedule", "build_pfsa",
    "build_transition_matrix", "compute_measure", "node_step", "optimize_centralized",
    "performance_vector", "random_topology", "run_to_convergence", "theta_for_epsilon",
]

"""Rounds to convergence as the network grows and as epsilon shrinks.

    python demos/convergence_profile.py
"""

from pfsa_routing.engine import convergence_rounds_profile


def main():
    rows = convergence_rounds_profile([25, 100, 400], [0.08, 0.04, 0.02], trials=5, seed=1)
    print("    n  epsilon  mean rounds")
    for r in rows:
        print(f"{r.n:>5}  {r.epsilon:7.3f}  {r.mean_rounds:11.1f}")


if __name__ == "__main__":
    main()

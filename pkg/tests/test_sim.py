import json

import numpy as np
import pytest

from pfsa_routing.central import Policy, optimize_centralized, rho_physical, theta_for_epsilon
from pfsa_routing.engine import run_to_convergence
from pfsa_routing.errors import ContractError, ModelValidationError
from pfsa_routing.network import NetworkTopology, build_pfsa, random_topology
from pfsa_routing.sim import (DropEstimator, InjectTraffic, KillNodes, MoveSink, ScenarioScript, SetDropNoise,
                              SetZeta, cluster_victims, default_probes, estimate_drops, load_scenario,
                              noise_robustness_run, run_scenario, simulate_packets)


def line(n, lam=0.0):
    links = [(i, i + 1, lam) for i in range(n - 1)] + [(i + 1, i, lam) for i in range(n - 1)]
    return NetworkTopology.from_links(n, n - 1, links)


class TestSimulatePackets:
    def test_lossless_chain_delivers_everything(self):
        topo = line(5)
        pol = Policy(([1], [2], [3], [4], []))
        rep = simulate_packets(topo, pol, [0, 2], 1000, seed=1)
        assert rep.rates == {0: 1.0, 2: 1.0}

    def test_single_link_binomial(self):
        topo = NetworkTopology.from_links(2, 1, [(0, 1, 0.25)])
        rep = simulate_packets(topo, Policy(([1], [])), [0], 100_000, seed=2)
        assert abs(rep.rates[0] - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / 1e5)

    def test_diamond_both_branches(self):
        topo = NetworkTopology.from_links(4, 3, [(0, 1, 0.1), (0, 2, 0.9), (1, 3, 0.0), (2, 3, 0.0)])
        rep = simulate_packets(topo, Policy(([1, 2], [3], [3], [])), [0], 100_000, seed=3)
        assert abs(rep.rates[0] - 0.5) <= 3 * np.sqrt(0.25 / 1e5)

    def test_loop_rejected(self):
        topo = line(3)
        with pytest.raises(ContractError):
            simulate_packets(topo, Policy(([1], [0], [])), [0], 10)

    def test_empty_forwarding_set(self):
        rep = simulate_packets(line(3), Policy(([], [2], [])), [0], 50, log=True)
        assert rep.rates[0] == 0.0
        assert all(o.hops == 0 and o.path == (0,) for o in rep.outcomes)

    def test_packet_paths(self, tmp_path):
        topo = line(4, lam=0.2)
        rep = simulate_packets(topo, Policy(([1], [2], [3], [])), [0], 200, seed=5, log=True)
        for o in rep.outcomes:
            if o.delivered:
                assert o.path == (0, 1, 2, 3) and o.hops == 3
            else:
                assert o.path[-1] != 3 and len(o.path) == o.hops
        rep.write_log(tmp_path / "p.jsonl")
        first = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
        assert set(first) == {"source", "path", "delivered", "hops"}

    def test_converged_policy_matches_rho(self):
        topo = random_topology(12, 4, seed=6)
        tr = run_to_convergence(topo, 0.02, record=False)
        rho = rho_physical(topo, tr.policy)
        rep = simulate_packets(topo, tr.policy, range(topo.n), 20_000, seed=7)
        for s in range(topo.n):
            se = np.sqrt(rho[s] * (1 - rho[s]) / 20_000)
            assert abs(rep.rates[s] - rho[s]) <= 3 * se + 1e-12

    def test_zero_packets(self):
        with pytest.raises(ContractError):
            simulate_packets(line(2), Policy(([1], [])), [0], 0)


class TestDropEstimation:
    def test_all_success(self):
        assert estimate_drops({(0, 1): [False] * 10}, 10) == {(0, 1): 0.0}

    def test_alternating(self):
        assert estimate_drops({(0, 1): [True, False] * 20}, 8) == {(0, 1): 0.5}

    def test_prior_before_min_samples(self):
        est = DropEstimator([(0, 1)], window=100)
        est.record((0, 1), True)
        assert est.estimate((0, 1)) == 0.5
        for _ in range(30):
            est.record((0, 1), False)
        assert est.estimate((0, 1)) == pytest.approx(1 / 31)

    def test_time_average_concentrates(self):
        rng = np.random.default_rng(0)
        est = DropEstimator([(0, 1)], window=100)
        values = []
        for d in rng.random(10_000) < 0.3:
            est.record((0, 1), d)
            values.append(est.estimate((0, 1)))
        assert abs(np.mean(values[100:]) - 0.3) <= 0.05

    def test_batch_equals_sequential(self):
        rng = np.random.default_rng(1)
        links = [(0, 1), (1, 0), (1, 2)]
        a, b = DropEstimator(links, 7), DropEstimator(links, 7)
        for _ in range(20):
            block = rng.random((3, 3)) < 0.4
            a.record_batch(block)
            for k, link in enumerate(links):
                for d in block[k]:
                    b.record(link, d)
        assert np.array_equal(a.estimates(), b.estimates())

    def test_window_validation(self):
        with pytest.raises(ContractError):
            DropEstimator([(0, 1)], window=0)


class TestScenarioScript:
    def test_json_round_trip(self, tmp_path):
        script = ScenarioScript((MoveSink(5, 3), SetDropNoise(6, 0.1), KillNodes(7, fraction=0.2, cluster_size=2),
                                 KillNodes(8, nodes=(4,)), SetZeta(9, 1, 0.5), InjectTraffic(9, (0, 2), 10)),
                                horizon=20, seed=3, probes=(0,))
        (tmp_path / "s.json").write_text(script.to_json())
        assert load_scenario(tmp_path / "s.json") == script

    def test_times_non_decreasing(self):
        with pytest.raises(ModelValidationError):
            ScenarioScript((MoveSink(5, 1), MoveSink(3, 2)), horizon=10)

    def test_fraction_range(self):
        with pytest.raises(ModelValidationError):
            ScenarioScript((KillNodes(1, fraction=1.5),), horizon=10)

    def test_unknown_event_type(self):
        with pytest.raises(ModelValidationError):
            ScenarioScript.from_json('{"horizon": 3, "events": [{"type": "explode", "at": 1}]}')


class TestRunScenario:
    def test_empty_script_converges(self):
        topo = random_topology(15, 4, seed=1)
        res = run_scenario(ScenarioScript((), horizon=3000), topo, 0.2, record_every=50)
        assert res.rows[-1].corrections == 0
        assert res.loop_free
        pol, _ = optimize_centralized(build_pfsa(topo), theta_for_epsilon(0.2, topo))
        assert res.rows[-1].rho_norm == pytest.approx(np.linalg.norm(rho_physical(topo, pol)), abs=1e-12)

    def test_sink_move_recovers(self):
        topo = random_topology(30, 4, seed=2)
        script = ScenarioScript((MoveSink(1500, 17),), horizon=4000)
        res = run_scenario(script, topo, 0.2, record_every=25)
        after = [r for r in res.rows if r.round > 1500]
        assert max(r.corrections for r in after) > 0
        assert after[-1].corrections == 0
        ev = res.events[0]
        assert ev.settle_rounds is not None
        moved = topo.with_sink(17)
        pol, _ = optimize_centralized(build_pfsa(moved), theta_for_epsilon(0.2, topo))
        assert ev.rho_norm_after == pytest.approx(np.linalg.norm(rho_physical(moved, pol)), abs=1e-9)

    def test_kill_half(self):
        topo = random_topology(40, 4, seed=3)
        probes = default_probes(topo, 2)
        script = ScenarioScript((KillNodes(1500, fraction=0.5, cluster_size=4),), horizon=4000, seed=1,
                                probes=probes)
        res = run_scenario(script, topo, 0.2, record_every=25)
        assert res.topology.n == 20
        assert res.loop_free
        assert res.rows[-1].corrections == 0
        pol, _ = optimize_centralized(build_pfsa(res.topology), theta_for_epsilon(0.2, topo))
        rho = rho_physical(res.topology, pol)
        assert res.rows[-1].probe_rho == pytest.approx(tuple(rho[p] for p in res.probes), abs=1e-9)

    def test_reproducible(self):
        topo = random_topology(20, 4, seed=4)
        script = ScenarioScript((SetDropNoise(10, 0.2), KillNodes(200, fraction=0.3, cluster_size=3)),
                                horizon=400, seed=9)
        a = run_scenario(script, topo, 0.2)
        b = run_scenario(script, topo, 0.2)
        assert a.rows == b.rows

    def test_invalid_targets(self):
        topo = random_topology(10, 3, seed=0)
        with pytest.raises(ModelValidationError):
            run_scenario(ScenarioScript((KillNodes(1, nodes=(topo.sink,)),), horizon=5), topo, 0.2)
        with pytest.raises(ModelValidationError):
            run_scenario(ScenarioScript((MoveSink(1, 99),), horizon=5), topo, 0.2)
        with pytest.raises(ModelValidationError):
            run_scenario(ScenarioScript((KillNodes(1, nodes=(3,)),), horizon=5, probes=(3,)), topo, 0.2)

    def test_traffic_and_metrics_csv(self, tmp_path):
        topo = random_topology(10, 3, seed=5)
        script = ScenarioScript((InjectTraffic(1, (1, 2), 5),), horizon=20, probes=(1, 2))
        res = run_scenario(script, topo, 0.2, log_packets=True)
        assert len(res.packet_log) == 20 * 2 * 5
        res.to_csv(tmp_path / "m.csv")
        header = (tmp_path / "m.csv").read_text().splitlines()[0]
        assert header == "round,event_tag,rho_norm,corrections,probe_1,probe_2"

    def test_cluster_victims(self):
        topo = random_topology(60, 4, seed=6)
        rng = np.random.default_rng(0)
        v = cluster_victims(topo, 0.5, 5, rng, protected={1, 2})
        assert len(v) == 30 and topo.sink not in v and not v & {1, 2}


class TestNoise:
    def test_zero_noise_is_plain_convergence(self):
        topo = random_topology(20, 4, seed=7)
        rep = noise_robustness_run(topo, 0.1, 0.0, 100)
        assert rep.corrections.sum() == 0
        assert rep.cv == 0.0

    def test_large_noise_is_stable(self):
        topo = random_topology(100, 4, seed=8)
        rep = noise_robustness_run(topo, 0.05, 0.2, 400, seed=1)
        assert rep.corrections[rep.warmup:].min() > 0
        assert rep.cv < 0.05
        assert rep.estimates_in_range


def test_zeta_attenuation_deflects_traffic():
    # node 1 relays for 0 alongside node 2; lowering its reported measure never increases its share
    topo = NetworkTopology.from_links(5, 4, [(0, 1, 0.1), (0, 2, 0.15), (1, 4, 0.1), (2, 4, 0.1),
                                             (3, 1, 0.1), (3, 2, 0.1), (1, 0, 0.1), (2, 0, 0.1),
                                             (1, 3, 0.1), (2, 3, 0.1)])
    shares = []
    for z in (1.0, 0.95, 0.9, 0.8, 0.5):
        zeta = np.ones(topo.n)
        zeta[1] = z
        pol = run_to_convergence(topo, 0.01, zeta=zeta, record=False).policy
        rep = simulate_packets(topo, pol, [0, 3], 100_000, seed=11)
        shares.append(rep.arrivals[1] / rep.arrivals.sum())
    assert all(b <= a + 0.005 for a, b in zip(shares, shares[1:]))
    assert shares[-1] < shares[0]

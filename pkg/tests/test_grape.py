import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rydpulse.grape as grape
from oracles import fd_gradient, interior_point, penalty, relative_errors
from oracles import total_cost as oracle_cost
from rydpulse.evolution import PulseSequence, default_initial, evolve
from rydpulse.geometry import build_ring, dihedral_orbits, haar_sector
from rydpulse.grape import (
    GrapeConfig,
    Parameterization,
    clip_to_bounds,
    cost_amp,
    cost_and_gradient,
    cost_phys,
    cost_pulse,
    gradient,
    infidelity,
    optimize,
    run_restart,
    stratified_targets,
    success_curve,
    total_cost,
)
from rydpulse.hamiltonian import PhysicalParams, build_sector_operators


def system(n, d=7.0):
    basis = dihedral_orbits(n)
    return basis, build_sector_operators(basis, PhysicalParams(build_ring(n, d))), default_initial(basis)


@pytest.fixture(scope="module")
def five():
    return system(5)


@pytest.fixture(scope="module")
def nine():
    return system(9, 10.0)


def flat(m, rabi=5.0, det=0.0, t=3.0):
    return PulseSequence(np.full(m, t / m), np.full(m, rabi), np.full(m, det))


class TestCostTerms:
    def test_wall_at_budget(self):
        cfg = GrapeConfig(m_segments=4, t_max=6.0)
        assert cost_pulse(flat(4, t=6.0), cfg) == pytest.approx(cfg.a2 * np.e, rel=1e-14)

    def test_wall_grows_past_budget(self):
        cfg = GrapeConfig(m_segments=4, t_max=6.0)
        inside = cost_pulse(flat(4, t=3.0), cfg)
        assert inside == pytest.approx(cfg.a2 * np.exp(0.5**4))
        assert cost_pulse(flat(4, t=9.0), cfg) > 100 * inside

    def test_smoothness_by_hand(self):
        cfg = GrapeConfig(m_segments=2, a2=0.0)
        seq = PulseSequence(np.array([0.5, 1.5]), np.array([1.0, 3.0]), np.array([0.0, -1.0]))
        # (2^2 + 1^2) / mean(0.5, 1.5)
        assert cost_pulse(seq, cfg) == pytest.approx(cfg.a1 * 5.0)

    def test_amplitude_hinge(self):
        cfg = GrapeConfig(m_segments=3)
        seq = PulseSequence(np.ones(3), np.array([0.0, 12.0, 13.0]), np.array([-21.0, 20.0, 0.0]))
        assert cost_amp(seq, cfg) == pytest.approx(cfg.a3 * 2.0)
        assert cost_amp(clip_to_bounds(seq, cfg), cfg) == 0

    def test_phys_limits(self, five):
        basis, ops, psi0 = five
        seq = flat(30)
        target = evolve(psi0, seq, ops)
        assert cost_phys(seq, target, ops, psi0) == pytest.approx(0, abs=1e-12)
        assert infidelity(seq, target, ops, psi0) == pytest.approx(0, abs=1e-12)

    def test_total_matches_oracle(self, five):
        basis, ops, psi0 = five
        rng = np.random.default_rng(0)
        cfg = GrapeConfig()
        seq = PulseSequence(*interior_point(rng, cfg))
        target = haar_sector(rng, basis)
        assert total_cost(seq, target, cfg, ops, psi0) == pytest.approx(oracle_cost(seq, target, cfg, ops, psi0),
                                                                        rel=1e-10)

    def test_penalty_oracle_agrees(self):
        rng = np.random.default_rng(1)
        cfg = GrapeConfig()
        dt, rabi, det = interior_point(rng, cfg)
        rabi[3], det[7] = 14.0, -25.0
        seq = PulseSequence(dt, rabi, det)
        assert cost_pulse(seq, cfg) + cost_amp(seq, cfg) == pytest.approx(penalty(rabi, det, dt, cfg), rel=1e-12)


class TestGradient:
    @pytest.mark.parametrize("seed", range(4))
    def test_against_finite_differences(self, five, seed):
        basis, ops, psi0 = five
        rng = np.random.default_rng(seed)
        cfg = GrapeConfig()
        seq = PulseSequence(*interior_point(rng, cfg))
        target = haar_sector(rng, basis)
        _, g = cost_and_gradient(seq, target, cfg, ops, psi0)
        assert relative_errors(g, fd_gradient(seq, target, cfg, ops, psi0)).max() < 1e-5

    def test_penalties_active(self, five):
        basis, ops, psi0 = five
        rng = np.random.default_rng(9)
        cfg = GrapeConfig(t_max=2.0)
        dt, rabi, det = interior_point(rng, cfg, t_total=2.5)
        rabi[::4] = 13.5
        det[1::5] = 22.0
        det[2::5] = -23.0
        seq = PulseSequence(dt, rabi, det)
        target = haar_sector(rng, basis)
        _, g = cost_and_gradient(seq, target, cfg, ops, psi0)
        assert relative_errors(g, fd_gradient(seq, target, cfg, ops, psi0)).max() < 1e-5

    def test_nine_atoms(self, nine):
        basis, ops, psi0 = nine
        rng = np.random.default_rng(2)
        cfg = GrapeConfig()
        seq = PulseSequence(*interior_point(rng, cfg))
        target = haar_sector(rng, basis)
        _, g = cost_and_gradient(seq, target, cfg, ops, psi0)
        assert relative_errors(g, fd_gradient(seq, target, cfg, ops, psi0)).max() < 1e-5

    def test_degenerate_spectrum(self, five):
        # no drive: H is diagonal with repeated entries, exercising the confluent branch
        basis, ops, psi0 = five
        rng = np.random.default_rng(3)
        cfg = GrapeConfig(m_segments=4)
        seq = PulseSequence(np.full(4, 0.4), np.array([0.0, 3.0, 0.0, 2.0]), np.array([0.0, 1.0, 0.0, -2.0]))
        target = haar_sector(rng, basis)
        _, g = cost_and_gradient(seq, target, cfg, ops, psi0)
        fd = fd_gradient(seq, target, cfg, ops, psi0)
        # rabi = 0 sits on the clip boundary; compare the smooth components
        assert relative_errors(g, fd).max() < 1e-5

    def test_vanishes_at_perfect_fit(self, five):
        basis, ops, psi0 = five
        rng = np.random.default_rng(4)
        cfg = GrapeConfig()
        seq = PulseSequence(*interior_point(rng, cfg))
        target = evolve(psi0, seq, ops)
        value, g = grape.phys_value_and_gradient(seq, target, ops, psi0)
        assert value == pytest.approx(0, abs=1e-12)
        assert np.max(np.abs(np.array(g))) < 1e-8

    def test_flat_layout(self, five):
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=6)
        seq = flat(6)
        target = haar_sector(np.random.default_rng(5), basis)
        g = gradient(seq, target, cfg, ops, psi0)
        assert g.shape == (18,)
        np.testing.assert_array_equal(g.reshape(3, 6), cost_and_gradient(seq, target, cfg, ops, psi0)[1])


class TestParameterization:
    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        cfg = GrapeConfig(m_segments=8)
        param = Parameterization.for_config(cfg)
        seq = PulseSequence(*interior_point(rng, cfg))
        back = param.to_sequence(param.from_sequence(seq))
        np.testing.assert_allclose(back.rabi, seq.rabi, rtol=1e-10)
        np.testing.assert_allclose(back.dt, seq.dt, rtol=1e-10)
        np.testing.assert_allclose(back.detuning, seq.detuning, rtol=1e-12)

    def test_chain_rule(self, five):
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=5)
        param = Parameterization.for_config(cfg)
        rng = np.random.default_rng(6)
        target = haar_sector(rng, basis)
        z = rng.normal(size=15)

        def f(zz):
            return total_cost(param.to_sequence(zz), target, cfg, ops, psi0)

        g = param.chain(z, cost_and_gradient(param.to_sequence(z), target, cfg, ops, psi0)[1])
        h = 1e-5
        fd = np.array([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(15)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_always_feasible_signs(self):
        param = Parameterization.for_config(GrapeConfig(m_segments=3))
        seq = param.to_sequence(np.array([-50.0, 0, 50, -3, 0, 3, -50, 0, 50]))
        assert np.all(seq.rabi >= 0) and np.all(seq.dt > 0)


class TestOptimizer:
    def test_initial_state_as_target(self, five):
        # from a weak drive the restart should fall into the trivial solution
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=6, max_iters=300)
        start = PulseSequence(np.full(6, 0.5), np.full(6, 0.5), np.zeros(6))
        seq, trace = run_restart(psi0, cfg, ops, psi0, start)
        assert trace.infidelity < 1e-5
        assert seq.total_time < start.total_time

    @pytest.mark.parametrize("method", ["lbfgs", "gd"])
    def test_history_monotone(self, five, method):
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=10, max_iters=60, optimizer=method)
        target = haar_sector(np.random.default_rng(7), basis)
        start = grape.initial_guess(np.random.default_rng(8), cfg)
        history = []
        run_restart(target, cfg, ops, psi0, start, history=history)
        assert len(history) > 2
        assert np.all(np.diff(history) <= 1e-12)

    def test_reachable_small_target(self, five):
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=10, t_max=3.0, n_restarts=4, max_iters=1500, a1=0.0)
        truth = PulseSequence(*interior_point(np.random.default_rng(10), cfg, t_total=3.0))
        target = evolve(psi0, truth, ops)
        res = optimize(target, cfg, ops, psi0, master_seed=3)
        assert res.best_infidelity < 1e-4
        assert res.t_opt == pytest.approx(res.best_sequence.total_time)
        assert np.all(res.best_sequence.rabi <= cfg.omega_max)

    def test_smoothness_weight_trades_fidelity(self, five):
        # the default smoothness weight moves the minimiser off the exact target
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=10, t_max=3.0, n_restarts=4, max_iters=1500)
        truth = PulseSequence(*interior_point(np.random.default_rng(10), cfg, t_total=3.0))
        target = evolve(psi0, truth, ops)
        res = optimize(target, cfg, ops, psi0, master_seed=3)
        assert 1e-4 < res.best_infidelity < 1e-2
        assert cost_pulse(res.best_sequence, cfg) < cost_pulse(truth, cfg)

    def test_deterministic(self, five):
        basis, ops, psi0 = five
        cfg = GrapeConfig(m_segments=5, n_restarts=2, max_iters=50)
        target = haar_sector(np.random.default_rng(11), basis)
        a = optimize(target, cfg, ops, psi0, master_seed=5, target_id=2)
        b = optimize(target, cfg, ops, psi0, master_seed=5, target_id=2)
        assert a.best_infidelity == b.best_infidelity
        np.testing.assert_array_equal(a.best_sequence.rabi, b.best_sequence.rabi)
        doc = a.to_json()
        assert len(doc["restarts"]) == 2 and "pulse" in doc

    def test_rejects_unnormalised_target(self, five):
        basis, ops, psi0 = five
        with pytest.raises(ValueError):
            optimize(2 * psi0, GrapeConfig(n_restarts=1), ops, psi0)

    def test_partial_and_total_failure(self, five, monkeypatch):
        basis, ops, psi0 = five
        real = grape.run_restart
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] % 2:
                raise np.linalg.LinAlgError("eigh did not converge")
            return real(*args, **kwargs)

        monkeypatch.setattr(grape, "run_restart", flaky)
        cfg = GrapeConfig(m_segments=4, n_restarts=4, max_iters=20)
        res = optimize(psi0, cfg, ops, psi0)
        assert sum(r.failed for r in res.restarts) == 2

        def broken(*args, **kwargs):
            raise np.linalg.LinAlgError("eigh did not converge")

        monkeypatch.setattr(grape, "run_restart", broken)
        with pytest.raises(RuntimeError):
            optimize(psi0, cfg, ops, psi0)

    @pytest.mark.parametrize("kwargs", [{"a1": -1.0}, {"alpha": 0.5}, {"t_max": 0.0}, {"n_restarts": 0},
                                        {"optimizer": "adam"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            GrapeConfig(**kwargs)


class TestTargetSelection:
    def test_one_per_bin(self):
        s = np.array([0.05, 0.06, 0.51, 0.95, 0.52])
        picked, empty, edges = stratified_targets(s, n_bins=3, edges=np.linspace(0, 1, 4))
        assert picked == [0, 2, 3]
        assert empty == []

    def test_round_robin_over_groups(self):
        s = np.array([0.1, 0.2, 0.15, 0.12])
        groups = np.array([1, 1, 2, 2])
        picked, _, _ = stratified_targets(s, groups, n_bins=1, per_bin=3, edges=[0.0, 1.0])
        assert picked == [0, 2, 1]

    def test_empty_bins_reported(self):
        picked, empty, _ = stratified_targets([0.1, 0.9], n_bins=5, edges=np.linspace(0, 1, 6))
        assert picked == [0, 1] and empty == [1, 2, 3]

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            stratified_targets([])


class TestSuccessCurve:
    def test_bins(self):
        s = np.array([0.0, 0.01, 0.05, 0.06])
        inf = np.array([1e-3, 1e-1, 1e-4, 1e-5])
        rows = success_curve(s, inf, gamma=1e-2, delta_s=0.0309, lo=0.0)
        assert [r["count"] for r in rows] == [2, 2]
        assert rows[0]["success_probability"] == 0.5
        assert rows[1]["success_probability"] == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            success_curve([], [])

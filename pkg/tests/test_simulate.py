import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmle.model import Generator
from hmmle.rng import make_rng, stream_ids
from hmmle.simulate import (
    ChainPath,
    ObsPath,
    n_grid_steps,
    read_chain_csv,
    read_obs_csv,
    sample_chain_path,
    sample_coupled_chains,
    sample_observations,
    simulate_observations,
    write_chain_csv,
    write_obs_csv,
)


def total_variation(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


class TestChainPath:
    def test_single_state_never_jumps(self):
        path = sample_chain_path(Generator([[0.0]]), [1.0], 50.0, make_rng(1))
        assert path.jump_times.size == 0
        assert path.states.tolist() == [0]

    def test_absorbing_state_stays(self):
        g = Generator([[0.0, 0.0], [1.0, -1.0]])
        path = sample_chain_path(g, [1.0, 0.0], 100.0, make_rng(1))
        assert path.states.tolist() == [0]

    def test_occupation_fraction(self, two_state):
        path = sample_chain_path(two_state.generator(1.0), two_state.nu, 1e4, make_rng(11))
        frac = path.occupation_integral([0.0, 1.0], [1e4])[0] / 1e4
        assert abs(frac - 0.5) <= 0.02

    def test_mean_holding_time(self, two_state):
        path = sample_chain_path(two_state.generator(1.0), two_state.nu, 1.2e4, make_rng(12))
        holds = np.diff(path.jump_times)[:10_000]
        assert holds.size == 10_000
        assert abs(holds.mean() - 1.0) <= 0.05

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            ChainPath(1.0, [0.5, 0.4], [0, 1, 0])
        with pytest.raises(ValueError):
            ChainPath(1.0, [0.5], [1, 1])
        with pytest.raises(ValueError):
            ChainPath(1.0, [1.5], [0, 1])

    def test_marginal_matches_semigroup(self, three_state):
        g = three_state.generator(0.7)
        t = 0.8
        states = [int(sample_chain_path(g, three_state.nu, t, make_rng(s)).state_at(t))
                  for s in stream_ids(5, 10_000)]
        emp = np.bincount(states, minlength=3) / len(states)
        assert total_variation(emp, three_state.nu @ g.semigroup(t)) <= 0.03

    def test_deterministic(self, three_state):
        a = sample_chain_path(three_state.generator(1.0), three_state.nu, 30.0, make_rng(9))
        b = sample_chain_path(three_state.generator(1.0), three_state.nu, 30.0, make_rng(9))
        assert np.array_equal(a.jump_times, b.jump_times)
        assert np.array_equal(a.states, b.states)


class TestObservations:
    def test_pure_noise_when_h_zero(self, two_state):
        path = sample_chain_path(two_state.generator(1.0), two_state.nu, 100.0, make_rng(2))
        obs = sample_observations(path, [0.0, 0.0], 1e-3, make_rng(3))
        assert obs.n_steps == 100_000
        assert abs(obs.increments.mean()) <= 4 * math.sqrt(1e-3 / 1e5)
        assert abs(obs.increments.var() / 1e-3 - 1) <= 0.05

    def test_constant_path_mean(self):
        path = ChainPath(100.0, [], [1])
        obs = sample_observations(path, [0.0, 2.5], 1e-3, make_rng(4))
        assert obs.increments.mean() / 1e-3 == pytest.approx(2.5, abs=0.1)

    def test_ergodic_drift(self, two_state):
        # one T=100 path has sd(X_T / T) ~ 0.11, so the band is checked on the
        # mean of 20 independent paths (sd ~ 0.025)
        means = [simulate_observations(two_state, 1.0, 100.0, 1e-3, make_rng(s))[1]
                 .increments.mean() / 1e-3 for s in stream_ids(5, 20)]
        assert abs(np.mean(means) - 0.5) <= 0.05

    def test_drift_is_exact_integral(self):
        path = ChainPath(1.0, [0.25, 0.6], [0, 1, 0])
        obs = sample_observations(path, [0.0, 1.0], 0.5, make_rng(0))
        noise = np.sqrt(0.5) * make_rng(0).standard_normal(2)
        assert np.allclose(obs.increments - noise, [0.25, 0.1], atol=1e-15)

    def test_dt_must_divide_T(self):
        with pytest.raises(ValueError, match="does not divide"):
            n_grid_steps(1.0, 0.3)
        assert n_grid_steps(400.0, 1e-3) == 400_000

    def test_coarsen_sums_increments(self):
        obs = ObsPath(0.1, np.arange(6.0))
        c = obs.coarsen(2)
        assert c.dt == pytest.approx(0.2)
        assert c.increments.tolist() == [1.0, 5.0, 9.0]


class TestCoupling:
    def test_same_start_couples_at_zero(self, two_state):
        pair = sample_coupled_chains(two_state.generator(1.0), [1, 0], [1, 0], 10.0, make_rng(1))
        assert pair.tau == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32))
    def test_paths_agree_after_tau(self, seed):
        g = Generator([[-1.5, 1.0, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
        pair = sample_coupled_chains(g, [1, 0, 0], [0, 0, 1], 20.0, make_rng(seed))
        if math.isfinite(pair.tau):
            grid = np.linspace(pair.tau, 20.0, 200)
            assert np.array_equal(pair.path_a.state_at(grid), pair.path_b.state_at(grid))

    def test_two_state_tail(self, two_state):
        taus = np.array([sample_coupled_chains(two_state.generator(1.0), [1, 0], [0, 1], 10.0,
                                               make_rng(s)).tau for s in stream_ids(8, 4000)])
        for t in (0.25, 0.5, 1.0):
            assert abs(np.mean(taus >= t) - math.exp(-2 * t)) <= 0.03

    def test_component_marginals(self):
        g = Generator([[-1.5, 1.0, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
        nu_a, nu_b = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
        t = 0.8
        sa, sb = [], []
        for s in stream_ids(6, 10_000):
            pair = sample_coupled_chains(g, nu_a, nu_b, t, make_rng(s))
            sa.append(int(pair.path_a.state_at(t)))
            sb.append(int(pair.path_b.state_at(t)))
        for nu, states in ((nu_a, sa), (nu_b, sb)):
            emp = np.bincount(states, minlength=3) / len(states)
            assert total_variation(emp, nu @ g.semigroup(t)) <= 0.03

    def test_rejects_zero_rate(self):
        with pytest.raises(ValueError):
            sample_coupled_chains(Generator([[0, 0], [1, -1]]), [1, 0], [0, 1], 1.0, make_rng(0))


class TestCsv:
    def test_chain_round_trip(self, tmp_path, three_state):
        path = sample_chain_path(three_state.generator(1.0), three_state.nu, 20.0, make_rng(7))
        write_chain_csv(path, tmp_path / "chain.csv")
        back = read_chain_csv(tmp_path / "chain.csv", 20.0)
        assert np.array_equal(back.jump_times, path.jump_times)
        assert np.array_equal(back.states, path.states)
        assert (tmp_path / "chain.csv").read_text().splitlines()[0] == "jump_time,state"

    def test_obs_round_trip_exact(self, tmp_path, two_state):
        _, obs = simulate_observations(two_state, 1.0, 2.0, 1e-3, make_rng(8))
        write_obs_csv(obs, tmp_path / "obs.csv")
        back = read_obs_csv(tmp_path / "obs.csv", 1e-3)
        assert np.array_equal(back.increments, obs.increments)

    def test_missing_header_rejected(self, tmp_path):
        (tmp_path / "bad.csv").write_text("0,0.1\n")
        with pytest.raises(ValueError, match="header"):
            read_obs_csv(tmp_path / "bad.csv", 1e-3)

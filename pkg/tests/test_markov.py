import numpy as np
import pytest

from rtdlab import models
from rtdlab.errors import NotUnichain
from rtdlab.markov import (FiniteChain, FiniteMdp, RandomizedPolicy, build_chain,
                           discounted_q, load_model, pair_chain, save_model,
                           solve_poisson, stationary_pmf)


@pytest.fixture(scope="module")
def chain():
    return models.finite_chain()


def random_chain(n, seed, cost_scale=1.0):
    rng = np.random.default_rng(seed)
    p = rng.gamma(1.0, 1.0, size=(n, n)) + 1e-3
    p /= p.sum(axis=1, keepdims=True)
    pi = stationary_pmf(p)
    return FiniteChain(transition=p, cost_vec=cost_scale * rng.standard_normal(n),
                       stationary=pi)


class TestStationary:
    def test_published_eval_policy_marginal(self, chain):
        expect = np.array([85, 108, 315]) / 508
        assert np.max(np.abs(models.state_marginal(chain) - expect)) < 1e-10

    def test_published_greedy_policy_marginal(self):
        gchain = build_chain(models.finite_mdp(), models.finite_greedy_policy())
        expect = np.array([1, 6, 6]) / 13
        assert np.max(np.abs(models.state_marginal(gchain) - expect)) < 1e-10

    def test_two_cycle_is_half_half(self):
        pi = stationary_pmf(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(pi, [0.5, 0.5], atol=1e-12)

    def test_agrees_with_power_iteration(self):
        # power-method oracle, averaged over one period to handle periodicity
        rng = np.random.default_rng(3)
        p = rng.gamma(1.0, 1.0, size=(5, 5))
        p /= p.sum(axis=1, keepdims=True)
        pk = np.linalg.matrix_power(p, 10_000)
        oracle = pk.mean(axis=0)
        assert np.max(np.abs(stationary_pmf(p) - oracle)) < 1e-10

    def test_reducible_chain_rejected(self):
        p = np.eye(3)
        with pytest.raises(NotUnichain):
            stationary_pmf(p)

    def test_two_closed_classes_rejected(self):
        p = np.array([
            [0.5, 0.5, 0.0, 0.0],
            [0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.3, 0.7],
            [0.0, 0.0, 0.7, 0.3],
        ])
        with pytest.raises(NotUnichain):
            stationary_pmf(p)


class TestBuildChain:
    def test_single_state_single_action(self):
        mdp = FiniteMdp(n_states=1, n_actions=1, kernel=[[[1.0]]], cost=[[3.25]])
        pol = RandomizedPolicy(probs=[[1.0]])
        c = build_chain(mdp, pol)
        assert np.allclose(c.stationary, [1.0])
        assert solve_poisson(c, c.cost_vec).eta == pytest.approx(3.25, abs=1e-14)

    def test_average_costs(self, chain):
        assert solve_poisson(chain, chain.cost_vec).eta == pytest.approx(587 / 1016, abs=1e-12)
        gchain = build_chain(models.finite_mdp(), models.finite_greedy_policy())
        assert solve_poisson(gchain, gchain.cost_vec).eta == pytest.approx(3 / 65, abs=1e-12)

    def test_stationary_factorizes(self, chain):
        pi = models.state_marginal(chain)
        expect = (pi[:, None] * models.FINITE_EVAL_POLICY).reshape(6)
        assert np.max(np.abs(chain.stationary - expect)) < 1e-12

    def test_rows_stochastic_and_invariant(self, chain):
        assert np.max(np.abs(chain.transition.sum(axis=1) - 1)) < 1e-12
        assert np.max(np.abs(chain.stationary @ chain.transition - chain.stationary)) < 1e-10


class TestPoisson:
    def test_plugback_residual(self, chain):
        sol = solve_poisson(chain, chain.cost_vec)
        resid = (np.eye(6) - chain.transition) @ sol.h - (chain.cost_vec - sol.eta)
        assert np.max(np.abs(resid)) < 1e-9
        assert abs(chain.stationary @ sol.h) < 1e-12

    def test_constant_input(self, chain):
        sol = solve_poisson(chain, np.full(6, 4.2))
        assert sol.eta == pytest.approx(4.2, abs=1e-12)
        assert np.max(np.abs(sol.h)) < 1e-10

    def test_random_chain_residual(self):
        c = random_chain(6, seed=11)
        g = np.random.default_rng(12).standard_normal(6)
        sol = solve_poisson(c, g)
        resid = (np.eye(6) - c.transition) @ sol.h - (g - sol.eta)
        assert np.max(np.abs(resid)) < 1e-9


class TestDiscountedQ:
    def test_zero_discount_is_cost(self, chain):
        assert np.array_equal(discounted_q(chain, 0.0), chain.cost_vec)

    def test_two_state_geometric_series(self):
        c = FiniteChain(transition=[[0.0, 1.0], [1.0, 0.0]], cost_vec=[0.0, 1.0],
                        stationary=[0.5, 0.5])
        # alternating costs: Q(0) = sum gamma^(2k+1) = 2/3, Q(1) = sum gamma^(2k) = 4/3
        assert np.allclose(discounted_q(c, 0.5), [2 / 3, 4 / 3], atol=1e-12)

    def test_bellman_fixed_point(self, chain):
        q = discounted_q(chain, 0.9)
        resid = q - (chain.cost_vec + 0.9 * chain.transition @ q)
        assert np.max(np.abs(resid)) < 1e-9

    @pytest.mark.parametrize("gamma", [0.9, 0.99, 0.999])
    def test_poisson_consistency(self, chain, gamma):
        sol = solve_poisson(chain, chain.cost_vec)
        q = discounted_q(chain, gamma)
        err = np.max(np.abs(q - sol.eta / (1 - gamma) - sol.h))
        assert err < {0.9: 0.5, 0.99: 0.05, 0.999: 0.005}[gamma]

    def test_poisson_consistency_improves_with_gamma(self, chain):
        sol = solve_poisson(chain, chain.cost_vec)
        errs = [np.max(np.abs(discounted_q(chain, g) - sol.eta / (1 - g) - sol.h))
                for g in (0.9, 0.99, 0.999)]
        assert errs[0] > errs[1] > errs[2]


class TestPairChain:
    def test_single_state(self):
        c = FiniteChain(transition=[[1.0]], cost_vec=[2.0], stationary=[1.0])
        p = pair_chain(c)
        assert p.n_z == 1
        assert np.allclose(p.stationary, [1.0])

    def test_marginal_consistency(self, chain):
        p = pair_chain(chain)
        assert p.stationary.sum() == pytest.approx(1.0, abs=1e-12)
        marg = p.stationary.reshape(6, 6).sum(axis=1)
        assert np.max(np.abs(marg - chain.stationary)) < 1e-12

    def test_invariance(self, chain):
        p = pair_chain(chain)
        assert np.max(np.abs(p.stationary @ p.transition - p.stationary)) < 1e-10

    def test_two_cycle_has_two_reachable_pairs(self):
        c = FiniteChain(transition=[[0.0, 1.0], [1.0, 0.0]], cost_vec=[0.0, 0.0],
                        stationary=[0.5, 0.5])
        p = pair_chain(c)
        assert p.reachable.sum() == 2
        assert p.n_z == 4


class TestModelFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "model.json"
        save_model(path, models.finite_mdp(), models.finite_eval_policy())
        mdp, policy, features = load_model(path)
        assert features is None
        assert np.array_equal(mdp.kernel, models.FINITE_KERNEL)
        assert np.array_equal(mdp.cost, models.FINITE_COST)
        assert np.array_equal(policy.probs, models.FINITE_EVAL_POLICY)

    def test_explicit_features(self, tmp_path):
        path = tmp_path / "model.json"
        mat = np.arange(12.0).reshape(6, 2)
        save_model(path, models.finite_mdp(), models.finite_eval_policy(), features=mat)
        _, _, features = load_model(path)
        assert np.array_equal(features, mat)

    def test_invalid_policy_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        bad = RandomizedPolicy.__new__(RandomizedPolicy)  # bypass validation
        object.__setattr__(bad, "probs", np.array([[0.5, 0.4]] * 3))
        with pytest.raises(ValueError):
            save_model(path, models.finite_mdp(), bad)
            load_model(path)

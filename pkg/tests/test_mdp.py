import json

import numpy as np
import pytest
from helpers import random_mdp, random_policy
from hypothesis import given
from hypothesis import strategies as st

from fedtd.errors import ConfigError
from fedtd.mdp import (
    InducedChain,
    Mdp,
    Policy,
    check_ergodic,
    induce_chain,
    stationary_distribution,
)

seeds = st.integers(0, 2**32 - 1)


def chain(p, r=None):
    p = np.asarray(p, dtype=float)
    return InducedChain(p, np.zeros(len(p)) if r is None else r)


class TestValidation:
    def test_rows_must_sum_to_one(self):
        p = np.full((2, 1, 2), 0.5)
        p[0, 0] = [0.6, 0.5]
        with pytest.raises(ConfigError, match="transitions"):
            Mdp(p, np.zeros((2, 1)))

    def test_negative_probability(self):
        with pytest.raises(ConfigError):
            Policy(np.array([[1.5, -0.5]]))

    def test_reward_shape(self):
        with pytest.raises(ConfigError, match="rewards"):
            Mdp(np.full((2, 1, 2), 0.5), np.zeros((2, 2)))

    def test_arrays_are_read_only(self):
        m = random_mdp(3, 2, 0)
        with pytest.raises(ValueError):
            m.transitions[0, 0, 0] = 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError, match="policy"):
            induce_chain(random_mdp(3, 2, 0), random_policy(3, 3, 0))


class TestInduceChain:
    def test_deterministic_policy_selects_action_zero(self):
        m = random_mdp(4, 3, 1)
        pol = Policy(np.tile([1.0, 0.0, 0.0], (4, 1)))
        c = induce_chain(m, pol)
        np.testing.assert_array_equal(c.p_mu, m.transitions[:, 0, :])
        np.testing.assert_array_equal(c.r_mu, m.rewards[:, 0])

    def test_uniform_mixture_of_two_point_masses(self):
        p = np.zeros((3, 2, 2))
        p[:, 0, 0] = 1.0
        p[:, 1, 1] = 1.0
        p = np.zeros((2, 2, 2))
        p[:, 0, 0] = 1.0
        p[:, 1, 1] = 1.0
        c = induce_chain(Mdp(p, np.zeros((2, 2))), Policy(np.full((2, 2), 0.5)))
        np.testing.assert_array_equal(c.p_mu, np.full((2, 2), 0.5))

    @given(seeds)
    def test_matches_explicit_loop(self, seed):
        m, pol = random_mdp(3, 2, seed), random_policy(3, 2, seed + 1)
        c = induce_chain(m, pol)
        for s in range(3):
            r = 0.0
            for a in range(2):
                r += pol.probs[s, a] * m.rewards[s, a]
            assert c.r_mu[s] == pytest.approx(r, abs=1e-15)
            for t in range(3):
                p = 0.0
                for a in range(2):
                    p += pol.probs[s, a] * m.transitions[s, a, t]
                assert c.p_mu[s, t] == pytest.approx(p, abs=1e-15)

    @given(seeds, st.integers(1, 12), st.integers(1, 6))
    def test_preserves_stochastic_rows(self, seed, n, a):
        c = induce_chain(random_mdp(n, a, seed), random_policy(n, a, seed))
        assert np.abs(c.p_mu.sum(axis=1) - 1.0).max() <= 1e-12
        assert c.p_mu.min() >= 0.0


    def test_deterministic_transitions_under_mixed_policy(self):
        # the action weights sum to one only up to rounding
        policy = random_policy(4, 5, 1)
        trans = np.broadcast_to(np.eye(4)[:, None, :], (4, 5, 4)).copy()
        assert np.einsum("sa,sat->st", policy.probs, trans).max() > 1.0
        chain = induce_chain(Mdp(trans, np.zeros((4, 5))), policy)
        assert chain.p_mu.max() <= 1.0
        np.testing.assert_allclose(chain.p_mu, np.eye(4), atol=1e-15)


class TestStationaryDistribution:
    @pytest.mark.parametrize(
        "p, expected",
        [
            ([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]),
            ([[0.9, 0.1], [0.5, 0.5]], [5 / 6, 1 / 6]),
            ([[0.7, 0.3], [0.3, 0.7]], [0.5, 0.5]),
        ],
    )
    def test_hand_solved(self, p, expected):
        d = stationary_distribution(chain(p)).d
        np.testing.assert_allclose(d, expected, atol=1e-14)

    def test_single_state(self):
        assert stationary_distribution(chain([[1.0]])).d.tolist() == [1.0]

    @given(seeds, st.integers(2, 30))
    def test_balance_equations(self, seed, n):
        c = induce_chain(random_mdp(n, 3, seed), random_policy(n, 3, seed))
        d = stationary_distribution(c).d
        assert np.abs(d @ c.p_mu - d).max() <= 1e-10
        assert abs(d.sum() - 1.0) <= 1e-12
        assert d.min() > 0.0

    # 10 n steps only suffices when the chain mixes fast; random dense chains
    # with n >= 4 have |lambda_2| around 1/sqrt(n)
    @given(seeds, st.integers(4, 20))
    def test_agrees_with_power_iteration(self, seed, n):
        c = induce_chain(random_mdp(n, 3, seed), random_policy(n, 3, seed))
        d = stationary_distribution(c).d
        x = np.zeros(n)
        x[0] = 1.0
        for _ in range(10 * n):
            x = x @ c.p_mu
        assert 0.5 * np.abs(x - d).sum() <= 1e-6


class TestCheckErgodic:
    def test_periodic(self):
        v = check_ergodic(chain([[0, 1], [1, 0]]))
        assert v.irreducible and not v.aperiodic and v.period == 2
        assert not v

    def test_positive_matrix(self):
        assert check_ergodic(chain([[0.5, 0.5], [0.5, 0.5]]))

    def test_reducible(self):
        v = check_ergodic(chain([[1, 0], [0.5, 0.5]]))
        assert not v.irreducible and not v

    def test_three_cycle(self):
        v = check_ergodic(chain([[0, 1, 0], [0, 0, 1], [1, 0, 0]]))
        assert v.period == 3 and not v

    def test_cycle_with_chord_is_aperiodic(self):
        # cycle lengths 3 and 2 have gcd 1
        p = [[0, 0.5, 0.5], [0, 0, 1], [1, 0, 0]]
        assert check_ergodic(chain(p))

    def test_period_two_bipartite(self):
        p = [[0, 0, 0.5, 0.5], [0, 0, 0.5, 0.5], [0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]]
        v = check_ergodic(chain(p))
        assert v.irreducible and v.period == 2

    def test_single_state(self):
        assert check_ergodic(chain([[1.0]]))


class TestSerialization:
    @given(seeds)
    def test_mdp_round_trip_is_exact(self, seed):
        m = random_mdp(4, 3, seed)
        back = Mdp.from_dict(json.loads(json.dumps(m.to_dict())))
        assert np.array_equal(back.transitions, m.transitions)
        assert np.array_equal(back.rewards, m.rewards)

    def test_policy_and_chain_round_trip(self):
        pol = random_policy(5, 2, 3)
        c = induce_chain(random_mdp(5, 2, 3), pol)
        assert np.array_equal(Policy.from_dict(json.loads(json.dumps(pol.to_dict()))).probs, pol.probs)
        back = InducedChain.from_dict(json.loads(json.dumps(c.to_dict())))
        assert np.array_equal(back.p_mu, c.p_mu) and np.array_equal(back.r_mu, c.r_mu)

    def test_document_layout(self):
        obj = random_mdp(2, 3, 0).to_dict()
        assert obj["format_version"] == 1 and obj["kind"] == "mdp"
        assert obj["n_states"] == 2 and obj["n_actions"] == 3
        assert len(obj["transitions"]) == 12 and len(obj["rewards"]) == 6

    def test_rejects_unknown_version(self):
        obj = random_mdp(2, 2, 0).to_dict()
        obj["format_version"] = 99
        with pytest.raises(ConfigError, match="format_version"):
            Mdp.from_dict(obj)

    def test_rejects_wrong_kind(self):
        with pytest.raises(ConfigError, match="kind"):
            Policy.from_dict(random_mdp(2, 2, 0).to_dict())

import numpy as np

from fedtd.envgen import (
    HeterogeneityBudget,
    gen_agent_family,
    gen_feature_matrix,
    gen_policy,
)
from fedtd.mdp import Mdp, Policy


def random_mdp(n_states, n_actions, seed, reward_scale=1.0):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p = p / p.sum(axis=-1, keepdims=True)
    r = rng.uniform(-reward_scale / 2, reward_scale / 2, size=(n_states, n_actions))
    return Mdp(p, r)


def random_policy(n_states, n_actions, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    return Policy(probs / probs.sum(axis=1, keepdims=True))


def make_family(n_states=10, n_actions=5, d=3, n_agents=3, eps_p=0.3, eps_r=0.5, r_max=1.0, seed=0):
    policy = gen_policy(n_states, n_actions, seed)
    phi = gen_feature_matrix(n_states, d, True, seed)
    budget = HeterogeneityBudget(eps_p, eps_r, r_max)
    return gen_agent_family(n_states, n_actions, n_agents, budget, policy, phi, seed)

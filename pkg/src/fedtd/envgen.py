"""Seeded generation of policies, feature matrices and heterogeneous agent families."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError, HeterogeneityViolation
from .mdp import (
    FORMAT_VERSION,
    Mdp,
    Policy,
    _check_header,
    _frozen,
    check_ergodic,
    induce_chain,
)
from .rng import make_generator

RANK_TOL = 1e-8
NORM_TOL = 1e-12
ONES_TOL = 1e-6
MAX_FEATURE_REJECTIONS = 100
# budgets below this (relative to r_max for rewards) are under rounding noise; agents copy the base MDP
BUDGET_FLOOR = 1e-10
MAX_FAMILY_REDRAWS = 50


def ones_residual(phi: np.ndarray) -> float:
    """Norm of the all-ones vector minus its projection onto col(phi)."""
    q, _ = np.linalg.qr(phi)
    ones = np.ones(phi.shape[0])
    return float(np.linalg.norm(ones - q @ (q.T @ ones)))


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Feature matrix with full column rank and unit Frobenius norm.

    With ``excludes_ones`` set, the all-ones vector must also lie outside the
    column space (required for the average-reward fixed point to be unique).
    """

    phi: np.ndarray
    excludes_ones: bool = True

    def __post_init__(self):
        phi = _frozen(self.phi)
        if phi.ndim != 2 or not 1 <= phi.shape[1] <= phi.shape[0]:
            raise ConfigError(f"expected n_states x d with 1 <= d <= n_states, got {phi.shape}", "phi")
        sv = np.linalg.svd(phi, compute_uv=False)
        if sv.min() <= RANK_TOL:
            raise ConfigError(f"rank deficient (smallest singular value {sv.min():.3e})", "phi")
        fro = np.linalg.norm(phi)
        if abs(fro - 1.0) > NORM_TOL:
            raise ConfigError(f"Frobenius norm is {fro!r}, expected 1", "phi")
        if self.excludes_ones and ones_residual(phi) <= ONES_TOL:
            raise ConfigError("all-ones vector lies in the column space", "phi")
        object.__setattr__(self, "phi", phi)

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "features",
            "n_states": self.n_states,
            "d": self.d,
            "excludes_ones": self.excludes_ones,
            "phi": self.phi.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> FeatureMatrix:
        _check_header(obj, "features")
        phi = np.asarray(obj["phi"], dtype=np.float64).reshape(int(obj["n_states"]), int(obj["d"]))
        return cls(phi, bool(obj["excludes_ones"]))


@dataclass(frozen=True)
class HeterogeneityBudget:
    eps_p: float = 0.0
    eps_r: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eps_p < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.eps_p!r}", "eps_p")
        if not self.eps_r >= 0.0:
            raise ConfigError(f"must be nonnegative, got {self.eps_r!r}", "eps_r")
        if not self.r_max > 0.0:
            raise ConfigError(f"must be positive, got {self.r_max!r}", "r_max")

    def to_dict(self) -> dict:
        return {"eps_p": self.eps_p, "eps_r": self.eps_r, "r_max": self.r_max}


@dataclass(frozen=True, eq=False)
class AgentFamily:
    mdps: tuple
    policy: Policy
    phi: FeatureMatrix
    budget: HeterogeneityBudget
    master_seed: int = 0

    def __post_init__(self):
        mdps = tuple(self.mdps)
        if not mdps:
            raise ConfigError("family needs at least one agent", "mdps")
        shape = (mdps[0].n_states, mdps[0].n_actions)
        for i, m in enumerate(mdps):
            if (m.n_states, m.n_actions) != shape:
                raise ConfigError(f"agent {i} has shape {(m.n_states, m.n_actions)}, expected {shape}", "mdps")
        if (self.policy.n_states, self.policy.n_actions) != shape:
            raise ConfigError("policy shape does not match the MDPs", "policy")
        if self.phi.n_states != shape[0]:
            raise ConfigError("feature matrix row count does not match n_states", "phi")
        object.__setattr__(self, "mdps", mdps)

    @property
    def n_agents(self) -> int:
        return len(self.mdps)

    @property
    def n_states(self) -> int:
        return self.mdps[0].n_states

    @property
    def n_actions(self) -> int:
        return self.mdps[0].n_actions

    def chains(self):
        return [induce_chain(m, self.policy) for m in self.mdps]

    def validate(self) -> tuple[float, float]:
        """Check ergodicity, reward bound and heterogeneity budget.

        Returns the achieved ``(eps_p, eps_r)``; raises on any violation.
        """
        for i, chain in enumerate(self.chains()):
            verdict = check_ergodic(chain)
            if not verdict:
                raise GenerationError(f"agent {i}: {verdict.reason}", "ergodicity")
        for i, m in enumerate(self.mdps):
            if m.r_max > self.budget.r_max:
                raise GenerationError(f"agent {i}: |reward| {m.r_max!r} exceeds r_max", "r_max")
        eps_p, eps_r = verify_heterogeneity(self)
        if eps_p > self.budget.eps_p or eps_r > self.budget.eps_r:
            raise GenerationError(
                f"achieved heterogeneity ({eps_p:.4g}, {eps_r:.4g}) exceeds budget "
                f"({self.budget.eps_p}, {self.budget.eps_r})",
                "eps_p" if eps_p > self.budget.eps_p else "eps_r",
            )
        return eps_p, eps_r

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "agent_family",
            "n_agents": self.n_agents,
            "master_seed": int(self.master_seed),
            "budget": self.budget.to_dict(),
            "policy": self.policy.to_dict(),
            "phi": self.phi.to_dict(),
            "mdps": [m.to_dict() for m in self.mdps],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> AgentFamily:
        _check_header(obj, "agent_family")
        return cls(
            tuple(Mdp.from_dict(m) for m in obj["mdps"]),
            Policy.from_dict(obj["policy"]),
            FeatureMatrix.from_dict(obj["phi"]),
            HeterogeneityBudget(**obj["budget"]),
            int(obj["master_seed"]),
        )


def gen_policy(n_states: int, n_actions: int, seed: int) -> Policy:
    """Rows drawn from a flat Dirichlet, so every action has positive mass."""
    if n_states < 1 or n_actions < 1:
        raise ConfigError("counts must be positive", "n_states" if n_states < 1 else "n_actions")
    rng = make_generator(seed, "policy")
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    return Policy(_normalize_rows(probs))


def gen_feature_matrix(n_states: int, d: int, exclude_ones: bool, seed: int) -> FeatureMatrix:
    if not 1 <= d < n_states:
        raise ConfigError(f"need 1 <= d < n_states, got d={d}, n_states={n_states}", "d")
    for attempt in range(MAX_FEATURE_REJECTIONS):
        rng = make_generator(seed, "features", attempt)
        q, _ = np.linalg.qr(rng.standard_normal((n_states, d)))
        if exclude_ones and ones_residual(q) <= ONES_TOL:
            continue
        phi = q / np.sqrt(d)
        phi /= np.linalg.norm(phi)
        return FeatureMatrix(phi, exclude_ones)
    raise GenerationError(
        f"{MAX_FEATURE_REJECTIONS} consecutive feature draws contained the all-ones vector", "phi"
    )


def gen_agent_family(
    n_states: int,
    n_actions: int,
    n_agents: int,
    budget: HeterogeneityBudget,
    policy: Policy,
    phi: FeatureMatrix,
    seed: int,
) -> AgentFamily:
    """Draw a base MDP and perturb it per agent within ``budget``.

    Transition entries get a multiplicative perturbation of at most eps_p/3
    followed by row renormalization; rewards get an additive offset of norm
    exactly eps_r/2 in a uniformly random direction, then clipping to
    [-r_max, r_max]. The whole family is redrawn until it verifies.
    """
    if n_agents < 1:
        raise ConfigError("need at least one agent", "n_agents")
    if (policy.n_states, policy.n_actions) != (n_states, n_actions):
        raise ConfigError("policy shape does not match (n_states, n_actions)", "policy")
    if policy.probs.min() <= 0.0:
        raise ConfigError("policy must be strictly positive", "policy")
    if phi.n_states != n_states:
        raise ConfigError("feature matrix row count does not match n_states", "phi")

    failures = Counter()
    for attempt in range(MAX_FAMILY_REDRAWS):
        base = make_generator(seed, "base_mdp", attempt)
        p0 = base.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        r0 = base.uniform(-budget.r_max / 2, budget.r_max / 2, size=(n_states, n_actions))
        mdps = []
        for i in range(n_agents):
            rng = make_generator(seed, "agent", i, attempt)
            mdps.append(_perturb(p0, r0, budget, rng))
        family = AgentFamily(tuple(mdps), policy, phi, budget, seed)
        try:
            family.validate()
        except HeterogeneityViolation:
            failures["support"] += 1
        except GenerationError as exc:
            failures[exc.quantity] += 1
        else:
            return family
    worst, count = failures.most_common(1)[0]
    raise GenerationError(
        f"{MAX_FAMILY_REDRAWS} family redraws exhausted; most frequent failure: {worst} ({count}x)",
        worst,
    )


def _perturb(p0, r0, budget, rng) -> Mdp:
    n_states, n_actions, _ = p0.shape
    # draws are consumed even when unused so agent streams stay aligned across budgets
    u = rng.uniform(-budget.eps_p / 3, budget.eps_p / 3, size=p0.shape)
    p = _normalize_rows(p0 if budget.eps_p < BUDGET_FLOOR else p0 * (1.0 + u))
    direction = rng.standard_normal(n_states * n_actions)
    norm = np.linalg.norm(direction)
    if budget.eps_r < BUDGET_FLOOR * budget.r_max or norm == 0:
        offset = np.zeros_like(direction)
    else:
        offset = direction * (budget.eps_r / 2 / norm)
    r = np.clip(r0 + offset.reshape(n_states, n_actions), -budget.r_max, budget.r_max)
    return Mdp(p, r)


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    return p / p.sum(axis=-1, keepdims=True)


def pairwise_eps_p(p_mus: np.ndarray) -> np.ndarray:
    """Directed transition deviation between every pair of agents.

    Entry ``[i, j]`` is max over P_i(s, s') > 0 of |P_i - P_j| / P_i. Raises
    ``HeterogeneityViolation`` where P_i is zero but P_j is not, since no
    finite eps_p can then satisfy the bound.
    """
    p_mus = np.asarray(p_mus, dtype=np.float64)
    n = p_mus.shape[0]
    out = np.zeros((n, n))
    violations = []
    for i in range(n):
        pi = p_mus[i]
        support = pi > 0.0
        diff = np.abs(p_mus - pi)
        bad = (~support) & (diff > 0.0)
        if bad.any():
            for j, s, t in zip(*np.nonzero(bad)):
                violations.append((int(s), int(t), i, int(j)))
            continue
        ratio = np.where(support, diff / np.where(support, pi, 1.0), 0.0)
        out[i] = ratio.reshape(n, -1).max(axis=1)
    if violations:
        raise HeterogeneityViolation(
            f"{len(violations)} support mismatches, first (s, s', i, j) = {violations[0]}", violations
        )
    return out


def pairwise_eps_r(reward_tables: np.ndarray) -> np.ndarray:
    """Euclidean distance between every pair of vectorized reward tables."""
    flat = np.asarray(reward_tables, dtype=np.float64).reshape(len(reward_tables), -1)
    return np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)


def verify_heterogeneity(family: AgentFamily) -> tuple[float, float]:
    """Achieved ``(eps_p, eps_r)`` of a family, measured on its induced chains."""
    p_mus = np.stack([c.p_mu for c in family.chains()])
    rewards = np.stack([m.rewards for m in family.mdps])
    return float(pairwise_eps_p(p_mus).max()), float(pairwise_eps_r(rewards).max())

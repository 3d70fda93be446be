"""Finite MDPs, policies, induced chains and stationary distributions."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericalError

FORMAT_VERSION = 1
PROB_TOL = 1e-12
FIXED_POINT_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_stochastic(rows: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise ConfigError("non-finite probability", name)
    if rows.size and (rows.min() < 0.0 or rows.max() > 1.0):
        raise ConfigError("probabilities must lie in [0, 1]", name)
    err = np.abs(rows.sum(axis=-1) - 1.0)
    if err.size and err.max() > PROB_TOL:
        raise ConfigError(f"rows must sum to 1 (max deviation {err.max():.3e})", name)


@dataclass(frozen=True, eq=False)
class Mdp:
    """One agent's model.

    ``transitions[s, a, s']`` is P(s'|s, a) and ``rewards[s, a]`` the reward
    for taking ``a`` in ``s``.
    """

    transitions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        p = _frozen(self.transitions)
        r = _frozen(self.rewards)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise ConfigError(f"expected (S, A, S) tensor, got shape {p.shape}", "transitions")
        if r.shape != p.shape[:2]:
            raise ConfigError(f"expected shape {p.shape[:2]}, got {r.shape}", "rewards")
        if not np.all(np.isfinite(r)):
            raise ConfigError("non-finite reward", "rewards")
        _check_stochastic(p, "transitions")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.rewards).max())

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "mdp",
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transitions": self.transitions.ravel().tolist(),
            "rewards": self.rewards.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> Mdp:
        _check_header(obj, "mdp")
        s, a = int(obj["n_states"]), int(obj["n_actions"])
        return cls(
            np.asarray(obj["transitions"], dtype=np.float64).reshape(s, a, s),
            np.asarray(obj["rewards"], dtype=np.float64).reshape(s, a),
        )


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary randomized policy; ``probs[s, a]`` is mu(a|s)."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2 or 0 in p.shape:
            raise ConfigError(f"expected (S, A) table, got shape {p.shape}", "policy")
        _check_stochastic(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "policy",
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "probs": self.probs.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> Policy:
        _check_header(obj, "policy")
        s, a = int(obj["n_states"]), int(obj["n_actions"])
        return cls(np.asarray(obj["probs"], dtype=np.float64).reshape(s, a))


@dataclass(frozen=True, eq=False)
class InducedChain:
    """State chain under a policy: transition matrix plus expected reward."""

    p_mu: np.ndarray
    r_mu: np.ndarray

    def __post_init__(self):
        p = _frozen(self.p_mu)
        r = _frozen(self.r_mu)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
            raise ConfigError(f"expected square matrix, got shape {p.shape}", "p_mu")
        if r.shape != (p.shape[0],):
            raise ConfigError(f"expected shape ({p.shape[0]},), got {r.shape}", "r_mu")
        _check_stochastic(p, "p_mu")
        object.__setattr__(self, "p_mu", p)
        object.__setattr__(self, "r_mu", r)

    @property
    def n_states(self) -> int:
        return self.p_mu.shape[0]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "chain",
            "n_states": self.n_states,
            "p_mu": self.p_mu.ravel().tolist(),
            "r_mu": self.r_mu.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> InducedChain:
        _check_header(obj, "chain")
        s = int(obj["n_states"])
        return cls(np.asarray(obj["p_mu"], dtype=np.float64).reshape(s, s), obj["r_mu"])


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    d: np.ndarray

    def __post_init__(self):
        d = _frozen(self.d)
        if d.ndim != 1 or not np.all(np.isfinite(d)):
            raise ConfigError("stationary distribution must be a finite vector", "d")
        if abs(d.sum() - 1.0) > PROB_TOL:
            raise NumericalError(f"stationary distribution sums to {d.sum()!r}", "d")
        object.__setattr__(self, "d", d)

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.d)


@dataclass(frozen=True)
class ErgodicityVerdict:
    irreducible: bool
    aperiodic: bool
    period: int

    def __bool__(self):
        return self.irreducible and self.aperiodic

    @property
    def reason(self) -> str:
        if not self.irreducible:
            return "support graph is not strongly connected"
        if not self.aperiodic:
            return f"chain has period {self.period}"
        return "irreducible and aperiodic"


def _check_header(obj: dict, kind: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"expected a {kind!r} mapping, got {type(obj).__name__}", kind)
    if obj.get("kind") != kind:
        raise ConfigError(f"expected kind {kind!r}, got {obj.get('kind')!r}", "kind")
    if obj.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported format_version {obj.get('format_version')!r}", "format_version")


def induce_chain(mdp: Mdp, policy: Policy) -> InducedChain:
    if (policy.n_states, policy.n_actions) != (mdp.n_states, mdp.n_actions):
        raise ConfigError(
            f"policy is {policy.n_states}x{policy.n_actions} but MDP is "
            f"{mdp.n_states}x{mdp.n_actions}",
            "policy",
        )
    mu = policy.probs
    # convex combination; rounding may land an ulp above 1
    p_mu = np.minimum(np.einsum("sa,sat->st", mu, mdp.transitions), 1.0)
    r_mu = np.einsum("sa,sa->s", mu, mdp.rewards)
    return InducedChain(p_mu, r_mu)


def stationary_distribution(chain: InducedChain) -> StationaryDistribution:
    """Solve d^T P = d^T, sum(d) = 1 directly.

    One equation of the (rank-deficient) balance system is replaced by the
    normalization constraint. Raises ``NumericalError`` if the result does
    not satisfy the balance equations to 1e-10.
    """
    p = chain.p_mu
    n = p.shape[0]
    if n == 1:
        return StationaryDistribution(np.ones(1))
    m = p.T - np.eye(n)
    m[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    with np.errstate(all="ignore"):
        try:
            d = scipy.linalg.solve(m, rhs, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise NumericalError(f"singular balance system: {exc}", "d_mu") from exc
        if not np.all(np.isfinite(d)):
            raise NumericalError("balance system produced non-finite values", "d_mu")
        d = d / d.sum()
    residual = float(np.abs(d @ p - d).max())
    if not residual <= FIXED_POINT_TOL:
        raise NumericalError(
            f"stationary residual {residual:.3e} exceeds {FIXED_POINT_TOL}", "d_mu", residual
        )
    return StationaryDistribution(d)


def check_ergodic(chain: InducedChain) -> ErgodicityVerdict:
    """Irreducibility and aperiodicity of the support graph.

    Uses forward/backward BFS for strong connectivity and the BFS-level gcd
    rule for the period: for BFS levels ``lv`` from any root of a strongly
    connected graph, the period is gcd over edges (u, v) of lv[u] + 1 - lv[v].
    """
    adj = chain.p_mu > 0.0
    n = adj.shape[0]
    succ = [np.flatnonzero(adj[u]) for u in range(n)]
    pred = [np.flatnonzero(adj[:, v]) for v in range(n)]

    level = _bfs_levels(succ, n)
    back = _bfs_levels(pred, n)
    irreducible = bool(np.all(level >= 0) and np.all(back >= 0))
    if not irreducible:
        return ErgodicityVerdict(False, False, 0)

    period = 0
    for u in range(n):
        for v in succ[u]:
            period = math.gcd(period, abs(int(level[u]) + 1 - int(level[v])))
            if period == 1:
                return ErgodicityVerdict(True, True, 1)
    return ErgodicityVerdict(True, period == 1, period)


def _bfs_levels(neighbors, n: int) -> np.ndarray:
    level = np.full(n, -1, dtype=np.int64)
    level[0] = 0
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in neighbors[u]:
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
    return level

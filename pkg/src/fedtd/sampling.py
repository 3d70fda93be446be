"""Per-agent trajectory sampling and the empirical mixing diagnostic.

All categorical draws use inverse-CDF sampling with exactly one uniform per
draw, so the number of uniforms consumed per step is fixed (two in
Markovian mode, three in IID mode) and the bulk kernels in
``fedtd.kernels`` can replay the same stream.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MixingError
from .mdp import (
    InducedChain,
    Mdp,
    Policy,
    StationaryDistribution,
    stationary_distribution,
)
from .rng import make_generator

MARKOVIAN = "markovian"
IID = "iid"
MODES = (MARKOVIAN, IID)
UNIFORMS_PER_STEP = {MARKOVIAN: 2, IID: 3}


def cdf_table(probs: np.ndarray) -> np.ndarray:
    """Cumulative sums along the last axis, padded to exactly 1.0.

    Entries from the last positive-probability index onward are set to 1.0,
    so ``searchsorted(cdf, u, side="right")`` with u in [0, 1) never selects
    a zero-probability outcome even when the cumsum falls short of 1.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    n = probs.shape[-1]
    last = n - 1 - np.argmax(probs[..., ::-1] > 0.0, axis=-1)
    cdf[np.arange(n) >= last[..., None]] = 1.0
    return np.ascontiguousarray(cdf)


def categorical(cdf_row: np.ndarray, u: float) -> int:
    return int(np.searchsorted(cdf_row, u, side="right"))


def agent_generator(seed: int, agent_index: int) -> np.random.Generator:
    return make_generator(seed, "agent_stream", agent_index)


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    s_next: int
    reward: float


@dataclass(frozen=True)
class MixingEstimate:
    c_e_hat: float
    alpha_hat: float
    horizon: int
    residual: float = 0.0
    one_step: bool = False
    tv: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "c_e_hat": self.c_e_hat,
            "alpha_hat": self.alpha_hat,
            "horizon": self.horizon,
            "fit_residual": self.residual,
            "mixes_in_one_step": self.one_step,
        }


class AgentStream:
    """One agent's sample stream.

    The generator is keyed by ``(run_seed, agent_index)``; ``run_seed`` is
    itself derived from the master seed and run index by the caller. The
    initial state is uniform over states and consumes the first uniform.
    """

    def __init__(self, mdp: Mdp, policy: Policy, agent_index: int, run_seed: int,
                 mode: str = MARKOVIAN, d_mu: StationaryDistribution | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown sampling mode {mode!r}", "mode")
        if (policy.n_states, policy.n_actions) != (mdp.n_states, mdp.n_actions):
            raise ConfigError("policy shape does not match the MDP", "policy")
        self.agent_index = agent_index
        self.mdp = mdp
        self.policy = policy
        self.mode = mode
        self.rng = agent_generator(run_seed, agent_index)
        # nested lists: bisect on a list beats searchsorted on tiny arrays
        self._pi_cdf = cdf_table(policy.probs).tolist()
        self._p_cdf = cdf_table(mdp.transitions).tolist()
        self._d_cdf = cdf_table(d_mu.d).tolist() if d_mu is not None else None
        self._rewards = mdp.rewards.tolist()
        self.current_state = initial_state(self.rng.random(), mdp.n_states)

    def step(self) -> Transition:
        if self.mode == MARKOVIAN:
            return step_markov(self)
        if self._d_cdf is None:
            raise ConfigError("IID mode needs the stationary distribution", "d_mu")
        return step_iid(self)

    def _act(self, s: int) -> Transition:
        a = bisect_right(self._pi_cdf[s], self.rng.random())
        s_next = bisect_right(self._p_cdf[s][a], self.rng.random())
        return Transition(s, a, s_next, self._rewards[s][a])


def initial_state(u: float, n_states: int) -> int:
    return min(int(u * n_states), n_states - 1)


def step_markov(stream: AgentStream) -> Transition:
    if stream.mode != MARKOVIAN:
        raise ConfigError("step_markov needs a Markovian stream", "mode")
    tr = stream._act(stream.current_state)
    stream.current_state = tr.s_next
    return tr


def step_iid(stream: AgentStream, d_mu: StationaryDistribution | None = None) -> Transition:
    """Draw s from the stationary distribution, then act; state is not carried."""
    if stream.mode != IID:
        raise ConfigError("step_iid needs an IID stream", "mode")
    d_cdf = cdf_table(d_mu.d).tolist() if d_mu is not None else stream._d_cdf
    if d_cdf is None:
        raise ConfigError("IID mode needs the stationary distribution", "d_mu")
    s = bisect_right(d_cdf, stream.rng.random())
    return stream._act(s)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


FIT_FLOOR = 1e-14


def estimate_mixing(chain: InducedChain, horizon: int = 100,
                    d_mu: StationaryDistribution | None = None) -> MixingEstimate:
    """Fit m(t) = max_s TV(P^t(s, .), d) ~ c * alpha^t for t = 1..horizon.

    Least squares on log m(t) over the points with m(t) > 1e-14. A chain
    whose rows already equal d has m(1) = 0 and is reported with
    ``alpha_hat = 0`` and the one-step flag.
    """
    if horizon < 10:
        raise ConfigError(f"horizon must be at least 10, got {horizon}", "horizon")
    d = (d_mu or stationary_distribution(chain)).d
    p = chain.p_mu
    m0 = float(total_variation(np.eye(p.shape[0]), d).max())
    # P^t - 1 d^T = (P - 1 d^T)^t for t >= 1; powering the deviation directly
    # keeps relative precision down to tiny distances (no cancellation)
    dev = p - d[None, :]
    et = dev.copy()
    tv = np.empty(horizon)
    for t in range(horizon):
        tv[t] = 0.5 * np.abs(et).sum(axis=1).max()
        et = et @ dev

    if tv[0] <= FIT_FLOOR:
        return MixingEstimate(max(m0, FIT_FLOOR), 0.0, horizon, 0.0, True, tv)
    if np.all(np.diff(tv) >= 0.0):
        raise MixingError("max TV distance never decreases over the horizon", "mixing")

    ts = np.arange(1, horizon + 1, dtype=np.float64)
    keep = tv > FIT_FLOOR
    if keep.sum() < 2:
        # a single informative point: anchor the fit at t = 0
        ts_fit = np.array([0.0, 1.0])
        logs = np.log([max(m0, FIT_FLOOR), tv[0]])
    else:
        ts_fit, logs = ts[keep], np.log(tv[keep])
    slope, intercept = np.polyfit(ts_fit, logs, 1)
    resid = logs - (intercept + slope * ts_fit)
    return MixingEstimate(
        float(np.exp(intercept)),
        float(np.exp(slope)),
        horizon,
        float(np.sqrt(np.mean(resid**2))),
        False,
        tv,
    )

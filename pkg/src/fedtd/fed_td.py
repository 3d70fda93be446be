"""AvgFedTD(0) and ExpFedTD(0): federated TD(0) with Polyak-Ruppert averaging.

The per-step functions (``avg_td_error``, ``avg_server_step``, ...) are the
literal agent/server updates. ``run_avgfedtd`` / ``run_expfedtd`` drive whole
runs through the bulk kernels in ``fedtd.kernels``; ``simulate_stepwise``
drives the same run through the per-step functions and ``AgentStream`` and
exists as an independent cross-check of the kernels.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ProtocolError
from .ground_truth import AgentSolution, GlobalSolution, solve_agent, solve_global
from .kernels import get_backend
from .sampling import (
    IID,
    MODES,
    UNIFORMS_PER_STEP,
    AgentStream,
    agent_generator,
    cdf_table,
    initial_state,
)

AVG = "avg"
EXP = "exp"
ALGORITHMS = (AVG, EXP)
SAMPLED = "sampled"
EXPECTED = "expected"
UPDATE_MODES = (SAMPLED, EXPECTED)
REFERENCES = ("agent1", "global")
CHUNK_ROUNDS = 4096


@dataclass(frozen=True)
class StepSchedule:
    """beta_t = 1 / (t + 1)^beta."""

    beta_exponent: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.beta_exponent <= 1.0:
            raise ConfigError(f"must lie in (0, 1], got {self.beta_exponent!r}", "beta")

    def __call__(self, t: int) -> float:
        return (t + 1.0) ** (-self.beta_exponent)


@dataclass
class AvgFedTdState:
    theta: np.ndarray
    theta_bar: np.ndarray
    r_global: float
    r_local: np.ndarray
    t: int = 0
    streams: list = field(default_factory=list)

    @classmethod
    def initial(cls, d: int, n_agents: int, theta0=None, r0: float = 0.0, streams=()):
        theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=np.float64)
        return cls(theta, theta.copy(), float(r0), np.full(n_agents, float(r0)), 0, list(streams))


@dataclass
class ExpFedTdState:
    vartheta: np.ndarray
    vartheta_bar: np.ndarray
    gamma: float
    t: int = 0
    streams: list = field(default_factory=list)

    @classmethod
    def initial(cls, d: int, gamma: float, vartheta0=None, streams=()):
        v = np.zeros(d) if vartheta0 is None else np.array(vartheta0, dtype=np.float64)
        return cls(v, v.copy(), float(gamma), 0, list(streams))


def avg_td_error(phi_s, phi_s_next, reward, r_t, theta) -> np.ndarray:
    phi_s = np.asarray(phi_s, dtype=np.float64)
    phi_s_next = np.asarray(phi_s_next, dtype=np.float64)
    if phi_s.shape != phi_s_next.shape or phi_s.shape != np.shape(theta):
        raise ConfigError("feature and parameter dimensions differ", "theta")
    return (reward - r_t) * phi_s + phi_s * float((phi_s_next - phi_s) @ theta)


def avg_local_reward_update(r_local_i: float, reward: float, t: int) -> float:
    return r_local_i + (reward - r_local_i) / (t + 1)


def exp_td_error(phi_s, phi_s_next, reward, gamma, vartheta) -> np.ndarray:
    phi_s = np.asarray(phi_s, dtype=np.float64)
    phi_s_next = np.asarray(phi_s_next, dtype=np.float64)
    if phi_s.shape != phi_s_next.shape or phi_s.shape != np.shape(vartheta):
        raise ConfigError("feature and parameter dimensions differ", "vartheta")
    return reward * phi_s + phi_s * (gamma * float(phi_s_next @ vartheta) - float(phi_s @ vartheta))


def _server_average(deltas, n_expected: int, d: int) -> np.ndarray:
    deltas = [np.asarray(x, dtype=np.float64) for x in deltas]
    if len(deltas) != n_expected:
        raise ProtocolError(f"expected {n_expected} agent messages, got {len(deltas)}")
    total = np.zeros(d)
    for x in deltas:
        if x.shape != (d,):
            raise ProtocolError(f"agent message has shape {x.shape}, expected ({d},)")
        total = total + x
    return total


def avg_server_step(state: AvgFedTdState, deltas, r_locals, beta_t: float) -> AvgFedTdState:
    """One server round of AvgFedTD(0); returns the new state.

    The Polyak-Ruppert average is updated from the pre-update parameter.
    """
    n = len(state.r_local)
    r_locals = np.asarray(r_locals, dtype=np.float64)
    if r_locals.shape != (n,):
        raise ProtocolError(f"expected {n} local reward estimates, got {r_locals.size}")
    total = _server_average(deltas, n, state.theta.shape[0])
    t_next = state.t + 1.0
    theta_next = state.theta + (beta_t / n) * total
    theta_bar_next = state.theta_bar + (state.theta - state.theta_bar) / t_next
    r_next = sum(r_locals.tolist(), 0.0) / n
    return replace(state, theta=theta_next, theta_bar=theta_bar_next, r_global=r_next,
                   r_local=r_locals.copy(), t=state.t + 1)


def exp_server_step(state: ExpFedTdState, deltas, beta_t: float) -> ExpFedTdState:
    n = len(deltas)
    if state.streams and n != len(state.streams):
        raise ProtocolError(f"expected {len(state.streams)} agent messages, got {n}")
    if n == 0:
        raise ProtocolError("no agent messages")
    total = _server_average(deltas, n, state.vartheta.shape[0])
    t_next = state.t + 1.0
    v_next = state.vartheta + (beta_t / n) * total
    v_bar_next = state.vartheta_bar + (state.vartheta - state.vartheta_bar) / t_next
    return replace(state, vartheta=v_next, vartheta_bar=v_bar_next, t=state.t + 1)


@dataclass(eq=False)
class PreparedFamily:
    """Family data laid out for the kernels, plus its exact fixed points.

    Building the CDF tables is the only expensive part; share one instance
    across all runs of a cell.
    """

    family: object
    phi: np.ndarray
    gamma: float
    solutions: list
    global_solution: GlobalSolution
    pi_cdf: np.ndarray
    p_cdf: np.ndarray
    rewards: np.ndarray
    d_cdf: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.p_cdf.shape[0]

    @property
    def n_states(self) -> int:
        return self.p_cdf.shape[1]

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def reference(self, algorithm: str, which: str = "agent1") -> tuple[np.ndarray, float]:
        if which not in REFERENCES:
            raise ConfigError(f"unknown reference {which!r}", "reference")
        if which == "agent1":
            sol: AgentSolution = self.solutions[0]
            return (sol.theta_star, sol.r_star) if algorithm == AVG else (sol.vartheta_star, 0.0)
        g = self.global_solution
        return (g.theta_star_bar, g.r_star_bar) if algorithm == AVG else (g.vartheta_star_bar, 0.0)


def prepare_family(family, gamma: float = 0.3, phi=None) -> PreparedFamily:
    phi_arr = np.ascontiguousarray(getattr(phi, "phi", phi) if phi is not None else family.phi.phi,
                                   dtype=np.float64)
    sols = [solve_agent(m, family.policy, phi_arr, gamma) for m in family.mdps]
    return PreparedFamily(
        family=family,
        phi=phi_arr,
        gamma=float(gamma),
        solutions=sols,
        global_solution=solve_global(sols),
        pi_cdf=cdf_table(family.policy.probs),
        p_cdf=cdf_table(np.stack([m.transitions for m in family.mdps])),
        rewards=np.ascontiguousarray(np.stack([m.rewards for m in family.mdps])),
        d_cdf=cdf_table(np.stack([s.d_mu.d for s in sols])),
    )


@dataclass(eq=False)
class RunTrace:
    """Error series of one run, recorded every ``stride`` iterations and at T."""

    algorithm: str
    t: np.ndarray
    err: np.ndarray
    err_r: np.ndarray | None
    final_param: np.ndarray
    final_r: float | None
    seed: int
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def columns(self) -> list[str]:
        if self.algorithm == AVG:
            return ["t", "err_theta_bar_sq", "err_r_sq"]
        return ["t", "err_vartheta_bar_sq"]

    def rows(self):
        for k in range(len(self.t)):
            row = [int(self.t[k]), float(self.err[k])]
            if self.algorithm == AVG:
                row.append(float(self.err_r[k]))
            yield row

    def to_csv(self, target=None) -> str:
        from .serialize import write_csv

        buf = io.StringIO()
        write_csv(buf, self.columns, self.rows())
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", newline="") as fh:
                fh.write(text)
        return text


def _validate_run(algorithm, prepared, T, mode, update_mode, stride):
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}", "algorithm")
    if mode not in MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}", "mode")
    if update_mode not in UPDATE_MODES:
        raise ConfigError(f"unknown update mode {update_mode!r}", "update_mode")
    if int(T) < 1:
        raise ConfigError(f"T must be at least 1, got {T}", "T")
    if int(stride) < 1:
        raise ConfigError(f"stride must be at least 1, got {stride}", "stride")


def run_fedtd(algorithm, prepared: PreparedFamily, schedule: StepSchedule, T: int,
              mode: str = "markovian", seed: int = 0, update_mode: str = SAMPLED, *,
              reference: str = "agent1", theta0=None, r0: float = 0.0, stride: int = 1,
              backend: str | None = None) -> RunTrace:
    """Run ``T`` synchronous rounds and record errors against the reference."""
    if not isinstance(prepared, PreparedFamily):
        prepared = prepare_family(prepared)
    _validate_run(algorithm, prepared, T, mode, update_mode, stride)
    kern = get_backend(backend)
    T, stride = int(T), int(stride)
    n, d = prepared.n_agents, prepared.d
    use_r = algorithm == AVG

    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=np.float64)
    if theta.shape != (d,):
        raise ConfigError(f"initial parameter must have shape ({d},)", "theta0")
    theta_bar = theta.copy()
    r_local = np.full(n, float(r0))
    r_glob = np.array([float(r0)])
    ref, r_ref = prepared.reference(algorithm, reference)
    ref = np.ascontiguousarray(ref, dtype=np.float64)

    n_rec = T // stride + (1 if T % stride else 0)
    out_t = np.zeros(n_rec, dtype=np.int64)
    out_err = np.zeros(n_rec)
    out_err_r = np.zeros(n_rec)
    sumd = np.zeros(d)
    beta = float(schedule.beta_exponent)
    t, pos, diverged = 0, 0, False

    if update_mode == EXPECTED:
        sols = prepared.solutions
        mats = np.ascontiguousarray(np.stack([s.a_mat if use_r else s.ups_mat for s in sols]))
        bvecs = np.ascontiguousarray(np.stack([s.b_vec for s in sols]))
        vvecs = np.ascontiguousarray(np.stack([s.v_vec for s in sols]))
        rstars = np.array([s.r_star for s in sols])
        while t < T and not diverged:
            n_rounds = min(CHUNK_ROUNDS * 16, T - t)
            done, pos, diverged = kern.run_expected(
                mats, bvecs, vvecs, rstars, theta, theta_bar, r_local, r_glob,
                t, n_rounds, beta, use_r, ref, float(r_ref), stride, T,
                out_t, out_err, out_err_r, pos, sumd)
            t += done
    else:
        gens = [agent_generator(seed, i) for i in range(n)]
        states = np.array([initial_state(g.random(), prepared.n_states) for g in gens], dtype=np.int64)
        k = UNIFORMS_PER_STEP[mode]
        gamma_coef = 1.0 if use_r else prepared.gamma
        while t < T and not diverged:
            n_rounds = min(CHUNK_ROUNDS, T - t)
            u = np.ascontiguousarray(np.stack([g.random((n_rounds, k)) for g in gens]))
            done, pos, diverged = kern.run_sampled(
                prepared.pi_cdf, prepared.p_cdf, prepared.rewards, prepared.phi,
                prepared.d_cdf, mode == IID, u, states, theta, theta_bar, r_local, r_glob,
                t, beta, gamma_coef, use_r, ref, float(r_ref), stride, T,
                out_t, out_err, out_err_r, pos, sumd)
            t += done

    return RunTrace(
        algorithm=algorithm,
        t=out_t[:pos].copy(),
        err=out_err[:pos].copy(),
        err_r=out_err_r[:pos].copy() if use_r else None,
        final_param=theta_bar.copy(),
        final_r=float(r_glob[0]) if use_r else None,
        seed=int(seed),
        diverged=bool(diverged),
        diverged_at=int(t) if diverged else None,
    )


def run_avgfedtd(family, phi=None, schedule=StepSchedule(), T=10_000, mode="markovian",
                 seed=0, update_mode=SAMPLED, **kwargs) -> RunTrace:
    prepared = family if isinstance(family, PreparedFamily) else prepare_family(family, phi=phi)
    return run_fedtd(AVG, prepared, schedule, T, mode, seed, update_mode, **kwargs)


def run_expfedtd(family, phi=None, schedule=StepSchedule(), gamma=0.3, T=10_000,
                 mode="markovian", seed=0, update_mode=SAMPLED, **kwargs) -> RunTrace:
    if isinstance(family, PreparedFamily):
        if family.gamma != gamma:
            raise ConfigError(f"prepared with gamma={family.gamma}, run asked for {gamma}", "gamma")
        prepared = family
    else:
        prepared = prepare_family(family, gamma=gamma, phi=phi)
    return run_fedtd(EXP, prepared, schedule, T, mode, seed, update_mode, **kwargs)


def simulate_stepwise(algorithm, prepared: PreparedFamily, schedule: StepSchedule, T: int,
                      mode: str = "markovian", seed: int = 0, *, theta0=None, r0: float = 0.0,
                      shared_stream: bool = False):
    """Run the algorithm literally, one agent and one server step at a time.

    Returns the list of states ``[state_0, ..., state_T]`` (streams are
    shared between them). With ``shared_stream`` every agent replays agent
    0's sample sequence; this is only meaningful for identical MDPs.
    """
    fam = prepared.family
    n, phi = prepared.n_agents, prepared.phi
    dists = [s.d_mu for s in prepared.solutions]
    streams = [
        AgentStream(fam.mdps[i], fam.policy, 0 if shared_stream else i, seed, mode, dists[i])
        for i in range(n)
    ]
    if algorithm == AVG:
        state = AvgFedTdState.initial(prepared.d, n, theta0, r0, streams)
    else:
        state = ExpFedTdState.initial(prepared.d, prepared.gamma, theta0, streams)
    history = [state]
    for t in range(int(T)):
        beta_t = schedule(t)
        transitions = [st.step() for st in streams]
        if algorithm == AVG:
            deltas = [avg_td_error(phi[tr.s], phi[tr.s_next], tr.reward, state.r_global, state.theta)
                      for tr in transitions]
            r_locals = [avg_local_reward_update(state.r_local[i], tr.reward, t)
                        for i, tr in enumerate(transitions)]
            state = avg_server_step(state, deltas, r_locals, beta_t)
        else:
            deltas = [exp_td_error(phi[tr.s], phi[tr.s_next], tr.reward, state.gamma, state.vartheta)
                      for tr in transitions]
            state = exp_server_step(state, deltas, beta_t)
        history.append(state)
    return history

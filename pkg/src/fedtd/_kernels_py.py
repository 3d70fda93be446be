"""Pure-Python (numpy) fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures and the same floating-point operation order: dot products
are accumulated sequentially over features and reductions over agents run in
agent-index order, so traces match the compiled backend bit for bit. Work is
vectorized across agents within a round; rounds run in a Python loop.
"""

from __future__ import annotations

import math

import numpy as np


def _seq_reduce(rows: np.ndarray) -> np.ndarray:
    # numpy would switch to pairwise summation along a contiguous axis
    acc = np.zeros(rows.shape[1:])
    for row in rows:
        acc = acc + row
    return acc


def _seq_rowdot(rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    # sum_k rows[i, k] * vec[k], accumulated in k order for every i
    return _seq_reduce((rows * vec).T)


def _seq_sum(values) -> float:
    acc = 0.0
    for x in values:
        acc = acc + x
    return acc


def _finish_round(theta, theta_bar, sumd, step, t_next):
    old = theta.copy()
    theta[:] = old + step * sumd
    theta_bar[:] = theta_bar + (old - theta_bar) / t_next
    norm_sq = _seq_sum((theta * theta).tolist())
    return not (math.isfinite(norm_sq) and norm_sq <= 1e24)


def _record(theta_bar, ref, r_glob, r_ref, t_next, out_t, out_err, out_err_r, pos):
    diff = theta_bar - ref
    out_t[pos] = t_next
    out_err[pos] = _seq_sum((diff * diff).tolist())
    out_err_r[pos] = (r_glob - r_ref) * (r_glob - r_ref)


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # per-row searchsorted(side="right") for nondecreasing rows
    idx = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def run_sampled(pi_cdf, p_cdf, rewards, phi, d_cdf, iid, uniforms, states,
                theta, theta_bar, r_local, r_glob, t0, beta_exp, gamma_coef, use_r,
                ref, r_ref, stride, horizon, out_t, out_err, out_err_r, rec_pos, sumd):
    n_agents = p_cdf.shape[0]
    agents = np.arange(n_agents)
    n_rounds = uniforms.shape[1]
    for j in range(n_rounds):
        t = t0 + j
        t_next = float(t + 1)
        beta_t = t_next ** (-beta_exp)
        r_t = float(r_glob[0]) if use_r else 0.0
        u = uniforms[:, j, :]
        if iid:
            s = _draw(d_cdf, u[:, 0])
            off = 1
        else:
            s = states.copy()
            off = 0
        a = _draw(pi_cdf[s], u[:, off])
        s_next = _draw(p_cdf[agents, s, a], u[:, off + 1])
        states[:] = s_next
        reward = rewards[agents, s, a]
        phi_s = phi[s]
        ds = _seq_rowdot(phi_s, theta)
        dn = _seq_rowdot(phi[s_next], theta)
        coef = (reward - r_t) + gamma_coef * dn - ds
        sumd[:] = _seq_reduce(coef[:, None] * phi_s)
        if use_r:
            r_local[:] = r_local + (reward - r_local) / t_next
        diverged = _finish_round(theta, theta_bar, sumd, beta_t / n_agents, t_next)
        if use_r:
            r_glob[0] = _seq_sum(r_local.tolist()) / n_agents
        if diverged:
            return j, rec_pos, True
        if (t + 1) % stride == 0 or t + 1 == horizon:
            _record(theta_bar, ref, r_glob[0], r_ref, t + 1, out_t, out_err, out_err_r, rec_pos)
            rec_pos += 1
    return n_rounds, rec_pos, False


def run_expected(mats, bvecs, vvecs, rstars, theta, theta_bar, r_local, r_glob,
                 t0, n_rounds, beta_exp, use_r, ref, r_ref, stride, horizon,
                 out_t, out_err, out_err_r, rec_pos, sumd):
    n_agents, d, _ = mats.shape
    flat = np.ascontiguousarray(mats.reshape(n_agents * d, d))
    for j in range(n_rounds):
        t = t0 + j
        t_next = float(t + 1)
        beta_t = t_next ** (-beta_exp)
        r_t = float(r_glob[0]) if use_r else 0.0
        m_theta = _seq_rowdot(flat, theta).reshape(n_agents, d)
        if use_r:
            deltas = (bvecs - vvecs * r_t) - m_theta
        else:
            deltas = bvecs - m_theta
        sumd[:] = _seq_reduce(deltas)
        if use_r:
            r_local[:] = r_local + (rstars - r_local) / t_next
        diverged = _finish_round(theta, theta_bar, sumd, beta_t / n_agents, t_next)
        if use_r:
            r_glob[0] = _seq_sum(r_local.tolist()) / n_agents
        if diverged:
            return j, rec_pos, True
        if (t + 1) % stride == 0 or t + 1 == horizon:
            _record(theta_bar, ref, r_glob[0], r_ref, t + 1, out_t, out_err, out_err_r, rec_pos)
            rec_pos += 1
    return n_rounds, rec_pos, False

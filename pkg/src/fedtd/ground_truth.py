"""Exact fixed points of the federated TD recursions and heterogeneity-gap constants.

Everything here is dense linear algebra on small matrices: these values are
the reference every convergence measurement is taken against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericalError
from .mdp import (
    Mdp,
    Policy,
    StationaryDistribution,
    induce_chain,
    stationary_distribution,
)

RESIDUAL_TOL = 1e-10
PD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class AgentSolution:
    d_mu: StationaryDistribution
    r_star: float
    a_mat: np.ndarray
    ups_mat: np.ndarray
    b_vec: np.ndarray
    v_vec: np.ndarray
    theta_star: np.ndarray
    vartheta_star: np.ndarray
    gamma: float = 0.0

    @property
    def d(self) -> int:
        return self.b_vec.shape[0]

    @property
    def lambda_min_a(self) -> float:
        return _lambda_min_sym(self.a_mat)

    @property
    def lambda_min_ups(self) -> float:
        return _lambda_min_sym(self.ups_mat)


@dataclass(frozen=True, eq=False)
class GlobalSolution:
    a_bar: np.ndarray
    b_bar: np.ndarray
    v_bar: np.ndarray
    r_star_bar: float
    theta_star_bar: np.ndarray
    lambda_min_sym: float
    ups_bar: np.ndarray | None = None
    vartheta_star_bar: np.ndarray | None = None


@dataclass(frozen=True)
class GapConstants:
    c_d: float
    a_eps: float
    b_eps: float
    h_r: float
    h_theta: float
    ups_eps: float
    h_hat: float
    h_theta_vacuous: bool = False
    h_hat_vacuous: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _lambda_min_sym(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(m + m.T).min())


def _solve_refined(m: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    """LU solve plus one step of iterative refinement, residual-checked."""
    try:
        lu = scipy.linalg.lu_factor(m, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"{name}: factorization failed ({exc})", name) from exc
    x = scipy.linalg.lu_solve(lu, rhs)
    x = x + scipy.linalg.lu_solve(lu, rhs - m @ x)
    residual = float(np.linalg.norm(m @ x - rhs))
    if not residual <= RESIDUAL_TOL:
        raise NumericalError(f"{name}: residual {residual:.3e} exceeds {RESIDUAL_TOL}", name, residual)
    return x


def solve_agent(mdp: Mdp, policy: Policy, phi, gamma: float = 0.0) -> AgentSolution:
    """Fixed points for one agent under both criteria.

    ``phi`` may be a FeatureMatrix or a raw (n_states, d) array.
    """
    phi = np.asarray(getattr(phi, "phi", phi), dtype=np.float64)
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma!r}", "gamma")
    if phi.shape[0] != mdp.n_states:
        raise ConfigError("feature matrix row count does not match n_states", "phi")

    chain = induce_chain(mdp, policy)
    dist = stationary_distribution(chain)
    n = mdp.n_states
    p, r = chain.p_mu, chain.r_mu
    dphi = dist.d[:, None] * phi
    a_mat = dphi.T @ (phi - p @ phi)
    ups_mat = dphi.T @ (phi - gamma * (p @ phi))
    v_vec = dphi.T @ np.ones(n)
    b_vec = dphi.T @ r
    r_star = float(dist.d @ r)

    lam_a = _lambda_min_sym(a_mat)
    if not lam_a > PD_TOL:
        raise NumericalError(f"lambda_min(A + A^T) = {lam_a:.3e} is not positive", "A_i")
    lam_u = _lambda_min_sym(ups_mat)
    if not lam_u > PD_TOL:
        raise NumericalError(f"lambda_min(U + U^T) = {lam_u:.3e} is not positive", "Upsilon_i")

    theta = _solve_refined(a_mat, b_vec - v_vec * r_star, "theta_star")
    vartheta = _solve_refined(ups_mat, b_vec, "vartheta_star")
    return AgentSolution(dist, r_star, a_mat, ups_mat, b_vec, v_vec, theta, vartheta, gamma)


def solve_global(solutions) -> GlobalSolution:
    solutions = list(solutions)
    if not solutions:
        raise ConfigError("need at least one agent solution", "solutions")
    d = solutions[0].d
    if any(s.d != d for s in solutions):
        raise ConfigError("agent solutions disagree on feature dimension", "solutions")
    a_bar = np.mean([s.a_mat for s in solutions], axis=0)
    b_bar = np.mean([s.b_vec for s in solutions], axis=0)
    v_bar = np.mean([s.v_vec for s in solutions], axis=0)
    ups_bar = np.mean([s.ups_mat for s in solutions], axis=0)
    r_bar = float(np.mean([s.r_star for s in solutions]))
    lam = _lambda_min_sym(a_bar)
    if not lam > PD_TOL:
        raise NumericalError(f"lambda_min(A + A^T) = {lam:.3e} is not positive", "A")
    theta = _solve_refined(a_bar, b_bar - v_bar * r_bar, "theta_star")
    vartheta = _solve_refined(ups_bar, b_bar, "vartheta_star")
    return GlobalSolution(a_bar, b_bar, v_bar, r_bar, theta, lam, ups_bar, vartheta)


def gap_constants(budget, n_states: int, r_max: float, solutions) -> GapConstants:
    """Heterogeneity-gap constants, with spectral norms and condition numbers.

    H_theta / H_hat are +inf (and flagged vacuous) when the perturbation
    radius kappa * A(eps_p) reaches the matrix norm.
    """
    eps_p, eps_r = float(budget.eps_p), float(budget.eps_r)
    if not 0.0 <= eps_p < 1.0:
        raise ConfigError(f"eps_p must lie in [0, 1), got {eps_p!r}", "eps_p")
    root_s = math.sqrt(n_states)
    c_d = ((1.0 + eps_p) / (1.0 - eps_p)) ** n_states - 1.0
    a_eps = eps_p * root_s + c_d * (1.0 + root_s)
    ups_eps = a_eps
    b_eps = root_s * (eps_r + c_d * r_max)
    h_r = 2.0 * (eps_r + r_max * c_d) ** 2

    solutions = list(solutions)
    h_theta, vac_theta = _perturbation_gap(
        [(s.a_mat, s.theta_star, s.b_vec - s.v_vec * s.r_star) for s in solutions], a_eps, b_eps
    )
    h_hat, vac_hat = _perturbation_gap(
        [(s.ups_mat, s.vartheta_star, s.b_vec) for s in solutions], ups_eps, b_eps
    )
    return GapConstants(c_d, a_eps, b_eps, h_r, h_theta, ups_eps, h_hat, vac_theta, vac_hat)


def _perturbation_gap(items, mat_eps: float, rhs_eps: float) -> tuple[float, bool]:
    worst, vacuous = 0.0, False
    for m, x, rhs in items:
        if mat_eps == 0.0 and rhs_eps == 0.0:
            continue
        norm = float(np.linalg.norm(m, 2))
        kappa = float(np.linalg.cond(m, 2))
        denom = norm - kappa * mat_eps
        if denom <= 0.0:
            worst, vacuous = math.inf, True
            continue
        rhs_norm = float(np.linalg.norm(rhs))
        if rhs_eps == 0.0:
            rhs_term = 0.0
        elif rhs_norm == 0.0:
            rhs_term = math.inf
        else:
            rhs_term = rhs_eps**2 / rhs_norm**2
        bracket = mat_eps**2 / norm**2 + rhs_term
        value = 2.0 * kappa**2 * norm**2 * float(x @ x) / denom**2 * bracket
        if math.isnan(value):
            value = math.inf
        worst = max(worst, value)
    return worst, vacuous

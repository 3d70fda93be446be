# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the federated TD recursions.

Both kernels advance one run by a block of synchronous rounds, updating the
state arrays in place. Floating-point operations are ordered exactly as in
``fedtd._kernels_py`` (sequential dot products, agent-ordered reductions) so
the two backends produce identical traces.
"""

from libc.math cimport pow, isfinite


cdef inline Py_ssize_t _draw(const double* cdf, Py_ssize_t n, double u) noexcept nogil:
    # first index with cdf[j] > u, i.e. searchsorted(cdf, u, side="right")
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    if lo >= n:
        lo = n - 1
    return lo


cdef inline double _dot(const double* x, const double* y, Py_ssize_t n) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t k
    for k in range(n):
        acc = acc + x[k] * y[k]
    return acc


cdef inline int _finish_round(double[::1] theta, double[::1] theta_bar, double[::1] sumd,
                              double step, double t_next) noexcept nogil:
    cdef Py_ssize_t k, d = theta.shape[0]
    cdef double old, norm_sq = 0.0
    for k in range(d):
        old = theta[k]
        theta[k] = old + step * sumd[k]
        theta_bar[k] = theta_bar[k] + (old - theta_bar[k]) / t_next
        norm_sq = norm_sq + theta[k] * theta[k]
    return not (isfinite(norm_sq) and norm_sq <= 1e24)


cdef inline void _record(double[::1] theta_bar, const double[::1] ref, double r_glob,
                         double r_ref, long long t_next, long long[::1] out_t,
                         double[::1] out_err, double[::1] out_err_r, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t k
    cdef double diff, err = 0.0
    for k in range(theta_bar.shape[0]):
        diff = theta_bar[k] - ref[k]
        err = err + diff * diff
    out_t[pos] = t_next
    out_err[pos] = err
    out_err_r[pos] = (r_glob - r_ref) * (r_glob - r_ref)


def run_sampled(const double[:, ::1] pi_cdf, const double[:, :, :, ::1] p_cdf,
                const double[:, :, ::1] rewards, const double[:, ::1] phi,
                const double[:, ::1] d_cdf, bint iid,
                const double[:, :, ::1] uniforms, long long[::1] states,
                double[::1] theta, double[::1] theta_bar,
                double[::1] r_local, double[::1] r_glob,
                long long t0, double beta_exp, double gamma_coef, bint use_r,
                const double[::1] ref, double r_ref, long long stride, long long horizon,
                long long[::1] out_t, double[::1] out_err, double[::1] out_err_r,
                Py_ssize_t rec_pos, double[::1] sumd):
    """Advance ``uniforms.shape[1]`` rounds of sampled federated TD(0).

    Returns ``(rounds_done, rec_pos, diverged)``.
    """
    cdef Py_ssize_t n_agents = p_cdf.shape[0]
    cdef Py_ssize_t n_states = p_cdf.shape[1]
    cdef Py_ssize_t n_actions = p_cdf.shape[2]
    cdef Py_ssize_t d = phi.shape[1]
    cdef Py_ssize_t n_rounds = uniforms.shape[1]
    cdef Py_ssize_t j, i, k, s, a, s_next, off
    cdef long long t
    cdef double beta_t, r_t, reward, coef, ds, dn, acc
    cdef double t_next
    cdef int diverged = 0

    with nogil:
        for j in range(n_rounds):
            t = t0 + j
            t_next = <double>(t + 1)
            beta_t = pow(t_next, -beta_exp)
            r_t = r_glob[0] if use_r else 0.0
            for k in range(d):
                sumd[k] = 0.0
            for i in range(n_agents):
                off = 0
                if iid:
                    s = _draw(&d_cdf[i, 0], n_states, uniforms[i, j, 0])
                    off = 1
                else:
                    s = states[i]
                a = _draw(&pi_cdf[s, 0], n_actions, uniforms[i, j, off])
                s_next = _draw(&p_cdf[i, s, a, 0], n_states, uniforms[i, j, off + 1])
                states[i] = s_next
                reward = rewards[i, s, a]
                ds = _dot(&phi[s, 0], &theta[0], d)
                dn = _dot(&phi[s_next, 0], &theta[0], d)
                coef = (reward - r_t) + gamma_coef * dn - ds
                for k in range(d):
                    sumd[k] = sumd[k] + coef * phi[s, k]
                if use_r:
                    r_local[i] = r_local[i] + (reward - r_local[i]) / t_next
            diverged = _finish_round(theta, theta_bar, sumd, beta_t / n_agents, t_next)
            if use_r:
                acc = 0.0
                for i in range(n_agents):
                    acc = acc + r_local[i]
                r_glob[0] = acc / n_agents
            if diverged:
                break
            if (t + 1) % stride == 0 or t + 1 == horizon:
                _record(theta_bar, ref, r_glob[0], r_ref, t + 1, out_t, out_err, out_err_r, rec_pos)
                rec_pos += 1
    if diverged:
        return j, rec_pos, True
    return n_rounds, rec_pos, False


def run_expected(const double[:, :, ::1] mats, const double[:, ::1] bvecs,
                 const double[:, ::1] vvecs, const double[::1] rstars,
                 double[::1] theta, double[::1] theta_bar,
                 double[::1] r_local, double[::1] r_glob,
                 long long t0, Py_ssize_t n_rounds, double beta_exp, bint use_r,
                 const double[::1] ref, double r_ref, long long stride, long long horizon,
                 long long[::1] out_t, double[::1] out_err, double[::1] out_err_r,
                 Py_ssize_t rec_pos, double[::1] sumd):
    """Advance ``n_rounds`` rounds with every agent's update replaced by its mean.

    Agent i contributes b_i - v_i r_t - M_i theta (M_i = A_i) when ``use_r``
    and b_i - M_i theta (M_i = Upsilon_i) otherwise; its reward sample is r_i*.
    """
    cdef Py_ssize_t n_agents = mats.shape[0]
    cdef Py_ssize_t d = mats.shape[1]
    cdef Py_ssize_t j, i, k
    cdef long long t
    cdef double beta_t, r_t, delta, acc, t_next
    cdef int diverged = 0

    with nogil:
        for j in range(n_rounds):
            t = t0 + j
            t_next = <double>(t + 1)
            beta_t = pow(t_next, -beta_exp)
            r_t = r_glob[0] if use_r else 0.0
            for k in range(d):
                sumd[k] = 0.0
            for i in range(n_agents):
                for k in range(d):
                    if use_r:
                        delta = (bvecs[i, k] - vvecs[i, k] * r_t) - _dot(&mats[i, k, 0], &theta[0], d)
                    else:
                        delta = bvecs[i, k] - _dot(&mats[i, k, 0], &theta[0], d)
                    sumd[k] = sumd[k] + delta
                if use_r:
                    r_local[i] = r_local[i] + (rstars[i] - r_local[i]) / t_next
            diverged = _finish_round(theta, theta_bar, sumd, beta_t / n_agents, t_next)
            if use_r:
                acc = 0.0
                for i in range(n_agents):
                    acc = acc + r_local[i]
                r_glob[0] = acc / n_agents
            if diverged:
                break
            if (t + 1) % stride == 0 or t + 1 == horizon:
                _record(theta_bar, ref, r_glob[0], r_ref, t + 1, out_t, out_err, out_err_r, rec_pos)
                rec_pos += 1
    if diverged:
        return j, rec_pos, True
    return n_rounds, rec_pos, False

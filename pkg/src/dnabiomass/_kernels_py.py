"""Pure-Python (numpy) backend for the sampler's hot kernels.

Three kernels dominate sweep cost: the batched scalar Laplace-MH for
log-concave targets of the form -w(x-m)^2/2 - Ax - B exp(-x), the paired
factor-average version of the same family, and the sequential site/species
scan for the latent biomass matrix. All three consume pre-drawn standard
normals and log-uniforms so that the kernel itself is deterministic; only
the Polya-Gamma draws consume the generator directly.

The compiled extension (dnabiomass._kernels) exports the same interface.
"""

from __future__ import annotations

import numpy as np

from .pg import pg_vector

__all__ = [
    "pg_draws",
    "exp_family_laplace",
    "factor_pair_laplace",
    "lbar_scan",
]

_GRAD_TOL = 1e-10
_MAX_HALVINGS = 50


def pg_draws(c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """PG(1, c_i) draws for a batch of tilts."""
    return pg_vector(c, rng)


def _exp_neg(x):
    return np.exp(np.minimum(-x, 690.0))


def _exp_logf(x, w0, m0, a_lin, b_exp):
    return -0.5 * w0 * (x - m0) ** 2 - a_lin * x - b_exp * _exp_neg(x)


def _exp_newton(x0, w0, m0, a_lin, b_exp, max_iter):
    """Damped Newton ascent of the exponential-family log target."""
    mode = np.array(x0, dtype=float, copy=True)
    f = _exp_logf(mode, w0, m0, a_lin, b_exp)
    converged = np.zeros(mode.shape, dtype=bool)
    for _ in range(max_iter):
        e = b_exp * _exp_neg(mode)
        grad = -w0 * (mode - m0) - a_lin + e
        converged = np.abs(grad) < _GRAD_TOL * (1.0 + np.abs(f))
        if np.all(converged):
            break
        step = grad / (w0 + e)
        new = mode + step
        fn = _exp_logf(new, w0, m0, a_lin, b_exp)
        bad = ~(fn >= f - 1e-12) & ~converged
        for _ in range(_MAX_HALVINGS):
            if not np.any(bad):
                break
            step = np.where(bad, 0.5 * step, step)
            new = np.where(bad, mode + step, new)
            fn = np.where(bad, _exp_logf(new, w0, m0, a_lin, b_exp), fn)
            bad = ~(fn >= f - 1e-12) & ~converged
        keep = converged | bad
        mode = np.where(keep, mode, new)
        f = np.where(keep, f, fn)
    return mode, converged


def exp_family_laplace(x, w0, m0, a_lin, b_exp, z, log_u, max_iter=20):
    """Batched Laplace independence MH for -w(x-m)^2/2 - Ax - B e^(-x).

    Proposes from the Gaussian fitted at the target mode (found by damped
    Newton) and applies the two-sided MH correction. Elements whose Newton
    iteration did not converge fall back to a symmetric random-walk step
    scaled by the local curvature. Returns (new_x, accepted).
    """
    x = np.asarray(x, dtype=float)
    mode, converged = _exp_newton(x, w0, m0, a_lin, b_exp, max_iter)

    curv = w0 + b_exp * _exp_neg(mode)
    sd = 1.0 / np.sqrt(curv)
    f_cur = _exp_logf(x, w0, m0, a_lin, b_exp)

    prop_lap = mode + sd * z
    log_ratio_lap = (
        _exp_logf(prop_lap, w0, m0, a_lin, b_exp)
        - f_cur
        + 0.5 * ((prop_lap - mode) / sd) ** 2
        - 0.5 * ((x - mode) / sd) ** 2
    )

    curv_cur = w0 + b_exp * _exp_neg(x)
    sd_cur = 1.0 / np.sqrt(curv_cur)
    prop_rw = x + sd_cur * z
    log_ratio_rw = _exp_logf(prop_rw, w0, m0, a_lin, b_exp) - f_cur

    prop = np.where(converged, prop_lap, prop_rw)
    log_ratio = np.where(converged, log_ratio_lap, log_ratio_rw)
    accepted = log_u < log_ratio
    return np.where(accepted, prop, x), accepted


def _pair_logf(v, u, wv, mv, wu, a1, b1, a2, b2):
    t = v + u
    return (
        -0.5 * wv * (v - mv) ** 2
        - 0.5 * wu * u**2
        - a1 * t
        - b1 * _exp_neg(t)
        - a2 * u
        - b2 * _exp_neg(u)
    )


def factor_pair_laplace(
    v, u, wv, mv, wu, a1, b1, a2, b2, z1, z2, log_u, max_iter=20
):
    """Batched 2-d Laplace independence MH for the factor-average pair.

    The target couples the pair through the shared sum v + u (one
    exponential-family block) plus a second block in u alone. The 2x2
    Newton system is solved in closed form; the proposal is the Gaussian
    at the mode with the negative inverse Hessian as covariance. Returns
    (new_v, new_u, accepted).
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    mv_mode = v.copy()
    mu_mode = u.copy()
    f = _pair_logf(mv_mode, mu_mode, wv, mv, wu, a1, b1, a2, b2)
    converged = np.zeros(v.shape, dtype=bool)
    for _ in range(max_iter):
        e1 = b1 * _exp_neg(mv_mode + mu_mode)
        e2 = b2 * _exp_neg(mu_mode)
        gv = -wv * (mv_mode - mv) - a1 + e1
        gu = -wu * mu_mode - a1 + e1 - a2 + e2
        converged = np.maximum(np.abs(gv), np.abs(gu)) < _GRAD_TOL * (
            1.0 + np.abs(f)
        )
        if np.all(converged):
            break
        h11 = wv + e1
        h12 = e1
        h22 = wu + e1 + e2
        det = h11 * h22 - h12 * h12
        sv = (h22 * gv - h12 * gu) / det
        su = (h11 * gu - h12 * gv) / det
        new_v = mv_mode + sv
        new_u = mu_mode + su
        fn = _pair_logf(new_v, new_u, wv, mv, wu, a1, b1, a2, b2)
        bad = ~(fn >= f - 1e-12) & ~converged
        for _ in range(_MAX_HALVINGS):
            if not np.any(bad):
                break
            sv = np.where(bad, 0.5 * sv, sv)
            su = np.where(bad, 0.5 * su, su)
            new_v = np.where(bad, mv_mode + sv, new_v)
            new_u = np.where(bad, mu_mode + su, new_u)
            fn = np.where(
                bad, _pair_logf(new_v, new_u, wv, mv, wu, a1, b1, a2, b2), fn
            )
            bad = ~(fn >= f - 1e-12) & ~converged
        keep = converged | bad
        mv_mode = np.where(keep, mv_mode, new_v)
        mu_mode = np.where(keep, mu_mode, new_u)
        f = np.where(keep, f, fn)

    e1 = b1 * _exp_neg(mv_mode + mu_mode)
    e2 = b2 * _exp_neg(mu_mode)
    h11 = wv + e1
    h12 = e1
    h22 = wu + e1 + e2
    det = h11 * h22 - h12 * h12
    c11 = h22 / det
    c12 = -h12 / det
    c22 = h11 / det
    l11 = np.sqrt(c11)
    l21 = c12 / l11
    l22 = np.sqrt(np.maximum(c22 - l21 * l21, 1e-300))

    prop_v = mv_mode + l11 * z1
    prop_u = mu_mode + l21 * z1 + l22 * z2

    def log_q(xv, xu):
        t1 = (xv - mv_mode) / l11
        t2 = (xu - mu_mode - l21 * t1) / l22
        return -np.log(l11 * l22) - 0.5 * (t1 * t1 + t2 * t2)

    f_cur = _pair_logf(v, u, wv, mv, wu, a1, b1, a2, b2)
    log_ratio_lap = (
        _pair_logf(prop_v, prop_u, wv, mv, wu, a1, b1, a2, b2)
        - f_cur
        + log_q(v, u)
        - log_q(prop_v, prop_u)
    )

    # Curvature-scaled symmetric fallback for unconverged elements.
    e1c = b1 * _exp_neg(v + u)
    e2c = b2 * _exp_neg(u)
    rw_v = v + z1 / np.sqrt(wv + e1c)
    rw_u = u + z2 / np.sqrt(wu + e1c + e2c)
    log_ratio_rw = _pair_logf(rw_v, rw_u, wv, mv, wu, a1, b1, a2, b2) - f_cur

    pv = np.where(converged, prop_v, rw_v)
    pu = np.where(converged, prop_u, rw_u)
    log_ratio = np.where(converged, log_ratio_lap, log_ratio_rw)
    accepted = log_u < log_ratio
    return np.where(accepted, pv, v), np.where(accepted, pu, u), accepted


def _site_logistic_terms(x, phi1_s, base, delta, weight):
    """Sum of Bernoulli log-likelihood terms and derivatives at x."""
    psi = phi1_s * x + base
    # log(1 + e^psi) evaluated stably
    log1p_exp = np.logaddexp(0.0, psi)
    prob = 1.0 / (1.0 + np.exp(-psi))
    f = np.sum(weight * (delta * psi - log1p_exp))
    g = phi1_s * np.sum(weight * (delta - prob))
    h = -phi1_s * phi1_s * np.sum(weight * prob * (1.0 - prob))
    return f, g, h


def lbar_scan(
    L,
    prior_mean,
    row_solves,
    row_scalars,
    col_solves,
    col_scalars,
    w_data,
    lin_data,
    phi1,
    base,
    delta,
    active,
    site_sample_start,
    z,
    log_u,
    max_iter=20,
):
    """Sequential Laplace-MH scan over every latent biomass entry.

    For entry (site i, species s) the conditional prior comes from the
    leave-one-out solves of the row and column covariances; Gaussian data
    terms (precision w_data, linear coefficient lin_data) fold into the
    quadratic part, and Bernoulli detection terms enter through the
    logistic pieces. L is updated in place entry by entry so later
    conditionals see earlier accepted moves. Returns the accepted mask.
    """
    n, n_sp = L.shape
    diff = L - prior_mean
    accepted = np.zeros((n, n_sp), dtype=bool)
    for s in range(n_sp):
        w_col = col_solves[s]
        phi1_s = phi1[s]
        for i in range(n):
            a_vec = row_solves[i] @ diff
            cond_mean = prior_mean[i, s] + a_vec[s] + (diff[i] - a_vec) @ w_col
            cond_var = max(row_scalars[i] * col_scalars[s], 1e-12)

            w_prior = 1.0 / cond_var
            w_quad = w_prior + w_data[i, s]
            m_quad = (w_prior * cond_mean + lin_data[i, s]) / w_quad

            lo = site_sample_start[i]
            hi = site_sample_start[i + 1]
            d_vec = delta[lo:hi, s]
            b_vec = base[lo:hi, s]
            wt = active[lo:hi]

            def logf(x):
                f, _, _ = _site_logistic_terms(x, phi1_s, b_vec, d_vec, wt)
                return -0.5 * w_quad * (x - m_quad) ** 2 + f

            x_cur = L[i, s]
            mode = x_cur
            f_mode, g, h = _site_logistic_terms(
                mode, phi1_s, b_vec, d_vec, wt
            )
            f_mode += -0.5 * w_quad * (mode - m_quad) ** 2
            ok = False
            for _ in range(max_iter):
                grad = -w_quad * (mode - m_quad) + g
                if abs(grad) < _GRAD_TOL * (1.0 + abs(f_mode)):
                    ok = True
                    break
                step = grad / (w_quad - h)
                new = mode + step
                fn = logf(new)
                n_halv = 0
                while not fn >= f_mode - 1e-12:
                    step *= 0.5
                    new = mode + step
                    fn = logf(new)
                    n_halv += 1
                    if n_halv > _MAX_HALVINGS:
                        break
                if n_halv > _MAX_HALVINGS:
                    break
                mode = new
                f_mode = fn
                _, g, h = _site_logistic_terms(
                    mode, phi1_s, b_vec, d_vec, wt
                )

            f_cur = logf(x_cur)
            if ok:
                _, _, h_mode = _site_logistic_terms(
                    mode, phi1_s, b_vec, d_vec, wt
                )
                sd = 1.0 / np.sqrt(w_quad - h_mode)
                prop = mode + sd * z[i, s]
                log_ratio = (
                    logf(prop)
                    - f_cur
                    + 0.5 * ((prop - mode) / sd) ** 2
                    - 0.5 * ((x_cur - mode) / sd) ** 2
                )
            else:
                _, _, h_cur = _site_logistic_terms(
                    x_cur, phi1_s, b_vec, d_vec, wt
                )
                sd = 1.0 / np.sqrt(w_quad - h_cur)
                prop = x_cur + sd * z[i, s]
                log_ratio = logf(prop) - f_cur

            if log_u[i, s] < log_ratio:
                L[i, s] = prop
                diff[i, s] = prop - prior_mean[i, s]
                accepted[i, s] = True
    return accepted

"""Generic Laplace-approximation Metropolis-Hastings step.

Finds the mode of a log-concave (near the mode) target by damped Newton
iteration with finite-difference derivatives, proposes from the Gaussian
whose covariance is the negative inverse Hessian at the mode, and applies
the two-sided MH correction. When mode finding fails (non-concave region,
iteration cap), the step falls back to a symmetric random walk so the
chain always has a valid transition.

The batch sampler uses specialised analytic kernels for its hot paths;
this routine is the general-purpose reference used for scalar or small
vector targets.
"""

from __future__ import annotations

import numpy as np

__all__ = ["laplace_mh_step"]


def _fd_grad_hess(log_target, x):
    """Central-difference gradient and Hessian at x."""
    d = x.size
    h = 1e-5 * (1.0 + np.abs(x))
    grad = np.empty(d)
    hess = np.empty((d, d))
    f0 = log_target(x)
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h[a]
        f_plus = log_target(x + ea)
        f_minus = log_target(x - ea)
        grad[a] = (f_plus - f_minus) / (2.0 * h[a])
        hess[a, a] = (f_plus - 2.0 * f0 + f_minus) / (h[a] * h[a])
    for a in range(d):
        for b in range(a + 1, d):
            ea = np.zeros(d)
            eb = np.zeros(d)
            ea[a] = h[a]
            eb[b] = h[b]
            fpp = log_target(x + ea + eb)
            fpm = log_target(x + ea - eb)
            fmp = log_target(x - ea + eb)
            fmm = log_target(x - ea - eb)
            hess[a, b] = hess[b, a] = (fpp - fpm - fmp + fmm) / (
                4.0 * h[a] * h[b]
            )
    return f0, grad, hess


def laplace_mh_step(
    log_target,
    current,
    rng: np.random.Generator,
    max_iter: int = 20,
    fallback_scale: float = 0.5,
):
    """One MH step with a Laplace-approximation independence proposal.

    Parameters
    ----------
    log_target : callable
        Log density (up to a constant) of a scalar or 1-d array argument.
    current : float or array
        Current state.
    rng : numpy Generator
    max_iter : int
        Newton iteration cap for the mode search.
    fallback_scale : float
        Random-walk scale used when the Laplace fit fails.

    Returns
    -------
    (new_value, accepted) with new_value matching the input shape.
    """
    scalar = np.isscalar(current) or np.ndim(current) == 0
    x = np.atleast_1d(np.asarray(current, dtype=float)).copy()
    d = x.size

    def target(vec):
        val = log_target(vec[0] if scalar else vec)
        return float(val)

    mode = x.copy()
    f_mode, grad, hess = _fd_grad_hess(target, mode)
    fitted = False
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < 1e-8 * (1.0 + abs(f_mode)):
            fitted = True
            break
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        new = mode + step
        f_new = target(new)
        halved = 0
        while not f_new >= f_mode - 1e-12:
            step *= 0.5
            new = mode + step
            f_new = target(new)
            halved += 1
            if halved > 50:
                break
        if halved > 50:
            break
        mode = new
        f_mode, grad, hess = _fd_grad_hess(target, mode)
    else:
        fitted = np.max(np.abs(grad)) < 1e-6 * (1.0 + abs(f_mode))

    chol = None
    if fitted:
        try:
            chol = np.linalg.cholesky(-hess)
        except np.linalg.LinAlgError:
            chol = None

    f_cur = target(x)
    if chol is not None:
        # Proposal N(mode, (-H)^-1); draw via the Cholesky of the precision.
        zvec = rng.standard_normal(d)
        prop = mode + np.linalg.solve(chol.T, zvec)

        def log_q(v):
            t = chol.T @ (v - mode)
            return float(np.sum(np.log(np.diag(chol))) - 0.5 * t @ t)

        log_ratio = target(prop) - f_cur + log_q(x) - log_q(prop)
    else:
        prop = x + fallback_scale * rng.standard_normal(d)
        log_ratio = target(prop) - f_cur

    accepted = np.log(rng.random()) < log_ratio
    out = prop if accepted else x
    return (float(out[0]) if scalar else out), bool(accepted)

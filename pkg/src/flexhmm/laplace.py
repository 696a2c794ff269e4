"""Damped Newton minimization and Laplace-approximated log integrals.

The inner problem of the nested estimation scheme minimizes the penalized
objective over the coefficient vector at fixed outer parameters. The
minimizer here is a plain Newton iteration hardened in two ways:

  * Levenberg-style ridge damping when the Hessian is not positive
    definite (or when a step fails the line search), escalating by
    factors of 10;
  * Armijo backtracking on every step.

Given the optimum, ``laplace_log_integral`` assembles the approximate
negative log integral of exp(-objective) against the implied normal prior:

    value(x_hat) - 0.5 * logdet(prior precision) + 0.5 * logdet(Hessian)

All (2 pi) constants cancel between the prior normalization and the
Gaussian integral, so none appear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NewtonError(RuntimeError):
    """Inner optimization failure; carries the best iterate seen."""

    def __init__(self, message: str, best_x: np.ndarray, best_value: float):
        super().__init__(message)
        self.best_x = best_x
        self.best_value = best_value


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    grad_norm: float
    hessian: np.ndarray
    n_iter: int
    converged: bool


def newton_minimize(
    value_fn,
    grad_fn,
    hess_fn,
    x0,
    tol: float = 1e-6,
    max_iter: int = 200,
    max_backtracks: int = 30,
) -> NewtonResult:
    """Minimize a smooth function with damped Newton steps.

    Convergence means the gradient sup-norm drops below tol. Exceeding
    max_iter, or failing to find any acceptable step, raises NewtonError
    with the best iterate attached.
    """
    x = np.asarray(x0, dtype=float).copy()
    P = x.size
    fx = float(value_fn(x))
    if not np.isfinite(fx):
        raise NewtonError("objective not finite at the starting point", x, fx)
    best_x, best_f = x.copy(), fx

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        g = np.asarray(grad_fn(x), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NewtonError("gradient not finite", best_x, best_f)
        if np.max(np.abs(g)) <= tol:
            H = np.asarray(hess_fn(x), dtype=float)
            return NewtonResult(x, fx, float(np.max(np.abs(g))), H, n_iter - 1, True)

        H = np.asarray(hess_fn(x), dtype=float)
        base = 1e-6 * max(float(np.mean(np.abs(np.diag(H)))), 1e-8)
        nu = 0.0
        accepted = False
        while not accepted:
            try:
                cf = scipy.linalg.cho_factor(
                    H + nu * np.eye(P), lower=True, check_finite=False
                )
                p = scipy.linalg.cho_solve(cf, -g, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                nu = base if nu == 0.0 else nu * 10.0
                if nu > 1e12 * base:
                    raise NewtonError(
                        "Hessian damping exhausted", best_x, best_f
                    ) from None
                continue
            slope = float(g @ p)
            t = 1.0
            for _ in range(max_backtracks):
                xn = x + t * p
                fn = float(value_fn(xn))
                if np.isfinite(fn) and fn <= fx + 1e-4 * t * slope:
                    x, fx = xn, fn
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                nu = base if nu == 0.0 else nu * 10.0
                if nu > 1e12 * base:
                    raise NewtonError(
                        "line search failed at maximal damping", best_x, best_f
                    )
        if fx < best_f:
            best_x, best_f = x.copy(), fx

    g = np.asarray(grad_fn(x), dtype=float)
    if np.max(np.abs(g)) <= tol:
        H = np.asarray(hess_fn(x), dtype=float)
        return NewtonResult(x, fx, float(np.max(np.abs(g))), H, n_iter, True)
    raise NewtonError(
        f"inner Newton did not converge in {max_iter} iterations "
        f"(|grad| = {np.max(np.abs(g)):.3g})",
        best_x,
        best_f,
    )


def chol_logdet(H: np.ndarray) -> float:
    """log det of a positive definite matrix via Cholesky; tries a tiny
    escalating ridge first, then raises."""
    H = np.asarray(H, dtype=float)
    P = H.shape[0]
    if P == 0:
        return 0.0
    scale = max(np.mean(np.abs(np.diag(H))), 1e-30)
    for jitter in (0.0, 1e-10 * scale, 1e-8 * scale):
        try:
            L = np.linalg.cholesky(H + jitter * np.eye(P))
            return float(2.0 * np.sum(np.log(np.diag(L))))
        except np.linalg.LinAlgError:
            continue
    raise NewtonError(
        "curvature matrix not positive definite at the inner optimum",
        np.zeros(P),
        np.nan,
    )


def laplace_log_integral(
    value_at_mode: float, logdet_prior_precision: float, hessian: np.ndarray
) -> float:
    """Negative log of the Laplace-approximated integral.

    value_at_mode is the minimized objective (which already includes the
    prior quadratic form), logdet_prior_precision the log determinant of
    the normal prior's precision, hessian the curvature at the optimum.
    """
    return value_at_mode - 0.5 * logdet_prior_precision + 0.5 * chol_logdet(hessian)

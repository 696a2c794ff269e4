"""Likelihood evaluation and the nested estimation scheme.

Estimation maximizes a marginal likelihood in two nested optimizations:
an inner damped-Newton solve for the penalized coefficients at fixed
outer parameters (warm-started between evaluations), wrapped by a
derivative-free or finite-difference outer optimizer over fixed effects,
log smoothing parameters, and initial-state logits.

The covariance of the estimates is assembled from the finite-difference
Hessian of the outer objective, the exact inner curvature, and their
exact cross derivatives, forming a joint precision over (coefficients,
outer parameters) whose inverse propagates inner uncertainty into the
reported intervals. This block assembly is an approximation and is
documented as such.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np
import scipy.cluster.vq
import scipy.optimize

from .data import Dataset
from .dists import NEG
from .frame import LOGLAM_MAX, LOGLAM_MIN, ModelFrame, ParameterSet
from .laplace import NewtonError, chol_logdet, newton_minimize
from .model import FitOptions, ModelSpec

BIG_OBJECTIVE = 1.0e12


@dataclass
class FitResult:
    spec: ModelSpec
    estimates: ParameterSet
    marginal_loglik: float
    convergence: dict
    joint_covariance: np.ndarray | None
    covariance_names: tuple
    frame: ModelFrame = field(repr=False)
    free_covariance: np.ndarray | None = field(repr=False, default=None)
    anchor_outer: np.ndarray = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.convergence.get("status") == "converged"


# --------------------------------------------------------------------------
# helpers


def _anchor_outer(frame: ModelFrame, params: ParameterSet, strict: bool = False):
    """Full outer vector with shared groups collapsed onto their first
    member; with strict=True unequal shared members are an error."""
    psi = frame.outer_full(params)
    if psi.shape != (len(frame.outer_names),):
        raise ValueError(
            "parameter vector lengths do not match this model "
            f"(alpha {frame.p_alpha}, lambda {frame.p_lambda}, delta {frame.p_delta})"
        )
    out = psi.copy()
    for i, r in enumerate(frame.psi_root):
        if psi[i] != psi[r]:
            if strict:
                raise ValueError(
                    f"shared parameters {frame.outer_names[r]!r} and "
                    f"{frame.outer_names[i]!r} differ in the starting values"
                )
            out[i] = psi[r]
    return out


def _jdata_with_anchor(frame: ModelFrame, anchor: np.ndarray) -> dict:
    jd = dict(frame.jdata)
    jd["psi_init"] = jnp.asarray(anchor)
    return jd


def _lam_free_slots(frame: ModelFrame) -> np.ndarray:
    slots = set()
    for i in range(frame.p_alpha, frame.p_alpha + frame.p_lambda):
        if not frame.psi_fixed[i]:
            slots.add(int(frame.psi_map[i]))
    return np.asarray(sorted(slots), dtype=int)


def _marginal_at(frame, psi_free, jd, beta0, inner_tol, inner_max_iter):
    """(marginal nll, NewtonResult or None) at one outer point."""
    core = frame.core
    jpsi = jnp.asarray(psi_free)
    if frame.p_beta == 0:
        val = -float(core["loglik"](jpsi, jnp.zeros(0), jd))
        return val, None
    f = lambda b: float(core["inner_obj"](jnp.asarray(b), jpsi, jd))
    g = lambda b: np.asarray(core["inner_grad"](jnp.asarray(b), jpsi, jd))
    h = lambda b: np.asarray(core["inner_hess"](jnp.asarray(b), jpsi, jd))
    res = newton_minimize(
        f, g, h, beta0, tol=inner_tol, max_iter=inner_max_iter
    )
    prior = float(core["logdet_prior"](jpsi, jd))
    val = res.value - 0.5 * prior + 0.5 * chol_logdet(res.hessian)
    return val, res


# --------------------------------------------------------------------------
# public evaluation ops


def forward_loglik(spec: ModelSpec, d: Dataset, params: ParameterSet, frame=None) -> float:
    """Log likelihood with coefficients held at their values in params.

    Returns -inf (with a row diagnostic) when every state has zero density
    at some time point.
    """
    fr = frame or ModelFrame(spec, d)
    anchor = _anchor_outer(fr, params)
    jd = _jdata_with_anchor(fr, anchor)
    psi_free = fr.free_of(anchor)
    cs = np.asarray(
        fr.core["forward_detail"](jnp.asarray(psi_free), jnp.asarray(params.beta), jd)[0]
    )
    if np.min(cs) < NEG / 4:
        row = int(np.argmin(cs))
        warnings.warn(
            f"all state densities vanish at row {row}; log-likelihood is -inf"
        )
        return float("-inf")
    return float(cs.sum())


def penalized_joint_nll(spec: ModelSpec, d: Dataset, params: ParameterSet, frame=None) -> float:
    """Negative log likelihood plus the full smoothness quadratic form
    (sum over blocks of lambda_i * beta_i' S_i beta_i)."""
    fr = frame or ModelFrame(spec, d)
    anchor = _anchor_outer(fr, params)
    jd = _jdata_with_anchor(fr, anchor)
    psi_free = fr.free_of(anchor)
    return float(
        fr.core["penalized_full"](jnp.asarray(psi_free), jnp.asarray(params.beta), jd)
    )


def laplace_marginal_nll(
    spec: ModelSpec,
    d: Dataset,
    alpha,
    log_lambda,
    delta0_logits=None,
    beta0=None,
    frame=None,
    inner_tol: float = 1e-6,
    inner_max_iter: int = 200,
):
    """Marginal negative log likelihood with coefficients integrated out.

    Returns (value, beta_hat, H) where beta_hat minimizes the inner
    objective and H is its curvature there. Without penalty blocks the
    value is just the negative log likelihood and beta_hat/H are empty.
    """
    fr = frame or ModelFrame(spec, d)
    params = ParameterSet(
        alpha=np.asarray(alpha, dtype=float),
        beta=np.zeros(fr.p_beta),
        log_lambda=np.asarray(log_lambda, dtype=float),
        delta0_logits=(
            np.zeros(fr.p_delta)
            if delta0_logits is None
            else np.asarray(delta0_logits, dtype=float)
        ),
        fix_share_map=dict(fr.init.fix_share_map),
    )
    anchor = _anchor_outer(fr, params)
    jd = _jdata_with_anchor(fr, anchor)
    psi_free = fr.free_of(anchor)
    b0 = np.zeros(fr.p_beta) if beta0 is None else np.asarray(beta0, dtype=float)
    val, res = _marginal_at(fr, psi_free, jd, b0, inner_tol, inner_max_iter)
    if res is None:
        return val, np.zeros(0), np.zeros((0, 0))
    return val, res.x, res.hessian


def marginal_loglik(spec, d, params: ParameterSet, frame=None) -> float:
    v, _, _ = laplace_marginal_nll(
        spec, d, params.alpha, params.log_lambda, params.delta0_logits,
        beta0=params.beta, frame=frame,
    )
    return -v


# --------------------------------------------------------------------------
# fitting


def _fd_hessian(f, x: np.ndarray, rel: float = 1e-4) -> np.ndarray:
    p = x.size
    h = rel * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    H = np.zeros((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h[j]
            v = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


def _assemble_covariance(frame, psi_hat, beta_hat, jd, outer_obj, opts):
    """Joint covariance over (beta, free outer) and its embedding into the
    full named parameter vector. Returns (free_cov, full_cov)."""
    p_free, p_beta = frame.p_free, frame.p_beta
    H_m = _fd_hessian(outer_obj, psi_hat)
    projected = False
    if p_beta == 0:
        try:
            free_cov = np.linalg.inv(H_m)
        except np.linalg.LinAlgError:
            warnings.warn("outer Hessian singular; using a pseudo-inverse")
            free_cov = np.linalg.pinv(H_m)
    else:
        jpsi, jb = jnp.asarray(psi_hat), jnp.asarray(beta_hat)
        H_bb = np.asarray(frame.core["inner_hess"](jb, jpsi, jd))
        C = np.asarray(frame.core["cross_hess"](jb, jpsi, jd))  # (p_beta, p_free)
        Hbb_inv_C = np.linalg.solve(H_bb, C)
        Q = np.zeros((p_beta + p_free, p_beta + p_free))
        Q[:p_beta, :p_beta] = H_bb
        Q[:p_beta, p_beta:] = C
        Q[p_beta:, :p_beta] = C.T
        Q[p_beta:, p_beta:] = H_m + C.T @ Hbb_inv_C
        try:
            free_cov = np.linalg.inv(Q)
        except np.linalg.LinAlgError:
            warnings.warn("joint precision singular; using a pseudo-inverse")
            free_cov = np.linalg.pinv(Q)
    free_cov = 0.5 * (free_cov + free_cov.T)
    eig = np.linalg.eigvalsh(free_cov)
    tr = max(np.trace(free_cov), 1e-300)
    if eig[0] <= -1e-6 * tr:
        w, V = np.linalg.eigh(free_cov)
        free_cov = (V * np.clip(w, 0.0, None)) @ V.T
        projected = True

    full_dim = frame.p_alpha + p_beta + frame.p_lambda + frame.p_delta
    col = np.full(full_dim, -1, dtype=int)
    for i in range(len(frame.outer_names)):
        row = i if i < frame.p_alpha else p_beta + i
        if not frame.psi_fixed[i]:
            col[row] = p_beta + frame.psi_map[i]
    for k in range(p_beta):
        col[frame.p_alpha + k] = k
    full_cov = np.zeros((full_dim, full_dim))
    live = np.where(col >= 0)[0]
    full_cov[np.ix_(live, live)] = free_cov[np.ix_(col[live], col[live])]
    return free_cov, full_cov, projected


def covariance_names(frame: ModelFrame) -> tuple:
    return tuple(
        frame.alpha_names
        + frame.beta_names
        + frame.lambda_names
        + frame.delta_names
    )


def fit(
    spec: ModelSpec,
    d: Dataset,
    theta0: ParameterSet | None = None,
    options: FitOptions | None = None,
    frame: ModelFrame | None = None,
) -> FitResult:
    """Estimate the model by maximizing the marginal likelihood.

    Fixed parameters keep the value they have in theta0 (bitwise); shared
    groups stay equal throughout. Non-convergence of the outer optimizer
    sets a status flag on the result instead of raising.
    """
    fr = frame or ModelFrame(spec, d)
    opts = options or spec.options
    p0 = theta0 if theta0 is not None else fr.init
    anchor = _anchor_outer(fr, p0, strict=True)
    jd = _jdata_with_anchor(fr, anchor)
    psi0 = fr.free_of(anchor)
    lam_slots = _lam_free_slots(fr)

    state = {
        "beta_warm": np.asarray(p0.beta, dtype=float).copy()
        if p0.beta.size == fr.p_beta
        else np.zeros(fr.p_beta),
        "best_val": np.inf,
        "best_psi": psi0.copy(),
        "best_beta": np.zeros(fr.p_beta),
        "newton_iters": 0,
        "failures": 0,
    }

    def outer_obj(psi_free):
        v = np.asarray(psi_free, dtype=float).copy()
        if lam_slots.size:
            v[lam_slots] = np.clip(v[lam_slots], LOGLAM_MIN, LOGLAM_MAX)
        try:
            val, res = _marginal_at(
                fr, v, jd, state["beta_warm"], opts.inner_tol, opts.inner_max_iter
            )
        except NewtonError:
            state["failures"] += 1
            return BIG_OBJECTIVE
        if not np.isfinite(val) or val >= BIG_OBJECTIVE:
            return BIG_OBJECTIVE
        if res is not None:
            state["beta_warm"] = res.x
            state["newton_iters"] += res.n_iter
        if val < state["best_val"]:
            state["best_val"] = val
            state["best_psi"] = v.copy()
            state["best_beta"] = res.x.copy() if res is not None else np.zeros(0)
        return val

    f0 = outer_obj(psi0)
    if not np.isfinite(f0) or f0 >= BIG_OBJECTIVE:
        raise ValueError(
            "objective is not finite at the starting values; adjust them "
            "(suggest_initial can propose observation-parameter starts)"
        )

    if opts.method == "nelder-mead":
        res = scipy.optimize.minimize(
            outer_obj,
            psi0,
            method="Nelder-Mead",
            options={
                "maxiter": opts.max_iter,
                "fatol": opts.tol * max(1.0, abs(f0)),
                "xatol": 1e-5,
                "adaptive": True,
            },
        )
    else:
        res = scipy.optimize.minimize(
            outer_obj,
            psi0,
            method="BFGS",
            options={"gtol": 1e-5, "maxiter": opts.max_iter},
        )
    status = "converged" if res.success else "max-iterations"

    psi_hat = state["best_psi"]
    beta_hat = state["best_beta"]
    convergence = {
        "status": status,
        "message": str(res.message),
        "outer_iterations": int(res.nit),
        "function_evaluations": int(res.nfev),
        "inner_newton_iterations": int(state["newton_iters"]),
        "inner_failures": int(state["failures"]),
        "objective": float(state["best_val"]),
        "method": opts.method,
    }

    free_cov = full_cov = None
    if opts.compute_cov:
        free_cov, full_cov, projected = _assemble_covariance(
            fr, psi_hat, beta_hat, jd, outer_obj, opts
        )
        convergence["covariance_projected"] = bool(projected)

    estimates = fr.params_of(fr.full_of(psi_hat, anchor=anchor), beta_hat)
    return FitResult(
        spec=spec,
        estimates=estimates,
        marginal_loglik=-float(state["best_val"]),
        convergence=convergence,
        joint_covariance=full_cov,
        covariance_names=covariance_names(fr),
        frame=fr,
        free_covariance=free_cov,
        anchor_outer=anchor,
    )


# --------------------------------------------------------------------------
# starting values


def _circular_stats(x):
    c, s = np.mean(np.cos(x)), np.mean(np.sin(x))
    mu = float(np.arctan2(s, c))
    rbar = float(np.hypot(c, s))
    return mu, min(rbar, 0.999)


def _kappa_from_rbar(rbar):
    # standard series approximation for the concentration given the mean
    # resultant length
    if rbar < 0.53:
        return 2 * rbar + rbar**3 + 5 * rbar**5 / 6
    if rbar < 0.85:
        return -0.4 + 1.39 * rbar + 0.43 / (1 - rbar)
    return 1.0 / (rbar**3 - 4 * rbar**2 + 3 * rbar)


def _cluster_params(fam, x):
    x = x[np.isfinite(x)]
    m = float(np.mean(x)) if x.size else 0.0
    s = float(np.std(x)) if x.size > 1 else 1.0
    s = max(s, 1e-3)
    v = s * s
    if fam == "norm":
        return {"mean": m, "sd": s}
    if fam == "gamma2":
        return {"mean": max(m, 1e-3), "sd": s}
    if fam == "pois":
        return {"rate": max(m, 1e-3)}
    if fam == "exp":
        return {"rate": 1.0 / max(m, 1e-3)}
    if fam == "beta":
        mm = min(max(m, 1e-3), 1 - 1e-3)
        c = max(mm * (1 - mm) / max(v, 1e-6) - 1.0, 0.1)
        return {"shape1": mm * c, "shape2": (1 - mm) * c}
    if fam == "binom":
        size = max(float(np.max(x)) if x.size else 1.0, 1.0)
        return {"size": size, "prob": min(max(m / size, 0.01), 0.99)}
    if fam == "nbinom":
        if v > m > 0:
            return {"size": max(m * m / (v - m), 0.01), "prob": min(max(m / v, 0.01), 0.99)}
        return {"size": 10.0, "prob": 0.9}
    if fam == "vm":
        mu, rbar = _circular_stats(x)
        return {"mu": mu, "kappa": max(_kappa_from_rbar(rbar), 0.01)}
    if fam == "wrpcauchy":
        mu, rbar = _circular_stats(x)
        return {"mu": mu, "rho": min(max(rbar, 0.01), 0.99)}
    if fam == "zipois":
        z = float(np.mean(x == 0))
        z = min(max(z, 0.01), 0.99)
        return {"rate": max(m / max(1 - z, 0.01), 1e-3), "z": z}
    if fam == "zigamma2":
        z = float(np.mean(x == 0))
        z = min(max(z, 0.01), 0.99)
        pos = x[x > 0]
        mp = float(np.mean(pos)) if pos.size else 1.0
        sp = max(float(np.std(pos)) if pos.size > 1 else 1.0, 1e-3)
        return {"mean": max(mp, 1e-3), "sd": sp, "z": z}
    raise ValueError(fam)


def suggest_initial(spec: ModelSpec, d: Dataset, K: int | None = None, seed: int = 0):
    """Cluster-based starting values for the observation parameters.

    Runs K-means (10 seeded restarts, best within-cluster sum of squares)
    on the standardized response columns and maps per-cluster moments to
    each family's parameters. Clusters are ordered by ascending mean of
    the first response, so state 1 is the "smallest" state.
    """
    K = spec.K if K is None else int(K)
    if K < 2:
        raise ValueError("K must be at least 2")
    Z = d.response_matrix()[
        :, [d.response_names.index(v) for v in spec.response_names]
    ]
    complete = np.all(np.isfinite(Z), axis=1)
    Zc = Z[complete]
    if np.unique(Zc, axis=0).shape[0] < K:
        raise ValueError(
            f"need at least {K} distinct complete observations for K-means"
        )
    mu = Zc.mean(axis=0)
    sd = np.maximum(Zc.std(axis=0), 1e-12)
    Zs = (Zc - mu) / sd

    best_labels, best_inertia = None, np.inf
    for r in range(10):
        rng_seed = np.random.default_rng([seed, r])
        centers, labels = scipy.cluster.vq.kmeans2(Zs, K, minit="++", seed=rng_seed)
        inertia = float(np.sum((Zs - centers[labels]) ** 2))
        if inertia < best_inertia and len(np.unique(labels)) == K:
            best_inertia, best_labels = inertia, labels
    if best_labels is None:
        raise ValueError("K-means failed to produce K non-empty clusters")

    order = np.argsort(
        [Zc[best_labels == k, 0].mean() for k in range(K)], kind="stable"
    )
    out = {}
    for vi, obs in enumerate(spec.observations):
        per_param = {p: [] for p in obs.family.param_names}
        for k in order:
            vals = _cluster_params(obs.family.name, Zc[best_labels == k, vi])
            for p in obs.family.param_names:
                per_param[p].append(vals[p])
        out[obs.name] = {p: tuple(v) for p, v in per_param.items()}
    return out

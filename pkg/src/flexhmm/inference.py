"""Post-fit analysis: state decoding, smoothed state probabilities,
forecast pseudo-residuals, parameter prediction at chosen covariate values,
simulation-based intervals, and predictive checks against fresh draws from
the fitted model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
import scipy.stats

from .data import Dataset
from .dists import cdf, cdf_left_limit, invert_link
from .frame import NEG, ModelFrame, ParameterSet
from .hidden import stationary, tpm_from_eta
from .likelihood import FitResult, _anchor_outer, _jdata_with_anchor
from .model import ModelSpec

U_CLAMP = 1e-12


@dataclass
class PredictionRequest:
    """What to predict and where.

    what: "tpm", "delta", or "obspar".
    rows: row indices into the training data, or a table of new covariate
        values (Dataset or mapping of column name to array); None means the
        first training row.
    n_post: number of parameter draws behind the intervals; 0 = point only.
    level: interval coverage.
    """

    what: str
    rows: object = None
    n_post: int = 1000
    level: float = 0.95

    def __post_init__(self):
        if self.what not in ("tpm", "delta", "obspar"):
            raise ValueError(
                f"what must be one of 'tpm', 'delta', 'obspar'; got {self.what!r}"
            )
        if self.n_post < 0:
            raise ValueError("n_post must be >= 0")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie strictly between 0 and 1")


# --------------------------------------------------------------------------
# shared plumbing


def _anchored_sequences(frame: ModelFrame, theta: ParameterSet):
    """(loggamma, logf, logdelta) honoring theta's own fixed values."""
    anchor = _anchor_outer(frame, theta)
    jd = _jdata_with_anchor(frame, anchor)
    psi_free = jnp.asarray(frame.free_of(anchor))
    beta = jnp.asarray(np.asarray(theta.beta, dtype=float))
    lg, lf, ld = frame.core["sequences"](psi_free, beta, jd)
    return np.asarray(lg), np.asarray(lf), np.asarray(ld)


def _series_bounds(d: Dataset):
    return [(start, stop) for _, start, stop in d.series]


def _ensure_frame(spec, d, frame):
    return frame if frame is not None else ModelFrame(spec, d)


# --------------------------------------------------------------------------
# decoding


def viterbi(spec: ModelSpec, d: Dataset, theta: ParameterSet, frame=None):
    """Most probable state path per series (1-based states).

    Ties resolve toward the lower state index; rows with a known state are
    forced through it (their other states carry vanishing likelihood).
    """
    frame = _ensure_frame(spec, d, frame)
    lg, lf, ld = _anchored_sequences(frame, theta)
    K = spec.K
    paths = []
    for s, (start, stop) in enumerate(_series_bounds(d)):
        T = stop - start
        score = ld[s] + lf[start]
        back = np.zeros((T, K), dtype=np.int64)
        if np.max(score) < NEG / 2.0:
            raise ValueError(
                f"no feasible state at row {start}: all states have "
                "vanishing probability"
            )
        for t in range(1, T):
            cand = score[:, None] + lg[start + t]  # (from, to)
            back[t] = np.argmax(cand, axis=0)
            score = cand[back[t], np.arange(K)] + lf[start + t]
            if np.max(score) < NEG / 2.0:
                raise ValueError(
                    f"no feasible state at row {start + t}: all states have "
                    "vanishing probability"
                )
        path = np.empty(T, dtype=np.int64)
        path[T - 1] = int(np.argmax(score))
        for t in range(T - 1, 0, -1):
            path[t - 1] = back[t, path[t]]
        paths.append(path + 1)
    return paths


def state_probs(spec: ModelSpec, d: Dataset, theta: ParameterSet, frame=None):
    """Smoothed per-row state probabilities, rows summing to one."""
    frame = _ensure_frame(spec, d, frame)
    lg, lf, ld = _anchored_sequences(frame, theta)
    K = spec.K
    out = np.empty((d.n_rows, K))
    for s, (start, stop) in enumerate(_series_bounds(d)):
        T = stop - start
        la = np.empty((T, K))
        v = ld[s] + lf[start]
        cval = _logsumexp(v)
        if not np.isfinite(cval):
            raise ValueError(
                f"no feasible state at row {start}: all states have "
                "vanishing probability"
            )
        la[0] = v - cval
        for t in range(1, T):
            trans = _logsumexp_2d(la[t - 1][:, None] + lg[start + t], axis=0)
            v = trans + lf[start + t]
            cval = _logsumexp(v)
            if not np.isfinite(cval):
                raise ValueError(
                    f"no feasible state at row {start + t}: all states have "
                    "vanishing probability"
                )
            la[t] = v - cval
        lb = np.zeros((T, K))
        for t in range(T - 2, -1, -1):
            term = lg[start + t + 1] + (lf[start + t + 1] + lb[t + 1])[None, :]
            lb[t] = _logsumexp_2d(term, axis=1)
            lb[t] -= np.max(lb[t])
        post = la + lb
        post -= post.max(axis=1, keepdims=True)
        p = np.exp(post)
        out[start:stop] = p / p.sum(axis=1, keepdims=True)
    return out


def _logsumexp(v):
    m = np.max(v)
    if not np.isfinite(m):
        return -np.inf
    return m + np.log(np.sum(np.exp(v - m)))


def _logsumexp_2d(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(
        np.sum(np.exp(a - m), axis=axis)
    )


# --------------------------------------------------------------------------
# pseudo-residuals


def pseudo_residuals(
    spec: ModelSpec,
    d: Dataset,
    theta: ParameterSet,
    frame=None,
    seed: int = 0,
):
    """One-step-ahead forecast residuals per response variable.

    For each row the forecast state weights come from the filter at the
    previous row pushed through that row's transition matrix (the initial
    distribution at series starts). The probability-integral transform uses
    the state-mixture CDF; discrete and zero-inflated variables smear each
    atom with one uniform draw per cell. On a correctly specified model the
    finite values are approximately standard normal and serially unlinked.
    Missing cells give missing residuals.
    """
    frame = _ensure_frame(spec, d, frame)
    lg, lf, ld = _anchored_sequences(frame, theta)
    K = spec.K
    n = d.n_rows
    rng = np.random.default_rng(seed)

    # forecast weights
    w = np.empty((n, K))
    for s, (start, stop) in enumerate(_series_bounds(d)):
        la_prev = None
        for t in range(start, stop):
            if t == start:
                lw = ld[s]
            else:
                lw = _logsumexp_2d(la_prev[:, None] + lg[t], axis=0)
            mx = np.max(lw)
            if not np.isfinite(mx):
                raise ValueError(
                    f"no feasible state at row {t}: all states have "
                    "vanishing probability"
                )
            pw = np.exp(lw - mx)
            w[t] = pw / pw.sum()
            v = lw - mx + lf[t]
            la_prev = v - _logsumexp(v)

    anchor = _anchor_outer(frame, theta)
    jd = _jdata_with_anchor(frame, anchor)
    psi_free = jnp.asarray(frame.free_of(anchor))
    beta = jnp.asarray(np.asarray(theta.beta, dtype=float))
    om = frame.core["obs_omega"](psi_free, beta, jd)

    out = {}
    n_clamped = 0
    for v_idx, obs in enumerate(spec.observations):
        fam = obs.family
        z = d.response(obs.name)
        missing = ~np.isfinite(z)
        zs = np.where(missing, 0.5, z)
        omega = np.stack(
            [np.asarray(om[v_idx][pi]) for pi in range(fam.n_params)], axis=-1
        )  # (n, K, n_params)
        right = np.empty((n, K))
        left = np.empty((n, K))
        for j in range(K):
            right[:, j] = cdf(fam, zs, omega[:, j, :])
            left[:, j] = cdf_left_limit(fam, zs, omega[:, j, :])
        u_right = np.sum(w * right, axis=1)
        u_left = np.sum(w * left, axis=1)
        if fam.kind == "continuous":
            u = u_right
        else:
            jitter = rng.random(n)
            u = u_left + jitter * (u_right - u_left)
        lowmask = u < U_CLAMP
        highmask = u > 1.0 - U_CLAMP
        n_clamped += int(np.sum((lowmask | highmask) & ~missing))
        u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
        r = scipy.stats.norm.ppf(u)
        r[missing] = np.nan
        out[obs.name] = r
    if n_clamped:
        warnings.warn(
            f"{n_clamped} pseudo-residual values hit the probability "
            f"bounds and were clamped to [{U_CLAMP}, 1-{U_CLAMP}]"
        )
    return out


# --------------------------------------------------------------------------
# prediction at covariate values


def _request_design(frame: ModelFrame, rows):
    """Per-target (X, R) for the requested rows; None = first training row."""
    if rows is None:
        rows = np.array([0])
    if isinstance(rows, Dataset):
        columns = {c: rows.frame[c].to_numpy() for c in rows.covariate_names}
        columns["ID"] = np.asarray(rows.series_id_per_row(), dtype=object)
        n_req = rows.n_rows
        return _design_from_columns(frame, columns, n_req)
    if isinstance(rows, dict):
        columns = {k: np.asarray(v) for k, v in rows.items()}
        n_req = len(next(iter(columns.values())))
        return _design_from_columns(frame, columns, n_req)
    idx = np.asarray(rows, dtype=np.int64).reshape(-1)
    n = frame.data.n_rows
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(
            f"requested rows must lie in [0, {n - 1}]; got "
            f"[{idx.min()}, {idx.max()}]"
        )
    pairs = [(t.bundle.X[idx], t.bundle.R[idx]) for t in frame.targets]
    return pairs, idx.size


def _design_from_columns(frame, columns, n_req):
    needed = set()
    for t in frame.targets:
        for term in t.bundle.terms:
            cov = getattr(term, "cov", None)
            if cov:
                needed.add(cov)
    missing = sorted(c for c in needed if c not in columns)
    if missing:
        raise ValueError(f"prediction table lacks covariates {missing}")
    pairs = [t.bundle.evaluate(columns, n_req) for t in frame.targets]
    return pairs, n_req


def _predict_from_psi(frame: ModelFrame, psi_full, beta, pairs, n_req, what):
    alpha, _, _ = frame.split_outer(psi_full)
    beta = np.asarray(beta, dtype=float)
    etas = []
    for t, (X, R) in zip(frame.targets, pairs):
        etas.append(
            X @ alpha[t.a_start : t.a_stop] + R @ beta[t.b_start : t.b_stop]
        )
    K = frame.spec.K
    if what in ("tpm", "delta"):
        eta_h = np.zeros((n_req, K, K))
        for t, eta in zip(frame.targets, etas):
            if t.key[0] == "tpm":
                _, i, j = t.key
                eta_h[:, i, j] = eta
        gam = tpm_from_eta(eta_h, frame.spec.chain.structural_zeros)
        if what == "tpm":
            return gam
        return np.stack([stationary(gam[r]) for r in range(n_req)])
    out = {}
    by_key = {t.key: e for t, e in zip(frame.targets, etas)}
    for obs in frame.spec.observations:
        fam = obs.family
        per_param = {}
        for pi, pname in enumerate(fam.param_names):
            vals = np.empty((n_req, K))
            for j in range(K):
                eta = by_key[("obs", obs.name, pname, j)]
                vals[:, j] = invert_link(fam.links[pi], eta)
            per_param[pname] = vals
        out[obs.name] = per_param
    return out


def predict(fit: FitResult, request: PredictionRequest):
    """Point predictions of the requested quantity at the requested rows.

    tpm: (n_req, K, K); delta: (n_req, K), each row the stationary law of
    that row's transition matrix; obspar: {var: {param: (n_req, K)}}.
    """
    frame = fit.frame
    anchor = _anchor_outer(frame, fit.estimates)
    pairs, n_req = _request_design(frame, request.rows)
    return _predict_from_psi(
        frame, anchor, fit.estimates.beta, pairs, n_req, request.what
    )


# --------------------------------------------------------------------------
# simulation-based intervals


def _psd_sqrt(cov):
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)[None, :]


def _flatten_prediction(pred, what):
    if what in ("tpm", "delta"):
        return np.asarray(pred), None
    layout = []
    parts = []
    for var, per_param in pred.items():
        for pname, vals in per_param.items():
            layout.append((var, pname, vals.shape))
            parts.append(vals.reshape(vals.shape[0], -1))
    return np.concatenate(parts, axis=1), layout


def _unflatten_prediction(flat, layout):
    out = {}
    col = 0
    for var, pname, shape in layout:
        width = int(np.prod(shape[1:]))
        out.setdefault(var, {})[pname] = flat[:, col : col + width].reshape(shape)
        col += width
    return out


def simulate_ci(fit: FitResult, request: PredictionRequest, rng=None):
    """(point, lower, upper) for the requested quantity.

    Parameter draws come from a normal centered at the estimates with the
    joint fitted covariance (projected to the nearest positive semidefinite
    matrix when needed); each draw maps through the same transform as
    predict, and the interval bounds are empirical quantiles across draws.
    Fixed parameters never move; shared parameters move together.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    frame = fit.frame
    J = int(request.n_post)
    anchor = _anchor_outer(frame, fit.estimates)
    pairs, n_req = _request_design(frame, request.rows)
    point = _predict_from_psi(
        frame, anchor, fit.estimates.beta, pairs, n_req, request.what
    )
    if J == 0:
        return point, point, point
    if fit.free_covariance is None:
        raise ValueError(
            "intervals need the fitted covariance; refit with "
            "compute_cov=True or request n_post=0"
        )
    p_beta = frame.p_beta
    center = np.concatenate(
        [np.asarray(fit.estimates.beta, dtype=float), frame.free_of(anchor)]
    )
    A = _psd_sqrt(fit.free_covariance)
    flat_point, layout = _flatten_prediction(point, request.what)
    draws = np.empty((J,) + flat_point.shape)
    for j in range(J):
        th = center + A @ rng.standard_normal(center.size)
        beta_j = th[:p_beta]
        psi_j = frame.full_of(th[p_beta:], anchor=anchor)
        pred_j = _predict_from_psi(
            frame, psi_j, beta_j, pairs, n_req, request.what
        )
        draws[j], _ = _flatten_prediction(pred_j, request.what)
    alpha2 = (1.0 - request.level) / 2.0
    lo = np.quantile(draws, alpha2, axis=0)
    hi = np.quantile(draws, 1.0 - alpha2, axis=0)
    if request.what in ("tpm", "delta"):
        return point, lo, hi
    return (
        point,
        _unflatten_prediction(lo, layout),
        _unflatten_prediction(hi, layout),
    )


# --------------------------------------------------------------------------
# posterior predictive checks


@dataclass
class PPCResult:
    observed: float
    simulated: np.ndarray
    tail: float


def _stat_values(name, z, series_idx):
    ok = np.isfinite(z)
    vals = z[ok]
    if name == "mean":
        return float(np.mean(vals))
    if name == "sd":
        return float(np.std(vals, ddof=1))
    if name == "median":
        return float(np.median(vals))
    if name.startswith("q") and name[1:].isdigit():
        return float(np.quantile(vals, int(name[1:]) / 100.0))
    if name == "zero_prop":
        return float(np.mean(vals == 0.0))
    if name == "lag1":
        num = 0.0
        pairs = []
        for s in np.unique(series_idx):
            zz = z[series_idx == s]
            good = np.isfinite(zz[:-1]) & np.isfinite(zz[1:])
            pairs.append(np.column_stack([zz[:-1][good], zz[1:][good]]))
        ab = np.concatenate(pairs, axis=0)
        if len(ab) < 2:
            return float("nan")
        a = ab[:, 0] - ab[:, 0].mean()
        b = ab[:, 1] - ab[:, 1].mean()
        denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
        return float(np.sum(a * b) / denom) if denom > 0 else float("nan")
    raise ValueError(
        f"unknown statistic {name!r}; choose from mean, sd, median, "
        "q<percent>, lag1, zero_prop"
    )


def posterior_predictive_check(
    fit: FitResult, stat: str = "mean", n_sims: int = 200, seed: int = 0
):
    """Compare observed statistics against the same statistics on n_sims
    fresh draws from the fitted model over the original covariates.

    Returns {response: PPCResult}; tail is the position of the observed
    value in the simulated distribution, (#below + half #ties) / n_sims,
    so 0.5 means dead center and values near 0 or 1 flag misfit.
    """
    from .simulate import SimConfig, simulate

    if n_sims <= 0:
        raise ValueError("n_sims must be positive")
    frame = fit.frame
    d = frame.data
    spec = fit.spec
    series_idx = d.series_index_per_row()
    lengths = tuple(stop - start for _, start, stop in d.series)
    labels = tuple(lab for lab, _, _ in d.series)
    cov_table = {c: d.frame[c].to_numpy() for c in d.covariate_names}

    observed = {
        obs.name: _stat_values(stat, d.response(obs.name), series_idx)
        for obs in spec.observations
    }
    sims = {obs.name: np.empty(n_sims) for obs in spec.observations}
    for j in range(n_sims):
        dj = simulate(
            SimConfig(
                spec,
                fit.estimates,
                covariate_table=cov_table if cov_table else None,
                series_lengths=lengths,
                series_labels=labels,
                seed=[seed, j],
            )
        )
        for obs in spec.observations:
            sims[obs.name][j] = _stat_values(
                stat, dj.response(obs.name), series_idx
            )
    out = {}
    for obs in spec.observations:
        o = observed[obs.name]
        ss = sims[obs.name]
        below = np.sum(ss < o)
        ties = np.sum(ss == o)
        tail = float((below + 0.5 * ties) / n_sims)
        out[obs.name] = PPCResult(observed=o, simulated=ss, tail=tail)
    return out

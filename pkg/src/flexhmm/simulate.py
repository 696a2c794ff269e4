"""Draw state sequences and observations from a model.

Given a model description and a parameter set (hand-set or fitted), produce a
dataset: per series the initial state comes from the configured initial
distribution, later states follow the per-row transition matrix, and each
response is drawn from its observation distribution at the realized state.
The generated states travel along in the "state" column, and the whole draw
is a pure function of the seed.

Independent series use independent child streams spawned from the seed, so
per-series output does not depend on how many other series are simulated
after it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .data import Dataset, from_arrays
from .dists import invert_link
from .frame import ModelFrame, ParameterSet
from .hidden import stationary, tpm_from_eta
from .likelihood import _anchor_outer, _jdata_with_anchor
from .model import ModelSpec


@dataclass
class SimConfig:
    """Everything one draw needs.

    covariate_table may be a Dataset (responses in it are ignored) or a
    plain mapping of column name to array; it is required exactly when the
    model's linear predictors use covariates. series_lengths defaults to
    the covariate table's own series structure when the table is a Dataset.
    """

    spec: ModelSpec
    theta: ParameterSet | None = None
    covariate_table: object = None
    series_lengths: tuple = ()
    seed: int = 0
    series_labels: tuple = ()


def _covariate_names_used(spec: ModelSpec) -> set:
    names = set()
    for _, _, terms in list(spec.hidden_targets()) + list(spec.obs_targets()):
        for t in terms:
            cov = getattr(t, "cov", None)
            if cov and cov != "ID":
                names.add(cov)
    return names


def _needs_random_effects(spec: ModelSpec) -> bool:
    for _, _, terms in list(spec.hidden_targets()) + list(spec.obs_targets()):
        for t in terms:
            if t.kind in ("spline_cubic", "spline_cyclic", "random_intercept"):
                return True
    return False


def _resolve_layout(config: SimConfig):
    """Return (columns dict, series labels, series lengths)."""
    spec = config.spec
    used = _covariate_names_used(spec)
    table = config.covariate_table

    if table is None:
        if used:
            raise ValueError(
                f"the model uses covariates {sorted(used)} but no "
                "covariate_table was given"
            )
        cols = {}
        n_from_table = None
        table_series = None
    elif isinstance(table, Dataset):
        cols = {c: table.frame[c].to_numpy() for c in table.covariate_names}
        n_from_table = table.n_rows
        table_series = [(lab, stop - start) for lab, start, stop in table.series]
    else:
        cols = {k: np.asarray(v) for k, v in dict(table).items()}
        n_from_table = len(next(iter(cols.values()))) if cols else None
        table_series = None

    missing = sorted(used - set(cols))
    if missing:
        raise ValueError(f"covariate_table lacks model covariates {missing}")

    lengths = tuple(int(t) for t in config.series_lengths)
    labels = tuple(str(v) for v in config.series_labels)
    if not lengths:
        if table_series is None:
            raise ValueError(
                "series_lengths is required unless covariate_table is a "
                "Dataset carrying its own series structure"
            )
        labels = tuple(lab for lab, _ in table_series)
        lengths = tuple(t for _, t in table_series)
    if not labels:
        labels = tuple(str(s + 1) for s in range(len(lengths)))
    if len(labels) != len(lengths):
        raise ValueError("series_labels and series_lengths disagree in length")
    if any(t < 1 for t in lengths):
        raise ValueError("every series length must be at least 1")
    n = sum(lengths)
    if n_from_table is not None and n_from_table != n:
        raise ValueError(
            f"covariate table has {n_from_table} rows but series lengths "
            f"sum to {n}"
        )
    return cols, labels, lengths


def _sample_family(rng: np.random.Generator, name: str, pars):
    """One vectorized draw per family, parameterized as the densities are."""
    if name == "norm":
        mean, sd = pars
        return rng.normal(mean, sd)
    if name == "gamma2":
        mean, sd = pars
        shape = np.square(mean / sd)
        scale = np.square(sd) / mean
        return rng.gamma(shape, scale)
    if name == "pois":
        (rate,) = pars
        return rng.poisson(rate).astype(float)
    if name == "exp":
        (rate,) = pars
        return rng.exponential(1.0 / rate)
    if name == "beta":
        a, b = pars
        return rng.beta(a, b)
    if name == "binom":
        size, prob = pars
        return rng.binomial(np.round(size).astype(np.int64), prob).astype(float)
    if name == "nbinom":
        size, prob = pars
        return rng.negative_binomial(size, prob).astype(float)
    if name == "vm":
        mu, kappa = pars
        return rng.vonmises(mu, kappa)
    if name == "wrpcauchy":
        mu, rho = pars
        scale = -np.log(np.clip(rho, 1e-300, 1.0))
        raw = mu + scale * rng.standard_cauchy(np.shape(mu))
        return np.mod(raw + math.pi, 2.0 * math.pi) - math.pi
    if name == "zipois":
        rate, zprob = pars
        extra_zero = rng.random(np.shape(rate)) < zprob
        counts = rng.poisson(rate).astype(float)
        return np.where(extra_zero, 0.0, counts)
    if name == "zigamma2":
        mean, sd, zprob = pars
        extra_zero = rng.random(np.shape(mean)) < zprob
        shape = np.square(mean / sd)
        scale = np.square(sd) / mean
        vals = rng.gamma(shape, scale)
        return np.where(extra_zero, 0.0, vals)
    raise ValueError(f"no sampler for distribution {name!r}")


def _initial_distribution(frame: ModelFrame, delta_logits, gamma_start, s):
    spec = frame.spec
    mode = spec.chain.initial_mode
    K = spec.K
    if isinstance(mode, tuple):
        states = mode if len(mode) > 1 else mode * frame.data.n_series
        out = np.zeros(K)
        out[states[s] - 1] = 1.0
        return out
    if mode == "stationary":
        return stationary(gamma_start)
    logits = delta_logits.reshape(-1, K - 1)
    row = logits[s] if logits.shape[0] > 1 else logits[0]
    full = np.concatenate([[0.0], row])
    full = full - full.max()
    p = np.exp(full)
    return p / p.sum()


def simulate(config: SimConfig) -> Dataset:
    """Draw one dataset; output responses, covariates, and a "state" column."""
    spec = config.spec
    theta = config.theta
    cols, labels, lengths = _resolve_layout(config)
    n = sum(lengths)
    K = spec.K

    ids = []
    for lab, T in zip(labels, lengths):
        ids += [lab] * T

    dummy = {obs.name: np.full(n, 0.5) for obs in spec.observations}
    scaffold = from_arrays(
        dummy, cols, series_ids=ids, categorical=tuple(spec.categorical)
    )
    frame = ModelFrame(spec, scaffold)
    if theta is None:
        theta = frame.init
    if np.shape(theta.beta) != (frame.p_beta,):
        raise ValueError(
            f"theta.beta has shape {np.shape(theta.beta)} but this model on "
            f"these covariates needs {frame.p_beta} random-effect and spline "
            "coefficients (factor levels must match the fitted data)"
        )
    anchor = _anchor_outer(frame, theta)
    alpha_full, loglam, delta_logits = frame.split_outer(anchor)

    children = np.random.SeedSequence(config.seed).spawn(len(lengths))
    states = np.empty(n, dtype=np.int64)
    responses = {obs.name: np.empty(n) for obs in spec.observations}

    if spec.lagged:
        _draw_sequential(
            config, theta, frame, anchor, children, lengths, states, responses, cols
        )
    else:
        jd = _jdata_with_anchor(frame, anchor)
        psi_free = jnp.asarray(frame.free_of(anchor))
        beta = jnp.asarray(np.asarray(theta.beta, dtype=float))
        lg, _, _ = frame.core["sequences"](psi_free, beta, jd)
        gamma = np.exp(np.asarray(lg))
        gamma = gamma / gamma.sum(axis=2, keepdims=True)
        om = frame.core["obs_omega"](psi_free, beta, jd)
        omega = [[np.asarray(p) for p in per_var] for per_var in om]

        pos = 0
        for s, T in enumerate(lengths):
            rng = np.random.default_rng(children[s])
            delta = _initial_distribution(frame, delta_logits, gamma[pos], s)
            cg = np.cumsum(gamma[pos : pos + T], axis=2)
            u = rng.random(T)
            st = np.empty(T, dtype=np.int64)
            st[0] = np.searchsorted(np.cumsum(delta), u[0], side="right")
            for t in range(1, T):
                st[t] = np.searchsorted(cg[t, st[t - 1]], u[t], side="right")
            np.clip(st, 0, K - 1, out=st)
            states[pos : pos + T] = st
            rows = np.arange(pos, pos + T)
            for v, obs in enumerate(spec.observations):
                pars = [omega[v][pi][rows, st] for pi in range(len(omega[v]))]
                responses[obs.name][rows] = _sample_family(
                    rng, obs.family.name, pars
                )
            pos += T

    out_cols = dict(cols)
    return from_arrays(
        responses,
        out_cols,
        series_ids=ids,
        known_states=states + 1,
        categorical=tuple(spec.categorical),
    )


def _draw_sequential(
    config, theta, frame, anchor, children, lengths, states, responses, cols
):
    """Row-by-row draw for models whose covariates include lagged responses.

    Each step rebuilds the design row from the current covariate values, so
    a simulated response at t-1 feeds the linear predictors at t.
    """
    spec = config.spec
    K = spec.K
    alpha_full, loglam, delta_logits = frame.split_outer(anchor)
    beta = np.asarray(theta.beta, dtype=float)
    lag_map = dict(spec.lagged)  # covariate name -> response it lags
    zeros = spec.chain.structural_zeros

    hidden_targets = [t for t in frame.targets if t.key[0] == "tpm"]
    obs_targets = [t for t in frame.targets if t.key[0] == "obs"]
    obs_by_var = {}
    for t in obs_targets:
        obs_by_var.setdefault(t.key[1], []).append(t)

    pos = 0
    for s, T in enumerate(lengths):
        rng = np.random.default_rng(children[s])
        label = frame.data.series_labels[s]
        local = {k: np.array(v[pos : pos + T]) for k, v in cols.items()}
        local["ID"] = np.asarray([label] * T, dtype=object)

        def eta_of(target, t):
            row = {k: v[t : t + 1] for k, v in local.items()}
            X, R = target.bundle.evaluate(row, 1, warn=False)
            return float(
                X[0] @ alpha_full[target.a_start : target.a_stop]
                + R[0] @ beta[target.b_start : target.b_stop]
            )

        def tpm_at(t):
            eta_h = np.zeros((K, K))
            for tg in hidden_targets:
                _, i, j = tg.key
                eta_h[i, j] = eta_of(tg, t)
            return tpm_from_eta(eta_h, zeros)

        st = np.empty(T, dtype=np.int64)
        for t in range(T):
            if t == 0:
                delta = _initial_distribution(
                    frame, delta_logits, tpm_at(0), s
                )
                st[0] = np.searchsorted(
                    np.cumsum(delta), rng.random(), side="right"
                )
            else:
                for cov, resp in lag_map.items():
                    local[cov][t] = responses[resp][pos + t - 1]
                p = tpm_at(t)[st[t - 1]]
                st[t] = np.searchsorted(np.cumsum(p), rng.random(), side="right")
            st[t] = min(st[t], K - 1)
            for obs in spec.observations:
                fam = obs.family
                per_param = []
                for pi, pname in enumerate(fam.param_names):
                    tg = next(
                        g
                        for g in obs_by_var[obs.name]
                        if g.key[2] == pname and g.key[3] == st[t]
                    )
                    eta = eta_of(tg, t)
                    per_param.append(
                        np.asarray([invert_link(fam.links[pi], eta)])
                    )
                responses[obs.name][pos + t] = _sample_family(
                    rng, fam.name, per_param
                )[0]
        states[pos : pos + T] = st
        pos += T


def drop_state_column(d: Dataset) -> Dataset:
    """The same dataset without the "state" column (for unsupervised refits)."""
    if "state" not in d.frame.columns:
        return d
    from dataclasses import replace

    return replace(d, frame=d.frame.drop(columns=["state"]))


def reflected_random_walk(n, step_sd=0.1, bounds=(-1.0, 1.0), seed=0):
    """Gaussian random walk folded back into [lo, hi]; starts at the midpoint."""
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo < hi:
        raise ValueError(f"bounds must satisfy lo < hi, got {(lo, hi)}")
    rng = np.random.default_rng(seed)
    width = hi - lo
    steps = rng.normal(0.0, step_sd, size=n) if step_sd > 0 else np.zeros(n)
    x = np.empty(n)
    cur = (lo + hi) / 2.0
    for t in range(n):
        if t > 0:
            cur = cur + steps[t]
            # fold into the interval: reflect off both walls as often as needed
            y = np.mod(cur - lo, 2.0 * width)
            cur = lo + (y if y <= width else 2.0 * width - y)
        x[t] = cur
    return x

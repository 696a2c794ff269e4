"""Model frame: a spec bound to a dataset.

The frame owns the flat parameter layout (fixed effects alpha, penalized
coefficients beta, log smoothing parameters, initial-state logits), the
per-scalar names used by constraints and output tables, and differentiable
likelihood machinery.

The differentiable core is built once per model *structure* and cached, with
all data (design matrices, responses, masks, constraint index maps) passed
as arrays, so repeated fits of the same structure - simulation replications
in particular - reuse the compiled code.

Likelihood conventions:
  * one forward recursion runs over all series concatenated, reset by a
    start flag, so log likelihoods add across series;
  * the transition matrix built from covariate row t governs the transition
    into time t; the matrix at a series start only feeds the stationary
    initial distribution;
  * a missing response cell contributes a factor 1 for every state; a known
    state adds a large negative constant to the other states' log densities;
  * impossibilities use -1e30 rather than -inf so gradients stay finite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from .data import Dataset, fill_covariate_gaps
from .design import DesignBundle, assemble
from .dists import JAX_LOGPDF, NEG, apply_link, get_family, jax_invert_link
from .hidden import stationary_jnp, tpm_from_eta_jnp
from .model import ModelSpec

LOGLAM_MIN, LOGLAM_MAX = -20.0, 20.0


@dataclass
class ParameterSet:
    """Flat parameter vectors plus the per-scalar constraint map."""

    alpha: np.ndarray
    beta: np.ndarray
    log_lambda: np.ndarray
    delta0_logits: np.ndarray
    fix_share_map: dict = field(default_factory=dict)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.alpha.copy(),
            self.beta.copy(),
            self.log_lambda.copy(),
            self.delta0_logits.copy(),
            dict(self.fix_share_map),
        )


@dataclass(frozen=True)
class TargetInfo:
    key: tuple
    prefix: str
    bundle: DesignBundle
    a_start: int
    a_stop: int
    b_start: int
    b_stop: int


@dataclass(frozen=True)
class BlockInfo:
    label: str
    S: np.ndarray
    b_start: int
    b_stop: int
    lam_index: int


# --------------------------------------------------------------------------
# compiled core, cached by structure


_CORE_CACHE: dict = {}


def _expand_psi(psi_free, data):
    padded = jnp.concatenate([psi_free, jnp.zeros(1, dtype=psi_free.dtype)])
    return jnp.where(data["psi_fixed"], data["psi_init"], padded[data["psi_map"]])


def _build_core(plan):
    (
        K,
        n_vars,
        p_alpha,
        p_lambda,
        p_delta,
        target_slices,   # ((a0,a1,b0,b1), ...)
        hidden_entries,  # ((i, j, target_index), ...)
        obs_groups,      # ((family, ((link, (tidx per state)), ...)), ...)
        block_plan,      # ((b0, b1, lam_idx), ...)
        initial_mode,    # "estimated" | "stationary" | "fixed"
        per_series_delta,
    ) = plan

    def split_psi(psi_full):
        a = psi_full[:p_alpha]
        l = psi_full[p_alpha : p_alpha + p_lambda]
        d = psi_full[p_alpha + p_lambda :]
        return a, l, d

    def target_etas(alpha, beta, data):
        etas = []
        for t, (a0, a1, b0, b1) in enumerate(target_slices):
            eta = data["Xs"][t] @ alpha[a0:a1] + data["Rs"][t] @ beta[b0:b1]
            etas.append(eta)
        return etas

    def sequences(psi_free, beta, data):
        psi = _expand_psi(psi_free, data)
        alpha, loglam, dlt = split_psi(psi)
        etas = target_etas(alpha, beta, data)
        n = data["z"].shape[0]

        eta_h = jnp.zeros((n, K, K))
        for i, j, tidx in hidden_entries:
            eta_h = eta_h.at[:, i, j].set(etas[tidx])
        gamma = tpm_from_eta_jnp(eta_h, data["mask"])
        loggamma = jnp.log(jnp.maximum(gamma, 1e-300))
        loggamma = jnp.where(data["mask"], loggamma, NEG)

        logf = jnp.zeros((n, K))
        for v, (fam_name, params) in enumerate(obs_groups):
            zv = data["z"][:, v]
            missv = data["miss"][:, v]
            zsafe = jnp.where(missv, 0.5, zv)
            omegas = []
            for link, tidx_states in params:
                eta_p = jnp.stack([etas[t] for t in tidx_states], axis=1)  # (n, K)
                omegas.append(jax_invert_link(link)(eta_p))
            lp = JAX_LOGPDF[fam_name](zsafe[:, None], *omegas)
            logf = logf + jnp.where(missv[:, None], 0.0, lp)

        kn = data["known"]
        states = jnp.arange(K)[None, :]
        logf = logf + jnp.where((kn[:, None] >= 0) & (states != kn[:, None]), NEG, 0.0)

        M = data["start_rows"].shape[0]
        if initial_mode == "estimated":
            if per_series_delta:
                logits = dlt.reshape(M, K - 1)
            else:
                logits = jnp.broadcast_to(dlt.reshape(1, K - 1), (M, K - 1))
            full = jnp.concatenate([jnp.zeros((M, 1)), logits], axis=1)
            logdelta = full - logsumexp(full, axis=1, keepdims=True)
        elif initial_mode == "stationary":
            gam_start = gamma[data["start_rows"]]
            delta = stationary_jnp(gam_start)
            logdelta = jnp.log(jnp.clip(delta, 1e-300, 1.0))
        else:  # fixed
            st = data["delta_fixed_states"][:, None]
            logdelta = jnp.where(jnp.arange(K)[None, :] == st, 0.0, NEG)
        return loggamma, logf, logdelta

    def forward_parts(psi_free, beta, data):
        loggamma, logf, logdelta = sequences(psi_free, beta, data)

        def step(carry, inp):
            la = carry
            is_start, sidx, lg, lf = inp
            trans = logsumexp(la[:, None] + lg, axis=0)
            v = jnp.where(is_start, logdelta[sidx], trans) + lf
            c = logsumexp(v)
            return v - c, c

        xs = (data["is_start"], data["series_idx"], loggamma, logf)
        _, cs = jax.lax.scan(step, jnp.zeros(K), xs)
        return cs

    def loglik(psi_free, beta, data):
        return jnp.sum(forward_parts(psi_free, beta, data))

    def forward_detail(psi_free, beta, data):
        loggamma, logf, logdelta = sequences(psi_free, beta, data)

        def step(carry, inp):
            la = carry
            is_start, sidx, lg, lf = inp
            trans = logsumexp(la[:, None] + lg, axis=0)
            v = jnp.where(is_start, logdelta[sidx], trans) + lf
            c = logsumexp(v)
            return v - c, (c, v - c)

        xs = (data["is_start"], data["series_idx"], loggamma, logf)
        _, (cs, las) = jax.lax.scan(step, jnp.zeros(K), xs)
        return cs, las

    def penalty_half(beta, loglam, data):
        total = 0.0
        for b, (b0, b1, lidx) in enumerate(block_plan):
            lam = jnp.exp(jnp.clip(loglam[lidx], LOGLAM_MIN, LOGLAM_MAX))
            bb = beta[b0:b1]
            total = total + 0.5 * lam * bb @ data["Ss"][b] @ bb
        return total

    def inner_obj(beta, psi_free, data):
        psi = _expand_psi(psi_free, data)
        _, loglam, _ = split_psi(psi)
        return -loglik(psi_free, beta, data) + penalty_half(beta, loglam, data)

    def penalized_full(psi_free, beta, data):
        psi = _expand_psi(psi_free, data)
        _, loglam, _ = split_psi(psi)
        return -loglik(psi_free, beta, data) + 2.0 * penalty_half(beta, loglam, data)

    def obs_omega(psi_free, beta, data):
        psi = _expand_psi(psi_free, data)
        alpha, _, _ = split_psi(psi)
        etas = target_etas(alpha, beta, data)
        out = []
        for fam_name, params in obs_groups:
            per_param = []
            for link, tidx_states in params:
                eta_p = jnp.stack([etas[t] for t in tidx_states], axis=1)
                per_param.append(jax_invert_link(link)(eta_p))
            out.append(tuple(per_param))
        return tuple(out)

    def logdet_prior(psi_free, data):
        psi = _expand_psi(psi_free, data)
        _, loglam, _ = split_psi(psi)
        total = data["block_logdetS"]
        for _, (b0, b1, lidx) in enumerate(block_plan):
            total = total + (b1 - b0) * jnp.clip(loglam[lidx], LOGLAM_MIN, LOGLAM_MAX)
        return total

    core = {
        "sequences": jax.jit(sequences),
        "loglik": jax.jit(loglik),
        "forward_detail": jax.jit(forward_detail),
        "inner_obj": jax.jit(inner_obj),
        "inner_grad": jax.jit(jax.grad(inner_obj, argnums=0)),
        "inner_hess": jax.jit(jax.hessian(inner_obj, argnums=0)),
        "cross_hess": jax.jit(jax.jacfwd(jax.grad(inner_obj, argnums=0), argnums=1)),
        "penalized_full": jax.jit(penalized_full),
        "obs_omega": jax.jit(obs_omega),
        "logdet_prior": jax.jit(logdet_prior),
    }
    return core


def _get_core(plan):
    if plan not in _CORE_CACHE:
        _CORE_CACHE[plan] = _build_core(plan)
    return _CORE_CACHE[plan]


# --------------------------------------------------------------------------
# frame


class ModelFrame:
    """A ModelSpec bound to a Dataset: designs, names, compiled likelihood."""

    def __init__(self, spec: ModelSpec, data: Dataset):
        self.spec = spec
        missing = [v for v in spec.response_names if v not in data.response_names]
        if missing:
            raise ValueError(f"dataset lacks response columns {missing}")
        self.data = fill_covariate_gaps(data)
        self._build_targets()
        self._build_names()
        self._build_init()
        self._resolve_constraints()
        self._build_arrays()
        self.core = _get_core(self._plan())

    # ---- structure

    def _build_targets(self):
        spec, d = self.spec, self.data
        targets: list[TargetInfo] = []
        blocks: list[BlockInfo] = []
        a_off = b_off = 0
        for key, prefix, terms in spec.hidden_targets() + spec.obs_targets():
            kind = "tpm" if isinstance(key[0], int) else "obs"
            bundle = assemble(terms, d)
            for blk in bundle.penalty_blocks:
                blocks.append(
                    BlockInfo(
                        label=f"{prefix}.{blk.label}",
                        S=blk.S,
                        b_start=b_off + blk.start,
                        b_stop=b_off + blk.stop,
                        lam_index=len(blocks),
                    )
                )
            targets.append(
                TargetInfo(
                    key=(kind,) + (key if kind == "tpm" else key),
                    prefix=prefix,
                    bundle=bundle,
                    a_start=a_off,
                    a_stop=a_off + bundle.p_fixed,
                    b_start=b_off,
                    b_stop=b_off + bundle.p_random,
                )
            )
            a_off += bundle.p_fixed
            b_off += bundle.p_random
        self.targets = targets
        self.blocks = blocks
        self.p_alpha = a_off
        self.p_beta = b_off
        self.p_lambda = len(blocks)
        self.n_hidden_targets = len(spec.hidden_targets())

    def _build_names(self):
        spec = self.spec
        self.alpha_names: list[str] = []
        self.beta_names: list[str] = []
        for t in self.targets:
            self.alpha_names += [f"{t.prefix}.{c}" for c in t.bundle.x_names]
            self.beta_names += [f"{t.prefix}.{c}" for c in t.bundle.r_names]
        self.lambda_names = [f"{b.label}.lambda" for b in self.blocks]
        K, M = spec.K, self.data.n_series
        if spec.chain.initial_mode == "estimated":
            if spec.delta_per_series:
                self.delta_names = [
                    f"delta0.{label}.state{j + 2}"
                    for label in self.data.series_labels
                    for j in range(K - 1)
                ]
            else:
                self.delta_names = [f"delta0.state{j + 2}" for j in range(K - 1)]
        else:
            self.delta_names = []
        self.p_delta = len(self.delta_names)
        self.outer_names = self.alpha_names + self.lambda_names + self.delta_names

    def _build_init(self):
        spec = self.spec
        g0 = np.asarray(spec.tpm_init, dtype=float)
        alpha = np.zeros(self.p_alpha)
        for t in self.targets:
            iterm = next((x for x in t.bundle.terms if x.kind == "intercept"), None)
            if iterm is None:
                continue
            side, idx = t.bundle.column_map[iterm]
            col = t.a_start + idx[0]
            if t.key[0] == "tpm":
                _, i, j = t.key
                alpha[col] = np.log(
                    max(g0[i, j], 1e-12) / max(g0[i, i], 1e-12)
                )
            else:
                _, var, pname, state = t.key
                obs = next(o for o in spec.observations if o.name == var)
                link = obs.family.links[obs.family.param_names.index(pname)]
                try:
                    alpha[col] = float(apply_link(link, obs.init[pname][state]))
                except ValueError as exc:
                    raise ValueError(
                        f"initial value for {var}.{pname} state {state + 1} "
                        f"({obs.init[pname][state]}) is outside the {link} domain"
                    ) from exc
        self.init = ParameterSet(
            alpha=alpha,
            beta=np.zeros(self.p_beta),
            log_lambda=np.zeros(self.p_lambda),
            delta0_logits=np.zeros(self.p_delta),
            fix_share_map=self._constraint_map(),
        )

    def _constraint_map(self) -> dict:
        spec = self.spec
        out = {name: "free" for name in self.outer_names}
        for name in spec.fixed:
            if name not in out:
                raise ValueError(
                    f"fixed-parameter name {name!r} does not match any of the "
                    f"{len(out)} outer parameters (alpha, lambda, delta0)"
                )
            out[name] = "fixed"
        for gid, group in enumerate(spec.shared):
            for name in group:
                if name not in out:
                    raise ValueError(f"shared-parameter name {name!r} unknown")
                if out[name] == "free":
                    out[name] = gid
        return out

    def _resolve_constraints(self):
        names = self.outer_names
        P = len(names)
        idx = {n: i for i, n in enumerate(names)}
        root = list(range(P))

        def find(i):
            while root[i] != i:
                root[i] = root[root[i]]
                i = root[i]
            return i

        for group in self.spec.shared:
            base = find(idx[group[0]])
            for name in group[1:]:
                root[find(idx[name])] = base
        fixed = np.zeros(P, dtype=bool)
        for name in self.spec.fixed:
            fixed[idx[name]] = True
        # a fixed member pins its whole shared group
        for i in range(P):
            if fixed[find(i)] or fixed[i]:
                fixed[i] = True
                fixed[find(i)] = True
        for i in range(P):
            if fixed[find(i)]:
                fixed[i] = True

        init_full = self._outer_init_raw()
        for i in range(P):
            r = find(i)
            if init_full[i] != init_full[r]:
                warnings.warn(
                    f"shared parameters {names[r]!r} and {names[i]!r} have "
                    "different initial values; using the first"
                )
            init_full[i] = init_full[r]

        slot_of_root: dict[int, int] = {}
        psi_map = np.zeros(P, dtype=np.int64)
        n_free = 0
        for i in range(P):
            r = find(i)
            if fixed[i]:
                continue
            if r not in slot_of_root:
                slot_of_root[r] = n_free
                n_free += 1
        for i in range(P):
            r = find(i)
            psi_map[i] = slot_of_root.get(r, n_free)
        self.psi_fixed = fixed
        self.psi_map = psi_map
        self.psi_root = [find(i) for i in range(P)]
        self.p_free = n_free
        self._psi_init_full = init_full

    def _outer_init_raw(self) -> np.ndarray:
        return np.concatenate(
            [self.init.alpha, self.init.log_lambda, self.init.delta0_logits]
        )

    # ---- packing

    def outer_full(self, params: ParameterSet) -> np.ndarray:
        return np.concatenate([params.alpha, params.log_lambda, params.delta0_logits])

    def split_outer(self, psi_full: np.ndarray):
        a = psi_full[: self.p_alpha]
        l = psi_full[self.p_alpha : self.p_alpha + self.p_lambda]
        d = psi_full[self.p_alpha + self.p_lambda :]
        return a, l, d

    def free_of(self, psi_full: np.ndarray) -> np.ndarray:
        out = np.zeros(self.p_free)
        for i in range(len(psi_full)):
            if not self.psi_fixed[i] and self.psi_map[i] < self.p_free:
                out[self.psi_map[i]] = psi_full[i]
        return out

    def full_of(self, psi_free: np.ndarray, anchor: np.ndarray | None = None) -> np.ndarray:
        """Expand free values to the full outer vector; fixed entries come
        from anchor (default: the spec's initial values)."""
        padded = np.concatenate([psi_free, [0.0]])
        base = self._psi_init_full if anchor is None else anchor
        return np.where(self.psi_fixed, base, padded[self.psi_map])

    def params_of(self, psi_full: np.ndarray, beta: np.ndarray) -> ParameterSet:
        a, l, d = self.split_outer(np.asarray(psi_full, dtype=float))
        return ParameterSet(
            alpha=np.asarray(a),
            beta=np.asarray(beta, dtype=float).copy(),
            log_lambda=np.asarray(l),
            delta0_logits=np.asarray(d),
            fix_share_map=dict(self.init.fix_share_map),
        )

    def check_respects_constraints(self, params: ParameterSet) -> np.ndarray:
        """Return the free vector for params, enforcing fixed entries."""
        psi = self.outer_full(params)
        if psi.shape != (len(self.outer_names),):
            raise ValueError(
                f"parameter vector lengths do not match this model "
                f"(alpha {self.p_alpha}, lambda {self.p_lambda}, delta {self.p_delta})"
            )
        return self.free_of(psi)

    # ---- data arrays

    def _build_arrays(self):
        spec, d = self.spec, self.data
        n, K = d.n_rows, spec.K
        z = d.response_matrix()[:, [d.response_names.index(v) for v in spec.response_names]]
        miss = ~np.isfinite(z)
        z_safe = np.where(miss, 0.5, z)
        ks = d.known_state()
        if np.any(ks > K):
            bad = int(np.argmax(ks > K))
            raise ValueError(
                f"known state {ks[bad]} at row {bad} exceeds K = {K}"
            )
        known0 = np.where(ks >= 1, ks - 1, -1)
        is_start = np.zeros(n, dtype=bool)
        is_start[d.series_starts()] = True

        mode = spec.chain.initial_mode
        if isinstance(mode, tuple):
            states = mode if len(mode) > 1 else mode * d.n_series
            if len(states) != d.n_series:
                raise ValueError(
                    f"fixed initial states: got {len(mode)}, need 1 or {d.n_series}"
                )
            delta_fixed = np.asarray([s - 1 for s in states], dtype=np.int64)
        else:
            delta_fixed = np.zeros(d.n_series, dtype=np.int64)

        logdetS = 0.0
        for b in self.blocks:
            sign, val = np.linalg.slogdet(b.S)
            if sign <= 0:
                raise ValueError(f"penalty block {b.label} is singular")
            logdetS += val

        self.jdata = {
            "Xs": tuple(jnp.asarray(t.bundle.X) for t in self.targets),
            "Rs": tuple(jnp.asarray(t.bundle.R) for t in self.targets),
            "Ss": tuple(jnp.asarray(b.S) for b in self.blocks),
            "z": jnp.asarray(z_safe),
            "miss": jnp.asarray(miss),
            "known": jnp.asarray(known0),
            "is_start": jnp.asarray(is_start),
            "series_idx": jnp.asarray(d.series_index_per_row()),
            "start_rows": jnp.asarray(d.series_starts()),
            "mask": jnp.asarray(spec.chain.mask()),
            "psi_fixed": jnp.asarray(self.psi_fixed),
            "psi_map": jnp.asarray(self.psi_map),
            "psi_init": jnp.asarray(self._psi_init_full),
            "delta_fixed_states": jnp.asarray(delta_fixed),
            "block_logdetS": jnp.asarray(logdetS),
        }

    def _plan(self):
        spec = self.spec
        target_slices = tuple(
            (t.a_start, t.a_stop, t.b_start, t.b_stop) for t in self.targets
        )
        hidden_entries = tuple(
            (t.key[1], t.key[2], i)
            for i, t in enumerate(self.targets)
            if t.key[0] == "tpm"
        )
        obs_groups = []
        tindex = {t.key: i for i, t in enumerate(self.targets)}
        for obs in spec.observations:
            params = []
            for pi, pname in enumerate(obs.family.param_names):
                tidx = tuple(
                    tindex[("obs", obs.name, pname, s)] for s in range(spec.K)
                )
                params.append((obs.family.links[pi], tidx))
            obs_groups.append((obs.family.name, tuple(params)))
        block_plan = tuple((b.b_start, b.b_stop, b.lam_index) for b in self.blocks)
        mode = spec.chain.initial_mode
        mode_tag = "fixed" if isinstance(mode, tuple) else mode
        return (
            spec.K,
            len(spec.observations),
            self.p_alpha,
            self.p_lambda,
            self.p_delta,
            target_slices,
            hidden_entries,
            tuple(obs_groups),
            block_plan,
            mode_tag,
            spec.delta_per_series,
        )

    # ---- evaluation helpers (numpy in, numpy out)

    def loglik(self, params: ParameterSet) -> float:
        psi_free = self.check_respects_constraints(params)
        return float(self.core["loglik"](jnp.asarray(psi_free), jnp.asarray(params.beta), self.jdata))

    def forward_detail(self, params: ParameterSet):
        psi_free = self.check_respects_constraints(params)
        cs, las = self.core["forward_detail"](
            jnp.asarray(psi_free), jnp.asarray(params.beta), self.jdata
        )
        return np.asarray(cs), np.asarray(las)

    def sequences(self, params: ParameterSet):
        psi_free = self.check_respects_constraints(params)
        lg, lf, ld = self.core["sequences"](
            jnp.asarray(psi_free), jnp.asarray(params.beta), self.jdata
        )
        return np.asarray(lg), np.asarray(lf), np.asarray(ld)

    def obs_omega(self, params: ParameterSet):
        psi_free = self.check_respects_constraints(params)
        out = self.core["obs_omega"](
            jnp.asarray(psi_free), jnp.asarray(params.beta), self.jdata
        )
        return {
            obs.name: {
                p: np.asarray(out[v][pi])
                for pi, p in enumerate(obs.family.param_names)
            }
            for v, obs in enumerate(self.spec.observations)
        }

    def penalized_joint_nll(self, params: ParameterSet) -> float:
        psi_free = self.check_respects_constraints(params)
        return float(
            self.core["penalized_full"](
                jnp.asarray(psi_free), jnp.asarray(params.beta), self.jdata
            )
        )

    def block_slices(self):
        return [(b.b_start, b.b_stop) for b in self.blocks]


def build_frame(spec: ModelSpec, data: Dataset) -> ModelFrame:
    return ModelFrame(spec, data)

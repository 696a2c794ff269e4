"""Model specification: which families observe the data, which terms drive
each linear predictor, chain structure, constraints, optimizer options.

A spec can be built in code or parsed from a YAML file. The term language:

    intercept | 1          constant
    x                      linear effect of covariate x (also linear(x))
    poly(x, 3)             raw polynomial of degree 3
    spline(x, k=10)        penalized cubic spline
    cyclic(x, k=10, period=24)   penalized cyclic spline
    re(g)                  normal random intercept over factor g

Terms combine with "+". In the transition grid "." marks the diagonal, a
structurally zero entry, or an empty predictor.

Scalar parameters are addressed by name throughout (constraints, estimate
tables): transition coefficients as "S1>S2.<column>", observation
coefficients as "<var>.<param>.state<j>.<column>", smoothing parameters as
"<prefix>.<label>.lambda", initial-state logits as "delta0.state<j>".
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .design import Term, cyclic, intercept, linear, poly, random_intercept, spline
from .dists import Family, get_family
from .hidden import ChainSpec, default_tpm

DEFAULT_INIT = {
    "norm": {"mean": 0.0, "sd": 1.0},
    "gamma2": {"mean": 1.0, "sd": 1.0},
    "pois": {"rate": 1.0},
    "exp": {"rate": 1.0},
    "beta": {"shape1": 2.0, "shape2": 2.0},
    "binom": {"size": 1.0, "prob": 0.5},
    "nbinom": {"size": 1.0, "prob": 0.5},
    "vm": {"mu": 0.0, "kappa": 1.0},
    "wrpcauchy": {"mu": 0.0, "rho": 0.5},
    "zipois": {"rate": 1.0, "z": 0.5},
    "zigamma2": {"mean": 1.0, "sd": 1.0, "z": 0.5},
}


# --------------------------------------------------------------------------
# term DSL

_CALL = re.compile(r"^(\w+)\s*\(\s*(.*?)\s*\)$")
_NAME = re.compile(r"^[A-Za-z_]\w*$")


def _parse_call_args(raw: str):
    pos, kw = [], {}
    for piece in filter(None, (a.strip() for a in raw.split(","))):
        if "=" in piece:
            key, val = (s.strip() for s in piece.split("=", 1))
            kw[key] = val
        else:
            pos.append(piece)
    return pos, kw


def parse_term(text: str) -> Term:
    text = text.strip()
    if text in ("intercept", "1"):
        return intercept()
    m = _CALL.match(text)
    if m is None:
        if _NAME.match(text):
            return linear(text)
        raise ValueError(f"cannot parse term {text!r}")
    fn, raw = m.groups()
    pos, kw = _parse_call_args(raw)
    if not pos:
        raise ValueError(f"term {text!r} needs a covariate name")
    cov = pos[0]
    try:
        if fn == "linear":
            return linear(cov)
        if fn == "poly":
            degree = int(kw.get("degree", pos[1] if len(pos) > 1 else ""))
            return poly(cov, degree)
        if fn == "spline":
            k = int(kw.get("k", pos[1] if len(pos) > 1 else 10))
            return spline(cov, k)
        if fn == "cyclic":
            k = int(kw.get("k", pos[1] if len(pos) > 1 else 10))
            period = float(kw.get("period", pos[2] if len(pos) > 2 else 2 * np.pi))
            return cyclic(cov, k, period)
        if fn == "re":
            return random_intercept(cov)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad arguments in term {text!r}: {exc}") from None
    raise ValueError(
        f"unknown term {fn!r}; valid: intercept, linear, poly, spline, cyclic, re"
    )


def parse_terms(text) -> tuple[Term, ...]:
    """Parse a '+'-joined term expression; '.' or empty means no terms."""
    if text is None:
        return ()
    text = str(text).strip()
    if text in (".", "", "none"):
        return ()
    return tuple(parse_term(p) for p in text.split("+"))


def term_to_string(t: Term) -> str:
    if t.kind == "intercept":
        return "intercept"
    if t.kind == "linear":
        return t.cov
    if t.kind == "poly":
        return f"poly({t.cov}, {t.degree})"
    if t.kind == "spline_cubic":
        return f"spline({t.cov}, k={t.k})"
    if t.kind == "spline_cyclic":
        return f"cyclic({t.cov}, k={t.k}, period={t.period!r})"
    if t.kind == "random_intercept":
        return f"re({t.cov})"
    raise ValueError(t.kind)


def terms_to_string(terms) -> str:
    return " + ".join(term_to_string(t) for t in terms) if terms else "."


# --------------------------------------------------------------------------
# spec objects


@dataclass(frozen=True)
class FitOptions:
    method: str = "nelder-mead"
    max_iter: int = 1000
    tol: float = 1e-8
    seed: int = 0
    n_post: int = 1000
    compute_cov: bool = True
    inner_max_iter: int = 200
    inner_tol: float = 1e-6

    def __post_init__(self):
        if self.method not in ("nelder-mead", "quasi-newton"):
            raise ValueError("method must be 'nelder-mead' or 'quasi-newton'")
        if self.max_iter < 1 or self.inner_max_iter < 1:
            raise ValueError("iteration limits must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class ObsSpec:
    """One response variable: family plus per-parameter, per-state terms."""

    name: str
    family: Family
    terms: dict  # param -> tuple over states of term tuples
    init: dict   # param -> tuple over states of natural-scale values

    def __post_init__(self):
        for p in self.family.param_names:
            if p not in self.terms:
                raise ValueError(f"{self.name}: missing terms for parameter {p!r}")
            if p not in self.init:
                raise ValueError(f"{self.name}: missing init for parameter {p!r}")
        extra = set(self.terms) - set(self.family.param_names)
        if extra:
            raise ValueError(
                f"{self.name}: unknown parameters {sorted(extra)} for family "
                f"{self.family.name} (has {self.family.param_names})"
            )


@dataclass(frozen=True)
class ModelSpec:
    K: int
    observations: tuple
    chain: ChainSpec
    tpm_init: tuple
    categorical: tuple = ()
    fixed: tuple = ()
    shared: tuple = ()
    options: FitOptions = field(default_factory=FitOptions)
    delta_per_series: bool = False
    lagged: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K != self.chain.K:
            raise ValueError("spec K and chain K disagree")
        if not self.observations:
            raise ValueError("need at least one response variable")
        names = [o.name for o in self.observations]
        if len(set(names)) != len(names):
            raise ValueError("duplicate response names")
        for obs in self.observations:
            for per_state in obs.terms.values():
                if len(per_state) != self.K:
                    raise ValueError(
                        f"{obs.name}: need one term list per state ({self.K})"
                    )
                for terms in per_state:
                    self._check_factors(terms)
        for terms in self.chain.tp_terms.values():
            self._check_factors(terms)
        g = np.asarray(self.tpm_init, dtype=float)
        if g.shape != (self.K, self.K) or np.any(g < 0) or np.max(
            np.abs(g.sum(axis=1) - 1)
        ) > 1e-8:
            raise ValueError("tpm_init must be a K x K stochastic matrix")
        for i, j in self.chain.structural_zeros:
            if g[i, j] != 0:
                object.__setattr__(
                    self, "tpm_init", _zero_out(g, self.chain.structural_zeros)
                )
                break

    def _check_factors(self, terms):
        for t in terms:
            if t.kind == "random_intercept" and t.cov != "ID" and t.cov not in self.categorical:
                raise ValueError(
                    f"random-intercept factor {t.cov!r} must be 'ID' or listed "
                    "under 'categorical'"
                )

    @property
    def response_names(self) -> tuple:
        return tuple(o.name for o in self.observations)

    @property
    def covariate_names(self) -> tuple:
        """Covariates referenced by any term, in first-use order ('ID' excluded)."""
        seen: list[str] = []

        def visit(terms):
            for t in terms:
                if t.kind != "intercept" and t.cov != "ID" and t.cov not in seen:
                    seen.append(t.cov)

        for terms in self.chain.tp_terms.values():
            visit(terms)
        for obs in self.observations:
            for per_state in obs.terms.values():
                for terms in per_state:
                    visit(terms)
        return tuple(seen)

    def hidden_targets(self):
        """[(i, j), prefix, terms] for each allowed off-diagonal, row-major."""
        out = []
        for i, j in self.chain.free_transitions:
            out.append(((i, j), f"S{i + 1}>S{j + 1}", self.chain.tp_terms.get((i, j), ())))
        return out

    def obs_targets(self):
        """[(var, param, state), prefix, terms] in variable/param/state order."""
        out = []
        for obs in self.observations:
            for p in obs.family.param_names:
                for j in range(self.K):
                    out.append(
                        ((obs.name, p, j), f"{obs.name}.{p}.state{j + 1}", obs.terms[p][j])
                    )
        return out


def _zero_out(g: np.ndarray, zeros):
    g = np.asarray(g, dtype=float).copy()
    for i, j in zeros:
        g[i, j] = 0.0
    g = g / g.sum(axis=1, keepdims=True)
    return tuple(tuple(float(v) for v in row) for row in g)


def _as_matrix_tuple(g) -> tuple:
    return tuple(tuple(float(v) for v in row) for row in np.asarray(g, dtype=float))


def make_obs_spec(name: str, family_name: str, terms, init=None, K: int = 2) -> ObsSpec:
    """Convenience constructor: terms/init may be given per parameter as a
    single value (replicated across states) or one per state."""
    fam = get_family(family_name)
    terms = dict(terms or {})
    init = dict(init or {})
    out_terms, out_init = {}, {}
    for p in fam.param_names:
        raw = terms.get(p, "intercept")
        if isinstance(raw, (list, tuple)) and raw and isinstance(raw[0], (str, list, tuple)):
            per_state = [parse_terms(r) if isinstance(r, str) else tuple(r) for r in raw]
        elif isinstance(raw, str):
            per_state = [parse_terms(raw)] * K
        else:
            per_state = [tuple(raw)] * K
        if len(per_state) != K:
            raise ValueError(f"{name}.{p}: need 1 or {K} term lists, got {len(per_state)}")
        out_terms[p] = tuple(per_state)
        v = init.get(p, DEFAULT_INIT[fam.name][p])
        if np.ndim(v) == 0:
            vals = (float(v),) * K
        else:
            vals = tuple(float(x) for x in v)
            if len(vals) != K:
                raise ValueError(f"{name}.{p}: init needs 1 or {K} values")
        out_init[p] = vals
    return ObsSpec(name=name, family=fam, terms=out_terms, init=out_init)


def make_spec(
    n_states: int,
    observations,
    hidden_terms=None,
    tpm_init=None,
    initial="stationary",
    structural_zeros=(),
    categorical=(),
    fixed=(),
    shared=(),
    options=None,
    lagged=None,
) -> ModelSpec:
    """Programmatic twin of the YAML surface (structural zeros 1-based)."""
    K = int(n_states)
    zeros0 = frozenset((int(i) - 1, int(j) - 1) for i, j in structural_zeros)
    tp_terms = {}
    if hidden_terms is None:
        hidden_terms = "intercept"
    if isinstance(hidden_terms, str):
        base = parse_terms(hidden_terms)
        for i in range(K):
            for j in range(K):
                if i != j and (i, j) not in zeros0:
                    tp_terms[(i, j)] = base
    elif isinstance(hidden_terms, dict):
        for (i, j), txt in hidden_terms.items():
            tp_terms[(int(i) - 1, int(j) - 1)] = (
                parse_terms(txt) if isinstance(txt, str) else tuple(txt)
            )
    else:
        grid = list(hidden_terms)
        if len(grid) != K or any(len(row) != K for row in grid):
            raise ValueError("hidden term grid must be K x K")
        for i in range(K):
            for j in range(K):
                cell = grid[i][j]
                terms = parse_terms(cell) if isinstance(cell, str) else tuple(cell or ())
                if i == j or (i, j) in zeros0:
                    if terms:
                        raise ValueError(
                            f"grid cell ({i + 1},{j + 1}) must be '.' "
                            "(diagonal or structural zero)"
                        )
                elif terms:
                    tp_terms[(i, j)] = terms

    delta_per_series = False
    if isinstance(initial, str):
        if initial == "estimated_per_series":
            initial, delta_per_series = "estimated", True
        mode = initial
    else:
        mode = tuple(int(s) for s in initial)
    chain = ChainSpec(K=K, tp_terms=tp_terms, initial_mode=mode, structural_zeros=zeros0)

    obs = []
    for o in observations:
        if isinstance(o, ObsSpec):
            obs.append(o)
        else:
            obs.append(
                make_obs_spec(
                    o["name"],
                    o["dist"],
                    {p: cfg.get("terms", "intercept") for p, cfg in o.get("par", {}).items()},
                    {p: cfg["init"] for p, cfg in o.get("par", {}).items() if "init" in cfg},
                    K=K,
                )
            )

    g = default_tpm(K) if tpm_init is None else np.asarray(tpm_init, dtype=float)
    g = _zero_out(g, zeros0) if zeros0 else _as_matrix_tuple(g)
    return ModelSpec(
        K=K,
        observations=tuple(obs),
        chain=chain,
        tpm_init=g,
        categorical=tuple(categorical),
        fixed=tuple(fixed),
        shared=tuple(tuple(grp) for grp in shared),
        options=options if isinstance(options, FitOptions) else FitOptions(**(options or {})),
        delta_per_series=delta_per_series,
        lagged=dict(lagged or {}),
    )


# --------------------------------------------------------------------------
# YAML surface


def spec_to_dict(spec: ModelSpec) -> dict:
    K = spec.K
    grid = []
    for i in range(K):
        row = []
        for j in range(K):
            if i == j or (i, j) in spec.chain.structural_zeros:
                row.append(".")
            else:
                row.append(terms_to_string(spec.chain.tp_terms.get((i, j), ())))
        grid.append(row)
    obs = []
    for o in spec.observations:
        par = {}
        for p in o.family.param_names:
            per_state = o.terms[p]
            if all(t == per_state[0] for t in per_state):
                terms_repr = terms_to_string(per_state[0])
            else:
                terms_repr = [terms_to_string(t) for t in per_state]
            par[p] = {"terms": terms_repr, "init": list(o.init[p])}
        obs.append({"name": o.name, "dist": o.family.name, "par": par})
    if isinstance(spec.chain.initial_mode, tuple):
        initial = list(spec.chain.initial_mode)
    elif spec.chain.initial_mode == "estimated" and spec.delta_per_series:
        initial = "estimated_per_series"
    else:
        initial = spec.chain.initial_mode
    out = {
        "n_states": K,
        "observation": obs,
        "hidden": {
            "terms": grid,
            "tpm_init": [list(r) for r in spec.tpm_init],
            "initial": initial,
            "structural_zeros": sorted([i + 1, j + 1] for i, j in spec.chain.structural_zeros),
        },
        "categorical": list(spec.categorical),
        "constraints": {
            "fixed": list(spec.fixed),
            "shared": [list(g) for g in spec.shared],
        },
        "options": {
            "method": spec.options.method,
            "max_iter": spec.options.max_iter,
            "tol": spec.options.tol,
            "seed": spec.options.seed,
            "n_post": spec.options.n_post,
        },
        "lagged": dict(spec.lagged),
    }
    return out


def spec_from_dict(doc: dict) -> ModelSpec:
    if "n_states" not in doc:
        raise ValueError("model spec needs 'n_states'")
    if "observation" not in doc or not doc["observation"]:
        raise ValueError("model spec needs at least one 'observation' entry")
    hidden = doc.get("hidden", {}) or {}
    constraints = doc.get("constraints", {}) or {}
    opts = dict(doc.get("options", {}) or {})
    known = {f.name for f in FitOptions.__dataclass_fields__.values()}
    unknown = set(opts) - known
    if unknown:
        raise ValueError(f"unknown options: {sorted(unknown)} (valid: {sorted(known)})")
    return make_spec(
        n_states=doc["n_states"],
        observations=doc["observation"],
        hidden_terms=hidden.get("terms"),
        tpm_init=hidden.get("tpm_init"),
        initial=hidden.get("initial", "stationary"),
        structural_zeros=hidden.get("structural_zeros", ()) or (),
        categorical=doc.get("categorical", ()) or (),
        fixed=constraints.get("fixed", ()) or (),
        shared=constraints.get("shared", ()) or (),
        options=opts,
        lagged=doc.get("lagged", {}) or {},
    )


def spec_to_yaml(spec: ModelSpec) -> str:
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False, default_flow_style=None)


def spec_from_yaml(text: str) -> ModelSpec:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ValueError("model spec file must hold a YAML mapping")
    return spec_from_dict(doc)


def load_spec(path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_yaml(fh.read())


def save_spec(spec: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_to_yaml(spec))


def with_options(spec: ModelSpec, **kw) -> ModelSpec:
    return replace(spec, options=replace(spec.options, **kw))

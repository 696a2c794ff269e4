"""Observation distribution families.

Eleven families share one interface: log density, CDF (plus its left limit,
for randomized residuals of discrete or atom-carrying families), sampling,
and per-parameter link functions mapping the natural domain onto the real
line. The log densities are written once in JAX (so the likelihood can be
differentiated) and wrapped for numpy callers; CDFs and sampling go through
scipy/numpy directly.

Conventions:
  gamma2      gamma with (mean, sd); shape = mean^2/sd^2, scale = sd^2/mean
  nbinom      (size, prob) with pmf C(z+n-1, z) p^n (1-p)^z
  vm          von Mises (mu, kappa) on (-pi, pi]
  wrpcauchy   wrapped Cauchy (mu, rho) on (-pi, pi]
  zipois      zero-inflated Poisson (rate, z) where z is the extra mass at 0
  zigamma2    gamma2 with an atom of size z at exactly 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln as jgammaln
from jax.scipy.special import i0e as ji0e
from scipy import special, stats

LOG2PI = math.log(2.0 * math.pi)

# Stand-in for -inf inside differentiated code: big enough to dominate any
# realistic log likelihood, small enough that sums stay finite.
NEG = -1.0e30

# Logit-style inverse links clamp the linear predictor here; beyond it the
# probability is numerically indistinguishable from the boundary anyway.
ETA_CLAMP = 15.0
LOG_CLAMP = 700.0


def wrap_angle(x):
    """Map to the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


# --------------------------------------------------------------------------
# links

_LINK_NAMES = ("identity", "log", "logit", "angle")


def apply_link(link: str, value):
    value = np.asarray(value, dtype=float)
    if link == "identity":
        return value
    if link == "log":
        if np.any(value <= 0):
            raise ValueError("log link needs a strictly positive value")
        return np.log(value)
    if link == "logit":
        if np.any(value <= 0) or np.any(value >= 1):
            raise ValueError("logit link needs a value strictly inside (0, 1)")
        return np.log(value) - np.log1p(-value)
    if link == "angle":
        if np.any(value <= -np.pi) or np.any(value >= np.pi):
            raise ValueError(
                "angle link needs a value strictly inside (-pi, pi)"
            )
        u = (value + np.pi) / (2.0 * np.pi)
        return np.log(u) - np.log1p(-u)
    raise ValueError(f"unknown link {link!r}; valid: {_LINK_NAMES}")


def invert_link(link: str, eta):
    eta = np.asarray(eta, dtype=float)
    if link == "identity":
        return eta
    if link == "log":
        return np.exp(np.clip(eta, -LOG_CLAMP, LOG_CLAMP))
    if link == "logit":
        return special.expit(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
    if link == "angle":
        return 2.0 * np.pi * special.expit(np.clip(eta, -ETA_CLAMP, ETA_CLAMP)) - np.pi
    raise ValueError(f"unknown link {link!r}; valid: {_LINK_NAMES}")


def jax_invert_link(link: str):
    """Inverse link as a jnp-traceable callable."""
    if link == "identity":
        return lambda e: e
    if link == "log":
        return lambda e: jnp.exp(jnp.clip(e, -LOG_CLAMP, LOG_CLAMP))
    if link == "logit":
        return lambda e: jnp.reciprocal(1.0 + jnp.exp(-jnp.clip(e, -ETA_CLAMP, ETA_CLAMP)))
    if link == "angle":
        return lambda e: (
            2.0 * jnp.pi / (1.0 + jnp.exp(-jnp.clip(e, -ETA_CLAMP, ETA_CLAMP))) - jnp.pi
        )
    raise ValueError(f"unknown link {link!r}; valid: {_LINK_NAMES}")


# --------------------------------------------------------------------------
# family registry


@dataclass(frozen=True)
class Family:
    name: str
    param_names: tuple[str, ...]
    links: tuple[str, ...]
    support: str          # "real", "positive", "nonnegative", "unit", "circle", "counts"
    kind: str             # "continuous", "count", "mixed"

    @property
    def n_params(self) -> int:
        return len(self.param_names)


FAMILIES = {
    f.name: f
    for f in (
        Family("norm", ("mean", "sd"), ("identity", "log"), "real", "continuous"),
        Family("gamma2", ("mean", "sd"), ("log", "log"), "positive", "continuous"),
        Family("pois", ("rate",), ("log",), "counts", "count"),
        Family("exp", ("rate",), ("log",), "nonnegative", "continuous"),
        Family("beta", ("shape1", "shape2"), ("log", "log"), "unit", "continuous"),
        Family("binom", ("size", "prob"), ("log", "logit"), "counts", "count"),
        Family("nbinom", ("size", "prob"), ("log", "logit"), "counts", "count"),
        Family("vm", ("mu", "kappa"), ("angle", "log"), "circle", "continuous"),
        Family("wrpcauchy", ("mu", "rho"), ("angle", "logit"), "circle", "continuous"),
        Family("zipois", ("rate", "z"), ("log", "logit"), "counts", "count"),
        Family("zigamma2", ("mean", "sd", "z"), ("log", "log", "logit"), "nonnegative", "mixed"),
    )
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(
            f"unknown distribution {name!r}; valid names: {sorted(FAMILIES)}"
        ) from None


def link_apply(family: Family, omega):
    omega = np.asarray(omega, dtype=float)
    return np.stack(
        [apply_link(lk, omega[..., i]) for i, lk in enumerate(family.links)], axis=-1
    )


def link_invert(family: Family, eta):
    eta = np.asarray(eta, dtype=float)
    return np.stack(
        [invert_link(lk, eta[..., i]) for i, lk in enumerate(family.links)], axis=-1
    )


# --------------------------------------------------------------------------
# log densities (jnp, single source)
#
# Each function takes the observation and the parameters in registry order,
# broadcasts, and returns NEG (not -inf) outside the support. Inputs on
# masked lanes are sanitized before any log/gammaln so that gradients with
# respect to the parameters never pick up NaN from impossible observations.


def _is_integer(z):
    return jnp.abs(z - jnp.round(z)) < 1e-8


def _lp_norm(z, mean, sd):
    return -0.5 * LOG2PI - jnp.log(sd) - 0.5 * jnp.square((z - mean) / sd)


def _gamma_shape_scale(mean, sd):
    shape = jnp.square(mean / sd)
    scale = jnp.square(sd) / mean
    return shape, scale


def _lp_gamma2(z, mean, sd):
    ok = z > 0
    zs = jnp.where(ok, z, 1.0)
    shape, scale = _gamma_shape_scale(mean, sd)
    val = (
        -jgammaln(shape)
        - shape * jnp.log(scale)
        + (shape - 1.0) * jnp.log(zs)
        - zs / scale
    )
    return jnp.where(ok, val, NEG)


def _lp_pois(z, rate):
    ok = (z > -0.5) & _is_integer(z)
    zs = jnp.where(ok, z, 0.0)
    val = zs * jnp.log(rate) - rate - jgammaln(zs + 1.0)
    return jnp.where(ok, val, NEG)


def _lp_exp(z, rate):
    ok = z >= 0
    zs = jnp.where(ok, z, 0.0)
    return jnp.where(ok, jnp.log(rate) - rate * zs, NEG)


def _lp_beta(z, shape1, shape2):
    ok = (z > 0) & (z < 1)
    zs = jnp.where(ok, z, 0.5)
    lbeta = jgammaln(shape1) + jgammaln(shape2) - jgammaln(shape1 + shape2)
    val = (shape1 - 1.0) * jnp.log(zs) + (shape2 - 1.0) * jnp.log1p(-zs) - lbeta
    return jnp.where(ok, val, NEG)


def _lp_binom(z, size, prob):
    ok = (z > -0.5) & (z <= size + 1e-8) & _is_integer(z)
    zs = jnp.where(ok, z, 0.0)
    val = (
        jgammaln(size + 1.0)
        - jgammaln(zs + 1.0)
        - jgammaln(jnp.maximum(size - zs, 1e-12) + 1.0)
        + zs * jnp.log(prob)
        + (size - zs) * jnp.log1p(-prob)
    )
    return jnp.where(ok, val, NEG)


def _lp_nbinom(z, size, prob):
    ok = (z > -0.5) & _is_integer(z)
    zs = jnp.where(ok, z, 0.0)
    val = (
        jgammaln(zs + size)
        - jgammaln(size)
        - jgammaln(zs + 1.0)
        + size * jnp.log(prob)
        + zs * jnp.log1p(-prob)
    )
    return jnp.where(ok, val, NEG)


def _lp_vm(z, mu, kappa):
    # log I0(kappa) = log i0e(kappa) + kappa, stable for large kappa
    return kappa * jnp.cos(z - mu) - LOG2PI - (jnp.log(ji0e(kappa)) + kappa)


def _lp_wrpcauchy(z, mu, rho):
    return (
        jnp.log1p(-jnp.square(rho))
        - LOG2PI
        - jnp.log1p(jnp.square(rho) - 2.0 * rho * jnp.cos(z - mu))
    )


def _lp_zipois(z, rate, zprob):
    ok = (z > -0.5) & _is_integer(z)
    zs = jnp.where(ok, z, 0.0)
    at0 = jnp.log(zprob + (1.0 - zprob) * jnp.exp(-rate))
    pos = jnp.log1p(-jnp.minimum(zprob, 1.0 - 1e-300)) + _lp_pois(zs, rate)
    pos = jnp.where(zprob >= 1.0, NEG, pos)
    val = jnp.where(zs < 0.5, at0, pos)
    return jnp.where(ok, val, NEG)


def _lp_zigamma2(z, mean, sd, zprob):
    ok = z >= 0
    zs = jnp.where(z > 0, z, 1.0)
    pos = jnp.log1p(-jnp.minimum(zprob, 1.0 - 1e-300)) + _lp_gamma2(zs, mean, sd)
    pos = jnp.where(zprob >= 1.0, NEG, pos)
    at0 = jnp.where(zprob <= 0.0, NEG, jnp.log(jnp.maximum(zprob, 1e-300)))
    val = jnp.where(z > 0, pos, at0)
    return jnp.where(ok, val, NEG)


JAX_LOGPDF = {
    "norm": _lp_norm,
    "gamma2": _lp_gamma2,
    "pois": _lp_pois,
    "exp": _lp_exp,
    "beta": _lp_beta,
    "binom": _lp_binom,
    "nbinom": _lp_nbinom,
    "vm": _lp_vm,
    "wrpcauchy": _lp_wrpcauchy,
    "zipois": _lp_zipois,
    "zigamma2": _lp_zigamma2,
}


_DOMAIN_CHECKS = {
    "norm": lambda m, s: np.all(s > 0),
    "gamma2": lambda m, s: np.all(m > 0) and np.all(s > 0),
    "pois": lambda r: np.all(r > 0),
    "exp": lambda r: np.all(r > 0),
    "beta": lambda a, b: np.all(a > 0) and np.all(b > 0),
    "binom": lambda n, p: np.all(n > 0) and np.all((p > 0) & (p < 1)),
    "nbinom": lambda n, p: np.all(n > 0) and np.all((p > 0) & (p < 1)),
    "vm": lambda mu, k: np.all(np.isfinite(mu)) and np.all(k > 0),
    "wrpcauchy": lambda mu, r: np.all(np.isfinite(mu)) and np.all((r >= 0) & (r < 1)),
    "zipois": lambda r, zp: np.all(r > 0) and np.all((zp >= 0) & (zp <= 1)),
    "zigamma2": lambda m, s, zp: np.all(m > 0)
    and np.all(s > 0)
    and np.all((zp >= 0) & (zp <= 1)),
}


def _split_params(family: Family, omega):
    omega = np.asarray(omega, dtype=float)
    if omega.shape[-1] != family.n_params:
        raise ValueError(
            f"{family.name} takes {family.n_params} parameters "
            f"{family.param_names}, got shape {omega.shape}"
        )
    params = tuple(omega[..., i] for i in range(family.n_params))
    if not _DOMAIN_CHECKS[family.name](*params):
        raise ValueError(
            f"parameters out of domain for {family.name}: {omega!r}"
        )
    return params


def log_pdf(family: Family, z, omega):
    """Log density/mass of observations z; -inf outside the support."""
    params = _split_params(family, omega)
    z = np.asarray(z, dtype=float)
    val = np.asarray(JAX_LOGPDF[family.name](jnp.asarray(z), *map(jnp.asarray, params)))
    out = np.where(val <= NEG / 2.0, -np.inf, val)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# CDFs


def _circular_antideriv_wrpcauchy(theta, rho):
    # d/dtheta of this expression is exactly the wrapped-Cauchy density; it
    # increases by 1 over each period, so differences give circular CDFs.
    return (
        theta + 2.0 * np.arctan(rho * np.sin(theta) / (1.0 - rho * np.cos(theta)))
    ) / (2.0 * np.pi)


def _circular_antideriv_vm(theta, kappa):
    theta = np.asarray(theta, dtype=float)
    total = theta / (2.0 * np.pi)
    i0 = special.ive(0, kappa)
    for j in range(1, 2000):
        ratio = special.ive(j, kappa) / i0
        term = ratio * np.sin(j * theta) / j
        total = total + term / np.pi
        if np.all(np.abs(ratio) / j < 1e-14):
            break
    return total


def cdf(family: Family, z, omega):
    """P(Z <= z); circular families measure from -pi."""
    params = _split_params(family, omega)
    z = np.asarray(z, dtype=float)
    name = family.name
    if name == "norm":
        mean, sd = params
        out = stats.norm.cdf(z, loc=mean, scale=sd)
    elif name == "gamma2":
        mean, sd = params
        shape = (mean / sd) ** 2
        scale = sd**2 / mean
        out = stats.gamma.cdf(z, shape, scale=scale)
    elif name == "pois":
        (rate,) = params
        out = stats.poisson.cdf(np.floor(z), rate)
    elif name == "exp":
        (rate,) = params
        out = stats.expon.cdf(z, scale=1.0 / rate)
    elif name == "beta":
        a, b = params
        out = stats.beta.cdf(z, a, b)
    elif name == "binom":
        n, p = params
        k = np.floor(z)
        # regularized incomplete beta handles non-integer trial counts
        out = np.where(
            k < 0, 0.0, np.where(k >= n, 1.0, special.betainc(np.maximum(n - k, 1e-300), k + 1.0, 1.0 - p))
        )
    elif name == "nbinom":
        n, p = params
        k = np.floor(z)
        out = np.where(k < 0, 0.0, special.betainc(n, k + 1.0, p))
    elif name == "vm":
        mu, kappa = params
        out = _circular_antideriv_vm(z - mu, kappa) - _circular_antideriv_vm(
            -np.pi - mu, kappa
        )
    elif name == "wrpcauchy":
        mu, rho = params
        out = _circular_antideriv_wrpcauchy(z - mu, rho) - _circular_antideriv_wrpcauchy(
            -np.pi - mu, rho
        )
    elif name == "zipois":
        rate, zp = params
        base = stats.poisson.cdf(np.floor(z), rate)
        out = np.where(z < -0.5, 0.0, zp + (1.0 - zp) * base)
    elif name == "zigamma2":
        mean, sd, zp = params
        shape = (mean / sd) ** 2
        scale = sd**2 / mean
        base = stats.gamma.cdf(np.maximum(z, 0.0), shape, scale=scale)
        out = np.where(z < 0, 0.0, zp + (1.0 - zp) * base)
    else:  # pragma: no cover
        raise ValueError(name)
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def cdf_left_limit(family: Family, z, omega):
    """P(Z < z): cdf(z-1) for counts, 0 at the atom of mixed families."""
    z = np.asarray(z, dtype=float)
    if family.kind == "count":
        return cdf(family, z - 1.0, omega)
    if family.kind == "mixed":
        out = np.where(z <= 0, 0.0, cdf(family, z, omega))
        return out if out.ndim else float(out)
    return cdf(family, z, omega)


# --------------------------------------------------------------------------
# sampling


def sample(family: Family, omega, rng: np.random.Generator, size=None):
    """Draw from the family; parameter arrays broadcast elementwise."""
    params = _split_params(family, omega)
    shape = np.broadcast_shapes(*(np.shape(p) for p in params))
    if size is None and shape != ():
        size = shape
    params = tuple(np.broadcast_to(p, size if size is not None else ()) for p in params)
    name = family.name
    if name == "norm":
        mean, sd = params
        return rng.normal(mean, sd, size=size)
    if name == "gamma2":
        mean, sd = params
        return rng.gamma((mean / sd) ** 2, sd**2 / mean, size=size)
    if name == "pois":
        (rate,) = params
        return rng.poisson(rate, size=size).astype(float)
    if name == "exp":
        (rate,) = params
        return rng.exponential(1.0 / rate, size=size)
    if name == "beta":
        a, b = params
        return rng.beta(a, b, size=size)
    if name == "binom":
        n, p = params
        n_int = np.round(n)
        if np.any(np.abs(n - n_int) > 1e-8):
            raise ValueError("binom sampling needs an integer size parameter")
        return rng.binomial(n_int.astype(np.int64), p, size=size).astype(float)
    if name == "nbinom":
        n, p = params
        return rng.negative_binomial(n, p, size=size).astype(float)
    if name == "vm":
        mu, kappa = params
        return wrap_angle(rng.vonmises(mu, kappa, size=size))
    if name == "wrpcauchy":
        mu, rho = params
        rho = np.asarray(rho, dtype=float)
        spread = -np.log(np.maximum(rho, 1e-300))
        draw = wrap_angle(mu + spread * rng.standard_cauchy(size=size))
        uniform = wrap_angle(rng.uniform(-np.pi, np.pi, size=size))
        return np.where(rho < 1e-8, uniform, draw)
    if name == "zipois":
        rate, zp = params
        base = rng.poisson(rate, size=size).astype(float)
        return np.where(rng.random(size=size) < zp, 0.0, base)
    if name == "zigamma2":
        mean, sd, zp = params
        base = rng.gamma((mean / sd) ** 2, sd**2 / mean, size=size)
        return np.where(rng.random(size=size) < zp, 0.0, base)
    raise ValueError(name)  # pragma: no cover

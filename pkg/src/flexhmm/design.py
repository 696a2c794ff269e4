"""Design matrices for one linear predictor.

Turns a list of terms (intercept, linear, polynomial, cubic or cyclic
penalized spline, random intercept) into a fixed-effect matrix X, a
random/penalized matrix R, and one penalty block per penalized term.

Spline details:
  * cubic B-splines (order 4) with boundary knots at the observed range and
    interior knots at equally spaced quantiles; k = 3 drops to quadratic
    Bernstein functions since a single cubic piece needs four coefficients;
  * cyclic splines use equally spaced knots over one period, built on a
    periodically extended knot vector and folded back to k columns;
  * the penalty is the squared second difference of adjacent coefficients,
    with wrapped differences in the cyclic case, plus a small ridge
    (1e-4 times the top eigenvalue) so that a large smoothing parameter
    shrinks the whole term, straight lines included, to zero;
  * when the same predictor carries an intercept, spline columns are mean
    centered and one column is dropped; because constants are penalty-free
    this leaves the quadratic form unchanged on the reduced coordinates.

Out-of-range evaluation of a cubic spline continues linearly from the
boundary and warns; cyclic evaluation wraps modulo the period.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

PENALTY_RIDGE = 1e-4


@dataclass(frozen=True)
class Term:
    kind: str  # intercept | linear | poly | spline_cubic | spline_cyclic | random_intercept
    cov: str = ""
    k: int = 0
    degree: int = 0
    period: float = 0.0

    def label(self) -> str:
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind == "linear":
            return self.cov
        if self.kind == "poly":
            return f"poly({self.cov},{self.degree})"
        if self.kind == "spline_cubic":
            return f"spline({self.cov})"
        if self.kind == "spline_cyclic":
            return f"cyclic({self.cov})"
        if self.kind == "random_intercept":
            return f"re({self.cov})"
        raise ValueError(self.kind)


def intercept() -> Term:
    return Term("intercept")


def linear(cov: str) -> Term:
    return Term("linear", cov)


def poly(cov: str, degree: int) -> Term:
    if degree < 1:
        raise ValueError("poly degree must be >= 1")
    return Term("poly", cov, degree=degree)


def spline(cov: str, k: int = 10) -> Term:
    if k < 3:
        raise ValueError("spline basis dimension must be >= 3")
    return Term("spline_cubic", cov, k=k)


def cyclic(cov: str, k: int = 10, period: float = 2 * np.pi) -> Term:
    if k < 3:
        raise ValueError("spline basis dimension must be >= 3")
    if period <= 0:
        raise ValueError("cyclic period must be positive")
    return Term("spline_cyclic", cov, k=k, period=float(period))


def random_intercept(factor: str) -> Term:
    return Term("random_intercept", factor)


def second_difference_penalty(k: int, cyclic_wrap: bool) -> np.ndarray:
    if cyclic_wrap:
        D = np.zeros((k, k))
        for i in range(k):
            D[i, i] = 1.0
            D[i, (i + 1) % k] = -2.0
            D[i, (i + 2) % k] = 1.0
    else:
        D = np.diff(np.eye(k), n=2, axis=0)
    return D.T @ D


def _design(x: np.ndarray, t: np.ndarray, deg: int) -> np.ndarray:
    return BSpline.design_matrix(x, t, deg).toarray()


def _deriv_design(x: np.ndarray, t: np.ndarray, deg: int) -> np.ndarray:
    """Rows of d/dx of the degree-deg B-spline design at x."""
    n_cols = len(t) - deg - 1
    lower = _design(x, t, deg - 1)  # has n_cols + 1 columns
    out = np.zeros((len(x), n_cols))
    for j in range(n_cols):
        d1 = t[j + deg] - t[j]
        d2 = t[j + deg + 1] - t[j + 1]
        if d1 > 0:
            out[:, j] += deg * lower[:, j] / d1
        if d2 > 0:
            out[:, j] -= deg * lower[:, j + 1] / d2
    return out


@dataclass(frozen=True)
class SplineBasis:
    """A spline basis frozen at construction so that later evaluations use
    exactly the training knots and centering."""

    knots: np.ndarray
    degree: int
    k_raw: int
    cyclic: bool
    period: float
    lo: float
    hi: float
    col_means: np.ndarray | None  # None when not centered
    drop_last: bool
    matrix: np.ndarray = field(repr=False)
    penalty: np.ndarray = field(repr=False)

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    def _raw(self, x: np.ndarray, warn: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("spline evaluation needs finite covariate values")
        if self.cyclic:
            u = np.mod(x, self.period)
            M = _design(u, self.knots, self.degree)
            folded = M[:, : self.k_raw].copy()
            for j in range(self.degree):
                folded[:, j] += M[:, j + self.k_raw]
            return folded
        xc = np.clip(x, self.lo, self.hi)
        B = _design(xc, self.knots, self.degree)
        outside = (x < self.lo) | (x > self.hi)
        if outside.any():
            if warn:
                warnings.warn(
                    f"{int(outside.sum())} value(s) outside the training range "
                    f"[{self.lo:g}, {self.hi:g}]; continuing the spline linearly"
                )
            Bd = _deriv_design(xc[outside], self.knots, self.degree)
            B[outside] += (x[outside] - xc[outside])[:, None] * Bd
        return B

    def evaluate(self, x, warn: bool = True) -> np.ndarray:
        B = self._raw(np.atleast_1d(np.asarray(x, dtype=float)), warn=warn)
        if self.col_means is not None:
            B = B - self.col_means
        if self.drop_last:
            B = B[:, :-1]
        return B


def build_spline_basis(
    x,
    k: int,
    cyclic: bool = False,
    period: float | None = None,
    center: bool = True,
) -> SplineBasis:
    """Basis matrix and curvature penalty for one spline term.

    center=True applies the sum-to-zero constraint (subtract column means,
    drop the last column, take the matching penalty submatrix); use it when
    an intercept shares the linear predictor.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("spline covariate contains non-finite values")
    if k < 3:
        raise ValueError("spline basis dimension must be >= 3")
    if len(np.unique(x)) < k:
        raise ValueError(
            f"need at least {k} distinct covariate values for a basis of size {k}"
        )
    if cyclic:
        if period is None or period <= 0:
            raise ValueError("cyclic spline needs a positive period")
        deg = 3
        u_knots = np.linspace(0.0, period, k + 1)
        step = period / k
        t = np.concatenate(
            [u_knots[0] - step * np.arange(deg, 0, -1), u_knots, u_knots[-1] + step * np.arange(1, deg + 1)]
        )
        lo, hi = 0.0, period
        S = second_difference_penalty(k, cyclic_wrap=True)
        k_raw = k
    else:
        lo, hi = float(np.min(x)), float(np.max(x))
        deg = 3 if k >= 4 else 2
        n_interior = k - deg - 1
        if n_interior > 0:
            qs = np.arange(1, n_interior + 1) / (n_interior + 1)
            interior = np.quantile(x, qs)
        else:
            interior = np.empty(0)
        t = np.concatenate([np.full(deg + 1, lo), interior, np.full(deg + 1, hi)])
        S = second_difference_penalty(k, cyclic_wrap=False)
        k_raw = k

    probe = SplineBasis(
        knots=t,
        degree=deg,
        k_raw=k_raw,
        cyclic=cyclic,
        period=float(period or 0.0),
        lo=lo,
        hi=hi,
        col_means=None,
        drop_last=False,
        matrix=np.empty((0, 0)),
        penalty=np.empty((0, 0)),
    )
    B = probe._raw(x)
    col_means = None
    drop = False
    if center:
        col_means = B.mean(axis=0)
        B = B - col_means
        B = B[:, :-1]
        S = S[:-1, :-1]
        drop = True
    S = 0.5 * (S + S.T)
    top = float(np.linalg.eigvalsh(S)[-1])
    S = S + PENALTY_RIDGE * top * np.eye(S.shape[0])
    return SplineBasis(
        knots=t,
        degree=deg,
        k_raw=k_raw,
        cyclic=cyclic,
        period=float(period or 0.0),
        lo=lo,
        hi=hi,
        col_means=col_means,
        drop_last=drop,
        matrix=B,
        penalty=S,
    )


def build_random_intercept(factor) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Indicator matrix (one column per level, first-appearance order) and an
    identity penalty, so the smoothing parameter is 1 over the variance."""
    values = [str(v) for v in np.asarray(factor, dtype=object)]
    levels: list[str] = []
    for v in values:
        if v not in levels:
            levels.append(v)
    if len(levels) < 2:
        raise ValueError(
            "random intercept needs at least 2 levels; got "
            f"{len(levels)} ({levels})"
        )
    M = np.zeros((len(values), len(levels)))
    index = {g: j for j, g in enumerate(levels)}
    for i, v in enumerate(values):
        M[i, index[v]] = 1.0
    return M, np.eye(len(levels)), tuple(levels)


@dataclass(frozen=True)
class PenaltyBlock:
    S: np.ndarray
    start: int
    stop: int
    label: str


@dataclass(frozen=True)
class DesignBundle:
    """Fixed matrix X, penalized matrix R, and penalty blocks for one linear
    predictor, plus everything needed to rebuild rows for new data."""

    terms: tuple[Term, ...]
    X: np.ndarray
    R: np.ndarray
    x_names: tuple[str, ...]
    r_names: tuple[str, ...]
    penalty_blocks: tuple[PenaltyBlock, ...]
    column_map: dict
    spline_bases: dict
    re_levels: dict

    @property
    def p_fixed(self) -> int:
        return self.X.shape[1]

    @property
    def p_random(self) -> int:
        return self.R.shape[1]

    def evaluate(self, columns, n_rows: int, warn: bool = True):
        """(X, R) rows for new covariate values.

        columns maps covariate name to an array of length n_rows; factor
        levels unseen in training get all-zero indicator rows (their random
        effect is taken at its prior mean).
        """
        X_parts, R_parts = [], []
        for term in self.terms:
            if term.kind == "intercept":
                X_parts.append(np.ones((n_rows, 1)))
            elif term.kind == "linear":
                X_parts.append(np.asarray(columns[term.cov], dtype=float).reshape(-1, 1))
            elif term.kind == "poly":
                x = np.asarray(columns[term.cov], dtype=float)
                X_parts.append(np.column_stack([x**d for d in range(1, term.degree + 1)]))
            elif term.kind in ("spline_cubic", "spline_cyclic"):
                R_parts.append(self.spline_bases[term].evaluate(columns[term.cov], warn=warn))
            elif term.kind == "random_intercept":
                levels = self.re_levels[term]
                index = {g: j for j, g in enumerate(levels)}
                vals = [str(v) for v in np.asarray(columns[term.cov], dtype=object)]
                M = np.zeros((n_rows, len(levels)))
                for i, v in enumerate(vals):
                    j = index.get(v)
                    if j is not None:
                        M[i, j] = 1.0
                R_parts.append(M)
            else:  # pragma: no cover
                raise ValueError(term.kind)
        X = np.hstack(X_parts) if X_parts else np.empty((n_rows, 0))
        R = np.hstack(R_parts) if R_parts else np.empty((n_rows, 0))
        return X, R


def assemble(terms, d) -> DesignBundle:
    """Build the design bundle for one linear predictor from a Dataset."""
    terms = tuple(terms)
    if sum(t.kind == "intercept" for t in terms) > 1:
        raise ValueError("a linear predictor can carry at most one intercept")
    has_intercept = any(t.kind == "intercept" for t in terms)

    n = d.n_rows
    X_parts: list[np.ndarray] = []
    R_parts: list[np.ndarray] = []
    x_names: list[str] = []
    r_names: list[str] = []
    blocks: list[PenaltyBlock] = []
    column_map: dict = {}
    spline_bases: dict = {}
    re_levels: dict = {}

    def covariate(name: str) -> np.ndarray:
        if name not in d.covariate_names:
            raise ValueError(f"unknown covariate {name!r} in term list")
        x = d.covariate(name)
        if not np.all(np.isfinite(x)):
            raise ValueError(
                f"covariate {name!r} still has missing values; fill gaps first"
            )
        return x

    # fixed-effect side: intercept first, then the others in declaration order
    ordered = [t for t in terms if t.kind == "intercept"] + [
        t for t in terms if t.kind in ("linear", "poly")
    ]
    for term in ordered:
        if term.kind == "intercept":
            X_parts.append(np.ones((n, 1)))
            cols = ["(Intercept)"]
        elif term.kind == "linear":
            X_parts.append(covariate(term.cov).reshape(-1, 1))
            cols = [term.cov]
        else:
            x = covariate(term.cov)
            X_parts.append(np.column_stack([x**p for p in range(1, term.degree + 1)]))
            cols = [f"{term.label()}{p}" for p in range(1, term.degree + 1)]
        start = len(x_names)
        x_names.extend(cols)
        column_map[term] = ("X", range(start, len(x_names)))

    for term in terms:
        if term.kind in ("spline_cubic", "spline_cyclic"):
            basis = build_spline_basis(
                covariate(term.cov),
                term.k,
                cyclic=term.kind == "spline_cyclic",
                period=term.period if term.kind == "spline_cyclic" else None,
                center=has_intercept,
            )
            start = sum(r.shape[1] for r in R_parts)
            R_parts.append(basis.matrix)
            stop = start + basis.n_cols
            blocks.append(PenaltyBlock(basis.penalty, start, stop, term.label()))
            r_names.extend(f"{term.label()}.{j + 1}" for j in range(basis.n_cols))
            column_map[term] = ("R", range(start, stop))
            spline_bases[term] = basis
        elif term.kind == "random_intercept":
            M, S, levels = build_random_intercept(d.factor_values(term.cov))
            start = sum(r.shape[1] for r in R_parts)
            R_parts.append(M)
            stop = start + M.shape[1]
            blocks.append(PenaltyBlock(S, start, stop, term.label()))
            r_names.extend(f"{term.label()}.{g}" for g in levels)
            column_map[term] = ("R", range(start, stop))
            re_levels[term] = levels

    X = np.hstack(X_parts) if X_parts else np.empty((n, 0))
    R = np.hstack(R_parts) if R_parts else np.empty((n, 0))
    order = [t for t in ordered] + [
        t for t in terms if t.kind in ("spline_cubic", "spline_cyclic", "random_intercept")
    ]
    return DesignBundle(
        terms=tuple(order),
        X=X,
        R=R,
        x_names=tuple(x_names),
        r_names=tuple(r_names),
        penalty_blocks=tuple(blocks),
        column_map=column_map,
        spline_bases=spline_bases,
        re_levels=re_levels,
    )

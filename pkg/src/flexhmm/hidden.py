"""Hidden-chain structure: multinomial-logit transition matrices, structural
zeros, initial distributions, stationary distributions.

Each off-diagonal entry (i, j) of the transition matrix has its own linear
predictor; the diagonal is the reference category with predictor 0, so row i
is softmax([.., eta_ij, .., 0, ..]). Structural zeros drop entries from the
normalization entirely instead of pushing predictors to -inf.

All indices here are 0-based; the spec-file surface uses 1-based states.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .dists import NEG


def allowed_mask(K: int, zeros) -> np.ndarray:
    """Boolean K x K matrix: True where a transition probability may be
    positive (diagonal always, off-diagonals unless structurally zero)."""
    m = np.ones((K, K), dtype=bool)
    for i, j in zeros:
        if i == j:
            raise ValueError("structural zeros cannot sit on the diagonal")
        if not (0 <= i < K and 0 <= j < K):
            raise ValueError(f"structural zero ({i},{j}) outside a {K}-state chain")
        m[i, j] = False
    return m


def _strongly_connected(adj: np.ndarray) -> bool:
    K = adj.shape[0]
    reach = np.eye(K, dtype=bool) | adj
    for _ in range(K):
        reach = reach | (reach @ reach)
    return bool(reach.all())


@dataclass(frozen=True)
class ChainSpec:
    """Structure of the hidden chain.

    tp_terms maps each allowed off-diagonal (i, j) to its term list (module
    design). initial_mode is "estimated", "stationary", or a tuple of fixed
    1-based starting states (one per series, or length 1 to share).
    """

    K: int
    tp_terms: dict = field(default_factory=dict)
    initial_mode: object = "stationary"
    structural_zeros: frozenset = frozenset()

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least 2 hidden states")
        mask = allowed_mask(self.K, self.structural_zeros)
        for i, j in self.tp_terms:
            if i == j:
                raise ValueError("diagonal transition entries are the reference; no terms allowed")
            if (i, j) in self.structural_zeros:
                raise ValueError(
                    f"transition ({i + 1},{j + 1}) is structurally zero but has terms"
                )
        if isinstance(self.initial_mode, str):
            if self.initial_mode not in ("estimated", "stationary"):
                raise ValueError(
                    "initial_mode must be 'estimated', 'stationary', or fixed states"
                )
        else:
            states = tuple(int(s) for s in self.initial_mode)
            if not states or any(s < 1 or s > self.K for s in states):
                raise ValueError("fixed initial states must be 1-based state labels")
            object.__setattr__(self, "initial_mode", states)
        if not _strongly_connected(mask & ~np.eye(self.K, dtype=bool)):
            warnings.warn(
                "structural zeros leave the state graph not strongly connected; "
                "stationary initial distributions will fail"
            )

    @property
    def free_transitions(self) -> list:
        """Allowed off-diagonal entries, row-major."""
        return [
            (i, j)
            for i in range(self.K)
            for j in range(self.K)
            if i != j and (i, j) not in self.structural_zeros
        ]

    def mask(self) -> np.ndarray:
        return allowed_mask(self.K, self.structural_zeros)


def tpm_from_eta(eta: np.ndarray, zeros=()) -> np.ndarray:
    """Row-wise softmax with the diagonal as reference and structural zeros
    excluded from the normalization; max-subtraction keeps it overflow-safe."""
    eta = np.asarray(eta, dtype=float)
    K = eta.shape[-1]
    if eta.shape[-2] != K:
        raise ValueError("eta must be square")
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite")
    diag = np.diagonal(eta, axis1=-2, axis2=-1)
    if np.any(diag != 0):
        raise ValueError("diagonal (reference) entries of eta must be 0")
    mask = allowed_mask(K, zeros)
    vals = np.where(mask, eta, -np.inf)
    mx = np.max(vals, axis=-1, keepdims=True)
    p = np.where(mask, np.exp(vals - mx), 0.0)
    return p / p.sum(axis=-1, keepdims=True)


def tpm_from_eta_jnp(eta, mask):
    """jnp twin of tpm_from_eta; mask is the allowed-entry matrix and eta may
    carry leading batch dimensions."""
    vals = jnp.where(mask, eta, NEG)
    mx = jnp.max(vals, axis=-1, keepdims=True)
    p = jnp.where(mask, jnp.exp(vals - mx), 0.0)
    return p / jnp.sum(p, axis=-1, keepdims=True)


def stationary(gamma: np.ndarray) -> np.ndarray:
    """Stationary distribution via (I - Gamma' + 1)' delta = 1."""
    gamma = np.asarray(gamma, dtype=float)
    K = gamma.shape[0]
    adj = (gamma > 1e-12) & ~np.eye(K, dtype=bool)
    if not _strongly_connected(adj):
        raise ValueError(
            "transition matrix is reducible, so no unique stationary "
            "distribution exists; use the 'fixed' or 'estimated' initial mode"
        )
    eigs = np.linalg.eigvals(gamma)
    if np.sum(np.abs(eigs) > 1.0 - 1e-9) > 1:
        raise ValueError(
            "transition matrix is periodic; use the 'fixed' or 'estimated' "
            "initial mode"
        )
    A = np.eye(K) - gamma.T + np.ones((K, K))
    delta = np.linalg.solve(A, np.ones(K))
    return np.clip(delta, 0.0, None) / np.clip(delta, 0.0, None).sum()


def stationary_jnp(gamma):
    """jnp stationary solve, no validity checking (for inside jitted code)."""
    K = gamma.shape[-1]
    A = jnp.eye(K) - jnp.swapaxes(gamma, -1, -2) + jnp.ones((K, K))
    return jnp.linalg.solve(A, jnp.ones(K))


def default_tpm(K: int) -> np.ndarray:
    """0.9 on the diagonal, the rest spread evenly."""
    g = np.full((K, K), 0.1 / (K - 1))
    np.fill_diagonal(g, 0.9)
    return g


def eta_from_tpm(gamma: np.ndarray, zeros=()) -> np.ndarray:
    """Intercepts reproducing a constant transition matrix: log(g_ij/g_ii).
    Inverse of tpm_from_eta for matrices respecting the zero pattern."""
    gamma = np.asarray(gamma, dtype=float)
    K = gamma.shape[0]
    mask = allowed_mask(K, zeros)
    eta = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            if i != j and mask[i, j]:
                eta[i, j] = np.log(gamma[i, j] / gamma[i, i])
    return eta


def eta_sequence(K: int, zeros, bundles: dict, alphas: dict, betas: dict, n: int) -> np.ndarray:
    """Per-time eta matrices (n, K, K) from per-transition designs.

    bundles/alphas/betas map allowed (i, j) pairs to a DesignBundle and its
    coefficient vectors; missing entries mean a zero predictor. Diagonals are
    0 and structural zeros are skipped entirely.
    """
    mask = allowed_mask(K, zeros)
    eta = np.zeros((n, K, K))
    for (i, j), bundle in bundles.items():
        if i == j or not mask[i, j]:
            raise ValueError(f"no linear predictor allowed at ({i},{j})")
        a = np.asarray(alphas.get((i, j), np.zeros(bundle.p_fixed)), dtype=float)
        b = np.asarray(betas.get((i, j), np.zeros(bundle.p_random)), dtype=float)
        if a.shape != (bundle.p_fixed,) or b.shape != (bundle.p_random,):
            raise ValueError(f"coefficient shapes do not match design at ({i},{j})")
        eta[:, i, j] = bundle.X @ a + bundle.R @ b
    return eta

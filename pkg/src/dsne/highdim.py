"""High-dimensional conditional similarity distributions.

For each point i the similarity between its unit velocity and the
mean-corrected direction to neighbor j is converted into a conditional
probability through a Gaussian kernel on the sphere,

    p_{j|i} = exp(-2 * beta_x_i * (1 - cos_x_ij)) / Z_x_i,

with Z_x_i = 1 + sum_j exp(...). The leading 1 is the pseudo-point reached by
moving i along its own velocity, whose direction matches the velocity exactly
(cos = 1), and it owns the self probability p_{i|i} = 1 / Z_x_i. The inverse
variance beta_x_i is calibrated per point by binary search so the full
distribution hits a user-chosen perplexity. p_tilde is the same distribution
renormalized over the neighbors only (pseudo-point dropped); it weights the
error terms during optimization.

Entropy is measured in nats throughout, so the perplexity target is
H = ln(perplexity); this is the same condition as the base-2 definition at
matched base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import build_direction_field
from .knn import NeighborTable

BETA_FLOOR = 1e-12
BETA_SEARCH_TOL = 1e-5
BETA_SEARCH_MAX_ITER = 200

# Default kernel calibration: favors low perplexity with a moderate
# neighborhood, which is where direction matching is most informative.
DEFAULT_PERPLEXITY = 3.0
DEFAULT_K = 16


@dataclass
class ConditionalP:
    """Calibrated high-dimensional conditional distributions.

    Rows where the velocity is exactly zero are masked out (``active`` False):
    their p_tilde rows are zero, beta is a placeholder 1.0, and they take no
    part in the optimization.
    """

    p_tilde: np.ndarray  # (N, K) neighbor-renormalized probabilities
    p_self: np.ndarray   # (N,) pseudo-point probability 1 / Z_x
    beta_x: np.ndarray   # (N,) calibrated inverse variances
    cos_x: np.ndarray    # (N, K) velocity/corrected-direction cosines
    active: np.ndarray   # (N,) bool, False for zero-velocity rows


def p_row(cosines: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Conditional probability row for one point at a given beta.

    Returns (p_self, p_neighbors) with p_self = 1/Z and
    p_j = exp(-2 beta (1 - cos_j)) / Z, Z = 1 + sum_j exp(...).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    cosines = np.asarray(cosines, dtype=float)
    e = np.exp(-2.0 * beta * (1.0 - cosines))
    z = 1.0 + e.sum()
    return 1.0 / z, e / z


def entropy_of_row(p_self: float, p_neighbors: np.ndarray) -> float:
    """Shannon entropy in nats of the row including the pseudo-point.

    Zero probabilities contribute zero (0 * ln 0 = 0).
    """
    p_neighbors = np.asarray(p_neighbors, dtype=float)
    h = 0.0
    if p_self > 0:
        h -= p_self * math.log(p_self)
    pos = p_neighbors[p_neighbors > 0]
    h -= float(np.sum(pos * np.log(pos)))
    return h


def calibrate_beta_x(
    cosines: np.ndarray,
    perplexity: float,
    tol: float = BETA_SEARCH_TOL,
    max_iter: int = BETA_SEARCH_MAX_ITER,
) -> tuple[float, tuple[float, np.ndarray]]:
    """Binary search for beta so the row entropy hits ln(perplexity).

    Entropy decreases monotonically in beta, so the search starts at beta = 1,
    doubles or halves until the target is bracketed, then bisects. Returns the
    best iterate (smallest |H - ln perplexity|) if tolerance is not reached
    within ``max_iter`` steps. Beta is floored at a tiny positive value so the
    maximal-entropy limit (perplexity = K + 1) stays representable.
    """
    cosines = np.asarray(cosines, dtype=float)
    k = cosines.shape[0]
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 1.0 <= perplexity <= k + 1.0:
        raise ValueError(
            f"perplexity must lie in [1, K+1] = [1, {k + 1}], got {perplexity}"
        )
    target = math.log(perplexity)

    beta = 1.0
    beta_min = -math.inf
    beta_max = math.inf
    best_err = math.inf
    best: tuple[float, float, np.ndarray] | None = None

    for _ in range(max_iter):
        p_self, p_nb = p_row(cosines, beta)
        dh = entropy_of_row(p_self, p_nb) - target
        if abs(dh) < best_err:
            best_err = abs(dh)
            best = (beta, p_self, p_nb)
        if abs(dh) <= tol:
            break
        if dh > 0:
            # Entropy too high: sharpen the kernel.
            beta_min = beta
            beta = beta * 2.0 if math.isinf(beta_max) else 0.5 * (beta + beta_max)
        else:
            beta_max = beta
            beta = beta / 2.0 if math.isinf(beta_min) else 0.5 * (beta + beta_min)
        beta = max(beta, BETA_FLOOR)

    assert best is not None
    return best[0], (best[1], best[2])


def build_conditional_p(
    X: np.ndarray,
    V: np.ndarray,
    B: NeighborTable,
    perplexity: float = DEFAULT_PERPLEXITY,
) -> ConditionalP:
    """Calibrated conditional distributions for every point with velocity.

    Cosines are taken between each unit velocity and the mean-corrected
    neighbor directions. Rows with zero velocity are masked out; if every row
    is zero there is nothing to embed and a ValueError is raised.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if X.shape != V.shape:
        raise ValueError(f"X and V shapes differ: {X.shape} vs {V.shape}")
    n, k = B.N, B.K
    if X.shape[0] != n:
        raise ValueError("neighbor table does not match X")

    v_norms = np.linalg.norm(V, axis=1)
    active = v_norms > 0.0
    if not active.any():
        raise ValueError("nothing to embed: all velocity rows are zero")

    field = build_direction_field(X, B.B)
    v_hat = np.zeros_like(V)
    v_hat[active] = V[active] / v_norms[active, None]
    cos_x = np.clip(
        np.einsum("nkd,nd->nk", field.corrected, v_hat), -1.0, 1.0
    )

    p_tilde = np.zeros((n, k))
    p_self = np.zeros(n)
    beta_x = np.ones(n)
    for i in np.flatnonzero(active):
        beta, (pself, p_nb) = calibrate_beta_x(cos_x[i], perplexity)
        beta_x[i] = beta
        p_self[i] = pself
        s = p_nb.sum()
        # Renormalize the neighbor part; at extreme beta all neighbor mass can
        # underflow, in which case the best-aligned neighbors share it evenly.
        if s > 0:
            p_tilde[i] = p_nb / s
        else:
            top = cos_x[i] == cos_x[i].max()
            p_tilde[i, top] = 1.0 / top.sum()
    return ConditionalP(
        p_tilde=p_tilde, p_self=p_self, beta_x=beta_x, cos_x=cos_x, active=active
    )

"""Velocity-embedding solver.

Minimizes the directional KL objective

    C = sum_i sum_{j != i} p_tilde_{j|i} * ln(p_{j|i} / q_{j|i})

over the unit-sphere directions w_i and the per-point inverse variances
beta_y_i of the low-dimensional kernel. The w update is momentum gradient
descent with per-coordinate adaptive gains followed by reprojection onto the
sphere; beta_y is adjusted by a conditioned binary search that only bisects
when the entropy mismatch and the loss gradient pull in the same direction.
The loss depends on w_i only through w_i / ||w_i||, which is what makes the
sphere constraint free.

The scaled gradient

    g_{w_i} = sum_j (p_tilde_{j|i} - q_{j|i}) (-dy_ij + cos_y_ij * w_hat_i)

drops the positive prefactor 2 beta_y_i / ||w_i|| of the true gradient (a
Newton-flavored rescaling); ``full_gradient_w`` and ``hessian_w`` implement
the unscaled derivatives for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DirectionField, build_direction_field
from .highdim import (
    DEFAULT_K,
    DEFAULT_PERPLEXITY,
    BETA_FLOOR,
    ConditionalP,
    build_conditional_p,
)
from .knn import build_vptree, knn_all

GAIN_STEP = 0.2
GAIN_DECAY = 0.8
GAIN_FLOOR = 0.01
Q_FLOOR = 1e-300
BETA_Y_TOL = 1e-5
BETA_Y_MAX_STEPS = 50
BETA_CAP = 1e100
GRAD_STALL_ITERS = 10
NORM_STABILIZER = 1e-8
_NORM_EPS = 1e-12


class NumericalAbort(RuntimeError):
    """Raised when the solver encounters a non-finite gradient."""


@dataclass
class SolverConfig:
    eta: float = 0.1
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int = 250
    max_iter: int = 1000
    grad_tol: float = 1e-7
    perplexity: float = DEFAULT_PERPLEXITY
    K: int = DEFAULT_K
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        for m in (self.momentum_early, self.momentum_late):
            if not 0.0 <= m < 1.0:
                raise ValueError("momentum must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class EmbeddingState:
    W: np.ndarray        # (N, d), unit rows while optimizing
    gains: np.ndarray    # (N, d)
    u_W: np.ndarray      # (N, d) momentum accumulator
    beta_y: np.ndarray   # (N,)
    iter: int = 0
    grad_inf: float = field(default=math.inf)


def q_row(
    corrected_y: np.ndarray, w_hat: np.ndarray, beta: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Low-dimensional conditional row for one point.

    Returns (q_self, q_neighbors, cos_y) with the same kernel form as the
    high-dimensional side: q_j = exp(-2 beta (1 - cos_j)) / Z_y and
    q_self = 1 / Z_y for the pseudo-point.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    corrected_y = np.asarray(corrected_y, dtype=float)
    w_hat = np.asarray(w_hat, dtype=float)
    cos_y = np.clip(corrected_y @ w_hat, -1.0, 1.0)
    e = np.exp(-2.0 * beta * (1.0 - cos_y))
    z = 1.0 + e.sum()
    return 1.0 / z, e / z, cos_y


def dsne_loss(p_tilde: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """Per-point loss sum_j p_tilde_j * ln(p_j / q_j).

    q is floored at a tiny positive value so fully collapsed rows do not
    produce -inf; zero p_tilde entries contribute nothing.
    """
    p_tilde = np.asarray(p_tilde, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p_tilde > 0
    if not mask.any():
        return 0.0
    return float(
        np.sum(
            p_tilde[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], Q_FLOOR)))
        )
    )


def scaled_gradient_w(
    p_tilde: np.ndarray,
    q: np.ndarray,
    cos_y: np.ndarray,
    corrected_y: np.ndarray,
    w_hat: np.ndarray,
) -> np.ndarray:
    """Scaled gradient sum_j (p_tilde_j - q_j)(-dy_j + cos_j * w_hat).

    Each term is a tangent-space direction, so the result is orthogonal to
    w_hat up to rounding.
    """
    diff = np.asarray(p_tilde, dtype=float) - np.asarray(q, dtype=float)
    return -diff @ corrected_y + float(diff @ cos_y) * np.asarray(w_hat, dtype=float)


def full_gradient_w(
    state: EmbeddingState, cond: ConditionalP, dfield: DirectionField, i: int
) -> np.ndarray:
    """Exact gradient of the loss in w_i: (2 beta_y_i / ||w_i||) * scaled.

    Verification-only; the solver steps along the scaled gradient.
    """
    w = state.W[i]
    norm = float(np.linalg.norm(w))
    w_hat = w / norm
    beta = float(state.beta_y[i])
    _, q, cos_y = q_row(dfield.corrected[i], w_hat, beta)
    g = scaled_gradient_w(cond.p_tilde[i], q, cos_y, dfield.corrected[i], w_hat)
    return (2.0 * beta / norm) * g


def hessian_w(
    state: EmbeddingState, cond: ConditionalP, dfield: DirectionField, i: int
) -> np.ndarray:
    """Second derivative matrix of the loss in w_i (verification-only)."""
    w = state.W[i]
    norm = float(np.linalg.norm(w))
    w_hat = w / norm
    beta = float(state.beta_y[i])
    corr = dfield.corrected[i]
    p_t = cond.p_tilde[i]
    _, q, cos_y = q_row(corr, w_hat, beta)
    d = w.shape[0]
    eye = np.eye(d)
    diff = p_t - q

    ww = np.outer(w_hat, w_hat)
    first = np.zeros((d, d))
    for j in range(corr.shape[0]):
        dy = corr[j]
        first += diff[j] * (
            np.outer(dy, w_hat) + np.outer(w_hat, dy) + cos_y[j] * eye - 3.0 * cos_y[j] * ww
        )
    first *= 2.0 * beta / norm**2

    e_dy = q @ corr
    e_cos = float(q @ cos_y)
    second = np.zeros((d, d))
    for j in range(corr.shape[0]):
        dy = corr[j]
        left = -dy + cos_y[j] * w_hat
        right = (dy - e_dy) - w_hat * (cos_y[j] - e_cos)
        second += q[j] * np.outer(left, right)
    second *= 4.0 * beta**2 / norm**2

    return first - second


def gradient_beta_y(p_tilde: np.ndarray, q: np.ndarray, cos_y: np.ndarray) -> float:
    """Gradient of the loss in beta_y: sum_j (p_tilde_j - q_j) * 2(1 - cos_j)."""
    diff = np.asarray(p_tilde, dtype=float) - np.asarray(q, dtype=float)
    return float(diff @ (2.0 * (1.0 - np.asarray(cos_y, dtype=float))))


def second_derivative_beta_y(q: np.ndarray, cos_y: np.ndarray) -> float:
    """Second derivative in beta_y, a variance form that is always >= 0:

    4 * [sum_j q_j (1-cos_j)^2 - (sum_j q_j (1-cos_j))^2].
    """
    q = np.asarray(q, dtype=float)
    t = 1.0 - np.asarray(cos_y, dtype=float)
    return 4.0 * (float(q @ t**2) - float(q @ t) ** 2)


def _unit_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1)
    out = np.zeros_like(M)
    nz = norms > 0
    out[nz] = M[nz] / norms[nz, None]
    return out


def _q_all(
    corrected: np.ndarray, w_hat: np.ndarray, beta: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized q rows: returns (z, q, cos_y) over the given rows."""
    cos_y = np.clip(np.einsum("nkd,nd->nk", corrected, w_hat), -1.0, 1.0)
    e = np.exp(-2.0 * beta[:, None] * (1.0 - cos_y))
    z = 1.0 + e.sum(axis=1)
    return z, e / z[:, None], cos_y


def total_loss(
    cond: ConditionalP, dfield: DirectionField, W: np.ndarray, beta_y: np.ndarray
) -> float:
    """Full objective over all active points for a given W and beta_y."""
    idx = np.flatnonzero(cond.active)
    w_hat = _unit_rows(W[idx])
    _, q, _ = _q_all(dfield.corrected[idx], w_hat, np.asarray(beta_y)[idx])
    p_t = cond.p_tilde[idx]
    p_nb = p_t * (1.0 - cond.p_self[idx])[:, None]
    mask = p_t > 0
    q = np.maximum(q, Q_FLOOR)
    terms = np.where(mask, p_t * (np.log(np.where(mask, p_nb, 1.0)) - np.log(q)), 0.0)
    return float(terms.sum())


def update_velocity_embedding(
    state: EmbeddingState,
    cond: ConditionalP,
    dfield: DirectionField,
    config: SolverConfig,
    sweeps: int = 1,
) -> EmbeddingState:
    """One or more momentum/adaptive-gain sweeps over every active w_i.

    Per coordinate: gains grow by 0.2 where the gradient sign disagrees with
    the accumulated momentum and decay by 0.8 otherwise (floored); then
    u <- gamma * u - eta * gains * g, w <- w + u, and w is reprojected onto
    the unit sphere. Records the infinity norm of the largest gradient in
    ``state.grad_inf``.
    """
    idx = np.flatnonzero(cond.active)
    corr = dfield.corrected[idx]
    p_t = cond.p_tilde[idx]
    for _ in range(sweeps):
        gamma = (
            config.momentum_early
            if state.iter < config.momentum_switch_iter
            else config.momentum_late
        )
        W = state.W[idx]
        w_hat = W / np.maximum(np.linalg.norm(W, axis=1), _NORM_EPS)[:, None]
        _, q, cos_y = _q_all(corr, w_hat, state.beta_y[idx])
        diff = p_t - q
        g = -np.einsum("nk,nkd->nd", diff, corr) + (diff * cos_y).sum(axis=1)[:, None] * w_hat
        if not np.isfinite(g).all():
            bad = int(idx[np.flatnonzero(~np.isfinite(g).all(axis=1))[0]])
            raise NumericalAbort(
                f"non-finite gradient for point {bad} at iteration {state.iter}"
            )
        gains = state.gains[idx]
        u = state.u_W[idx]
        gains = np.where(np.sign(g) != np.sign(u), gains + GAIN_STEP, gains * GAIN_DECAY)
        gains = np.maximum(gains, GAIN_FLOOR)
        u = gamma * u - config.eta * gains * g
        W = w_hat + u
        W /= np.maximum(np.linalg.norm(W, axis=1), _NORM_EPS)[:, None]
        state.gains[idx] = gains
        state.u_W[idx] = u
        state.W[idx] = W
        state.grad_inf = float(np.abs(g).max()) if g.size else 0.0
        state.iter += 1
    return state


def update_beta_q(
    state: EmbeddingState,
    cond: ConditionalP,
    dfield: DirectionField,
    perplexity: float,
    tol: float = BETA_Y_TOL,
    max_steps: int = BETA_Y_MAX_STEPS,
) -> EmbeddingState:
    """Conditioned binary search on beta_y_i for every active point.

    A point stops as soon as its beta gradient is tiny, its entropy matches
    ln(perplexity), or the two disagree on direction (dH * g >= 0): shrinking
    the entropy toward the target is only worthwhile while it also lowers the
    loss. Otherwise the bracket [beta_min, beta_max] tightens by doubling /
    halving until bracketed, then bisecting.
    """
    idx = np.flatnonzero(cond.active)
    corr = dfield.corrected[idx]
    p_t = cond.p_tilde[idx]
    W = state.W[idx]
    w_hat = W / np.maximum(np.linalg.norm(W, axis=1), _NORM_EPS)[:, None]
    cos_y = np.clip(np.einsum("nkd,nd->nk", corr, w_hat), -1.0, 1.0)
    dist = 2.0 * (1.0 - cos_y)

    beta = state.beta_y[idx].copy()
    m = beta.shape[0]
    beta_min = np.full(m, -np.inf)
    beta_max = np.full(m, np.inf)
    live = np.ones(m, dtype=bool)
    log_perp = math.log(perplexity)

    for _ in range(max_steps):
        li = np.flatnonzero(live)
        if li.size == 0:
            break
        e = np.exp(-beta[li, None] * dist[li])
        z = 1.0 + e.sum(axis=1)
        q = e / z[:, None]
        g = ((p_t[li] - q) * dist[li]).sum(axis=1)
        q_pos = np.maximum(q, Q_FLOOR)
        h = -(q * np.log(q_pos)).sum(axis=1) + np.log(z) / z
        dh = h - log_perp
        stop = (np.abs(g) < tol) | (np.abs(dh) < tol) | (dh * g >= 0.0)
        live[li[stop]] = False
        go = li[~stop]
        if go.size == 0:
            continue
        up = dh[~stop] > 0
        rows_up = go[up]
        rows_dn = go[~up]
        # Entropy too high: raise beta (double until an upper bracket exists).
        beta_min[rows_up] = beta[rows_up]
        unbounded = ~np.isfinite(beta_max[rows_up])
        beta[rows_up] = np.where(
            unbounded, beta[rows_up] * 2.0, 0.5 * (beta[rows_up] + beta_max[rows_up])
        )
        beta_max[rows_dn] = beta[rows_dn]
        unbounded = ~np.isfinite(beta_min[rows_dn])
        beta[rows_dn] = np.where(
            unbounded, beta[rows_dn] / 2.0, 0.5 * (beta[rows_dn] + beta_min[rows_dn])
        )
        np.clip(beta, BETA_FLOOR, BETA_CAP, out=beta)

    state.beta_y[idx] = beta
    return state


def restore_norms(
    W_unit: np.ndarray,
    X: np.ndarray,
    V: np.ndarray,
    Y: np.ndarray,
    stabilizers: tuple[float, float] = (NORM_STABILIZER, NORM_STABILIZER),
) -> np.ndarray:
    """Assign output norms: w_i = scale * ||v_i|| * w_hat_i with the single
    global scale mean_j (||y_j|| + s_y) / (||x_j|| + s_x).

    Rows with zero velocity come out exactly zero.
    """
    s_y, s_x = stabilizers
    y_norms = np.linalg.norm(np.asarray(Y, dtype=float), axis=1)
    x_norms = np.linalg.norm(np.asarray(X, dtype=float), axis=1)
    scale = float(np.mean((y_norms + s_y) / (x_norms + s_x)))
    v_norms = np.linalg.norm(np.asarray(V, dtype=float), axis=1)
    return scale * v_norms[:, None] * _unit_rows(np.asarray(W_unit, dtype=float))


def _validate_problem(X: np.ndarray, V: np.ndarray, Y: np.ndarray, K: int) -> None:
    if X.ndim != 2 or V.ndim != 2 or Y.ndim != 2:
        raise ValueError("X, V, Y must be 2-D matrices")
    if X.shape != V.shape:
        raise ValueError(f"X and V shapes differ: {X.shape} vs {V.shape}")
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"row count mismatch: X has {X.shape[0]}, Y has {Y.shape[0]}")
    if K >= X.shape[0]:
        raise ValueError(f"K={K} requires more than K points, got {X.shape[0]}")


def prepare_problem(
    X: np.ndarray, V: np.ndarray, Y: np.ndarray, config: SolverConfig
) -> tuple[ConditionalP, DirectionField]:
    """Neighbor search plus both precomputed fields the solver iterates on."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    Y = np.asarray(Y, dtype=float)
    _validate_problem(X, V, Y, config.K)
    tree = build_vptree(X, seed=config.seed)
    table = knn_all(tree, config.K)
    cond = build_conditional_p(X, V, table, config.perplexity)
    dfield = build_direction_field(Y, table.B)
    return cond, dfield


def init_state(
    n: int,
    d: int,
    seed: int,
    w_init: np.ndarray | None = None,
    beta_y_init: np.ndarray | None = None,
) -> EmbeddingState:
    """Fresh solver state: unit directions (uniform on the sphere via
    normalized Gaussians unless ``w_init`` is given), unit gains, zero
    momentum, beta_y = 1."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, d)) if w_init is None else np.array(w_init, dtype=float)
    if W.shape != (n, d):
        raise ValueError(f"w_init must have shape ({n}, {d})")
    norms = np.linalg.norm(W, axis=1)
    zero = norms <= 0
    if zero.any():
        W[zero] = rng.standard_normal((int(zero.sum()), d))
        norms = np.linalg.norm(W, axis=1)
    W = W / norms[:, None]
    beta_y = (
        np.ones(n) if beta_y_init is None else np.array(beta_y_init, dtype=float)
    )
    if beta_y.shape != (n,) or (beta_y <= 0).any():
        raise ValueError("beta_y_init must be positive with one entry per point")
    return EmbeddingState(
        W=W, gains=np.ones((n, d)), u_W=np.zeros((n, d)), beta_y=beta_y
    )


def run_dsne(
    X: np.ndarray,
    V: np.ndarray,
    Y: np.ndarray,
    config: SolverConfig | None = None,
    w_init: np.ndarray | None = None,
    beta_y_init: np.ndarray | None = None,
) -> np.ndarray:
    """Full pipeline: KNN, kernel calibration, alternating optimization of W
    and beta_y, then norm restoration. Deterministic given the config seed.

    Stops early once the largest scaled-gradient coordinate stays below
    ``config.grad_tol`` for ten consecutive iterations.
    """
    config = config or SolverConfig()
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    Y = np.asarray(Y, dtype=float)
    cond, dfield = prepare_problem(X, V, Y, config)
    state = init_state(
        X.shape[0], Y.shape[1], config.seed, w_init=w_init, beta_y_init=beta_y_init
    )
    calm = 0
    for _ in range(config.max_iter):
        update_velocity_embedding(state, cond, dfield, config)
        update_beta_q(state, cond, dfield, config.perplexity)
        calm = calm + 1 if state.grad_inf < config.grad_tol else 0
        if calm >= GRAD_STALL_ITERS:
            break
    W = state.W.copy()
    W[~cond.active] = 0.0
    return restore_norms(W, X, V, Y)

"""The two comparison methods.

``scvelo_embedding`` is the probability-weighted mean of raw unit neighbor
directions minus the global mean direction, returned without any unit
normalization. ``dsne_approximate`` is the closed-form shortcut to the full
solver: the p_tilde-weighted mean of the mean-corrected directions, unit
normalized and rescaled like the solver output. It amounts to dropping the
log-normalizer term of the full objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import EPS_DIRECTION, build_direction_field
from .highdim import build_conditional_p, calibrate_beta_x
from .knn import build_vptree, knn_all
from .optimizer import _validate_problem, restore_norms

SCVELO_DEFAULT_K = 100
_DEGENERATE_SUM = 1e-12
# Dense full-mean computation is O(N^2); beyond this the inputs are outside
# the sizes this implementation is meant for.
_MAX_DENSE_N = 30000
_CHUNK = 512


@dataclass
class BaselineConfig:
    method: str  # "scvelo" or "dsne_approx"
    K: int | None = None
    perplexity: float | None = None

    def __post_init__(self):
        if self.method not in ("scvelo", "dsne_approx"):
            raise ValueError(f"unknown baseline method: {self.method!r}")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")

    def resolve(self, n: int) -> tuple[int, float]:
        """Effective (K, perplexity) for an N-point problem."""
        if self.K is not None:
            k = self.K
        elif self.method == "scvelo":
            k = min(SCVELO_DEFAULT_K, n - 1)
        else:
            k = min(16, n - 1)
        if self.perplexity is not None:
            perp = self.perplexity
        elif self.method == "scvelo":
            perp = float(math.ceil(k / 3))
        else:
            perp = 3.0
        return k, min(perp, k + 1.0)


def _full_mean_directions(Y: np.ndarray) -> np.ndarray:
    """Mean over all other points of the unit directions from each point.

    Computed dense in row chunks; coincident pairs contribute zero vectors.
    """
    n = Y.shape[0]
    if n > _MAX_DENSE_N:
        raise ValueError(f"full-mean computation capped at N={_MAX_DENSE_N}")
    out = np.zeros_like(Y)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        diffs = Y[None, :, :] - Y[lo:hi, None, :]       # (chunk, N, d)
        norms = np.linalg.norm(diffs, axis=2)
        units = diffs / np.maximum(norms, EPS_DIRECTION)[:, :, None]
        units[norms < EPS_DIRECTION] = 0.0              # includes j == i
        out[lo:hi] = units.sum(axis=1) / (n - 1)
    return out


def scvelo_embedding(
    X: np.ndarray, V: np.ndarray, Y: np.ndarray, config: BaselineConfig | None = None
) -> np.ndarray:
    """Velocity embedding w_i = sum_j p_tilde_{j|i} y_hat_ij - y_bar_full_i.

    Cosines are taken against the raw (uncorrected) unit directions x_hat_ij
    with the velocity unit normalized; beta is calibrated by the same
    perplexity search as the main method. The output keeps the method's raw
    magnitudes (no unit normalization); zero-velocity rows come out zero.
    """
    config = config or BaselineConfig(method="scvelo")
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    k, perplexity = config.resolve(n)
    _validate_problem(X, V, Y, k)

    v_norms = np.linalg.norm(V, axis=1)
    active = v_norms > 0.0
    if not active.any():
        raise ValueError("nothing to embed: all velocity rows are zero")

    table = knn_all(build_vptree(X), k)
    diffs = X[table.B] - X[:, None, :]
    norms = np.linalg.norm(diffs, axis=2)
    x_units = diffs / np.maximum(norms, EPS_DIRECTION)[:, :, None]
    v_hat = np.zeros_like(V)
    v_hat[active] = V[active] / v_norms[active, None]
    cos_x = np.clip(np.einsum("nkd,nd->nk", x_units, v_hat), -1.0, 1.0)

    y_diffs = Y[table.B] - Y[:, None, :]
    y_norms = np.linalg.norm(y_diffs, axis=2)
    y_units = y_diffs / np.maximum(y_norms, EPS_DIRECTION)[:, :, None]
    y_bar_full = _full_mean_directions(Y)

    W = np.zeros_like(Y)
    for i in np.flatnonzero(active):
        _, (_, p_nb) = calibrate_beta_x(cos_x[i], perplexity)
        s = p_nb.sum()
        p_tilde = p_nb / s if s > 0 else np.full(k, 1.0 / k)
        W[i] = p_tilde @ y_units[i] - y_bar_full[i]
    return W


def dsne_approximate(
    X: np.ndarray, V: np.ndarray, Y: np.ndarray, config: BaselineConfig | None = None
) -> np.ndarray:
    """Closed-form embedding: unit-normalized p_tilde-weighted mean of the
    mean-corrected map directions, rescaled to output norms.

    Rows whose weighted mean cancels below 1e-12 get a zero direction.
    """
    config = config or BaselineConfig(method="dsne_approx")
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    k, perplexity = config.resolve(n)
    _validate_problem(X, V, Y, k)

    table = knn_all(build_vptree(X), k)
    cond = build_conditional_p(X, V, table, perplexity)
    dfield = build_direction_field(Y, table.B)

    w_tilde = np.einsum("nk,nkd->nd", cond.p_tilde, dfield.corrected)
    norms = np.linalg.norm(w_tilde, axis=1)
    w_unit = np.zeros_like(w_tilde)
    ok = norms >= _DEGENERATE_SUM
    w_unit[ok] = w_tilde[ok] / norms[ok, None]
    w_unit[~cond.active] = 0.0
    return restore_norms(w_unit, X, V, Y)

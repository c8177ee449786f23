"""Direction primitives on the unit sphere.

Everything downstream works with three kinds of vectors per point: the unit
directions to its neighbors, the arithmetic mean of those directions, and the
mean-corrected directions (neighbor direction re-expressed from the end point
of the mean direction, then renormalized). Correcting by the local mean
spreads tightly clustered neighbor directions over the sphere, which is what
makes the per-point matching problem well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Denominator guard for every direction normalization.
EPS_DIRECTION = 1e-12


@dataclass
class DirectionField:
    """Per-point mean-corrected neighbor directions.

    corrected[i, k] is the unit direction for point i's k-th neighbor after
    mean correction; degenerate[i, k] marks entries where no direction exists
    at all (coincident points), in which case the stored row is zero.
    """

    origin_count: int
    neighbor_count: int
    dim: int
    corrected: np.ndarray   # (N, K, dim)
    mean_dir: np.ndarray    # (N, dim)
    degenerate: np.ndarray  # (N, K) bool


def unit_direction(a: np.ndarray, b: np.ndarray, eps: float = EPS_DIRECTION) -> np.ndarray:
    """Unit vector from a to b: (b - a) / max(||b - a||, eps).

    Coincident points fall back to the zero vector (degenerate direction).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = b - a
    return d / max(float(np.linalg.norm(d)), eps)


def mean_corrected_directions(
    origin: np.ndarray,
    neighbors: np.ndarray,
    eps: float = EPS_DIRECTION,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean direction and mean-corrected unit directions for one point.

    Computes the unit directions from ``origin`` to each neighbor, their
    arithmetic mean ``mean_dir``, and the corrected directions
    (unit - mean) / ||unit - mean||. Entries whose correction denominator
    falls below ``eps`` keep the uncorrected unit direction.

    Returns (mean_dir, corrected) with corrected of shape (K, dim).
    """
    origin = np.asarray(origin, dtype=float)
    neighbors = np.asarray(neighbors, dtype=float)
    if neighbors.ndim != 2 or neighbors.shape[0] == 0:
        raise ValueError("need at least one neighbor")
    if neighbors.shape[1] != origin.shape[0]:
        raise ValueError(
            f"dimension mismatch: origin {origin.shape[0]}, neighbors {neighbors.shape[1]}"
        )
    diffs = neighbors - origin[None, :]
    norms = np.linalg.norm(diffs, axis=1)
    units = diffs / np.maximum(norms, eps)[:, None]
    mean_dir = units.mean(axis=0)
    centered = units - mean_dir[None, :]
    centered_norms = np.linalg.norm(centered, axis=1)
    corrected = np.where(
        (centered_norms < eps)[:, None],
        units,
        centered / np.maximum(centered_norms, eps)[:, None],
    )
    return mean_dir, corrected


def cosines_against(unit_vel: np.ndarray, corrected: np.ndarray) -> np.ndarray:
    """Inner products of a unit velocity with each corrected direction.

    Results are clamped to [-1, 1] so that downstream 1 - cos terms stay
    nonnegative under rounding.
    """
    unit_vel = np.asarray(unit_vel, dtype=float)
    corrected = np.asarray(corrected, dtype=float)
    if abs(float(np.linalg.norm(unit_vel)) - 1.0) > 1e-9:
        raise ValueError("unit_vel must have norm 1")
    if corrected.shape[-1] != unit_vel.shape[0]:
        raise ValueError("dimension mismatch between velocity and directions")
    return np.clip(corrected @ unit_vel, -1.0, 1.0)


def build_direction_field(
    points: np.ndarray,
    neighbor_index: np.ndarray,
    eps: float = EPS_DIRECTION,
) -> DirectionField:
    """Mean-corrected direction field for all points at once.

    points: (N, dim); neighbor_index: (N, K) integer rows. Coincident
    neighbors produce zero directions and are flagged degenerate; their zero
    rows still enter the mean, matching the per-point arithmetic.
    """
    points = np.asarray(points, dtype=float)
    neighbor_index = np.asarray(neighbor_index)
    n, dim = points.shape
    k = neighbor_index.shape[1]

    diffs = points[neighbor_index] - points[:, None, :]      # (N, K, dim)
    norms = np.linalg.norm(diffs, axis=2)
    degenerate = norms < eps
    units = diffs / np.maximum(norms, eps)[:, :, None]
    mean_dir = units.mean(axis=1)                            # (N, dim)
    centered = units - mean_dir[:, None, :]
    centered_norms = np.linalg.norm(centered, axis=2)
    corrected = np.where(
        (centered_norms < eps)[:, :, None],
        units,
        centered / np.maximum(centered_norms, eps)[:, :, None],
    )
    return DirectionField(
        origin_count=n,
        neighbor_count=k,
        dim=dim,
        corrected=corrected,
        mean_dir=mean_dir,
        degenerate=degenerate,
    )

"""Synthetic data generators, accuracy metrics, and the benchmark harness.

Both generators lay out three chains of points that each start from a fixed
anchor and take one velocity step at a time. ``exact_velocity`` draws the
high-dimensional velocities directly; ``exact_embedding`` builds the chains in
the low-dimensional map with known true velocity embeddings and then projects
points and velocities to high dimension through a shared random linear map,
so recovered directions can be scored against the planted truth.

Randomness is PCG64 seeded through a SeedSequence: child streams are spawned
from the run seed in a fixed order (one per generated matrix), which gives
bit-reproducible data per seed independent of generation order.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import BaselineConfig, dsne_approximate, scvelo_embedding
from .optimizer import SolverConfig, run_dsne

CHAIN_STARTS = (0.0, 50.0, 160.0)
DEFAULT_SIGMA = 6.0

BENCH_METHODS = ("dsne", "dsne_approx", "scvelo")
BENCH_CSV_FIELDS = ("method", "N", "D", "d", "seed", "accuracy", "wall_time_s")


@dataclass
class SimSpec:
    """Parameters of one simulated instance (N = 3 * N_s points)."""

    mode: str  # "exact_velocity" or "exact_embedding"
    N_s: int
    D: int
    d: int = 2
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact_velocity", "exact_embedding"):
            raise ValueError(f"unknown simulation mode: {self.mode!r}")
        if self.N_s < 2:
            raise ValueError("N_s must be >= 2")
        if not 1 <= self.d <= self.D:
            raise ValueError("need D >= d >= 1")

    @property
    def N(self) -> int:
        return 3 * self.N_s


@dataclass
class BenchResult:
    method: str
    N: int
    D: int
    d: int
    accuracy_mean: float
    accuracy_std: float
    per_seed: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


def _chain_walk(starts_dim: int, steps: np.ndarray, n_s: int) -> np.ndarray:
    """Three chains from the fixed anchors, each row stepping by its own
    velocity row: out[c*N_s + i + 1] = out[c*N_s + i] + steps[c*N_s + i]."""
    n = 3 * n_s
    out = np.empty((n, starts_dim))
    for c, start in enumerate(CHAIN_STARTS):
        base = c * n_s
        out[base] = start * np.ones(starts_dim)
        for i in range(n_s - 1):
            out[base + i + 1] = out[base + i] + steps[base + i]
    return out


def simulate_chains_highdim(spec: SimSpec) -> tuple[np.ndarray, np.ndarray]:
    """Data with exact velocities: V ~ Normal(0, sigma^2) elementwise and X
    walked along V in three chains."""
    if spec.mode != "exact_velocity":
        raise ValueError("spec.mode must be 'exact_velocity'")
    (v_seq,) = np.random.SeedSequence(spec.seed).spawn(1)
    V = np.random.default_rng(v_seq).normal(0.0, spec.sigma, size=(spec.N, spec.D))
    X = _chain_walk(spec.D, V, spec.N_s)
    return X, V


def simulate_planted_embedding(
    spec: SimSpec,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Planted instance: (X, V, Y, W_true) with X = Y @ U and V = W_true @ U.

    Y follows the three-chain walk driven by the matching rows of W_true
    (each chain consumes its own block of rows), and U is a d x D standard
    normal projection, re-drawn per seed.
    """
    if spec.mode != "exact_embedding":
        raise ValueError("spec.mode must be 'exact_embedding'")
    w_seq, u_seq = np.random.SeedSequence(spec.seed).spawn(2)
    W_true = np.random.default_rng(w_seq).normal(0.0, spec.sigma, size=(spec.N, spec.d))
    Y = _chain_walk(spec.d, W_true, spec.N_s)
    U = np.random.default_rng(u_seq).standard_normal((spec.d, spec.D))
    return Y @ U, W_true @ U, Y, W_true


def _unit_rows(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(M, axis=1)
    nz = norms > 0
    out = np.zeros_like(M, dtype=float)
    out[nz] = M[nz] / norms[nz, None]
    return out, nz


def accuracy_exact(W: np.ndarray, W_true: np.ndarray) -> float:
    """Mean cosine between estimated and true directions, in [-1, 1].

    Rows where either vector is zero carry no direction and are excluded
    from the average.
    """
    W = np.asarray(W, dtype=float)
    W_true = np.asarray(W_true, dtype=float)
    if W.shape != W_true.shape:
        raise ValueError(f"shape mismatch: {W.shape} vs {W_true.shape}")
    w_hat, w_nz = _unit_rows(W)
    t_hat, t_nz = _unit_rows(W_true)
    keep = w_nz & t_nz
    if not keep.any():
        raise ValueError("accuracy undefined: no nonzero rows")
    return float(np.sum(w_hat[keep] * t_hat[keep]) / keep.sum())


def accuracy_approximate(W: np.ndarray, Y: np.ndarray, spec: SimSpec) -> float:
    """Chain-consistency accuracy: cosines against (y_{i+1} - y_i) over the
    chain-interior rows (the three chain ends have no forward step and are
    excluded); zero estimate rows are excluded as well."""
    W = np.asarray(W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if W.shape[0] != Y.shape[0] or W.shape[0] != spec.N:
        raise ValueError("W and Y must have one row per simulated point")
    interior = np.concatenate(
        [np.arange(c * spec.N_s, (c + 1) * spec.N_s - 1) for c in range(3)]
    )
    truth = Y[interior + 1] - Y[interior]
    w_hat, w_nz = _unit_rows(W[interior])
    t_hat, t_nz = _unit_rows(truth)
    keep = w_nz & t_nz
    if not keep.any():
        raise ValueError("accuracy undefined: no nonzero rows")
    return float(np.sum(w_hat[keep] * t_hat[keep]) / keep.sum())


def _run_method(
    method: str,
    X: np.ndarray,
    V: np.ndarray,
    Y: np.ndarray,
    k: int,
    perplexity: float,
    seed: int,
) -> np.ndarray:
    if method == "dsne":
        return run_dsne(X, V, Y, SolverConfig(K=k, perplexity=perplexity, seed=seed))
    if method == "dsne_approx":
        return dsne_approximate(
            X, V, Y, BaselineConfig(method="dsne_approx", K=k, perplexity=perplexity)
        )
    if method == "scvelo":
        return scvelo_embedding(X, V, Y, BaselineConfig(method="scvelo"))
    raise ValueError(f"unknown method: {method!r}")


def _bench_workers() -> int:
    raw = os.environ.get("DSNE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_bench(
    cells: list[tuple[int, int]],
    methods: list[str],
    seeds: int,
    d: int = 2,
    k: int = 16,
    perplexity: float = 6.0,
    csv_path: str | None = None,
) -> list[BenchResult]:
    """Planted-instance sweep: every (N, D) cell x method x seed.

    Each run draws a fresh instance for its seed, embeds it, and scores
    against the planted truth; per-cell results aggregate mean and std over
    seeds. One CSV row per run is written when ``csv_path`` is given.
    The DSNE_THREADS environment variable caps how many runs execute at once.
    """
    if not cells:
        raise ValueError("empty benchmark grid")
    for m in methods:
        if m not in BENCH_METHODS:
            raise ValueError(f"unknown method: {m!r}")
    if seeds < 1:
        raise ValueError("need at least one seed")

    def one_run(n, D, method, seed):
        if n % 3 != 0:
            raise ValueError(f"N must be divisible by 3, got {n}")
        spec = SimSpec(mode="exact_embedding", N_s=n // 3, D=D, d=d, seed=seed)
        X, V, Y, W_true = simulate_planted_embedding(spec)
        t0 = time.perf_counter()
        W = _run_method(method, X, V, Y, k, perplexity, seed)
        elapsed = time.perf_counter() - t0
        return accuracy_exact(W, W_true), elapsed

    jobs = [
        (n, D, method, seed)
        for (n, D) in cells
        for method in methods
        for seed in range(seeds)
    ]
    workers = _bench_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda j: one_run(*j), jobs))
    else:
        outcomes = [one_run(*j) for j in jobs]

    rows = [
        {
            "method": method,
            "N": n,
            "D": D,
            "d": d,
            "seed": seed,
            "accuracy": acc,
            "wall_time_s": elapsed,
        }
        for (n, D, method, seed), (acc, elapsed) in zip(jobs, outcomes)
    ]
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=BENCH_CSV_FIELDS)
            writer.writeheader()
            writer.writerows(rows)

    results = []
    for (n, D) in cells:
        for method in methods:
            accs = [r["accuracy"] for r in rows if r["method"] == method and r["N"] == n and r["D"] == D]
            times = [r["wall_time_s"] for r in rows if r["method"] == method and r["N"] == n and r["D"] == D]
            results.append(
                BenchResult(
                    method=method,
                    N=n,
                    D=D,
                    d=d,
                    accuracy_mean=float(np.mean(accs)),
                    accuracy_std=float(np.std(accs)),
                    per_seed=accs,
                    wall_time_s=float(np.sum(times)),
                )
            )
    return results


def format_bench_table(results: list[BenchResult]) -> str:
    """Text table with one row per (N, D) cell and one column per method,
    cells as 'mean (std)'."""
    methods = []
    for r in results:
        if r.method not in methods:
            methods.append(r.method)
    cells = []
    for r in results:
        if (r.N, r.D) not in cells:
            cells.append((r.N, r.D))
    by_key = {(r.N, r.D, r.method): r for r in results}
    header = ["N", "D"] + methods
    lines = []
    for (n, D) in cells:
        row = [str(n), str(D)]
        for m in methods:
            r = by_key.get((n, D, m))
            row.append(f"{r.accuracy_mean:.3f} ({r.accuracy_std:.3f})" if r else "-")
        lines.append(row)
    widths = [max(len(h), *(len(line[i]) for line in lines)) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for line in lines:
        out.append("  ".join(c.ljust(w) for c, w in zip(line, widths)))
    return "\n".join(out) + "\n"

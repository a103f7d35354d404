"""Batches and the per-edge / per-vertex training diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .relative import RelativeSystem, clamp, solve_inference
from .sheaf import DEFAULT_RANK_TOL, PCSheaf

INPUT = "x"
OUTPUT = "y"


@dataclass(frozen=True, eq=False)
class BatchSample:
    """``N`` input/target pairs stored row-wise: ``X`` and ``Y`` are ``(N, dim)``."""

    X: np.ndarray
    Y: np.ndarray
    noise_std: float = 0.0

    def __len__(self) -> int:
        return self.X.shape[0]


def sample_batch(
    n: int, io_dim: int, noise_std: float = 0.0, seed: int | np.random.Generator | None = None
) -> BatchSample:
    """Identity task: ``x ~ N(0, I)``, ``y = x + noise_std * N(0, I)``."""
    if n < 1:
        raise ValueError("batch size must be at least 1")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = rng.standard_normal((n, io_dim))
    if noise_std > 0:
        Y = X + noise_std * rng.standard_normal((n, io_dim))
    else:
        Y = X.copy()
    return BatchSample(X, Y, noise_std)


def batch_values(rel: RelativeSystem, batch: BatchSample) -> dict[str, np.ndarray]:
    """Clamp values for ``rel`` taken from a batch (``x`` <- X, ``y`` <- Y)."""
    source = {INPUT: batch.X, OUTPUT: batch.Y}
    return {vid: source[vid] for vid in rel.clamped}


@dataclass(frozen=True, eq=False)
class BatchSolution:
    """Exact inference for every column of a batch."""

    rel: RelativeSystem
    z: np.ndarray  # (free dim, N)
    r: np.ndarray  # (dim C1, N)
    s: np.ndarray  # (dim C0, N)
    _grads: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.z.shape[1]

    def summed_gradient(self, eid: str) -> np.ndarray:
        """``G_e = sum_i r_e^(i) (s_u^(i))^T`` (the descent direction on the energy)."""
        if eid not in self._grads:
            sheaf = self.rel.sheaf
            e = sheaf.edge(eid)
            self._grads[eid] = self.r[sheaf.edge_slice(eid)] @ self.s[sheaf.vertex_slice(e.src)].T
        return self._grads[eid]


def solve_batch(
    rel: RelativeSystem, batch: BatchSample, rank_tol: float = DEFAULT_RANK_TOL
) -> BatchSolution:
    values = batch_values(rel, batch)
    sol = solve_inference(rel, rank_tol, values=values)
    z = sol.z_star.reshape(rel.n_free, -1)
    return BatchSolution(rel, z, sol.r_star.reshape(rel.D.shape[0], -1), sol.s_star.reshape(rel.sheaf.c0_dim, -1))


def _as_solution(rel: RelativeSystem, batch) -> BatchSolution:
    return batch if isinstance(batch, BatchSolution) else solve_batch(rel, batch)


def harmonic_load(rel: RelativeSystem, batch: BatchSample | BatchSolution) -> dict[str, float]:
    """Batch mean of ``||(H b)_e||`` for every edge."""
    sol = _as_solution(rel, batch)
    sheaf = rel.sheaf
    return {
        eid: float(np.mean(np.linalg.norm(sol.r[sheaf.edge_slice(eid)], axis=0)))
        for eid in sheaf.edge_ids
    }


def diffusive_activation(rel: RelativeSystem, batch: BatchSample | BatchSolution) -> dict[str, float]:
    """Batch mean of ``||z*_v||`` for every free vertex."""
    sol = _as_solution(rel, batch)
    return {
        vid: float(np.mean(np.linalg.norm(sol.z[rel.free_slice(vid)], axis=0)))
        for vid in rel.free
    }


def gradient_magnitude(rel: RelativeSystem, batch: BatchSample | BatchSolution) -> dict[str, float]:
    """Frobenius norm of the batch-mean weight gradient for every edge."""
    sol = _as_solution(rel, batch)
    return {
        eid: float(np.linalg.norm(sol.summed_gradient(eid)) / sol.n)
        for eid in rel.sheaf.edge_ids
    }


def validation_mse(
    sheaf: PCSheaf, batch: BatchSample, rank_tol: float = DEFAULT_RANK_TOL
) -> float:
    """Mean squared error per output coordinate with only the input clamped.

    The output vertex is left free, so inference fills it in alongside the
    hidden vertices.
    """
    rel = clamp(sheaf, {INPUT: batch.X})
    sol = solve_inference(rel, rank_tol)
    pred = sol.z_star[rel.free_slice(OUTPUT)]
    return float(np.mean((pred - batch.Y.T) ** 2))

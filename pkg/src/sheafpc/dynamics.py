"""Iterative inference: sheaf diffusion, block-Jacobi preconditioning, spectra."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg

from .relative import RelativeSystem
from .sheaf import DEFAULT_RANK_TOL, ShapeError

log = logging.getLogger(__name__)


class SingularPreconditionerError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    step_size: float | None = None  # None -> 0.9 / lambda_max of the iteration operator
    max_steps: int = 10_000
    stop_tol: float = 1e-10
    preconditioner: Literal["none", "block_jacobi"] = "none"

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.stop_tol <= 0:
            raise ValueError("stop_tol must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        if self.preconditioner not in ("none", "block_jacobi"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: np.ndarray
    lambda_min_plus: float
    lambda_max: float
    kappa: float

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "lambda_min_plus": self.lambda_min_plus,
            "lambda_max": self.lambda_max,
            "kappa": self.kappa,
        }


@dataclass(frozen=True)
class DiffusionResult:
    z: np.ndarray
    steps: int
    trace: np.ndarray  # columns: step, residual_norm, energy

    @property
    def converged_residual(self) -> float:
        return float(self.trace[-1, 1])


def _check_z(rel: RelativeSystem, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[0] != rel.n_free:
        raise ShapeError(f"z has shape {z.shape}, expected ({rel.n_free}, ...)")
    return z


def normal_residual(rel: RelativeSystem, z: np.ndarray) -> np.ndarray:
    """Energy gradient ``D^T (D z + b)``."""
    return rel.D.T @ (rel.D @ z + rel.b)


def relative_energy(rel: RelativeSystem, z: np.ndarray) -> float:
    r = rel.D @ z + rel.b
    return 0.5 * float(np.sum(r * r))


def diffusion_step(rel: RelativeSystem, z: np.ndarray, step_size: float) -> np.ndarray:
    z = _check_z(rel, z)
    return z - step_size * normal_residual(rel, z)


def block_jacobi(rel: RelativeSystem) -> np.ndarray:
    """Keep the free-vertex diagonal blocks of ``L_rel``; zero elsewhere."""
    L = rel.L_rel
    M = np.zeros_like(L)
    for vid in rel.free:
        sl = rel.free_slice(vid)
        block = L[sl, sl]
        if np.linalg.matrix_rank(block) < block.shape[0]:
            raise SingularPreconditionerError(
                f"block-Jacobi block for free vertex {vid!r} is singular "
                "(vertex has no incident edge constraining it)"
            )
        M[sl, sl] = block
    return M


def preconditioned_step(
    rel: RelativeSystem, z: np.ndarray, step_size: float, M: np.ndarray
) -> np.ndarray:
    z = _check_z(rel, z)
    try:
        update = np.linalg.solve(M, normal_residual(rel, z))
    except np.linalg.LinAlgError as exc:
        raise SingularPreconditionerError("preconditioner is singular") from exc
    return z - step_size * update


def _lambda_max(L: np.ndarray, M: np.ndarray | None = None) -> float:
    if L.size == 0:
        return 0.0
    return float(scipy.linalg.eigh(L, M, eigvals_only=True)[-1])


def run_diffusion(
    rel: RelativeSystem, z0: np.ndarray | None = None, config: DiffusionConfig = DiffusionConfig()
) -> DiffusionResult:
    """Iterate (preconditioned) diffusion until the normal residual is small.

    Stops when ``||D^T(Dz + b)|| <= stop_tol * (1 + ||b||)`` or after
    ``max_steps`` updates.
    """
    z = np.zeros(rel.n_free) if z0 is None else _check_z(rel, z0).copy()
    if config.preconditioner == "block_jacobi":
        M = block_jacobi(rel)
        Minv = np.linalg.inv(M)
        lam = _lambda_max(rel.L_rel, M)
    else:
        Minv = None
        lam = _lambda_max(rel.L_rel)

    eta = config.step_size
    if eta is None:
        eta = 0.9 / lam if lam > 0 else 1.0
    elif lam > 0 and eta >= 2.0 / lam:
        warnings.warn(
            f"step size {eta:g} >= 2/lambda_max = {2.0 / lam:g}; diffusion may diverge",
            RuntimeWarning,
            stacklevel=2,
        )

    threshold = config.stop_tol * (1.0 + np.linalg.norm(rel.b))
    trace = []
    step = 0
    while True:
        g = normal_residual(rel, z)
        gnorm = float(np.linalg.norm(g))
        trace.append((step, gnorm, relative_energy(rel, z)))
        if gnorm <= threshold or step >= config.max_steps:
            break
        z = z - eta * (g if Minv is None else Minv @ g)
        step += 1
    log.debug("diffusion stopped after %d steps, residual %.3e", step, gnorm)
    return DiffusionResult(z, step, np.array(trace))


def spectral_report(rel: RelativeSystem, rank_tol: float = DEFAULT_RANK_TOL) -> SpectralReport:
    """Eigenvalues of ``L_rel`` and the condition number over its nonzero part.

    With no positive eigenvalue (e.g. no edges) ``lambda_min_plus`` and
    ``kappa`` are NaN.
    """
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    ev = np.linalg.eigvalsh(rel.L_rel) if rel.n_free else np.zeros(0)
    lam_max = float(ev[-1]) if ev.size else 0.0
    positive = ev[ev > rank_tol * lam_max] if lam_max > 0 else ev[:0]
    if positive.size == 0:
        return SpectralReport(ev, float("nan"), lam_max, float("nan"))
    lam_min = float(positive[0])
    return SpectralReport(ev, lam_min, lam_max, lam_max / lam_min)

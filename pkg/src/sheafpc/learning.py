"""Weight gradients, the training loop and Gauss-Newton per-edge rates.

Sign convention: ``dE/dW_e = (W_e s_u - s_v) s_u^T = -r_e s_u^T``, so the
residual/source correlation ``G_e = sum_i r_e s_u^T`` is the descent
direction.  Every update rule here moves *along* ``G_e`` and therefore lowers
the clamped energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Literal

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .metrics import (
    INPUT,
    OUTPUT,
    BatchSample,
    diffusive_activation,
    harmonic_load,
    solve_batch,
    validation_mse,
)
from .relative import RelativeSystem, clamp, harmonic_projector, pinv
from .sheaf import DEFAULT_RANK_TOL, PCSheaf, ShapeError, SheafError, numerical_rank

log = logging.getLogger(__name__)

UpdateRule = Literal["plain", "gauss_newton", "scalar_spectral"]
Sampler = Callable[[np.random.Generator, int, int], np.ndarray]  # (rng, dim C1, q) -> (dim C1, q)
SourceCovariance = dict  # free vertex id -> (n_u, n_u) PSD matrix


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 1000
    batch_size: int = 128
    seed: int = 0
    update_rule: UpdateRule = "plain"
    trainable_edges: tuple[str, ...] | None = None  # None: every edge

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.update_rule not in ("plain", "gauss_newton", "scalar_spectral"):
            raise ValueError(f"unknown update rule {self.update_rule!r}")


@dataclass(frozen=True)
class GNConfig:
    gamma: float = 0.5
    epsilon: float = 0.1
    sigma_b: float = 1.0
    probes: int = 0  # 0: exact covariance, otherwise Hutchinson with this many probes
    tikhonov: float = 0.0
    covariance: Literal["isotropic", "empirical"] = "isotropic"

    def __post_init__(self):
        if not 0 < self.gamma < 2:
            raise ValueError("gamma must lie in (0, 2)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be nonnegative")
        if self.probes < 0 or self.tikhonov < 0:
            raise ValueError("probes and tikhonov must be nonnegative")
        if self.covariance not in ("isotropic", "empirical"):
            raise ValueError(f"unknown covariance model {self.covariance!r}")


@dataclass
class MetricsRecord:
    step: int
    harmonic_load: dict[str, float]
    diffusive_activation: dict[str, float]
    grad_fro: dict[str, float]
    val_mse: float | None
    train_energy: float


# -- gradients ---------------------------------------------------------------


def edge_gradient(sheaf: PCSheaf, s_star: np.ndarray, eid: str) -> np.ndarray:
    """``dE/dW_e = (W_e s_u - s_v) s_u^T`` at the state ``s_star``."""
    e = sheaf.edge(eid)
    s_star = np.asarray(s_star, dtype=float)
    if s_star.shape != (sheaf.c0_dim,):
        raise ShapeError(f"state has shape {s_star.shape}, expected ({sheaf.c0_dim},)")
    su = s_star[sheaf.vertex_slice(e.src)]
    sv = s_star[sheaf.vertex_slice(e.dst)]
    return np.outer(e.weight @ su - sv, su)


def harmonic_diffusive_gradient(
    rel: RelativeSystem, b: np.ndarray | None, eid: str, rank_tol: float = DEFAULT_RANK_TOL
) -> np.ndarray:
    """The same gradient written as ``(H b)_e (G b)_u^T``; needs a free source."""
    e = rel.sheaf.edge(eid)
    if e.src not in rel.free_offsets:
        raise SheafError(
            f"source {e.src!r} of edge {eid!r} is clamped; use edge_gradient with the "
            "clamped activation, i.e. -(H b)_e s_u^T"
        )
    b = rel.b if b is None else np.asarray(b, dtype=float)
    hb = harmonic_projector(rel, rank_tol) @ b
    gb = rel.pinv(rank_tol) @ b
    return np.outer(hb[rel.edge_slice(eid)], gb[rel.free_slice(e.src)])


# -- Gauss-Newton statistics -------------------------------------------------


def _check_psd(cov: np.ndarray, what: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"{what} must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, np.abs(cov).max())):
        raise ValueError(f"{what} is not symmetric")
    ev = np.linalg.eigvalsh(cov)
    if ev.size and ev[0] < -1e-10 * max(1.0, abs(np.trace(cov))):
        raise ValueError(f"{what} is not positive semidefinite (min eigenvalue {ev[0]:.3e})")
    return cov


def gn_source_covariance(
    rel: RelativeSystem,
    sigma_b: float | np.ndarray = 1.0,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> SourceCovariance:
    """Covariance of the optimal free activations for ``b ~ N(0, Sigma_b)``.

    A scalar ``sigma_b`` is the isotropic scale ``Sigma_b = sigma_b * I`` and
    uses ``L_rel^+`` directly; a matrix goes through ``D^+ Sigma_b D^+^T``.
    """
    m = rel.D.shape[0]
    if np.ndim(sigma_b) == 0:
        if sigma_b < 0:
            raise ValueError("sigma_b must be nonnegative")
        full = float(sigma_b) * pinv(rel.L_rel, rank_tol)
    else:
        cov = _check_psd(sigma_b, "Sigma_b")
        if cov.shape != (m, m):
            raise ShapeError(f"Sigma_b has shape {cov.shape}, expected {(m, m)}")
        G = rel.pinv(rank_tol)
        full = G @ cov @ G.T
    out = {}
    for vid in rel.free:
        sl = rel.free_slice(vid)
        blk = full[sl, sl]
        out[vid] = 0.5 * (blk + blk.T)
    return out


def isotropic_sampler(sigma2: float) -> Sampler:
    scale = np.sqrt(sigma2)

    def sample(rng: np.random.Generator, m: int, q: int) -> np.ndarray:
        return scale * rng.standard_normal((m, q))

    return sample


def gaussian_sampler(cov: np.ndarray) -> Sampler:
    cov = _check_psd(cov, "Sigma_b")
    ev, vec = np.linalg.eigh(cov)
    root = vec * np.sqrt(np.clip(ev, 0.0, None))

    def sample(rng: np.random.Generator, m: int, q: int) -> np.ndarray:
        return root @ rng.standard_normal((m, q))

    return sample


def default_shift(rel: RelativeSystem) -> float:
    """``1e-8 * lambda_max(L_rel)``, a Tikhonov shift for singular systems."""
    if rel.n_free == 0:
        return 0.0
    return 1e-8 * float(np.linalg.eigvalsh(rel.L_rel)[-1])


def hutchinson_covariance(
    rel: RelativeSystem,
    sampler: Sampler,
    q: int,
    lam: float = 0.0,
    seed: int | None = 0,
    matrix_free: bool = False,
) -> SourceCovariance:
    """Probe estimate of the source covariance from Laplacian solves.

    Draws ``q`` probes ``xi ~ sampler``, solves ``(L_rel + lam I) y = D^T xi``
    and averages the outer products of the per-vertex blocks of ``y``.
    """
    if q < 1:
        raise ValueError("q must be at least 1")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n = rel.n_free
    if lam == 0 and numerical_rank(rel.D) < n:
        raise np.linalg.LinAlgError(
            "L_rel is singular; pass lam > 0 (e.g. default_shift(rel)) for the shifted system"
        )
    rng = np.random.default_rng(seed)
    xi = sampler(rng, rel.D.shape[0], q)
    rhs = rel.D.T @ xi
    if matrix_free:
        from .relative import laplacian_operator

        op = laplacian_operator(rel, lam)
        Y = np.column_stack([scipy.sparse.linalg.cg(op, rhs[:, k], rtol=1e-12)[0] for k in range(q)])
    else:
        factor = scipy.linalg.cho_factor(rel.L_rel + lam * np.eye(n))
        Y = scipy.linalg.cho_solve(factor, rhs)
    out = {}
    for vid in rel.free:
        blk = Y[rel.free_slice(vid)]
        out[vid] = blk @ blk.T / q
    return out


def gn_update(W: np.ndarray, G: np.ndarray, sigma_su: np.ndarray, gn: GNConfig) -> np.ndarray:
    """Source-preconditioned step ``W + gamma * G (Sigma_su + eps I)^{-1}``.

    ``G`` is the residual/source correlation, i.e. minus the energy gradient,
    so the step lowers the energy.
    """
    W = np.asarray(W, dtype=float)
    G = np.asarray(G, dtype=float)
    if G.shape != W.shape or sigma_su.shape != (W.shape[1], W.shape[1]):
        raise ShapeError(
            f"shapes do not conform: W {W.shape}, G {G.shape}, Sigma {sigma_su.shape}"
        )
    A = sigma_su + gn.epsilon * np.eye(W.shape[1])
    # G A^{-1} = (A^{-1} G^T)^T with A symmetric
    return W + gn.gamma * scipy.linalg.solve(A, G.T, assume_a="pos").T


def _lambda_max_sym(sigma: np.ndarray) -> float:
    if sigma.shape[0] > 512:
        return float(scipy.sparse.linalg.eigsh(sigma, k=1, which="LA", return_eigenvectors=False)[0])
    return float(np.linalg.eigvalsh(sigma)[-1])


def scalar_rate(sigma_su: np.ndarray, gn: GNConfig) -> float:
    """Per-source fallback rate ``gamma / (eps + lambda_max(Sigma_su))``."""
    lam = max(_lambda_max_sym(np.asarray(sigma_su, dtype=float)), 0.0)
    return gn.gamma / (gn.epsilon + lam)


# -- training ----------------------------------------------------------------


DataSource = Callable[[np.random.Generator, int], BatchSample]


def _source_covariances(rel: RelativeSystem, gn: GNConfig, seed: int) -> SourceCovariance:
    if gn.covariance == "empirical":
        sigma_b = rel.b @ rel.b.T / rel.b.shape[1]
        sigma_arg, sampler = sigma_b, gaussian_sampler(sigma_b)
    else:
        sigma_arg, sampler = gn.sigma_b, isotropic_sampler(gn.sigma_b)
    if gn.probes:
        covs = hutchinson_covariance(rel, sampler, gn.probes, lam=gn.tikhonov, seed=seed)
    else:
        covs = gn_source_covariance(rel, sigma_arg)
    # clamped sources: second moment of the clamped data
    for vid in rel.clamped:
        x = rel.values[vid]
        covs[vid] = x.T @ x / x.shape[0]
    return covs


def train(
    sheaf: PCSheaf,
    data: DataSource,
    config: TrainConfig,
    gn: GNConfig | None = None,
    validation: BatchSample | None = None,
    clamped: Iterable[str] = (INPUT, OUTPUT),
    rank_tol: float = DEFAULT_RANK_TOL,
) -> Iterator[MetricsRecord]:
    """Train by exact inference + one weight step per batch.

    Yields ``config.steps + 1`` records: record ``t`` describes the network
    after ``t`` updates (the last one is evaluated but not followed by an
    update).  The final sheaf is available as the generator's return value.
    """
    clamped = tuple(clamped)
    trainable = tuple(config.trainable_edges) if config.trainable_edges is not None else tuple(sheaf.edge_ids)
    if not trainable:
        raise ValueError("no trainable edges")
    for eid in trainable:
        sheaf.edge(eid)
    if config.update_rule != "plain" and gn is None:
        gn = GNConfig()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    probe_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))

    for step in range(config.steps + 1):
        batch = data(rng, config.batch_size)
        values = {INPUT: batch.X, OUTPUT: batch.Y}
        for vid in clamped:
            if values[vid].shape[1] != sheaf.vertex(vid).dim:
                raise ShapeError(
                    f"data for {vid!r} has dimension {values[vid].shape[1]}, "
                    f"vertex has {sheaf.vertex(vid).dim}"
                )
        rel = clamp(sheaf, {vid: values[vid] for vid in clamped})
        sol = solve_batch(rel, batch, rank_tol)
        n = sol.n
        record = MetricsRecord(
            step=step,
            harmonic_load=harmonic_load(rel, sol),
            diffusive_activation=diffusive_activation(rel, sol),
            grad_fro={eid: float(np.linalg.norm(sol.summed_gradient(eid)) / n) for eid in sheaf.edge_ids},
            val_mse=None if validation is None else validation_mse(sheaf, validation, rank_tol),
            train_energy=float(0.5 * np.sum(sol.r**2) / n),
        )
        yield record
        if step == config.steps:
            break

        covs = None
        if config.update_rule != "plain":
            covs = _source_covariances(rel, gn, int(probe_rng.integers(2**63)))
        new = {}
        for eid in trainable:
            e = sheaf.edge(eid)
            G = sol.summed_gradient(eid) / n
            if config.update_rule == "plain":
                new[eid] = e.weight + config.learning_rate * G
            elif config.update_rule == "gauss_newton":
                new[eid] = gn_update(e.weight, G, covs[e.src], gn)
            else:
                new[eid] = e.weight + scalar_rate(covs[e.src], gn) * G
        sheaf = sheaf.with_weights(new)
    return sheaf


def train_to_end(*args, **kwargs) -> tuple[list[MetricsRecord], PCSheaf]:
    """Run :func:`train` to completion; returns the records and the final sheaf."""
    gen = train(*args, **kwargs)
    records = []
    while True:
        try:
            records.append(next(gen))
        except StopIteration as stop:
            return records, stop.value

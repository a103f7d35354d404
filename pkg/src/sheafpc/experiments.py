"""Network factories, the identity-task protocol and parameter sweeps."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .dynamics import spectral_report
from .learning import GNConfig, MetricsRecord, TrainConfig, train_to_end
from .metrics import INPUT, OUTPUT, BatchSample, sample_batch
from .relative import clamp
from .sheaf import PCSheaf, SheafError, build_sheaf

log = logging.getLogger(__name__)

THREADS_ENV = "SHEAFPC_THREADS"


# -- factories ---------------------------------------------------------------


def random_orthonormal(
    rng: np.random.Generator, rows: int, cols: int, proper: bool = False
) -> np.ndarray:
    """Haar-distributed matrix with orthonormal columns (tall) or rows (wide).

    ``proper=True`` flips one column of a square result so that its
    determinant is +1.
    """
    k, n = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((k, n)))
    q = q * np.sign(np.diag(r))
    if proper and rows == cols and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q if rows >= cols else q.T


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def chain_ids(n_hidden: int) -> list[str]:
    return [INPUT] + [f"h{i}" for i in range(1, n_hidden + 1)] + [OUTPUT]


def make_chain(dims: Sequence[int], weights: Sequence[np.ndarray | float]) -> PCSheaf:
    """Path ``x -> h1 -> ... -> y`` with the given stalk dimensions and weights."""
    if len(dims) < 2:
        raise SheafError("a chain needs at least two vertices")
    if len(weights) != len(dims) - 1:
        raise SheafError(f"{len(dims)} vertices need {len(dims) - 1} weights, got {len(weights)}")
    ids = chain_ids(len(dims) - 2)
    edges = [(f"{u}->{v}", u, v, w) for u, v, w in zip(ids[:-1], ids[1:], weights)]
    return build_sheaf(zip(ids, dims), edges)


@dataclass(frozen=True)
class KnottedSpec:
    layers: int = 10
    stalk_dim: int = 2
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("layers must be at least 2")
        if self.stalk_dim < 1:
            raise ValueError("stalk_dim must be positive")


def feedback_id(i: int) -> str:
    return f"h{i + 1}->h{i}:fb"


def make_knotted(spec: KnottedSpec) -> PCSheaf:
    """Deep linear chain with a feedback edge between every pair of hidden layers.

    Forward weights are random rotations; the feedback ``h_{i+1} -> h_i``
    carries ``R(theta) W_i^{-1}`` so every two-cycle has monodromy ``R(theta)``.
    """
    if spec.stalk_dim != 2:
        raise ValueError("the rotation parameterisation needs stalk_dim == 2")
    rng = np.random.default_rng(spec.seed)
    ids = chain_ids(spec.layers)
    n = spec.stalk_dim
    forward = [random_orthonormal(rng, n, n, proper=True) for _ in range(len(ids) - 1)]
    edges = [(f"{u}->{v}", u, v, w) for u, v, w in zip(ids[:-1], ids[1:], forward)]
    R = rotation(spec.theta)
    for i in range(1, spec.layers):
        W = forward[i]  # h_i -> h_{i+1}
        edges.append((feedback_id(i), f"h{i + 1}", f"h{i}", R @ W.T))
    return build_sheaf([(v, n) for v in ids], edges)


@dataclass(frozen=True)
class AllToAllSpec:
    n_hidden: int = 3
    hidden_dim: int = 4
    io_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_hidden < 1:
            raise ValueError("n_hidden must be at least 1")


def make_all_to_all(spec: AllToAllSpec) -> PCSheaf:
    """``x -> h1``, ``h_n -> y`` and an edge for every ordered hidden pair."""
    rng = np.random.default_rng(spec.seed)
    n, h, io = spec.n_hidden, spec.hidden_dim, spec.io_dim
    hidden = [f"h{i}" for i in range(1, n + 1)]
    vertices = [(INPUT, io)] + [(v, h) for v in hidden] + [(OUTPUT, io)]
    edges = [(f"{INPUT}->h1", INPUT, "h1", random_orthonormal(rng, h, io))]
    for u in hidden:
        for v in hidden:
            if u != v:
                edges.append((f"{u}->{v}", u, v, random_orthonormal(rng, h, h)))
    edges.append((f"h{n}->{OUTPUT}", f"h{n}", OUTPUT, random_orthonormal(rng, io, h)))
    return build_sheaf(vertices, edges)


def monodromy(sheaf: PCSheaf, cycle: Sequence[str]) -> np.ndarray:
    """Product of edge weights around a closed walk (each edge traversed src -> dst)."""
    if not cycle:
        raise SheafError("empty cycle")
    first = sheaf.edge(cycle[0])
    start, at = first.src, first.src
    phi = np.eye(sheaf.vertex(start).dim)
    for eid in cycle:
        e = sheaf.edge(eid)
        if e.src != at:
            raise SheafError(f"edge {eid!r} starts at {e.src!r}, walk is at {at!r}")
        if e.weight.shape[1] != phi.shape[0]:
            raise SheafError(f"dimension mismatch entering edge {eid!r}")
        phi = e.weight @ phi
        at = e.dst
    if at != start:
        raise SheafError(f"walk ends at {at!r}, not at its start {start!r}")
    return phi


# -- protocol ----------------------------------------------------------------


@dataclass(frozen=True)
class Protocol:
    learning_rate: float = 0.1
    steps: int = 1000
    batch_size: int = 128
    val_size: int = 128
    threshold: float = 1e-3
    noise_std: float = 0.0
    update_rule: Literal["plain", "gauss_newton", "scalar_spectral"] = "plain"
    gn: GNConfig | None = None


@dataclass
class RunResult:
    records: list[MetricsRecord]
    summary: dict
    final: PCSheaf = field(repr=False)


def make_data(io_dim: int, noise_std: float):
    def data(rng: np.random.Generator, n: int) -> BatchSample:
        return sample_batch(n, io_dim, noise_std, rng)

    return data


def init_kappa(sheaf: PCSheaf) -> float:
    io = sheaf.vertex(INPUT).dim
    rel = clamp(sheaf, {INPUT: np.zeros(io), OUTPUT: np.zeros(sheaf.vertex(OUTPUT).dim)})
    return spectral_report(rel).kappa


def run_protocol(sheaf: PCSheaf, protocol: Protocol, seed: int) -> RunResult:
    """Train ``sheaf`` on the identity task and summarise convergence."""
    io = sheaf.vertex(INPUT).dim
    val = sample_batch(protocol.val_size, io, protocol.noise_std, np.random.default_rng([seed, 2]))
    config = TrainConfig(
        learning_rate=protocol.learning_rate,
        steps=protocol.steps,
        batch_size=protocol.batch_size,
        seed=seed,
        update_rule=protocol.update_rule,
    )
    records, final = train_to_end(
        sheaf, make_data(io, protocol.noise_std), config, gn=protocol.gn, validation=val
    )
    first = next((r.step for r in records if r.val_mse <= protocol.threshold), None)
    final_mse = records[-1].val_mse
    summary = {
        "converged": first is not None,
        "first_step_below_threshold": first,
        "final_mse": final_mse,
        "kappa_at_init": init_kappa(sheaf),
    }
    return RunResult(records, summary, final)


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    axis: Literal["theta", "size"]
    value: float
    seed: int
    index: int


def build_network(point: SweepPoint, network: dict | None = None) -> PCSheaf:
    network = dict(network or {})
    if point.axis == "theta":
        return make_knotted(
            KnottedSpec(
                layers=network.get("layers", 10),
                stalk_dim=network.get("stalk_dim", 2),
                theta=float(point.value),
                seed=point.seed,
            )
        )
    if point.axis == "size":
        return make_all_to_all(
            AllToAllSpec(
                n_hidden=int(point.value),
                hidden_dim=network.get("hidden_dim", 4),
                io_dim=network.get("io_dim", 2),
                seed=point.seed,
            )
        )
    raise ValueError(f"unknown sweep axis {point.axis!r}")


def run_point(point: SweepPoint, protocol: Protocol, network: dict | None = None) -> RunResult:
    result = run_protocol(build_network(point, network), protocol, point.seed)
    result.summary.update({"axis": point.axis, "value": point.value, "seed": point.seed})
    log.info("%s=%g seed=%d: %s", point.axis, point.value, point.seed, result.summary)
    return result


def sweep_workers(n_points: int) -> int:
    env = os.environ.get(THREADS_ENV)
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_points))


def run_sweep(
    axis: Literal["theta", "size"],
    values: Sequence[float],
    protocol: Protocol = Protocol(),
    seeds: Sequence[int] = (0,),
    network: dict | None = None,
    workers: int | None = None,
) -> list[tuple[SweepPoint, RunResult]]:
    """Run every (value, seed) point; results come back in input order.

    Each point seeds its own generators from its seed, so the output does
    not depend on how points are scheduled across workers.
    """
    if axis not in ("theta", "size"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    points = [
        SweepPoint(axis, v, s, i)
        for i, (v, s) in enumerate((v, s) for v in values for s in seeds)
    ]
    if not points:
        return []
    workers = sweep_workers(len(points)) if workers is None else workers
    if workers <= 1:
        results = [run_point(p, protocol, network) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_point, points, [protocol] * len(points), [network] * len(points)))
    return list(zip(points, results))


def sweep_theta(
    thetas: Sequence[float], protocol: Protocol = Protocol(), seeds: Sequence[int] = (0,), **kw
) -> list[tuple[SweepPoint, RunResult]]:
    return run_sweep("theta", thetas, protocol, seeds, **kw)


def sweep_size(
    sizes: Sequence[int], protocol: Protocol = Protocol(), seeds: Sequence[int] = (0,), **kw
) -> list[tuple[SweepPoint, RunResult]]:
    return run_sweep("size", sizes, protocol, seeds, **kw)


def convergence_boundary(results: Sequence[tuple[SweepPoint, RunResult]]) -> dict[int, dict]:
    """Per seed: largest converged value and smallest value that did not converge."""
    out: dict[int, dict] = {}
    for point, res in results:
        entry = out.setdefault(point.seed, {"last_converged": None, "first_failed": None})
        if res.summary["converged"]:
            if entry["last_converged"] is None or point.value > entry["last_converged"]:
                entry["last_converged"] = point.value
        elif entry["first_failed"] is None or point.value < entry["first_failed"]:
            entry["first_failed"] = point.value
    for entry in out.values():
        lo, hi = entry["last_converged"], entry["first_failed"]
        entry["boundary"] = None if lo is None or hi is None else 0.5 * (lo + hi)
    return out


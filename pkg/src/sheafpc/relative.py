"""Clamped (relative) systems and their Hodge operators.

Clamping a set of vertices splits the coboundary into the columns of the free
vertices, ``D``, and the contribution of the clamped values, ``b``.  Inference
then minimises ``0.5 * ||D z + b||^2`` over the free activations ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .sheaf import DEFAULT_RANK_TOL, PCSheaf, ShapeError, SheafError, assemble_coboundary

ClampSpec = Mapping[str, "Sequence[float] | np.ndarray"]


def pinv(a: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with a relative cutoff."""
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    m, n = a.shape
    if a.size == 0:
        return np.zeros((n, m))
    u, sv, vt = np.linalg.svd(a, full_matrices=False)
    keep = sv > rank_tol * sv[0] if sv[0] > 0 else np.zeros_like(sv, dtype=bool)
    return (vt[keep].T / sv[keep]) @ u[:, keep].T


@dataclass(frozen=True, eq=False)
class RelativeSystem:
    """Clamped system ``(D, b)``.

    ``b`` has shape ``(dim C1,)`` for a single clamp or ``(dim C1, N)`` when
    the clamp values were given as a batch.  ``boundary_map`` sends stacked
    clamp values to ``b`` so new targets can be formed without re-clamping.
    """

    sheaf: PCSheaf
    free: tuple[str, ...]
    clamped: tuple[str, ...]
    D: np.ndarray
    b: np.ndarray
    boundary_map: np.ndarray = field(repr=False)
    free_offsets: Mapping[str, int] = field(repr=False)
    clamp_offsets: Mapping[str, int] = field(repr=False)
    values: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def edge_offsets(self) -> Mapping[str, int]:
        return self.sheaf.edge_offsets

    @property
    def n_free(self) -> int:
        return self.D.shape[1]

    @property
    def L_rel(self) -> np.ndarray:
        if "L" not in self._cache:
            self._cache["L"] = self.D.T @ self.D
        return self._cache["L"]

    def pinv(self, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
        key = ("pinv", rank_tol)
        if key not in self._cache:
            self._cache[key] = pinv(self.D, rank_tol)
        return self._cache[key]

    def free_slice(self, vid: str) -> slice:
        if vid not in self.free_offsets:
            raise SheafError(f"vertex {vid!r} is not free in this relative system")
        start = self.free_offsets[vid]
        return slice(start, start + self.sheaf.vertex(vid).dim)

    def edge_slice(self, eid: str) -> slice:
        return self.sheaf.edge_slice(eid)

    def stack_clamp(self, values: ClampSpec) -> np.ndarray:
        """Stack clamp values in clamped-vertex order.

        Each value is ``(n_v,)`` or a batch ``(N, n_v)``; the result is
        ``(sum n_v,)`` or ``(sum n_v, N)``.
        """
        missing = set(self.clamped) - set(values)
        extra = set(values) - set(self.clamped)
        if missing or extra:
            raise SheafError(
                f"clamp values must cover exactly {list(self.clamped)}; "
                f"missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        blocks = []
        for vid in self.clamped:
            n = self.sheaf.vertex(vid).dim
            val = np.asarray(values[vid], dtype=float)
            if val.shape[-1:] != (n,) or val.ndim > 2:
                raise ShapeError(f"clamp value for {vid!r} has shape {val.shape}, expected (..., {n})")
            blocks.append(val.T)
        if not blocks:
            return np.zeros(0)
        batched = {blk.ndim for blk in blocks}
        if len(batched) > 1:
            raise ShapeError("mix of batched and single clamp values")
        return np.concatenate(blocks, axis=0)

    def boundary(self, values: ClampSpec) -> np.ndarray:
        """Target cochain ``b`` for the given clamp values."""
        stacked = self.stack_clamp(values)
        if stacked.size == 0:
            return np.zeros(self.D.shape[0])
        return self.boundary_map @ stacked

    def with_values(self, values: ClampSpec) -> "RelativeSystem":
        """Same ``D``, new clamp values (shares the operator cache)."""
        b = self.boundary(values)
        frozen = {vid: np.asarray(values[vid], dtype=float) for vid in self.clamped}
        return RelativeSystem(
            self.sheaf, self.free, self.clamped, self.D, b, self.boundary_map,
            self.free_offsets, self.clamp_offsets, frozen, self._cache,
        )

    def full_state(self, z: np.ndarray, values: ClampSpec | None = None) -> np.ndarray:
        """Assemble the 0-cochain with free blocks ``z`` and clamped blocks from ``values``."""
        values = self.values if values is None else values
        z = np.asarray(z, dtype=float)
        s = np.zeros((self.sheaf.c0_dim,) + z.shape[1:])
        for vid in self.free:
            s[self.sheaf.vertex_slice(vid)] = z[self.free_slice(vid)]
        for vid in self.clamped:
            s[self.sheaf.vertex_slice(vid)] = np.asarray(values[vid], dtype=float).T
        return s


def clamp(sheaf: PCSheaf, spec: ClampSpec) -> RelativeSystem:
    """Clamp the vertices named in ``spec`` to the given values."""
    for vid in spec:
        sheaf.vertex(vid)
    clamped = tuple(v.id for v in sheaf.vertices if v.id in spec)
    free = tuple(v.id for v in sheaf.vertices if v.id not in spec)
    delta = assemble_coboundary(sheaf)

    free_offsets, clamp_offsets = {}, {}
    free_cols, clamp_cols = [], []
    for vid in free:
        sl = sheaf.vertex_slice(vid)
        free_offsets[vid] = len(free_cols)
        free_cols.extend(range(sl.start, sl.stop))
    for vid in clamped:
        sl = sheaf.vertex_slice(vid)
        clamp_offsets[vid] = len(clamp_cols)
        clamp_cols.extend(range(sl.start, sl.stop))

    rel = RelativeSystem(
        sheaf=sheaf,
        free=free,
        clamped=clamped,
        D=delta[:, free_cols],
        b=np.zeros(sheaf.c1_dim),
        boundary_map=delta[:, clamp_cols],
        free_offsets=free_offsets,
        clamp_offsets=clamp_offsets,
    )
    return rel.with_values(spec) if clamped else rel


@dataclass(frozen=True, eq=False)
class HodgeSolution:
    z_star: np.ndarray
    r_star: np.ndarray
    s_star: np.ndarray
    energy_rel: float | np.ndarray

    def to_dict(self, rel: RelativeSystem) -> dict:
        """JSON-ready view keyed by vertex/edge id (single solutions only)."""
        sheaf = rel.sheaf
        out = {
            "z_star": {vid: self.z_star[rel.free_slice(vid)].tolist() for vid in rel.free},
            "r_star": {eid: self.r_star[sheaf.edge_slice(eid)].tolist() for eid in sheaf.edge_ids},
            "s_star": {vid: blk.tolist() for vid, blk in sheaf.split0(self.s_star).items()},
            "energy_rel": float(self.energy_rel),
        }
        return out


def solve_inference(
    rel: RelativeSystem,
    rank_tol: float = DEFAULT_RANK_TOL,
    values: ClampSpec | None = None,
) -> HodgeSolution:
    """Minimum-norm minimiser of ``0.5 * ||D z + b||^2``.

    If ``values`` is given it replaces the clamp values used to build ``b``
    (and to fill the clamped blocks of ``s_star``).
    """
    b = rel.b if values is None else rel.boundary(values)
    z = -(rel.pinv(rank_tol) @ b)
    r = rel.D @ z + b
    e = 0.5 * np.sum(r * r, axis=0)
    s = rel.full_state(z, values)
    return HodgeSolution(z, r, s, float(e) if b.ndim == 1 else e)


def harmonic_projector(rel: RelativeSystem, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthogonal projector onto ``ker D^T``: ``I - D D^+``."""
    return np.eye(rel.D.shape[0]) - rel.D @ rel.pinv(rank_tol)


def diffusive_operator(rel: RelativeSystem, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """``D^+``, which equals ``L_rel^+ D^T``; ``-G b`` is the optimal free state."""
    return rel.pinv(rank_tol).copy()


def hodge_decompose(
    rel: RelativeSystem, b: np.ndarray | None = None, rank_tol: float = DEFAULT_RANK_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``b`` into its ``im D`` part and its harmonic (``ker D^T``) part."""
    b = rel.b if b is None else np.asarray(b, dtype=float)
    if b.shape[0] != rel.D.shape[0]:
        raise ShapeError(f"b has shape {b.shape}, expected ({rel.D.shape[0]}, ...)")
    im_part = rel.D @ (rel.pinv(rank_tol) @ b)
    return im_part, b - im_part


def laplacian_operator(rel: RelativeSystem, shift: float = 0.0) -> LinearOperator:
    """Matrix-free ``(D^T D + shift I)`` built from products with ``D``."""
    D = rel.D
    n = D.shape[1]

    def matvec(z):
        return D.T @ (D @ z) + shift * z

    return LinearOperator((n, n), matvec=matvec, rmatvec=matvec, matmat=matvec, dtype=float)

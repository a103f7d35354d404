"""Predictive-coding sheaves over multigraphs.

A PC sheaf places a stalk ``R^{n_v}`` on every vertex and, for every edge
``e = (u -> v)``, the restriction pair ``(W_e, I)``.  The coboundary sends a
0-cochain of activations to the 1-cochain of prediction errors
``(delta s)_e = s_v - W_e s_u``.

Cochains are plain numpy arrays laid out in vertex (resp. edge) insertion
order.  A trailing batch axis is allowed everywhere: an array of shape
``(dim, N)`` is treated as ``N`` cochains side by side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_RANK_TOL = 1e-10


class SheafError(ValueError):
    """Invalid sheaf construction (bad dimensions, unknown ids, ...)."""


class ShapeError(ValueError):
    """A cochain or operator does not conform to the sheaf layout."""


@dataclass(frozen=True)
class Vertex:
    id: str
    dim: int


@dataclass(frozen=True, eq=False)
class Edge:
    id: str
    src: str
    dst: str
    weight: np.ndarray

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class PCSheaf:
    """Immutable PC sheaf.  Build with :func:`build_sheaf`."""

    vertices: tuple[Vertex, ...]
    edges: tuple[Edge, ...]
    vertex_offsets: Mapping[str, int] = field(repr=False)
    edge_offsets: Mapping[str, int] = field(repr=False)

    @property
    def c0_dim(self) -> int:
        return sum(v.dim for v in self.vertices)

    @property
    def c1_dim(self) -> int:
        return sum(e.dim for e in self.edges)

    @property
    def vertex_ids(self) -> list[str]:
        return [v.id for v in self.vertices]

    @property
    def edge_ids(self) -> list[str]:
        return [e.id for e in self.edges]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_vmap", {v.id: v for v in self.vertices})
        object.__setattr__(self, "_emap", {e.id: e for e in self.edges})

    def vertex(self, vid: str) -> Vertex:
        try:
            return self._vmap[vid]
        except KeyError:
            raise SheafError(f"unknown vertex {vid!r}") from None

    def edge(self, eid: str) -> Edge:
        try:
            return self._emap[eid]
        except KeyError:
            raise SheafError(f"unknown edge {eid!r}") from None

    def vertex_slice(self, vid: str) -> slice:
        start = self.vertex_offsets[self.vertex(vid).id]
        return slice(start, start + self._vmap[vid].dim)

    def edge_slice(self, eid: str) -> slice:
        start = self.edge_offsets[self.edge(eid).id]
        return slice(start, start + self._emap[eid].dim)

    def vertex_block(self, s: np.ndarray, vid: str) -> np.ndarray:
        return s[self.vertex_slice(vid)]

    def edge_block(self, r: np.ndarray, eid: str) -> np.ndarray:
        return r[self.edge_slice(eid)]

    def cochain0(self, blocks: Mapping[str, Sequence[float] | np.ndarray]) -> np.ndarray:
        """Assemble a 0-cochain from per-vertex blocks; missing vertices are zero."""
        out = np.zeros(self.c0_dim)
        for vid, value in blocks.items():
            sl = self.vertex_slice(vid)
            value = np.asarray(value, dtype=float)
            if value.shape != (sl.stop - sl.start,):
                raise ShapeError(
                    f"block for vertex {vid!r} has shape {value.shape}, "
                    f"expected ({sl.stop - sl.start},)"
                )
            out[sl] = value
        return out

    def split0(self, s: np.ndarray) -> dict[str, np.ndarray]:
        return {v.id: s[self.vertex_slice(v.id)] for v in self.vertices}

    def split1(self, r: np.ndarray) -> dict[str, np.ndarray]:
        return {e.id: r[self.edge_slice(e.id)] for e in self.edges}

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "PCSheaf":
        """Copy of the sheaf with some edge weights replaced."""
        return build_sheaf(
            [(v.id, v.dim) for v in self.vertices],
            [(e.id, e.src, e.dst, weights.get(e.id, e.weight)) for e in self.edges],
        )

    def incident_edges(self, vid: str) -> list[str]:
        return [e.id for e in self.edges if vid in (e.src, e.dst)]


def build_sheaf(
    vertices: Iterable[tuple[str, int] | Vertex],
    edges: Iterable[tuple[str, str, str, np.ndarray | Sequence] | Edge],
) -> PCSheaf:
    """Validate and freeze a PC sheaf.

    ``vertices`` is a sequence of ``(id, dim)`` pairs; ``edges`` a sequence of
    ``(id, src, dst, weight)`` with ``weight`` of shape ``(dim[dst], dim[src])``.
    Parallel edges are fine as long as their ids differ.
    """
    verts: list[Vertex] = []
    voff: dict[str, int] = {}
    offset = 0
    for item in vertices:
        vid, dim = (item.id, item.dim) if isinstance(item, Vertex) else item
        vid = str(vid)
        if vid in voff:
            raise SheafError(f"duplicate vertex id {vid!r}")
        if int(dim) != dim or dim <= 0:
            raise SheafError(f"vertex {vid!r} must have a positive integer dimension, got {dim!r}")
        verts.append(Vertex(vid, int(dim)))
        voff[vid] = offset
        offset += int(dim)
    dims = {v.id: v.dim for v in verts}

    edge_list: list[Edge] = []
    eoff: dict[str, int] = {}
    offset = 0
    for item in edges:
        if isinstance(item, Edge):
            eid, src, dst, w = item.id, item.src, item.dst, item.weight
        else:
            eid, src, dst, w = item
        eid = str(eid)
        if eid in eoff:
            raise SheafError(f"duplicate edge id {eid!r}")
        for end in (src, dst):
            if end not in dims:
                raise SheafError(f"edge {eid!r} references unknown vertex {end!r}")
        w = np.array(w, dtype=float, copy=True)
        if w.ndim == 0:
            w = w.reshape(1, 1)
        expected = (dims[dst], dims[src])
        if w.shape != expected:
            raise SheafError(
                f"edge {eid!r} ({src}->{dst}) has weight of shape {w.shape}, expected {expected}"
            )
        w.setflags(write=False)
        edge_list.append(Edge(eid, src, dst, w))
        eoff[eid] = offset
        offset += w.shape[0]

    return PCSheaf(tuple(verts), tuple(edge_list), voff, eoff)


def _check_c0(sheaf: PCSheaf, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim not in (1, 2) or s.shape[0] != sheaf.c0_dim:
        raise ShapeError(f"0-cochain has shape {s.shape}, expected ({sheaf.c0_dim}, ...)")
    return s


def apply_coboundary(sheaf: PCSheaf, s: np.ndarray) -> np.ndarray:
    """Prediction errors ``s_v - W_e s_u`` for every edge, block by block."""
    s = _check_c0(sheaf, s)
    r = np.empty((sheaf.c1_dim,) + s.shape[1:])
    for e in sheaf.edges:
        r[sheaf.edge_slice(e.id)] = (
            s[sheaf.vertex_slice(e.dst)] - e.weight @ s[sheaf.vertex_slice(e.src)]
        )
    return r


def assemble_coboundary(sheaf: PCSheaf) -> np.ndarray:
    """Dense coboundary matrix of shape ``(dim C1, dim C0)``."""
    d = np.zeros((sheaf.c1_dim, sheaf.c0_dim))
    for e in sheaf.edges:
        rows = sheaf.edge_slice(e.id)
        # src block first: a self-loop then gets I - W_e
        d[rows, sheaf.vertex_slice(e.src)] -= e.weight
        d[rows, sheaf.vertex_slice(e.dst)] += np.eye(e.dim)
    return d


def energy(sheaf: PCSheaf, s: np.ndarray) -> float | np.ndarray:
    """PC energy ``0.5 * ||delta s||^2`` (one value per column for batches)."""
    r = apply_coboundary(sheaf, s)
    e = 0.5 * np.sum(r * r, axis=0)
    return float(e) if r.ndim == 1 else e


def sheaf_laplacian(sheaf: PCSheaf) -> np.ndarray:
    d = assemble_coboundary(sheaf)
    return d.T @ d


def numerical_rank(a: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    if a.size == 0:
        return 0
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def h0_basis(sheaf: PCSheaf, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as columns) of the globally consistent activations."""
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    d = assemble_coboundary(sheaf)
    n = sheaf.c0_dim
    if d.shape[0] == 0:
        return np.eye(n)
    _, sv, vt = np.linalg.svd(d, full_matrices=True)
    rank = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return vt[rank:].T.copy()


def h1_dim(sheaf: PCSheaf, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    """Dimension of the cokernel of the coboundary, ``dim C1 - rank``."""
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    return sheaf.c1_dim - numerical_rank(assemble_coboundary(sheaf), rank_tol)


def h0_dim(sheaf: PCSheaf, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    return sheaf.c0_dim - numerical_rank(assemble_coboundary(sheaf), rank_tol)

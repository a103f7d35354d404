"""Linear predictive-coding networks as cellular sheaves."""

__version__ = "0.1.0"

from .sheaf import (
    PCSheaf,
    SheafError,
    ShapeError,
    apply_coboundary,
    assemble_coboundary,
    build_sheaf,
    energy,
    h0_basis,
    h1_dim,
    sheaf_laplacian,
)
from .relative import (
    HodgeSolution,
    RelativeSystem,
    clamp,
    diffusive_operator,
    harmonic_projector,
    hodge_decompose,
    solve_inference,
)

__all__ = [
    "PCSheaf",
    "SheafError",
    "ShapeError",
    "apply_coboundary",
    "assemble_coboundary",
    "build_sheaf",
    "energy",
    "h0_basis",
    "h1_dim",
    "sheaf_laplacian",
    "HodgeSolution",
    "RelativeSystem",
    "clamp",
    "diffusive_operator",
    "harmonic_projector",
    "hodge_decompose",
    "solve_inference",
]

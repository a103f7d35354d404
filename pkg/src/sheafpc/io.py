"""Sheaf description files and CSV tables.

Floats are written with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import DiffusionResult, SpectralReport
from .learning import MetricsRecord
from .sheaf import PCSheaf, SheafError, build_sheaf

HARMONIC_CSV = "harmonic_load.csv"
DIFFUSIVE_CSV = "diffusive_activation.csv"
VAL_CSV = "val_mse.csv"


def sheaf_to_dict(sheaf: PCSheaf) -> dict:
    return {
        "vertices": [{"id": v.id, "dim": v.dim} for v in sheaf.vertices],
        "edges": [
            {"id": e.id, "src": e.src, "dst": e.dst, "weight": e.weight.tolist()}
            for e in sheaf.edges
        ],
    }


def sheaf_from_dict(data: dict) -> PCSheaf:
    try:
        vertices = [(v["id"], v["dim"]) for v in data["vertices"]]
        edges = [(e["id"], e["src"], e["dst"], e["weight"]) for e in data.get("edges", [])]
    except (KeyError, TypeError) as exc:
        raise SheafError(f"malformed sheaf description: missing or invalid field {exc}") from exc
    return build_sheaf(vertices, edges)


def save_sheaf(sheaf: PCSheaf, path: str | os.PathLike) -> None:
    write_text_atomic(path, json.dumps(sheaf_to_dict(sheaf), indent=1) + "\n")


def load_sheaf(path: str | os.PathLike) -> PCSheaf:
    with open(path, encoding="utf-8") as fh:
        return sheaf_from_dict(json.load(fh))


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def read_rows(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(records: Sequence[MetricsRecord], out_dir: str | os.PathLike) -> list[Path]:
    """One CSV per metrics table: per edge, per vertex, and validation MSE."""
    out_dir = Path(out_dir)
    edge_rows = (
        (r.step, eid, load, r.grad_fro[eid])
        for r in records
        for eid, load in r.harmonic_load.items()
    )
    vertex_rows = (
        (r.step, vid, act) for r in records for vid, act in r.diffusive_activation.items()
    )
    return [
        write_rows(out_dir / HARMONIC_CSV, ("step", "edge_id", "harmonic_load", "grad_fro"), edge_rows),
        write_rows(out_dir / DIFFUSIVE_CSV, ("step", "vertex_id", "diffusive_activation"), vertex_rows),
        write_rows(out_dir / VAL_CSV, ("step", "val_mse"), ((r.step, r.val_mse) for r in records)),
    ]


def write_trace(result: DiffusionResult, path: str | os.PathLike) -> Path:
    rows = ((int(s), res, e) for s, res, e in result.trace)
    return write_rows(path, ("step", "residual_norm", "energy"), rows)


def write_spectrum(report: SpectralReport, path: str | os.PathLike) -> Path:
    return write_rows(path, ("index", "eigenvalue"), enumerate(report.eigenvalues))

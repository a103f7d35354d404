"""``sheafpc`` command line: diagnose, train, sweep, spectrum.

Every subcommand reads one JSON config and writes plot-ready CSV plus a
``manifest.json`` listing the files it produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, KnottedNetwork, RunConfig, load_config
from .dynamics import DiffusionConfig, run_diffusion, spectral_report
from .experiments import (
    KnottedSpec,
    RunResult,
    convergence_boundary,
    make_knotted,
    run_protocol,
    run_sweep,
)
from .io import (
    DIFFUSIVE_CSV,
    HARMONIC_CSV,
    VAL_CSV,
    save_sheaf,
    write_metrics,
    write_rows,
    write_spectrum,
    write_text_atomic,
    write_trace,
)
from .metrics import INPUT, OUTPUT, diffusive_activation, gradient_magnitude, harmonic_load, sample_batch
from .relative import clamp, solve_inference
from .sheaf import h0_dim, h1_dim

log = logging.getLogger("sheafpc")

METRIC_FILES = {"harmonic_load": HARMONIC_CSV, "diffusive_activation": DIFFUSIVE_CSV, "val_mse": VAL_CSV}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Run:
    """Collects output files and writes the manifest last."""

    def __init__(self, cfg: RunConfig, out: Path, command: str, seeds: list[int]):
        self.cfg, self.out, self.command, self.seeds = cfg, out, command, seeds
        self.started = _now()
        self.outputs: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def add(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    def json(self, name: str | Path, obj) -> Path:
        path = self.out / name
        write_text_atomic(path, _dump(obj))
        self.add(path)
        return path

    def finish(self) -> Path:
        missing = [p for p in self.outputs if not p.exists()]
        if missing:
            raise RuntimeError(f"outputs missing: {missing}")
        manifest = {
            "command": self.command,
            "tool": "sheafpc",
            "version": __version__,
            "config_hash": self.cfg.config_hash(),
            "seeds": self.seeds,
            "started": self.started,
            "finished": _now(),
            "outputs": sorted(str(p.relative_to(self.out)) for p in self.outputs),
        }
        path = self.out / "manifest.json"
        write_text_atomic(path, _dump(manifest))
        return path


def _write_run(run: Run, result: RunResult, subdir: Path, metrics: list[str]) -> None:
    written = write_metrics(result.records, subdir)
    keep = {METRIC_FILES[m] for m in metrics}
    for path in written:
        if path.name in keep:
            run.add(path)
        else:
            path.unlink()
    run.json(subdir.relative_to(run.out) / "summary.json", result.summary)
    save_sheaf(result.final, subdir / "final_sheaf.json")
    run.add(subdir / "final_sheaf.json")


def batch_values_for(ids: list[str], batch) -> dict[str, np.ndarray]:
    source = {INPUT: batch.X, OUTPUT: batch.Y}
    unknown = [vid for vid in ids if vid not in source]
    if unknown:
        raise ConfigError(
            f"batch diagnostics clamp only {INPUT!r}/{OUTPUT!r}; use clamp_values for {unknown}"
        )
    return {vid: source[vid] for vid in ids}


def cmd_diagnose(cfg: RunConfig, out: Path, base_dir: Path) -> None:
    run = Run(cfg, out, "diagnose", [cfg.seed])
    sheaf = cfg.build_network(base_dir=base_dir)
    report: dict = {"h0_dim": h0_dim(sheaf), "h1_dim": h1_dim(sheaf), "clamped": cfg.clamp_ids}

    if cfg.clamp_values is not None:
        rel = clamp(sheaf, {k: np.asarray(v) for k, v in cfg.clamp_values.items()})
        sol = solve_inference(rel)
        run.json("hodge_solution.json", sol.to_dict(rel))
        loads = {eid: float(np.linalg.norm(sol.r_star[sheaf.edge_slice(eid)])) for eid in sheaf.edge_ids}
        acts = {vid: float(np.linalg.norm(sol.z_star[rel.free_slice(vid)])) for vid in rel.free}
        grads = None
    else:
        rng = np.random.default_rng([cfg.seed, 4])
        io = sheaf.vertex(cfg.clamp_ids[0]).dim
        batch = sample_batch(cfg.diagnostic_batch, io, cfg.protocol.noise_std, rng)
        rel = clamp(sheaf, batch_values_for(cfg.clamp_ids, batch))
        loads = harmonic_load(rel, batch)
        acts = diffusive_activation(rel, batch)
        grads = gradient_magnitude(rel, batch)

    spec = spectral_report(rel)
    report["spectral"] = {k: v for k, v in spec.to_dict().items() if k != "eigenvalues"}
    run.add(write_spectrum(spec, out / "spectrum.csv"))
    run.add(
        write_rows(
            out / HARMONIC_CSV,
            ("edge_id", "harmonic_load", "grad_fro"),
            ((eid, load, None if grads is None else grads[eid]) for eid, load in loads.items()),
        ),
        write_rows(out / DIFFUSIVE_CSV, ("vertex_id", "diffusive_activation"), acts.items()),
    )

    max_act = max(acts.values(), default=0.0)
    max_load = max(loads.values(), default=0.0)
    report["starved_vertices"] = [v for v, a in acts.items() if a < cfg.starve_ratio * max_act]
    report["low_load_edges"] = [e for e, l in loads.items() if l < cfg.starve_ratio * max_load]
    report["harmonic_load"] = loads
    report["diffusive_activation"] = acts

    if cfg.diffusion is not None:
        single = rel if rel.b.ndim == 1 else rel.with_values({k: v[0] for k, v in rel.values.items()})
        res = run_diffusion(single, None, DiffusionConfig(**cfg.diffusion.model_dump()))
        report["diffusion"] = {"steps": res.steps, "final_residual": res.converged_residual}
        run.add(write_trace(res, out / "diffusion_trace.csv"))

    run.json("diagnostics.json", report)
    run.finish()


def cmd_train(cfg: RunConfig, out: Path, base_dir: Path) -> None:
    run = Run(cfg, out, "train", [cfg.seed])
    sheaf = cfg.build_network(base_dir=base_dir)
    result = run_protocol(sheaf, cfg.protocol.to_protocol(), cfg.seed)
    _write_run(run, result, out, cfg.metrics)
    run.finish()


def _point_name(axis: str, value: float, seed: int) -> str:
    return f"{axis}={value:g}_seed={seed}"


def cmd_sweep(cfg: RunConfig, out: Path, base_dir: Path) -> None:
    if cfg.sweep is None:
        raise ConfigError("sweep requires a 'sweep' section with 'axis' and 'values'")
    axis = cfg.sweep.axis
    expected = {"theta": "knotted", "size": "all_to_all"}[axis]
    if cfg.network.kind != expected:
        raise ConfigError(f"sweep axis {axis!r} needs a network of kind {expected!r}")
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed]
    run = Run(cfg, out, "sweep", list(seeds))
    values = [int(v) if axis == "size" else v for v in cfg.sweep.values]
    network = cfg.network.model_dump(exclude={"kind", "theta", "n_hidden"})
    results = run_sweep(axis, values, cfg.protocol.to_protocol(), seeds, network=network)

    rows = []
    for point, result in results:
        name = _point_name(axis, point.value, point.seed)
        _write_run(run, result, out / name, cfg.metrics)
        s = result.summary
        rows.append((name, point.seed, s["converged"], s["first_step_below_threshold"], s["final_mse"], s["kappa_at_init"]))
    run.add(write_rows(out / "sweep.csv", ("point", "seed", "converged", "first_step", "final_mse", "kappa"), rows))
    run.json("boundary.json", {str(k): v for k, v in convergence_boundary(results).items()})
    run.finish()


def cmd_spectrum(cfg: RunConfig, out: Path, base_dir: Path) -> None:
    run = Run(cfg, out, "spectrum", [cfg.seed])
    if cfg.thetas is not None:
        if not isinstance(cfg.network, KnottedNetwork):
            raise ConfigError("'thetas' requires a knotted network")
        sheaves = [
            (t, make_knotted(KnottedSpec(cfg.network.layers, cfg.network.stalk_dim, t, cfg.seed)))
            for t in cfg.thetas
        ]
    else:
        sheaves = [(None, cfg.build_network(base_dir=base_dir))]
    eig_rows, kappa_rows = [], []
    for theta, sheaf in sheaves:
        rel = clamp(sheaf, {vid: np.zeros(sheaf.vertex(vid).dim) for vid in cfg.clamp_ids})
        rep = spectral_report(rel)
        eig_rows.extend((theta, i, ev) for i, ev in enumerate(rep.eigenvalues))
        kappa_rows.append((theta, rep.lambda_min_plus, rep.lambda_max, rep.kappa))
    run.add(
        write_rows(out / "spectrum.csv", ("theta", "index", "eigenvalue"), eig_rows),
        write_rows(out / "kappa.csv", ("theta", "lambda_min_plus", "lambda_max", "kappa"), kappa_rows),
    )
    run.finish()


COMMANDS = {
    "diagnose": cmd_diagnose,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "spectrum": cmd_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sheafpc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON run config")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="seed, overrides the config (u64)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg = cfg.model_copy(update={"seed": args.seed, "seeds": None if cfg.seeds is None else [args.seed]})
        out = args.out or (Path(cfg.output_dir) if cfg.output_dir else None)
        if out is None:
            raise ConfigError("no output directory: pass --out or set output_dir")
        COMMANDS[args.command](cfg, out, args.config.resolve().parent)
    except ConfigError as exc:
        print(f"sheafpc: config error:\n{exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"sheafpc: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

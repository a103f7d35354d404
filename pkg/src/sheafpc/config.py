"""JSON run configuration for the command line."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .experiments import AllToAllSpec, KnottedSpec, Protocol, make_all_to_all, make_chain, make_knotted
from .io import load_sheaf, sheaf_from_dict
from .learning import GNConfig
from .sheaf import PCSheaf


class ConfigError(ValueError):
    """Unreadable or invalid configuration file."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ChainNetwork(_Model):
    kind: Literal["chain"]
    dims: list[Annotated[int, Field(gt=0)]]
    weights: list[Union[float, list[list[float]]]]


class KnottedNetwork(_Model):
    kind: Literal["knotted"]
    layers: int = Field(10, ge=2)
    stalk_dim: Literal[2] = 2
    theta: float = 0.0


class AllToAllNetwork(_Model):
    kind: Literal["all_to_all"]
    n_hidden: int = Field(3, ge=1)
    hidden_dim: int = Field(4, ge=1)
    io_dim: int = Field(2, ge=1)


class FileNetwork(_Model):
    kind: Literal["file"]
    path: str


class InlineNetwork(_Model):
    kind: Literal["inline"]
    vertices: list[dict]
    edges: list[dict] = []


Network = Annotated[
    Union[ChainNetwork, KnottedNetwork, AllToAllNetwork, FileNetwork, InlineNetwork],
    Field(discriminator="kind"),
]


class GNModel(_Model):
    gamma: float = Field(0.5, gt=0, lt=2)
    epsilon: float = Field(0.1, gt=0)
    sigma_b: float = Field(1.0, ge=0)
    probes: int = Field(0, ge=0)
    tikhonov: float = Field(0.0, ge=0)
    covariance: Literal["isotropic", "empirical"] = "isotropic"


class ProtocolModel(_Model):
    learning_rate: float = Field(0.1, gt=0)
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(128, ge=1)
    val_size: int = Field(128, ge=1)
    threshold: float = Field(1e-3, gt=0)
    noise_std: float = Field(0.0, ge=0)
    update_rule: Literal["plain", "gauss_newton", "scalar_spectral"] = "plain"
    gn: GNModel | None = None

    def to_protocol(self) -> Protocol:
        data = self.model_dump()
        gn = data.pop("gn")
        return Protocol(**data, gn=GNConfig(**gn) if gn else None)


class SweepModel(_Model):
    axis: Literal["theta", "size"]
    values: list[float]


class DiffusionModel(_Model):
    step_size: float | None = Field(None, gt=0)
    max_steps: int = Field(10_000, ge=0)
    stop_tol: float = Field(1e-10, gt=0)
    preconditioner: Literal["none", "block_jacobi"] = "none"


MetricName = Literal["harmonic_load", "diffusive_activation", "val_mse"]


class RunConfig(_Model):
    network: Network
    protocol: ProtocolModel = ProtocolModel()
    seed: int = Field(0, ge=0, lt=2**64)
    seeds: list[Annotated[int, Field(ge=0, lt=2**64)]] | None = None
    sweep: SweepModel | None = None
    clamp: list[str] = ["x", "y"]
    clamp_values: dict[str, list[float]] | None = None
    diagnostic_batch: int = Field(128, ge=1)
    starve_ratio: float = Field(0.1, gt=0, lt=1)
    thetas: list[float] | None = None
    diffusion: DiffusionModel | None = None
    metrics: list[MetricName] = ["harmonic_load", "diffusive_activation", "val_mse"]
    output_dir: str | None = None

    @property
    def clamp_ids(self) -> list[str]:
        return list(self.clamp_values) if self.clamp_values is not None else list(self.clamp)

    def build_network(self, seed: int | None = None, base_dir: Path | None = None) -> PCSheaf:
        seed = self.seed if seed is None else seed
        net = self.network
        if isinstance(net, ChainNetwork):
            return make_chain(net.dims, net.weights)
        if isinstance(net, KnottedNetwork):
            return make_knotted(KnottedSpec(net.layers, net.stalk_dim, net.theta, seed))
        if isinstance(net, AllToAllNetwork):
            return make_all_to_all(AllToAllSpec(net.n_hidden, net.hidden_dim, net.io_dim, seed))
        if isinstance(net, FileNetwork):
            path = Path(net.path)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            return load_sheaf(path)
        return sheaf_from_dict({"vertices": net.vertices, "edges": net.edges})

    def config_hash(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a run config, reporting the offending line or field."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [
            f"{path}: field '{'.'.join(str(p) for p in err['loc']) or '<root>'}': {err['msg']}"
            for err in exc.errors()
        ]
        raise ConfigError("\n".join(lines)) from exc

"""Declarative experiment configuration and the per-cell pipeline.

A cell is one (dataset_type, n_clients, scheme, trial) combination of the
comparison grid. The functions here are pure in-memory steps; the CLI adds
file output on top.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from stfl.errors import ConfigError
from stfl.federation import FederationConfig, per_client_scores, prepare_clients, run_centralized, run_federated
from stfl.models import PatchGANConfig, UNetConfig
from stfl.phantom import NOISE_KINDS, NoiseSpec, build_federation_data, derive_seed
from stfl.style import (StyleArtifacts, generator_config, train_client_specific, train_universal)

DATASET_TYPES = ("synthetic", "semi_synthetic")
GRID_SCHEMES = ("vanilla", "universal", "client_specific", "centralized")
SCHEME_STYLE = {"vanilla": "none", "universal": "universal", "client_specific": "client_specific"}


@dataclass
class DataConfig:
    resolution: int = 64
    samples_per_client: int = 30
    style_set_size: int = 30
    warp_magnitude: float = 2.0
    val_fraction: float = 0.2
    base_seed: int = 0
    noise_assignments: dict = field(default_factory=lambda: {
        "3": ["clean", "inversion", "gaussian"],
        "4": ["clean", "inversion", "gaussian", "contrast_enhanced"],
        "5": ["clean", "inversion", "gaussian", "contrast_enhanced", "mixed"]})
    style_target: int | None = None
    semi_synthetic_shift: float = 0.5


@dataclass
class GridConfig:
    n_clients: list = field(default_factory=lambda: [3, 4, 5])
    dataset_types: list = field(default_factory=lambda: list(DATASET_TYPES))
    schemes: list = field(default_factory=lambda: list(GRID_SCHEMES))
    trials: int = 5


@dataclass
class FedConfig:
    rounds: int = 35
    local_epochs_per_round: int = 1
    learning_rate: float = 3e-3
    batch_size: int = 4
    optimizer: str = "adam"
    base_channels: int = 8
    depth: int = 3
    norm: str = "instance"


@dataclass
class StyleConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.5
    lambda_cycle: float = 10.0
    lambda_identity: float = 1.0
    shared_fraction: float = 0.25
    generator_channels: int = 8
    generator_depth: int = 3
    generator_norm: str = "instance"
    discriminator_layers: int = 3
    discriminator_channels: int = 8
    centralized_scheme: str = "client_specific"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    federation: FedConfig = field(default_factory=FedConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    output_dir: str | None = None

    # ------------------------------------------------------------ parsing
    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def validate(self) -> None:
        g, dc = self.grid, self.data
        for n in g.n_clients:
            if not isinstance(n, int) or n < 1:
                raise ConfigError(f"grid.n_clients: entries must be positive integers, got {n!r}")
            if str(n) not in dc.noise_assignments:
                raise ConfigError(f"data.noise_assignments: missing entry for n_clients={n}")
            specs = dc.noise_assignments[str(n)]
            if len(specs) != n:
                raise ConfigError(f"data.noise_assignments.{n}: {len(specs)} entries for {n} clients")
            for i, s in enumerate(specs):
                kind = s.get("kind") if isinstance(s, dict) else s
                if kind not in NOISE_KINDS:
                    raise ConfigError(f"data.noise_assignments.{n}[{i}]: unknown noise kind {kind!r}; "
                                      f"allowed: {', '.join(NOISE_KINDS)}")
                NoiseSpec.parse(s)
        for t in g.dataset_types:
            if t not in DATASET_TYPES:
                raise ConfigError(f"grid.dataset_types: unknown {t!r}; allowed: {', '.join(DATASET_TYPES)}")
        for s in g.schemes:
            if s not in GRID_SCHEMES:
                raise ConfigError(f"grid.schemes: unknown {s!r}; allowed: {', '.join(GRID_SCHEMES)}")
        if g.trials < 1:
            raise ConfigError("grid.trials must be >= 1")
        if self.style.centralized_scheme not in SCHEME_STYLE:
            raise ConfigError(f"style.centralized_scheme: unknown {self.style.centralized_scheme!r}")
        for name, v in (("federation.norm", self.federation.norm), ("style.generator_norm", self.style.generator_norm)):
            if v not in ("instance", "none"):
                raise ConfigError(f"{name}: unknown {v!r}; allowed: instance, none")
        if not 0 <= dc.semi_synthetic_shift <= 1:
            raise ConfigError("data.semi_synthetic_shift must be in [0, 1]")

    # ------------------------------------------------------------ derived configs
    def unet_config(self) -> UNetConfig:
        f = self.federation
        return UNetConfig(in_channels=2, base_channels=f.base_channels, depth=f.depth, norm=f.norm)

    def federation_config(self, n_clients: int, trial_seed: int, scheme: str) -> FederationConfig:
        f = self.federation
        return FederationConfig(n_clients=n_clients, rounds=f.rounds, local_epochs_per_round=f.local_epochs_per_round,
                                scheme=scheme, seed=trial_seed, learning_rate=f.learning_rate,
                                batch_size=f.batch_size, optimizer=f.optimizer, unet=self.unet_config())

    def style_kwargs(self) -> dict:
        s = self.style
        return {"lambda_cycle": s.lambda_cycle, "lambda_identity": s.lambda_identity,
                "learning_rate": s.learning_rate, "beta1": s.beta1,
                "gen_cfg": generator_config(s.generator_channels, s.generator_depth, s.generator_norm),
                "disc_cfg": PatchGANConfig(1, s.discriminator_layers, s.discriminator_channels)}

    def structure_shifts(self, dataset_type: str, n_clients: int) -> list[float]:
        if dataset_type == "synthetic":
            return [0.0] * n_clients
        # semi-synthetic: every other client comes from a structurally different source
        return [self.data.semi_synthetic_shift if k % 2 else 0.0 for k in range(n_clients)]

    def cells(self):
        for t in self.grid.dataset_types:
            for n in self.grid.n_clients:
                for trial in range(self.grid.trials):
                    for s in self.grid.schemes:
                        yield t, n, s, trial


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config field(s): {', '.join(where + u for u in sorted(unknown))}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _check_type(value, default, sub)
    return cls(**kwargs)


def _check_type(value, default, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


# ---------------------------------------------------------------- pipeline steps

def build_data(cfg: ExperimentConfig, dataset_type: str, n_clients: int):
    d = cfg.data
    return build_federation_data(
        n_clients, d.noise_assignments[str(n_clients)], d.base_seed, d.resolution,
        cfg.structure_shifts(dataset_type, n_clients), samples_per_client=d.samples_per_client,
        style_set_size=d.style_set_size, warp_magnitude=d.warp_magnitude, val_fraction=d.val_fraction,
        style_target=d.style_target)


def style_seed(trial: int, kind: str) -> int:
    return derive_seed(trial, 17 if kind == "universal" else 19)


def train_style(cfg: ExperimentConfig, clients, style, kind: str, trial: int,
                cache: dict | None = None) -> StyleArtifacts:
    """Pretrain the stylizers one scheme needs; ``cache`` reuses identical client trainings."""
    kw = cfg.style_kwargs()
    if kind == "none":
        return StyleArtifacts("none")
    if kind == "universal":
        return StyleArtifacts.universal(train_universal(clients, cfg.style.shared_fraction, style,
                                                        cfg.style.epochs, style_seed(trial, kind), **kw))
    if kind == "client_specific":
        return StyleArtifacts.client_specific(train_client_specific(clients, style, cfg.style.epochs,
                                                                    style_seed(trial, kind), cache=cache, **kw))
    raise ConfigError(f"unknown style scheme {kind!r}")


def style_kind_for(cfg: ExperimentConfig, scheme: str) -> str:
    return SCHEME_STYLE[cfg.style.centralized_scheme] if scheme == "centralized" else SCHEME_STYLE[scheme]


@dataclass
class CellResult:
    best_params: Any
    records: list
    per_client: list
    fed_config: FederationConfig

    @property
    def best_dice(self) -> float:
        return max((r.val_dice for r in self.records), default=float("nan"))

    @property
    def best_iou(self) -> float:
        """IOU at the best-Dice round."""
        if not self.records:
            return float("nan")
        return max(self.records, key=lambda r: r.val_dice).val_iou


def trial_seed(trial: int) -> int:
    return derive_seed(trial, 23)


def run_cell(cfg: ExperimentConfig, clients, artifacts: StyleArtifacts, scheme: str, trial: int,
             on_round=None) -> CellResult:
    """Train one scheme for one trial and score the best round per client."""
    prepared = prepare_clients(clients, artifacts)
    fcfg = cfg.federation_config(len(clients), trial_seed(trial), style_kind_for(cfg, scheme))
    if scheme == "centralized":
        best, records = run_centralized(fcfg, prepared, on_round=on_round)
    else:
        best, records = run_federated(fcfg, prepared, on_round=on_round)
    return CellResult(best, records, per_client_scores(fcfg, best, prepared), fcfg)

"""Experiment configuration: one versioned JSON document drives every command."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .embedder import TrainConfig
from .growth import GrowthConfig
from .protocol import REFERENCE_COSTS, CostModel
from .synthfarm import ConfigError, FarmConfig, _config_to_dict, stream

SCHEMA_VERSION = 1

# stream tags for seeds derived from the master seed
_TRAIN_FARM, _GROWTH_FARM, _TRAIN_INIT, _SESSION = 21, 22, 23, 24


def derive_seed(seed, *keys):
    return int(stream(seed, *keys).integers(0, 2**63))


def _alpha(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"bad α_tx value {v!r}") from None


def _alpha_json(v):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


@dataclass(frozen=True)
class TrainingSection(TrainConfig):
    head_dims: tuple = (1, 2, 4, 16, 128)
    train_seed_rafts: int = 38
    train_robots: int = 10
    train_rafts: int = 60


@dataclass(frozen=True)
class MatchingSection:
    P: int = 22
    F: int = 128
    passes: int = 10


@dataclass(frozen=True)
class ProtocolSection:
    alpha_tx: float = 1.0
    header_size: int = 16
    gap_scale: str = "row_std"
    failed_robots: tuple = ()


@dataclass(frozen=True)
class SweepSection:
    P_values: tuple = (1, 2, 4, 22)
    F_values: tuple = (1, 2, 4, 16, 128)
    passes: tuple = (1, 10)
    alpha_values: tuple = (math.inf, 2.0, 1.0, 0.5, -math.inf)


@dataclass(frozen=True)
class GrowthSection:
    n_rafts: int = 22
    n_robots: int = 5
    analysis: GrowthConfig = field(default_factory=GrowthConfig)


@dataclass(frozen=True)
class CostSection:
    model: CostModel = REFERENCE_COSTS
    extrapolate_robots: int = 3000


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "out"
    farm: FarmConfig = field(default_factory=FarmConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    matching: MatchingSection = field(default_factory=MatchingSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    growth: GrowthSection = field(default_factory=GrowthSection)
    cost: CostSection = field(default_factory=CostSection)

    # -- derived configurations -------------------------------------------
    def eval_farm(self):
        return replace(self.farm, rng_seed=self.seed)

    def train_farm(self):
        t = self.training
        return replace(self.farm, n_seed_rafts=t.train_seed_rafts, n_grow_robots=t.train_robots,
                       n_grow_rafts=t.train_rafts, rng_seed=derive_seed(self.seed, _TRAIN_FARM))

    def growth_farm(self):
        g = self.growth
        per_robot = self.farm.rafts_per_robot
        return replace(self.farm, n_seed_rafts=g.n_rafts, n_grow_robots=g.n_robots,
                       n_grow_rafts=g.n_robots * per_robot,
                       rng_seed=derive_seed(self.seed, _GROWTH_FARM))

    def train_seed(self, P):
        return derive_seed(self.seed, _TRAIN_INIT, P)

    def session_seed(self):
        return derive_seed(self.seed, _SESSION)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} != {SCHEMA_VERSION}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a u64, got {self.seed}")
        for farm in (self.eval_farm(), self.train_farm(), self.growth_farm()):
            farm.validate()
        t = self.training
        if t.epochs < 1 or t.steps_per_epoch < 1 or t.batch < 1 or t.lr <= 0 or t.alpha <= 0:
            raise ConfigError("training needs epochs, steps, batch >= 1 and lr, alpha > 0")
        m = self.matching
        if m.P < 1 or m.passes < 1:
            raise ConfigError("matching P and passes must be >= 1")
        if m.F not in t.head_dims:
            raise ConfigError(f"matching F={m.F} is not one of the heads {t.head_dims}")
        for d in (16, 128):
            if d not in t.head_dims:
                raise ConfigError(f"the transmission protocol needs a {d}-d head")
        for F in self.sweep.F_values:
            if F not in t.head_dims:
                raise ConfigError(f"sweep F={F} is not one of the heads {t.head_dims}")
        if self.protocol.header_size != 16:
            raise ConfigError("header_size is fixed at 16 bytes by the wire format")
        if self.protocol.gap_scale not in ("row_std", "raw"):
            raise ConfigError(f"unknown gap_scale {self.protocol.gap_scale!r}")
        if self.growth.analysis.cell_px % self.growth.analysis.grid:
            raise ConfigError("growth cell_px must be a multiple of the subpatch grid")
        return self

    # -- (de)serialization ------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        d["farm"] = _config_to_dict(self.farm)
        d["sweep"]["alpha_values"] = [_alpha_json(a) for a in self.sweep.alpha_values]
        d["protocol"]["alpha_tx"] = _alpha_json(self.protocol.alpha_tx)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            out = {k: d[k] for k in ("schema_version", "seed", "output_dir") if k in d}
            if "seed" in out:
                out["seed"] = int(out["seed"])
            out["farm"] = FarmConfig.from_dict(d.get("farm", {}))
            t = dict(d.get("training", {}))
            if "head_dims" in t:
                t["head_dims"] = tuple(int(x) for x in t["head_dims"])
            out["training"] = TrainingSection(**t)
            out["matching"] = MatchingSection(**d.get("matching", {}))
            p = dict(d.get("protocol", {}))
            if "alpha_tx" in p:
                p["alpha_tx"] = _alpha(p["alpha_tx"])
            p["failed_robots"] = tuple(p.get("failed_robots", ()))
            out["protocol"] = ProtocolSection(**p)
            s = {k: tuple(v) for k, v in d.get("sweep", {}).items()}
            if "alpha_values" in s:
                s["alpha_values"] = tuple(_alpha(a) for a in s["alpha_values"])
            out["sweep"] = SweepSection(**s)
            g = dict(d.get("growth", {}))
            g["analysis"] = GrowthConfig.from_dict(g.get("analysis", {}))
            out["growth"] = GrowthSection(**g)
            c = dict(d.get("cost", {}))
            if "model" in c:
                c["model"] = CostModel(**{**asdict(REFERENCE_COSTS), **c["model"]})
            out["cost"] = CostSection(**c)
            return cls(**out)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(d).validate()

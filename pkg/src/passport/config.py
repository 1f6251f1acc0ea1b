"""Experiment configuration files (TOML with [market], [grid], [pg], [a2c], [eval])."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

SECTIONS = ("market", "grid", "pg", "a2c", "eval")


def read_toml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _build(cls, section: str, data: dict):
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


@dataclass
class GridConfig:
    T: float = 10.0
    N: int = 10
    # quadrature oracle
    nx: int = 201
    ns: int = 41
    n_quad: int = 64
    method: str = "exact"

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ConfigError("[grid] needs T > 0 and N >= 1")
        if self.nx < 3 or self.nx % 2 == 0 or self.ns < 2 or self.n_quad < 2:
            raise ConfigError("[grid] oracle sizes: odd nx >= 3, ns >= 2, n_quad >= 2")

    def time_grid(self):
        from .market import TimeGrid

        return TimeGrid.uniform(float(self.T), int(self.N))


@dataclass
class VarianceConfig:
    T: float = 1.0
    N_list: tuple = (8, 32, 64, 128, 256, 512)
    n_iters: int = 512

    def __post_init__(self):
        self.N_list = tuple(int(n) for n in self.N_list)
        if len(self.N_list) < 4 or min(self.N_list) < 1 or self.n_iters < 2 or self.T <= 0:
            raise ConfigError("[eval.variance] needs >= 4 positive N values, n_iters >= 2, T > 0")


@dataclass
class EvalConfig:
    n_paths: int = 100_000
    export_paths: int = 1000
    surface_paths: int = 10_000
    surface_s: tuple = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
    surface_x: tuple = (-0.5, -0.25, 0.0, 0.25, 0.5)
    deep_hedging: object = None
    variance: object = None

    def __post_init__(self):
        from .evaluation import DeepHedgingConfig

        if min(self.n_paths, self.export_paths, self.surface_paths) < 2:
            raise ConfigError("[eval] path counts must be >= 2")
        self.surface_s = tuple(self.surface_s)
        self.surface_x = tuple(float(x) for x in self.surface_x)
        dh = self.deep_hedging
        if dh is None or isinstance(dh, dict):
            self.deep_hedging = _build(DeepHedgingConfig, "eval.deep_hedging", dh or {})
        var = self.variance
        if var is None or isinstance(var, dict):
            self.variance = _build(VarianceConfig, "eval.variance", var or {})


@dataclass
class ExperimentConfig:
    market: object
    grid: GridConfig = field(default_factory=GridConfig)
    pg: object = None
    a2c: object = None
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def time_grid(self):
        return self.grid.time_grid()

    def to_mapping(self) -> dict:
        """Plain-data snapshot that ``from_mapping`` turns back into this config."""
        out = {"market": self.market.to_mapping(), "grid": asdict(self.grid),
               "pg": asdict(self.pg), "a2c": asdict(self.a2c), "eval": asdict(self.eval)}
        return _plain(out)

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        from .a2c import A2CConfig
        from .market import MarketParams
        from .pg import PGConfig

        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        if "market" not in data:
            raise ConfigError("config needs a [market] section")
        market = MarketParams.from_mapping(data["market"])
        return cls(market=market,
                   grid=_build(GridConfig, "grid", data.get("grid", {})),
                   pg=_build(PGConfig, "pg", data.get("pg", {})),
                   a2c=_build(A2CConfig, "a2c", data.get("a2c", {})),
                   eval=_build(EvalConfig, "eval", data.get("eval", {})))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_mapping(read_toml(path))

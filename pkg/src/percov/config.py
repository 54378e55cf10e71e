"""INI run configuration.

Sections and keys (all optional)::

    [map]        name = rooms | path = my.pgm ; resolution = 0.1 ; threshold = 128
    [partition]  mode = W|WG|voronoi ; n_robots ; seed ; max_iterations ; dt ; k_g ; k_sat
                 gains = 5,100,500,5000 ; thresholds = 5e-3,2e-4,1e-5 ; gain_table = rooms
                 capabilities = 2,1,1 ; tolerance = 5
    [robots]     body_radius ; coverage_radius ; speed ; rho_max
    [fields]     decay = 0.9995 | gaussian ; decay_min ; decay_max
    [sim]        steps ; snapshot_every ; normalization = objective|squared
                 vertex_error = footprint|point
    [montecarlo] seeds = 10 (count) or 0,1,2 (list)
    [output]     out = runs/1

Command-line flags override file values; ``PERCOV_OUT`` sets the output root
when neither flag nor file name one.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import maps
from .covdyn import NORMALIZATIONS, RobotModel
from .environment import Environment, load_environment
from .partition import TABLE_GAINS, GainSchedule, PartitionConfig, gaussian_decay, linear_fields

OUT_ENV = "PERCOV_OUT"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


@dataclass
class RunConfig:
    map_name: str = "rooms"
    map_path: str | None = None
    resolution: float = 0.1
    threshold: int = 128
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    body_radius: float = 0.1
    coverage_radius: float = 0.2
    speed: float = 0.1
    rho_max: float = 20.0
    decay: float | str = 0.9995
    decay_min: float = 0.999
    decay_max: float = 0.9995
    steps: int = 5000
    snapshot_every: int = 0
    normalization: str = "objective"
    vertex_error: str = "footprint"
    seeds: tuple = tuple(range(10))
    out: str | None = None

    def environment(self) -> Environment:
        if self.map_path:
            return load_environment(Path(self.map_path), self.resolution, self.threshold)
        return maps.builtin(self.map_name, self.resolution)

    def robots(self, n: int | None = None) -> tuple:
        n = self.partition.n_robots if n is None else n
        return tuple(RobotModel(id=i, body_radius=self.body_radius, coverage_radius=self.coverage_radius,
                                speed=self.speed, rho_max=self.rho_max) for i in range(n))

    def fields(self, env: Environment, seed: int | None = None):
        """``(phi, decay, zstar)``; a Gaussian decay peaks at a seeded random free cell."""
        phi, d, z = linear_fields(env)
        if self.decay == "gaussian":
            free = np.argwhere(env.free)
            rng = np.random.default_rng(self.partition.seed if seed is None else seed)
            i, j = free[int(rng.integers(len(free)))]
            d = gaussian_decay(env, env.centers[i, j], self.decay_min, self.decay_max)
        else:
            d = np.full(env.free.shape, float(self.decay))
        return phi, d, z

    def output_dir(self, default: str = "runs/latest") -> Path:
        return Path(self.out or os.environ.get(OUT_ENV) or default)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (or none) and apply ``overrides`` (None values ignored)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    try:
        cfg = _from_parser(cp)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("mode", "seed", "max_iterations", "n_robots"):
            cfg.partition = replace(cfg.partition, **{key: value})
        elif key == "map":
            if Path(str(value)).exists():
                cfg.map_path, cfg.map_name = str(value), Path(str(value)).stem
            elif str(value) in maps.BUILTIN:
                cfg.map_path, cfg.map_name = None, str(value)
                cfg.partition = _with_table(cfg.partition, str(value), explicit=False)
            else:
                raise ConfigError(f"map {value!r} is neither a file nor a built-in map")
        else:
            setattr(cfg, key, value)
    return cfg


def _with_table(pc: PartitionConfig, name: str, explicit: bool) -> PartitionConfig:
    if name in TABLE_GAINS and (explicit or pc.schedule == GainSchedule()):
        schedule, k_g = TABLE_GAINS[name]
        return replace(pc, schedule=schedule, k_g=k_g)
    if explicit:
        raise ConfigError(f"no gain table for {name!r}; choose from {sorted(TABLE_GAINS)}")
    return pc


def _from_parser(cp: configparser.ConfigParser) -> RunConfig:
    cfg = RunConfig()
    if cp.has_section("map"):
        s = cp["map"]
        cfg.map_name = s.get("name", cfg.map_name)
        cfg.map_path = s.get("path", cfg.map_path)
        cfg.resolution = s.getfloat("resolution", cfg.resolution)
        cfg.threshold = s.getint("threshold", cfg.threshold)
    pc = PartitionConfig()
    if cfg.map_path is None:
        pc = _with_table(pc, cfg.map_name, explicit=False)
    if cp.has_section("partition"):
        s = cp["partition"]
        kw = {}
        if "mode" in s:
            kw["mode"] = s["mode"]
        for key in ("n_robots", "seed", "max_iterations"):
            if key in s:
                kw[key] = s.getint(key)
        for key in ("dt", "k_g", "k_sat", "tolerance"):
            if key in s:
                kw[key] = s.getfloat(key)
        if "capabilities" in s:
            kw["capabilities"] = _floats(s["capabilities"])
        pc = replace(pc, **kw)
        if "gain_table" in s:
            pc = _with_table(pc, s["gain_table"], explicit=True)
        if "gains" in s or "thresholds" in s:
            pc = replace(pc, schedule=GainSchedule(_floats(s.get("gains", "5,100,500,5000")),
                                                   _floats(s.get("thresholds", "5e-3,2e-4,1e-5"))))
    if pc.capabilities is not None and len(pc.capabilities) != pc.n_robots:
        raise ConfigError("capabilities must list one value per robot")
    cfg.partition = pc
    if cp.has_section("robots"):
        s = cp["robots"]
        for key in ("body_radius", "coverage_radius", "speed", "rho_max"):
            setattr(cfg, key, s.getfloat(key, getattr(cfg, key)))
    if cp.has_section("fields"):
        s = cp["fields"]
        d = s.get("decay", str(cfg.decay)).strip()
        cfg.decay = "gaussian" if d.lower() == "gaussian" else float(d)
        cfg.decay_min = s.getfloat("decay_min", cfg.decay_min)
        cfg.decay_max = s.getfloat("decay_max", cfg.decay_max)
    if cp.has_section("sim"):
        s = cp["sim"]
        cfg.steps = s.getint("steps", cfg.steps)
        cfg.snapshot_every = s.getint("snapshot_every", cfg.snapshot_every)
        cfg.normalization = s.get("normalization", cfg.normalization)
        cfg.vertex_error = s.get("vertex_error", cfg.vertex_error)
    if cfg.normalization not in NORMALIZATIONS:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
    if cp.has_section("montecarlo") and "seeds" in cp["montecarlo"]:
        text = cp["montecarlo"]["seeds"]
        cfg.seeds = tuple(int(x) for x in _floats(text)) if "," in text else tuple(range(int(text)))
    if cp.has_section("output"):
        cfg.out = cp["output"].get("out", cfg.out)
    return cfg

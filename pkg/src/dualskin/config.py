"""Scenario configuration: flat ``key = value`` text with ``[section]`` headers.

Keys before the first header belong to ``[scenario]``. Lists are comma
separated. Unknown sections or keys are rejected; all validation problems
are collected and reported together.

Grammar::

    file    := line*
    line    := blank | comment | header | pair
    comment := ('#' | ';') text
    header  := '[' name ']'
    pair    := key '=' value
"""
from __future__ import annotations

import configparser
import dataclasses
import re
import typing
from dataclasses import dataclass, field, fields

__all__ = [
    "ConfigError",
    "ConfigParseError",
    "ConfigValidationError",
    "SCENARIO_KINDS",
    "MeshConfig",
    "MaterialConfig",
    "CameraConfig",
    "MarkerConfig",
    "TactileConfig",
    "IndentationConfig",
    "DatasetConfig",
    "TrainConfig",
    "DistanceConfig",
    "CycleConfig",
    "ScenarioConfig",
    "load_config",
    "loads_config",
    "dump_config",
]

SCENARIO_KINDS = ("indentation_sweep", "distance_sweep", "mode_cycle", "dataset_gen")


class ConfigError(ValueError):
    pass


class ConfigParseError(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class MeshConfig:
    radius: float = 40.0
    length: float = 300.0
    element_size: float = 10.0
    fixed_ring_width: float = 15.0
    thickness: float = 5.0


@dataclass(frozen=True)
class MaterialConfig:
    youngs_modulus: float = 0.22
    poisson_ratio: float = 0.49


@dataclass(frozen=True)
class CameraConfig:
    fx: float = 220.0
    fy: float = 220.0
    cx: float = 320.0
    cy: float = 240.0
    k1: float = 0.0
    width: int = 640
    height: int = 480


@dataclass(frozen=True)
class MarkerConfig:
    rings: int = 9
    per_ring: int = 16
    diameter: float = 3.0
    stagger: bool = True


@dataclass(frozen=True)
class TactileConfig:
    mu: float = 1e-2
    passes: int = 3
    variants: tuple = ("lsq_dual_norm", "lsq_single_norm", "lsq_dual_raw", "lsq_single_raw")
    brightness_offset: int = 0
    ridge: bool = False


@dataclass(frozen=True)
class IndentationConfig:
    axial_locations: int = 7
    angular_locations: int = 7
    depths: tuple = (1.0, 2.5, 4.0, 5.0)
    artifacts: bool = True


@dataclass(frozen=True)
class DatasetConfig:
    axial_locations: int = 7
    angular_locations: int = 7
    depths: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
    full_grid: bool = False


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-3
    holdout_fraction: float = 0.2
    dataset_dir: str = ""


@dataclass(frozen=True)
class DistanceConfig:
    distances: tuple = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0)
    repetitions: int = 150
    obstacle_radius: float = 40.0
    obstacle_z: float = 0.0
    noise_sigma: float = 0.5
    noise_frame_sigma: float = 22.0
    noise_scale: float = 0.8
    noise_shift: float = 15.0
    noise_exponent: float = 1.07
    noise_ref_depth: float = 100.0
    calibrate: bool = True
    calibration_depths: tuple = (25.0, 50.0, 75.0, 100.0, 125.0, 150.0, 175.0, 200.0, 225.0,
                                 250.0, 275.0, 300.0, 325.0, 350.0, 375.0, 400.0, 425.0,
                                 450.0, 475.0, 500.0)
    calibration_frames: int = 10
    calibration_clearance: float = 30.0
    valid_min: float = 20.0
    valid_max: float = 100.0
    artifacts: bool = True


@dataclass(frozen=True)
class CycleConfig:
    dt: float = 0.02
    duration: float = 3.0
    transition_duration: float = 0.3
    switch_to_proximity: float = 0.2
    switch_to_tactile: float = 1.8
    start_clearance: float = 60.0
    approach_speed: float = 40.0
    max_indent: float = 5.0
    obstacle_radius: float = 6.0


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "indentation_sweep"
    seed: int = 0
    output: str = "out"
    mesh: MeshConfig = field(default_factory=MeshConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    markers: MarkerConfig = field(default_factory=MarkerConfig)
    tactile: TactileConfig = field(default_factory=TactileConfig)
    indentation: IndentationConfig = field(default_factory=IndentationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    cycle: CycleConfig = field(default_factory=CycleConfig)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


_TOP = "scenario"
_SECTIONS = {f.name: f.type for f in fields(ScenarioConfig) if f.name not in
             ("scenario", "seed", "output")}
_TOP_KEYS = ("scenario", "seed", "output")
_TUPLE_OF = {"variants": str}
_TYPES = typing.get_type_hints(ScenarioConfig)


def _section_cls(name):
    return _TYPES[name]


def _line_of(text: str, section: str, key: str):
    cur = _TOP
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            cur = m.group(1).strip()
        elif cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _convert(raw: str, typ, name: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ is tuple:
        items = [p.strip() for p in raw.split(",") if p.strip()]
        inner = _TUPLE_OF.get(name, float)
        return tuple(inner(p) for p in items)
    raise TypeError(f"unsupported field type {typ}")


def _field_types(cls):
    return typing.get_type_hints(cls)


def loads_config(text: str, source: str = "<string>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_TOP}]\n" + text, source=source)
    except configparser.Error as exc:
        msg = str(exc)
        # Line numbers count the synthetic header; shift them back.
        msg = re.sub(r"line\s+(\d+)", lambda m: f"line {int(m.group(1)) - 1}", msg)
        raise ConfigParseError(msg) from None

    errors = []
    top = {}
    sections = {}
    for sec in parser.sections():
        if sec == _TOP:
            allowed = {k: _TYPES[k] for k in _TOP_KEYS}
        elif sec in _SECTIONS:
            allowed = _field_types(_section_cls(sec))
        else:
            errors.append(f"unknown section [{sec}]")
            continue
        values = {}
        for key, raw in parser.items(sec):
            where = _line_of(text, sec, key)
            loc = f"{source}:{where}: " if where else f"{source}: "
            if key not in allowed:
                errors.append(f"{loc}unknown key {sec}.{key}")
                continue
            try:
                values[key] = _convert(raw, allowed[key], key)
            except (ValueError, TypeError) as exc:
                errors.append(f"{loc}{sec}.{key}: {exc}")
        if sec == _TOP:
            top = values
        else:
            sections[sec] = _section_cls(sec)(**values)
    if errors:
        raise ConfigParseError("\n".join(errors))
    cfg = ScenarioConfig(**top, **sections)
    problems = validate(cfg)
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from None
    return loads_config(text, str(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def dump_config(cfg: ScenarioConfig) -> str:
    out = [f"{k} = {_fmt(getattr(cfg, k))}" for k in _TOP_KEYS]
    for sec in _SECTIONS:
        out.append("")
        out.append(f"[{sec}]")
        block = getattr(cfg, sec)
        for f in fields(block):
            out.append(f"{f.name} = {_fmt(getattr(block, f.name))}")
    return "\n".join(out) + "\n"


def validate(cfg: ScenarioConfig):
    """Every violated constraint, as ``section.key: reason`` strings."""
    v = []

    def need(ok, where, why):
        if not ok:
            v.append(f"{where}: {why}")

    need(cfg.scenario in SCENARIO_KINDS, "scenario.scenario",
         f"must be one of {', '.join(SCENARIO_KINDS)}")
    need(0 <= cfg.seed < 2 ** 64, "scenario.seed", "must be an unsigned 64-bit integer")
    need(bool(cfg.output), "scenario.output", "must not be empty")

    m = cfg.mesh
    need(m.radius > 0, "mesh.radius", "must be positive")
    need(m.length > 2 * m.fixed_ring_width, "mesh.length", "must exceed 2 * fixed_ring_width")
    need(0 < m.element_size < m.radius, "mesh.element_size", "must lie in (0, radius)")
    need(m.fixed_ring_width >= 0, "mesh.fixed_ring_width", "must be non-negative")
    need(0 < m.thickness < m.radius, "mesh.thickness", "must lie in (0, radius)")

    need(cfg.material.youngs_modulus > 0, "material.youngs_modulus", "must be positive")
    need(-1 < cfg.material.poisson_ratio < 0.5, "material.poisson_ratio", "must lie in (-1, 0.5)")

    c = cfg.camera
    need(c.fx > 0, "camera.fx", "must be positive")
    need(c.fy > 0, "camera.fy", "must be positive")
    need(c.width > 0 and c.height > 0, "camera.width", "resolution must be positive")
    need(0 <= c.cx < c.width, "camera.cx", "must lie inside the image")
    need(0 <= c.cy < c.height, "camera.cy", "must lie inside the image")
    need(0 <= c.k1 <= 1, "camera.k1", "must lie in [0, 1]")

    mk = cfg.markers
    need(mk.rings >= 1, "markers.rings", "must be >= 1")
    need(mk.per_ring >= 1, "markers.per_ring", "must be >= 1")
    need(mk.diameter > 0, "markers.diameter", "must be positive")

    t = cfg.tactile
    need(t.mu > 0, "tactile.mu", "must be positive")
    need(t.passes >= 1, "tactile.passes", "must be >= 1")
    need(len(t.variants) > 0, "tactile.variants", "must not be empty")
    known = {"lsq_dual_norm", "lsq_single_norm", "lsq_dual_raw", "lsq_single_raw",
             "ridge_dual_norm"}
    bad = [x for x in t.variants if x not in known]
    need(not bad, "tactile.variants", f"unknown variant(s) {bad}")
    need(-255 <= t.brightness_offset <= 255, "tactile.brightness_offset", "must lie in [-255, 255]")

    for name in ("indentation", "dataset"):
        g = getattr(cfg, name)
        need(g.axial_locations >= 1, f"{name}.axial_locations", "must be >= 1")
        need(g.angular_locations >= 1, f"{name}.angular_locations", "must be >= 1")
        need(len(g.depths) > 0, f"{name}.depths", "grid must not be empty")
        need(all(0 <= d <= 5.0 for d in g.depths), f"{name}.depths",
             "depths must lie in [0, 5] mm")

    tr = cfg.train
    need(tr.lam >= 0, "train.lam", "must be non-negative")
    need(0 <= tr.holdout_fraction < 1, "train.holdout_fraction", "must lie in [0, 1)")

    d = cfg.distance
    need(len(d.distances) > 0, "distance.distances", "grid must not be empty")
    need(all(x >= 0 for x in d.distances), "distance.distances", "distances must be >= 0")
    need(d.repetitions >= 1, "distance.repetitions", "must be >= 1")
    need(d.obstacle_radius > 0, "distance.obstacle_radius", "must be positive")
    need(d.noise_sigma >= 0, "distance.noise_sigma", "must be non-negative")
    need(d.noise_frame_sigma >= 0, "distance.noise_frame_sigma", "must be non-negative")
    need(d.noise_scale > 0, "distance.noise_scale", "must be positive")
    need(d.noise_exponent > 0, "distance.noise_exponent", "must be positive")
    need(d.noise_ref_depth > 0, "distance.noise_ref_depth", "must be positive")
    need(len(set(d.calibration_depths)) >= 2 or not d.calibrate, "distance.calibration_depths",
         "need at least two distinct depths")
    need(all(x >= 0 for x in d.calibration_depths), "distance.calibration_depths",
         "depths must be >= 0")
    need(d.calibration_frames >= 1, "distance.calibration_frames", "must be >= 1")
    need(d.calibration_clearance >= 0, "distance.calibration_clearance", "must be >= 0")
    need(d.valid_min <= d.valid_max, "distance.valid_min", "must not exceed valid_max")

    y = cfg.cycle
    need(y.dt > 0, "cycle.dt", "must be positive")
    need(y.duration > 0, "cycle.duration", "must be positive")
    need(y.transition_duration > 0, "cycle.transition_duration", "must be positive")
    need(y.start_clearance >= 0, "cycle.start_clearance", "must be >= 0")
    need(y.approach_speed >= 0, "cycle.approach_speed", "must be >= 0")
    need(0 <= y.max_indent <= 5.0, "cycle.max_indent", "must lie in [0, 5] mm")
    need(y.obstacle_radius > 0, "cycle.obstacle_radius", "must be positive")
    return v

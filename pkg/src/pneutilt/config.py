"""Run configuration: one YAML file, strictly validated.

Every section maps onto a dataclass of the package; keys are the field
names of that dataclass and missing keys keep its defaults.  Unknown keys,
duplicate keys and ill-typed values raise :class:`ConfigError` carrying the
1-based line of the offending entry.  The only environment input is
``PNEUTILT_OUTPUT_DIR``, which overrides ``output_dir``.

Schema (all sections optional)::

    seed: 0
    output_dir: out
    scenarios: [step, sine, stiffness, dynload, gains]   # what "run all" runs
    assertions: [...]                                    # names in ASSERTIONS
    geometry:    anchor_radius, joint_offset_bottom, joint_offset_top, tilt_limits
    bellows:     area_diameter + BellowsParams fields
    plant:       inertia, joint_damping
    cloud:       start, stop, increment, noise_deg
    lookup:      LookupTolerances fields
    calibration: levels, extent, grid_step
    gain_law:    a, b, floor, cap
    ffvi:        p_agr + FFvIParams fields
    pid:         PIDGains fields
    loop:        dt, substeps
    step:        StepSchedule fields
    sine:        SineSchedule fields
    stiffness:   StiffnessSchedule fields (ramp is the ramped variant)
    dynload:     speeds, pressures, duration, ref + LoadingMechanism masses/geometry
"""

from __future__ import annotations

import math
import os
from dataclasses import MISSING, dataclass, field, fields, replace

import yaml

from .bellows import DEFAULT_AREA_DIAMETER_MM, BellowsParams, EffectiveArea
from .calibration import DEFAULT_AGR_LEVELS, LookupTolerances
from .controller import FFvIParams, PIDGains, VariableGainLaw
from .errors import ConfigError
from .experiments import (DYNLOAD_PRESSURES, DYNLOAD_SPEEDS, LoadingMechanism, LoopConfig,
                          SineSchedule, StepSchedule, StiffnessSchedule)
from .kinematics import TILT_LIMITS, PlatformGeometry
from .plant import PlantParams

OUTPUT_DIR_ENV = "PNEUTILT_OUTPUT_DIR"
SCENARIOS = ("step", "sine", "stiffness", "dynload", "gains")

# assertion name -> scenario that produces its evidence
ASSERTIONS = {
    "step_overshoot": "step",
    "step_settling": "step",
    "sine_envelope": "sine",
    "sine_rms": "sine",
    "sine_lag": "sine",
    "stiffness_reconverge": "stiffness",
    "stiffness_kp_increase": "stiffness",
    "stiffness_ramp_better": "stiffness",
    "dynload_every_cell": "dynload",
    "dynload_mean_ratio": "dynload",
    "dynload_stiffness_helps": "dynload",
    "gains_settling": "gains",
    "gains_overshoot": "gains",
}


@dataclass(frozen=True)
class GeometryConfig:
    anchor_radius: float = 80.0
    joint_offset_bottom: float = 60.0
    joint_offset_top: float = 60.0
    tilt_limits: tuple = TILT_LIMITS

    def build(self) -> PlatformGeometry:
        return PlatformGeometry.symmetric(self.anchor_radius, joint_offset_bottom=self.joint_offset_bottom,
                                          joint_offset_top=self.joint_offset_top,
                                          tilt_limits=self.tilt_limits)


@dataclass(frozen=True)
class CloudConfig:
    start: float = 0.0
    stop: float = 5.0
    increment: float = 0.2
    noise_deg: float = 0.05

    def __post_init__(self):
        if not (self.increment > 0 and self.stop > self.start):
            raise ValueError("need increment > 0 and stop > start")
        if self.noise_deg < 0:
            raise ValueError("noise_deg must be non-negative")


@dataclass(frozen=True)
class CalibrationConfig:
    levels: tuple = DEFAULT_AGR_LEVELS
    extent: float = 10.0         # deg, half-width of the fitted tilt square
    grid_step: float = 0.25      # deg, reference lattice spacing for the surface fits

    def __post_init__(self):
        if self.extent <= 0 or self.grid_step <= 0:
            raise ValueError("extent and grid_step must be positive")


@dataclass(frozen=True)
class DynloadConfig:
    speeds: tuple = DYNLOAD_SPEEDS
    pressures: tuple = DYNLOAD_PRESSURES
    duration: float = 30.0
    ref: tuple = (0.0, 0.0)
    axis_mass: float = 2.467
    weight_mass: float = 1.802
    travel: float = 330.0
    height: float = 50.0
    plate_offset: float = 60.0

    def __post_init__(self):
        if not self.speeds or not self.pressures or self.duration <= 0:
            raise ValueError("speeds, pressures and a positive duration are required")

    def mechanism(self, speed: float) -> LoadingMechanism:
        return LoadingMechanism(self.axis_mass, self.weight_mass, self.travel, speed,
                                self.height, self.plate_offset)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    scenarios: tuple = SCENARIOS
    assertions: tuple = tuple(ASSERTIONS)
    geometry: GeometryConfig = GeometryConfig()
    bellows: BellowsParams = field(default_factory=BellowsParams)
    plant_extra: dict = field(default_factory=dict)      # inertia / joint_damping overrides
    cloud: CloudConfig = CloudConfig()
    lookup: LookupTolerances = LookupTolerances()
    calibration: CalibrationConfig = CalibrationConfig()
    gain_law: VariableGainLaw = VariableGainLaw()
    ffvi: FFvIParams = FFvIParams()
    p_agr: float = 9.0
    pid: PIDGains = PIDGains()
    loop: LoopConfig = LoopConfig()
    step: StepSchedule = StepSchedule()
    sine: SineSchedule = SineSchedule()
    stiffness: StiffnessSchedule = StiffnessSchedule(ramp=2.0)
    dynload: DynloadConfig = DynloadConfig()

    def plant_params(self) -> PlantParams:
        return PlantParams(geometry=self.geometry.build(), bellows_params=self.bellows, **self.plant_extra)


# --------------------------------------------------------------------------- YAML with line numbers

def _line_map(node, path=(), out=None):
    """{key path: 1-based line} for every mapping key; rejects duplicate keys."""
    if out is None:
        out = {path: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            key = k.value
            if key in seen:
                raise ConfigError(f"duplicate key {'.'.join(path + (key,))!r}", k.start_mark.line + 1)
            seen.add(key)
            out[path + (key,)] = k.start_mark.line + 1
            _line_map(v, path + (key,), out)
    return out


def _coerce(value, default, where, line):
    """Convert a parsed YAML value to the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}", line)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}", line)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number, got {value!r}", line)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}", line)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}", line)
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, f"{where}[{i}]", line) for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported setting", line)


def _defaults(cls, exclude=()):
    out = {}
    for f in fields(cls):
        if f.name in exclude:
            continue
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
    return out


def _section(data, lines, name, defaults):
    """Validated keyword arguments for one section (only keys that are present)."""
    raw = data.get(name)
    line = lines.get((name,))
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping", line)
    kw = {}
    for key, value in raw.items():
        kline = lines.get((name, key), line)
        if key not in defaults:
            known = ", ".join(sorted(defaults))
            raise ConfigError(f"unknown key {name}.{key} (known: {known})", kline)
        kw[key] = _coerce(value, defaults[key], f"{name}.{key}", kline)
    return kw


def _build(cls, kw, name, line, base=None):
    try:
        return replace(base, **kw) if base is not None else cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"section {name!r}: {exc}", line) from None


def parse_config(text: str, env=None) -> RunConfig:
    """Parse and validate a YAML configuration document."""
    env = os.environ if env is None else env
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from None
    if data is None:
        data, lines = {}, {}
    else:
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", 1)
        lines = _line_map(node)

    top = {"seed": 0, "output_dir": "out", "scenarios": SCENARIOS, "assertions": tuple(ASSERTIONS)}
    sections = {
        "geometry": _defaults(GeometryConfig),
        "bellows": {"area_diameter": DEFAULT_AREA_DIAMETER_MM, **_defaults(BellowsParams, ("effective_area",))},
        "plant": _defaults(PlantParams, ("geometry", "bellows_params")),
        "cloud": _defaults(CloudConfig),
        "lookup": _defaults(LookupTolerances),
        "calibration": _defaults(CalibrationConfig),
        "gain_law": _defaults(VariableGainLaw),
        "ffvi": {"p_agr": 9.0, **_defaults(FFvIParams)},
        "pid": _defaults(PIDGains),
        "loop": _defaults(LoopConfig),
        "step": _defaults(StepSchedule),
        "sine": _defaults(SineSchedule),
        "stiffness": {**_defaults(StiffnessSchedule), "ramp": 2.0},
        "dynload": _defaults(DynloadConfig),
    }
    for key in data:
        if not isinstance(key, str) or (key not in top and key not in sections):
            known = ", ".join(sorted(list(top) + list(sections)))
            raise ConfigError(f"unknown key {key!r} (known: {known})", lines.get((key,)))

    kw_top = {}
    for key, default in top.items():
        if key in data:
            kw_top[key] = _coerce(data[key], default, key, lines.get((key,)))
    for key, allowed in (("scenarios", SCENARIOS), ("assertions", tuple(ASSERTIONS))):
        for item in kw_top.get(key, ()):
            if item not in allowed:
                raise ConfigError(f"{key}: unknown entry {item!r} (known: {', '.join(allowed)})",
                                  lines.get((key,)))

    kw = {name: _section(data, lines, name, d) for name, d in sections.items()}
    ln = {name: lines.get((name,)) for name in sections}

    # nested pairs get an explicit shape check
    if "tilt_limits" in kw["geometry"]:
        kw["geometry"]["tilt_limits"] = _pairs(data["geometry"]["tilt_limits"], "geometry.tilt_limits",
                                               lines.get(("geometry", "tilt_limits")))
    for name, key in (("step", "phases"),):
        if key in kw[name]:
            kw[name][key] = _pairs(data[name][key], f"{name}.{key}", lines.get((name, key)))

    bell = dict(kw["bellows"])
    diameter = bell.pop("area_diameter", None)
    if diameter is not None:
        if diameter <= 0:
            raise ConfigError("bellows.area_diameter must be positive", lines.get(("bellows", "area_diameter")))
        bell["effective_area"] = EffectiveArea.from_diameter(diameter)
    ffvi = dict(kw["ffvi"])
    p_agr = ffvi.pop("p_agr", 9.0)
    if not p_agr > 0:
        raise ConfigError("ffvi.p_agr must be positive", lines.get(("ffvi", "p_agr")))
    loop = _build(LoopConfig, kw["loop"], "loop", ln["loop"])
    if not (loop.dt > 0 and loop.substeps >= 1):
        raise ConfigError("loop: need dt > 0 and substeps >= 1", ln["loop"])
    plant_extra = kw["plant"]
    cfg = RunConfig(
        geometry=_build(GeometryConfig, kw["geometry"], "geometry", ln["geometry"]),
        bellows=_build(BellowsParams, bell, "bellows", ln["bellows"]),
        plant_extra=plant_extra,
        cloud=_build(CloudConfig, kw["cloud"], "cloud", ln["cloud"]),
        lookup=_build(LookupTolerances, kw["lookup"], "lookup", ln["lookup"]),
        calibration=_build(CalibrationConfig, kw["calibration"], "calibration", ln["calibration"]),
        gain_law=_build(VariableGainLaw, kw["gain_law"], "gain_law", ln["gain_law"]),
        ffvi=_build(FFvIParams, ffvi, "ffvi", ln["ffvi"]),
        p_agr=p_agr,
        pid=_build(PIDGains, kw["pid"], "pid", ln["pid"]),
        loop=loop,
        step=_build(StepSchedule, kw["step"], "step", ln["step"]),
        sine=_build(SineSchedule, kw["sine"], "sine", ln["sine"]),
        stiffness=_build(StiffnessSchedule, kw["stiffness"], "stiffness", ln["stiffness"],
                         base=StiffnessSchedule(ramp=2.0)),
        dynload=_build(DynloadConfig, kw["dynload"], "dynload", ln["dynload"]),
        **kw_top,
    )
    try:
        cfg.geometry.build()
        cfg.plant_params()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), ln["plant"] or ln["geometry"]) from None
    override = env.get(OUTPUT_DIR_ENV)
    if override:
        cfg = replace(cfg, output_dir=override)
    return cfg


def _pairs(value, where, line):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where}: expected a list of pairs", line)
    out = []
    for i, item in enumerate(value):
        if not (isinstance(item, (list, tuple)) and len(item) == 2):
            raise ConfigError(f"{where}[{i}]: expected a pair of numbers", line)
        out.append(tuple(_coerce(v, 0.0, f"{where}[{i}]", line) for v in item))
    return tuple(out)


def load_config(path=None, env=None) -> RunConfig:
    """Configuration from a file, or the defaults when ``path`` is None."""
    if path is None:
        return parse_config("", env)
    with open(path) as fh:
        text = fh.read()
    try:
        return parse_config(text, env)
    except ConfigError as exc:
        err = ConfigError(f"{path}: {exc}")
        err.line = exc.line
        raise err from None

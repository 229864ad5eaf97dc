"""Run configuration: defaults, line-based config files, CLI overrides, hashing."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields

from ..fusion import AXIS_VARIANTS, DAE_MIXERS, FUSION_MODES, parse_qua_fa
from ..numcore import ConfigError

RUN_MODES = ("train", "eval", "ablate", "gradcheck", "datagen")
SECTIONS = ("run", "fusion", "data", "model", "train", "eval")
# fields that say where or how a run executes, not what it computes
NON_SEMANTIC = frozenset({"mode", "seeds", "out", "workers"})


def _f(default, section: str, **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda d=default: type(d)(d), metadata={"section": section})
    return field(default=default, metadata={"section": section}, **kw)


@dataclass
class RunConfig:
    # run
    mode: str = _f("train", "run")
    seeds: list = _f([0], "run")
    out: str = _f("runs", "run")
    workers: int = _f(0, "run")
    # fusion
    fusion_mode: str = _f("progressive", "fusion")
    dae: bool = _f(True, "fusion")
    gae_enc: bool = _f(True, "fusion")
    gae_dec: bool = _f(True, "fusion")
    qua_fa: str = _f("first_layer", "fusion")
    plain_mixer: str = _f("concat", "fusion")
    axis: str = _f("lidar_on_i", "fusion")
    dae_hidden: int = _f(8, "fusion")
    gae_hidden: int = _f(128, "fusion")
    depth_state_channels: int = _f(8, "fusion")
    gae_quaternion: bool = _f(False, "fusion")
    # data
    train_scenes: int = _f(128, "data")
    eval_scenes: int = _f(64, "data")
    data_seed: int = _f(0, "data")
    lidar_present: bool = _f(True, "data")
    # model
    grid: int = _f(48, "model")
    bev_channels: int = _f(64, "model")
    x_range: tuple = _f((-51.2, 51.2), "model")
    y_range: tuple = _f((-51.2, 51.2), "model")
    encoder_layers: int = _f(2, "model")
    decoder_layers: int = _f(2, "model")
    heat_prior: float = _f(0.1, "model")
    # train
    steps: int = _f(1000, "train")
    inherit_steps: int = _f(0, "train")
    lr: float = _f(1e-2, "train")
    momentum: float = _f(0.9, "train")
    clip_norm: float = _f(5.0, "train")
    probe_scenes: int = _f(32, "train")
    probe_step: int = _f(500, "train")
    loss_window: int = _f(100, "train")
    # eval
    match_radius: float = _f(2.0, "eval")
    peak_threshold: float = _f(0.1, "eval")

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.x_range = tuple(float(v) for v in self.x_range)
        self.y_range = tuple(float(v) for v in self.y_range)
        self.validate()

    def validate(self) -> None:
        def one_of(name, allowed):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} = {getattr(self, name)!r}; expected one of {allowed}")

        one_of("mode", RUN_MODES)
        one_of("fusion_mode", FUSION_MODES)
        one_of("axis", AXIS_VARIANTS)
        one_of("plain_mixer", DAE_MIXERS[1:])
        parse_qua_fa(self.qua_fa, 3)
        for name in ("dae_hidden", "gae_hidden", "depth_state_channels", "train_scenes",
                     "eval_scenes", "grid", "bev_channels", "encoder_layers",
                     "decoder_layers", "probe_scenes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps < 0 or self.workers < 0:
            raise ConfigError("steps and workers must be non-negative")
        if not 0 <= self.inherit_steps <= self.steps:
            raise ConfigError(f"inherit_steps must be in 0..steps, got {self.inherit_steps}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        for name in ("x_range", "y_range"):
            r = getattr(self, name)
            if len(r) != 2 or not r[0] < r[1]:
                raise ConfigError(f"{name} must be an increasing pair, got {r}")
        if not 0.0 < self.heat_prior < 1.0:
            raise ConfigError(f"heat_prior must be in (0, 1), got {self.heat_prior}")
        if self.match_radius <= 0:
            raise ConfigError(f"match_radius must be positive, got {self.match_radius}")

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["x_range"] = list(self.x_range)
        d["y_range"] = list(self.y_range)
        return d

    def semantic_dict(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in NON_SEMANTIC}


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))
_TYPES = {f.name: type(f.default) if f.default is not dataclasses.MISSING else list
          for f in fields(RunConfig)}

# desk-scale profile used by the acceptance suite: a 25.6 m square in front
# of the ego car at 0.8 m cells, BEV width scaled down to match, and fused
# variants starting from a camera-only model trained for half the budget
DESK = {
    "grid": 32,
    "x_range": (0.0, 25.6),
    "y_range": (-12.8, 12.8),
    "bev_channels": 24,
    "gae_hidden": 24,
    "inherit_steps": 500,
}


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the canonical JSON of the fields that change results."""
    blob = json.dumps(cfg.semantic_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# parsing


def nearest_key(key: str) -> str | None:
    hits = difflib.get_close_matches(key, FIELD_NAMES, n=1, cutoff=0.0)
    return hits[0] if hits else None


def _unknown(key: str, where: str = "") -> ConfigError:
    near = nearest_key(key)
    hint = f"; did you mean {near!r}?" if near else ""
    return ConfigError(f"{where}unknown config key {key!r}{hint}")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_seeds(text: str) -> list[int]:
    out: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    if any(s < 0 for s in out):
        raise ValueError("seeds must be non-negative")
    return out


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise _unknown(key)
    kind = _TYPES[key]
    try:
        if key == "seeds":
            return _parse_seeds(text)
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(v) for v in text.split(","))
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; ``[name]`` opens a section."""
    values: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}: "
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                near = difflib.get_close_matches(section, SECTIONS, n=1, cutoff=0.0)
                raise ConfigError(f"{where}unknown section [{section}]; did you mean [{near[0]}]?")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}expected 'key = value', got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise _unknown(key, where)
        values[key] = parse_value(key, val)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then explicit overrides."""
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read(), str(path)))
    for k, v in (overrides or {}).items():
        if k not in _TYPES:
            raise _unknown(k)
        values[k] = v
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the config-file syntax, grouped by section."""
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for f in fields(RunConfig):
            if f.metadata["section"] != sec:
                continue
            v = getattr(cfg, f.name)
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)

"""Run configuration: one YAML file per run, validated before anything starts."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from gateracer.dynamics import QuadParams
from gateracer.env import DisplacedTracks, EnvConfig, FixedTrack, NormStats, RandomTracks, compute_norm_stats
from gateracer.ppo import PPOConfig
from gateracer.track import (
    BUNDLED_TRACKS, CurriculumState, DisplacementBounds, Track, TrackError, TrackGenConfig,
    bundled_track, displace_track, generate_random_track, load_track,
)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class DisplacementSpec:
    dx: float = 1.5
    dy: float = 1.5
    dz: float = 1.0
    dyaw_deg: float = 30.0
    level: float = 0.0

    def bounds(self, level: Optional[float] = None) -> DisplacementBounds:
        lvl = self.level if level is None else level
        return DisplacementBounds(self.dx, self.dy, self.dz, math.radians(self.dyaw_deg), lvl)


@dataclass(frozen=True)
class TrackSpec:
    """Where training tracks come from.

    ``kind`` is ``bundled`` (``name``), ``file`` (``path``) or ``random``
    (``gen``). A nonzero ``displacement.level`` perturbs a fixed track per
    episode. ``adaptive`` turns on complexity adaptation for random tracks.
    """

    kind: str = "bundled"
    name: str = "loop4"
    path: Optional[str] = None
    laps: Optional[int] = None
    displacement: DisplacementSpec = DisplacementSpec()
    gen: TrackGenConfig = TrackGenConfig()
    adaptive: bool = True
    initial_complexity: float = 0.0
    advance_threshold: float = 0.2
    complexity_step: float = 0.05

    def __post_init__(self):
        if self.kind not in ("bundled", "file", "random"):
            raise ValueError(f"kind must be bundled, file or random, got {self.kind!r}")
        if self.kind == "bundled" and self.name not in BUNDLED_TRACKS:
            raise ValueError(f"unknown bundled track {self.name!r}; choose from {', '.join(BUNDLED_TRACKS)}")
        if self.kind == "file" and not self.path:
            raise ValueError("kind 'file' needs a path")
        if self.laps is not None and self.laps < 1:
            raise ValueError("laps must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    quad: QuadParams = QuadParams()
    env: EnvConfig = EnvConfig()
    track: TrackSpec = TrackSpec()
    ppo: PPOConfig = PPOConfig()
    norm_stats: Optional[str] = None
    norm_tracks: int = 1000
    norm_gen: TrackGenConfig = TrackGenConfig()

    def __post_init__(self):
        if self.version > CONFIG_VERSION:
            raise ValueError(f"config version {self.version} is newer than supported {CONFIG_VERSION}")
        if self.norm_tracks < 1:
            raise ValueError("norm_tracks must be >= 1")


# ---------------------------------------------------------------------------
# parsing


def _is_optional(tp) -> tuple[bool, Any]:
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return True, args[0]
    return False, tp


def _coerce(value, tp, where: str):
    optional, tp = _is_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: value required")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot ("1e-4") as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, where: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown field '{where + '.' if where else ''}{key}'")
    kwargs = {k: _coerce(v, hints[k], f"{where + '.' if where else ''}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars."""
    raw = dict(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        try:
            node[parts[-1]] = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {key}: {exc}") from exc
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(RunConfig, apply_overrides(raw, overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


# ---------------------------------------------------------------------------
# builders


def base_track(spec: TrackSpec) -> Track:
    if spec.kind == "bundled":
        track = bundled_track(spec.name)
    elif spec.kind == "file":
        track = load_track(spec.path)
    else:
        raise ConfigError("random track specs have no base track")
    if spec.laps is not None and spec.laps != track.laps:
        track = dataclasses.replace(track, laps=spec.laps)
    return track


def build_source(run: RunConfig):
    spec = run.track
    if spec.kind == "random":
        return RandomTracks(spec.gen)
    track = base_track(spec)
    if spec.displacement.level > 0:
        return DisplacedTracks(track, spec.displacement.bounds())
    return FixedTrack(track)


def build_curriculum(run: RunConfig) -> Optional[CurriculumState]:
    spec = run.track
    if spec.kind != "random" or not spec.adaptive:
        return None
    return CurriculumState(spec.initial_complexity, spec.advance_threshold, spec.complexity_step)


def build_validation(run: RunConfig) -> tuple[list[Track], float]:
    """Validation tracks and start jitter used for best-checkpoint selection."""
    spec, pc = run.track, run.ppo
    rng = np.random.default_rng([run.seed, 104729])
    if spec.kind == "random":
        return [generate_random_track(spec.gen, 1.0, rng) for _ in range(pc.val_tracks)], 0.0
    track = base_track(spec)
    if spec.displacement.level > 0:
        bounds = spec.displacement.bounds()
        return [displace_track(track, bounds, rng) for _ in range(pc.val_tracks)], pc.eval_jitter
    return [track] * pc.eval_episodes, pc.eval_jitter


def build_norm_stats(run: RunConfig) -> NormStats:
    if run.norm_stats is not None:
        stats = NormStats.load(run.norm_stats)
        if stats.dim != run.env.obs_dim:
            raise ConfigError(f"norm_stats: dimension {stats.dim} does not match observation size {run.env.obs_dim}")
        return stats
    return compute_norm_stats(track_cfg=run.norm_gen, n_tracks=run.norm_tracks, seed=run.seed,
                              cfg=run.env, params=run.quad)


__all__ = [
    "ConfigError", "DisplacementSpec", "RunConfig", "TrackSpec", "TrackError", "apply_overrides",
    "build_curriculum", "build_norm_stats", "build_source", "build_validation", "dump_config",
    "from_dict", "load_config", "to_dict",
]

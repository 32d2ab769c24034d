"""Gates, tracks, procedural track generation and the difficulty curriculum."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from gateracer.geometry import rot_from_ypr

TRACK_FILE_VERSION = 1
MIN_SEGMENT = 0.1
BUNDLED_TRACKS = ("alphapilot", "splits", "airsim", "loop4")


class TrackError(Exception):
    """Base class for track loading and validation failures."""


class TrackFormatError(TrackError):
    """The file is not parseable structured text."""


class TrackSchemaError(TrackError):
    """A required field is missing, unknown or has the wrong type."""


class TrackVersionError(TrackError):
    """The file declares a schema version this reader does not understand."""


class TrackInvariantError(TrackError, ValueError):
    """The track geometry violates a structural invariant."""


class DegenerateConfigError(ValueError):
    """Track generation could not produce a valid gate within the retry budget."""


@dataclass(frozen=True)
class Gate:
    """Square gate. The local +x axis of ``rotation`` is the traversal normal."""

    center: np.ndarray
    yaw: float = 0.0
    width: float = 1.5
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        if not self.width > 0:
            raise TrackInvariantError(f"gate width must be positive, got {self.width}")
        if not np.all(np.isfinite(c)):
            raise TrackInvariantError("gate center must be finite")

    @property
    def rotation(self) -> np.ndarray:
        return rot_from_ypr(self.yaw, self.pitch, self.roll)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 0]

    def __eq__(self, other):
        if not isinstance(other, Gate):
            return NotImplemented
        # angles round-trip through degrees in files, so allow a few ulps
        return np.allclose(self.center, other.center, rtol=0, atol=1e-12) and np.allclose(
            [self.yaw, self.width, self.pitch, self.roll],
            [other.yaw, other.width, other.pitch, other.roll],
            rtol=0,
            atol=1e-12,
        )


@dataclass(frozen=True)
class Track:
    gates: tuple[Gate, ...]
    start_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_yaw: float = 0.0
    laps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "start_pos", np.asarray(self.start_pos, dtype=np.float64).reshape(3))
        if len(self.gates) < 1:
            raise TrackInvariantError("a track needs at least one gate")
        if int(self.laps) < 1:
            raise TrackInvariantError("laps must be >= 1")
        pts = [self.start_pos] + [g.center for g in self.gates]
        if self.laps > 1 and len(self.gates) > 1:
            pts.append(self.gates[0].center)
        for i in range(len(pts) - 1):
            if np.linalg.norm(pts[i + 1] - pts[i]) <= MIN_SEGMENT:
                raise TrackInvariantError(f"segment {i} is shorter than {MIN_SEGMENT} m (coincident gates)")

    def __len__(self):
        return len(self.gates)

    def __eq__(self, other):
        if not isinstance(other, Track):
            return NotImplemented
        return (
            self.gates == other.gates
            and np.allclose(self.start_pos, other.start_pos, rtol=0, atol=1e-12)
            and abs(self.start_yaw - other.start_yaw) <= 1e-12
            and self.laps == other.laps
        )

    @property
    def centers(self) -> np.ndarray:
        return np.array([g.center for g in self.gates])

    def lap_length(self) -> float:
        """Center-line length of the first lap, starting at the start position."""
        pts = np.vstack([self.start_pos, self.centers])
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def chain_length(self) -> float:
        """Center-line length over all laps."""
        total = self.lap_length()
        if self.laps > 1:
            c = self.centers
            loop = np.vstack([c, c[:1]])
            total += (self.laps - 1) * float(np.linalg.norm(np.diff(loop, axis=0), axis=1).sum())
        return total

    def elevation_change(self) -> float:
        z = np.append(self.centers[:, 2], self.start_pos[2])
        return float(z.max() - z.min())


def segment(track: Track, next_gate_index: int, lap: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Center-line segment ``(g1, g2)`` leading to gate ``next_gate_index``."""
    n = len(track.gates)
    if not 0 <= next_gate_index < n:
        raise IndexError(f"gate index {next_gate_index} out of range for {n} gates")
    if not 0 <= lap < track.laps:
        raise IndexError(f"lap {lap} out of range for {track.laps} laps")
    g2 = track.gates[next_gate_index].center
    if next_gate_index == 0:
        g1 = track.start_pos if lap == 0 else track.gates[-1].center
    else:
        g1 = track.gates[next_gate_index - 1].center
    return g1.copy(), g2.copy()


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class TrackGenConfig:
    """Ranges of the relative gate primitive at full complexity.

    Lateral, vertical and yaw ranges shrink linearly to zero as complexity goes
    to 0, which yields a straight line of gates. The heading change of each
    primitive is drawn first and the lateral offset follows it (half the turn
    angle over the forward distance, plus jitter), so gates face their approach.
    """

    gate_count: tuple[int, int] = (5, 15)
    forward: tuple[float, float] = (6.0, 14.0)
    lateral: float = 6.0
    vertical: float = 3.0
    yaw_deg: float = 75.0
    pitch_deg: float = 0.0
    roll_deg: float = 0.0
    gate_width: float = 1.5
    altitude: tuple[float, float] = (2.0, 12.0)
    start_altitude: float = 3.0
    laps: int = 1

    def __post_init__(self):
        lo, hi = self.gate_count
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid gate_count range {self.gate_count}")
        if not self.forward[0] <= self.forward[1]:
            raise ValueError("forward range must be ordered")
        if not self.forward[0] > self.gate_width:
            raise ValueError("forward offset minimum must exceed the gate width")
        if not self.altitude[0] < self.altitude[1]:
            raise ValueError("altitude range must be ordered")
        vals = (*self.forward, self.lateral, self.vertical, self.yaw_deg, self.pitch_deg,
                self.roll_deg, self.gate_width, *self.altitude, self.start_altitude)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("all ranges must be finite")
        if min(self.lateral, self.vertical, self.yaw_deg, self.pitch_deg, self.roll_deg) < 0:
            raise ValueError("half-ranges must be non-negative")

    @classmethod
    def long_tracks(cls) -> TrackGenConfig:
        """Preset reproducing the 110-150 m / up-to-17 m envelope of the random test tracks."""
        return cls(gate_count=(11, 13), forward=(8.0, 12.0), altitude=(1.5, 18.5), start_altitude=5.0)


def _reflect(z: float, lo: float, hi: float) -> float:
    if z > hi:
        z = 2.0 * hi - z
    if z < lo:
        z = 2.0 * lo - z
    return min(max(z, lo), hi)


def generate_random_track(cfg: TrackGenConfig, complexity: float, rng) -> Track:
    """Concatenate random gate primitives; a pure function of ``(cfg, complexity, rng state)``."""
    if not 0.0 <= complexity <= 1.0:
        raise ValueError(f"complexity must lie in [0, 1], got {complexity}")
    rng = np.random.default_rng(rng)
    lam = float(complexity)
    n = int(rng.integers(cfg.gate_count[0], cfg.gate_count[1] + 1))
    yaw_max = math.radians(cfg.yaw_deg) * lam
    lat_max = cfg.lateral * lam
    pos = np.array([0.0, 0.0, cfg.start_altitude])
    yaw = 0.0
    gates = []
    for _ in range(n):
        for _attempt in range(100):
            u = rng.uniform(-1.0, 1.0, size=6)
            fwd = cfg.forward[0] + 0.5 * (u[0] + 1.0) * (cfg.forward[1] - cfg.forward[0])
            dyaw = yaw_max * u[1]
            lat = fwd * math.tan(0.5 * dyaw) + 0.5 * lat_max * u[2]
            lat = min(max(lat, -lat_max), lat_max)
            z = _reflect(pos[2] + cfg.vertical * lam * u[3], *cfg.altitude)
            cy, sy = math.cos(yaw), math.sin(yaw)
            new = np.array([pos[0] + cy * fwd - sy * lat, pos[1] + sy * fwd + cy * lat, z])
            if np.linalg.norm(new - pos) > MIN_SEGMENT:
                break
        else:
            raise DegenerateConfigError("degenerate config: no valid gate after 100 retries")
        yaw = yaw + dyaw
        gates.append(
            Gate(
                new,
                yaw=math.atan2(math.sin(yaw), math.cos(yaw)),
                width=cfg.gate_width,
                pitch=math.radians(cfg.pitch_deg) * lam * u[4],
                roll=math.radians(cfg.roll_deg) * lam * u[5],
            )
        )
        pos = new
    return Track(tuple(gates), start_pos=np.array([0.0, 0.0, cfg.start_altitude]), start_yaw=0.0, laps=cfg.laps)


@dataclass(frozen=True)
class DisplacementBounds:
    dx: float = 1.5
    dy: float = 1.5
    dz: float = 1.0
    dyaw: float = math.radians(30.0)
    level: float = 1.0

    def __post_init__(self):
        if min(self.dx, self.dy, self.dz, self.dyaw, self.level) < 0:
            raise ValueError("displacement bounds must be non-negative")


def displace_track(track: Track, bounds: DisplacementBounds, rng) -> Track:
    """Shift every gate center and yaw by independent uniform samples within ``level * bound``."""
    rng = np.random.default_rng(rng)
    if bounds.level == 0.0:
        return replace(track)
    s = bounds.level
    half = np.array([bounds.dx, bounds.dy, bounds.dz]) * s
    gates = []
    for g in track.gates:
        u = rng.uniform(-1.0, 1.0, size=4)
        gates.append(replace(g, center=g.center + half * u[:3], yaw=g.yaw + bounds.dyaw * s * u[3]))
    return replace(track, gates=tuple(gates))


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class CurriculumState:
    complexity: float = 0.0
    advance_threshold: float = 0.2
    step: float = 0.05
    window: deque = field(default_factory=lambda: deque(maxlen=1000))

    def __post_init__(self):
        self.complexity = min(max(float(self.complexity), 0.0), 1.0)


def curriculum_update(state: CurriculumState, crash_ratio: float, outcomes=()) -> CurriculumState:
    """Raise the complexity by one step when the crash ratio is below the threshold.

    ``outcomes`` (crash flags of the episodes behind ``crash_ratio``) replace the
    stored window. Complexity never decreases.
    """
    if not 0.0 <= crash_ratio <= 1.0:
        raise ValueError(f"crash ratio must lie in [0, 1], got {crash_ratio}")
    lam = state.complexity
    if crash_ratio < state.advance_threshold:
        lam = min(1.0, lam + state.step)
    window = deque(outcomes, maxlen=state.window.maxlen) if outcomes else deque(state.window, maxlen=state.window.maxlen)
    return CurriculumState(lam, state.advance_threshold, state.step, window)


# ---------------------------------------------------------------------------
# files


def track_to_dict(track: Track) -> dict:
    def gate_dict(g: Gate) -> dict:
        d = {"pos": [float(v) for v in g.center], "yaw": math.degrees(g.yaw), "width": float(g.width)}
        if g.pitch:
            d["pitch"] = math.degrees(g.pitch)
        if g.roll:
            d["roll"] = math.degrees(g.roll)
        return d

    return {
        "version": TRACK_FILE_VERSION,
        "start": {"pos": [float(v) for v in track.start_pos], "yaw": math.degrees(track.start_yaw)},
        "laps": int(track.laps),
        "gates": [gate_dict(g) for g in track.gates],
    }


def _vec3(value, where: str) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise TrackSchemaError(f"{where} must be a list of 3 numbers")
    try:
        return np.array([float(v) for v in value])
    except (TypeError, ValueError) as exc:
        raise TrackSchemaError(f"{where} must be a list of 3 numbers") from exc


def _number(d: dict, key: str, where: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise TrackSchemaError(f"missing field {where}.{key}")
        return default
    try:
        return float(d[key])
    except (TypeError, ValueError) as exc:
        raise TrackSchemaError(f"{where}.{key} must be a number") from exc


def track_from_dict(data) -> Track:
    if not isinstance(data, dict):
        raise TrackSchemaError("track file must contain a mapping")
    unknown = set(data) - {"version", "start", "laps", "gates"}
    if unknown:
        raise TrackSchemaError(f"unknown field(s): {sorted(unknown)}")
    if "version" not in data:
        raise TrackSchemaError("missing field version")
    if data["version"] != TRACK_FILE_VERSION:
        raise TrackVersionError(f"unsupported track file version {data['version']!r}")
    for key in ("start", "gates"):
        if key not in data:
            raise TrackSchemaError(f"missing field {key}")
    start = data["start"]
    if not isinstance(start, dict) or "pos" not in start:
        raise TrackSchemaError("missing field start.pos")
    gates_raw = data["gates"]
    if not isinstance(gates_raw, list):
        raise TrackSchemaError("gates must be a list")
    gates = []
    for i, gd in enumerate(gates_raw):
        where = f"gates[{i}]"
        if not isinstance(gd, dict):
            raise TrackSchemaError(f"{where} must be a mapping")
        extra = set(gd) - {"pos", "yaw", "width", "pitch", "roll"}
        if extra:
            raise TrackSchemaError(f"unknown field(s) in {where}: {sorted(extra)}")
        if "pos" not in gd:
            raise TrackSchemaError(f"missing field {where}.pos")
        gates.append(
            Gate(
                _vec3(gd["pos"], f"{where}.pos"),
                yaw=math.radians(_number(gd, "yaw", where)),
                width=_number(gd, "width", where),
                pitch=math.radians(_number(gd, "pitch", where, 0.0)),
                roll=math.radians(_number(gd, "roll", where, 0.0)),
            )
        )
    laps = data.get("laps", 1)
    if not isinstance(laps, int) or isinstance(laps, bool):
        raise TrackSchemaError("laps must be an integer")
    return Track(
        tuple(gates),
        start_pos=_vec3(start["pos"], "start.pos"),
        start_yaw=math.radians(_number(start, "yaw", "start", 0.0)),
        laps=laps,
    )


def save_track(track: Track, path) -> None:
    Path(path).write_text(yaml.safe_dump(track_to_dict(track), sort_keys=False))


def load_track(path) -> Track:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TrackFormatError(f"cannot parse {path}: {exc}") from exc
    return track_from_dict(data)


def bundled_track(name: str) -> Track:
    if name not in BUNDLED_TRACKS:
        raise KeyError(f"unknown bundled track {name!r}; choose from {BUNDLED_TRACKS}")
    text = resources.files("gateracer.tracks").joinpath(f"{name}.yaml").read_text()
    return track_from_dict(yaml.safe_load(text))

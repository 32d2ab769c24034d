"""Single racing environment: observations, rewards, gate events and resets.

The heavy lifting happens in the compiled kernels of :mod:`gateracer.envcore`.
This module owns the Python-facing types and the per-environment logic that
runs only on episode boundaries (track sampling, initial states, replay).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from gateracer import envcore
from gateracer.dynamics import QuadParams, QuadState
from gateracer.envcore import (
    C_CODE, C_CRASH_GATE, C_DG, C_LAPNO, C_LAPTIME, C_MARGIN0, C_NLAPS, C_NPASS, C_PASS0, C_RP,
    C_RS, C_RT, C_WSQ, EV_CRASH, EV_FINISHED, EV_NONE, EV_OOB, EV_TIMEOUT, QUAD_OBS, RaceCore,
)
from gateracer.geometry import quat_from_yaw
from gateracer.track import (
    DisplacementBounds, Gate, Track, TrackGenConfig, displace_track,
    generate_random_track, segment,
)

NORM_STATS_VERSION = 1
STD_FLOOR = 1e-6
STRATEGIES = ("start", "segment", "replay", "distributed")


@dataclass(frozen=True)
class EnvConfig:
    dt_ctrl: float = 0.02
    substeps: int = 10
    n_gates_obs: int = 2
    a: float = 0.02
    b: float = 0.01
    d_max: float = 0.0
    timeout: float = 40.0
    bounds_margin: float = 10.0
    z_floor: float = 0.0
    penalize_oob: bool = False
    init_strategy: str = "start"
    hover_noise: float = 1.0
    replay_capacity: int = 4000
    literal_alpha: bool = False

    def __post_init__(self):
        if self.n_gates_obs < 1:
            raise ValueError("n_gates_obs must be >= 1")
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")
        if self.timeout <= 0 or self.dt_ctrl <= 0 or self.substeps < 1:
            raise ValueError("timeout, dt_ctrl and substeps must be positive")
        if self.init_strategy not in STRATEGIES:
            raise ValueError(f"init_strategy must be one of {STRATEGIES}")

    @property
    def obs_dim(self) -> int:
        return QUAD_OBS + 4 * self.n_gates_obs


# ---------------------------------------------------------------------------
# events and results


@dataclass(frozen=True)
class GatePass:
    index: int
    margin: float


@dataclass(frozen=True)
class GateCrash:
    index: int
    d_g: float


@dataclass(frozen=True)
class Timeout:
    pass


@dataclass(frozen=True)
class OutOfBounds:
    pass


@dataclass(frozen=True)
class LapComplete:
    lap: int
    lap_time: float
    final: bool = False


Event = Union[None, GatePass, GateCrash, Timeout, OutOfBounds, LapComplete]


@dataclass(frozen=True)
class RewardTerms:
    r_p: float
    r_s: float
    omega_penalty: float
    r_T: float
    a: float

    @property
    def total(self) -> float:
        return self.r_p + self.a * self.r_s + self.omega_penalty + self.r_T


@dataclass
class StepResult:
    observation: np.ndarray
    reward: RewardTerms
    done: bool
    event: Event
    info: dict


def is_terminal(event: Event) -> bool:
    if isinstance(event, LapComplete):
        return event.final
    return isinstance(event, (GateCrash, Timeout, OutOfBounds))


def decode_event(row: np.ndarray) -> Event:
    code = int(row[C_CODE])
    if code == EV_CRASH:
        return GateCrash(int(row[C_CRASH_GATE]), float(row[C_DG]))
    if code == EV_OOB:
        return OutOfBounds()
    if code == EV_FINISHED:
        return LapComplete(int(row[C_LAPNO]), float(row[C_LAPTIME]), final=True)
    if code == EV_TIMEOUT:
        return Timeout()
    if row[C_NLAPS] > 0:
        return LapComplete(int(row[C_LAPNO]), float(row[C_LAPTIME]))
    if row[C_NPASS] > 0:
        return GatePass(int(row[C_PASS0]), float(row[C_MARGIN0]))
    return None


def gate_passes(row: np.ndarray) -> list[tuple[int, float]]:
    n = min(int(row[C_NPASS]), 2)
    return [(int(row[C_PASS0 + 2 * i]), float(row[C_MARGIN0 + 2 * i])) for i in range(n)]


def done_code(row: np.ndarray) -> bool:
    return int(row[C_CODE]) != EV_NONE


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.mean) / self.std

    @classmethod
    def identity(cls, dim: int) -> NormStats:
        return cls(np.zeros(dim), np.ones(dim))

    def to_dict(self) -> dict:
        return {"version": NORM_STATS_VERSION, "dim": self.dim,
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        version = d.get("version", 1)
        if not isinstance(version, int) or version > NORM_STATS_VERSION:
            raise ValueError(f"unsupported norm stats version {version!r}")
        stats = cls(np.array(d["mean"]), np.array(d["std"]))
        if stats.dim != d["dim"]:
            raise ValueError("norm stats dim does not match array length")
        return stats

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> NormStats:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# reward and observation functions


def _vec(p) -> np.ndarray:
    return np.ascontiguousarray(p, dtype=np.float64).reshape(3)


def progress_reward(p_prev, p_cur, g1, g2) -> float:
    """Increase of the projection onto the segment ``g1 -> g2`` between two positions."""
    g1, g2 = _vec(g1), _vec(g2)
    if not np.linalg.norm(g2 - g1) > 0:
        raise ValueError("degenerate segment: g1 and g2 coincide")
    return envcore.seg_progress(_vec(p_cur), g1, g2) - envcore.seg_progress(_vec(p_prev), g1, g2)


def safety_reward(pos, gate: Gate, d_max: float) -> float:
    if d_max < 0:
        raise ValueError("d_max must be >= 0")
    d_plane, d_lat = envcore.plane_and_lateral(_vec(pos), gate.center, gate.rotation)
    return envcore.safety_value(d_plane, d_lat, gate.width, d_max)


def terminal_reward(crash_pos, gate: Gate) -> float:
    return envcore.terminal_value(float(np.linalg.norm(_vec(crash_pos) - gate.center)), gate.width)


def detect_gate_event(p_prev, p_cur, gate: Gate, index: int = 0) -> Optional[Union[GatePass, GateCrash]]:
    kind, val, _, _ = envcore.gate_crossing(_vec(p_prev), _vec(p_cur), gate.center, gate.rotation, gate.width)
    if kind == 1:
        return GatePass(index, val)
    if kind == 2:
        return GateCrash(index, val)
    return None


def observe_quad(state: QuadState) -> np.ndarray:
    out = np.zeros(QUAD_OBS)
    envcore.observe_quad_into(state.to_vector(), out)
    return out


def _pack(track: Track) -> tuple[np.ndarray, np.ndarray]:
    return track.centers, np.array([g.rotation for g in track.gates])


def observe_track(state: QuadState, track: Track, next_idx: int, n: int, literal_alpha: bool = False) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one observed gate")
    centers, axes = _pack(track)
    out = np.zeros(4 * n)
    envcore.observe_track_into(state.to_vector(), centers, axes, len(track.gates), int(next_idx), n,
                               literal_alpha, out)
    return out


# ---------------------------------------------------------------------------
# track sources


class FixedTrack:
    resamples = False

    def __init__(self, track: Track):
        self.track = track

    def sample(self, rng: np.random.Generator, complexity: float) -> Track:
        return self.track


class DisplacedTracks:
    resamples = True

    def __init__(self, track: Track, bounds: DisplacementBounds):
        self.track = track
        self.bounds = bounds

    def sample(self, rng: np.random.Generator, complexity: float) -> Track:
        return displace_track(self.track, self.bounds, rng)


class RandomTracks:
    resamples = True

    def __init__(self, cfg: TrackGenConfig):
        self.cfg = cfg

    def sample(self, rng: np.random.Generator, complexity: float) -> Track:
        return generate_random_track(self.cfg, complexity, rng)


TrackSource = Union[FixedTrack, DisplacedTracks, RandomTracks]


def as_source(track_or_source) -> TrackSource:
    if isinstance(track_or_source, Track):
        return FixedTrack(track_or_source)
    return track_or_source


# ---------------------------------------------------------------------------
# resets


class ReplayBuffer:
    """Bounded FIFO of states visited on the way to successful gate passes."""

    def __init__(self, capacity: int):
        self.items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add_many(self, items) -> None:
        self.items.extend(items)

    def sample(self, rng: np.random.Generator):
        x, k, lap = self.items[int(rng.integers(len(self.items)))]
        return x.copy(), k, lap

    def clear(self) -> None:
        self.items.clear()


def hover_vector(pos, yaw: float) -> np.ndarray:
    x = np.zeros(16)
    x[0:3] = pos
    x[3:7] = quat_from_yaw(yaw)
    return x


def track_segments(track: Track) -> list[tuple[int, int]]:
    """``(next_gate, lap)`` pairs identifying the distinct center-line segments."""
    segs = [(k, 0) for k in range(len(track.gates))]
    if track.laps > 1:
        segs.append((0, 1))
    return segs


def sample_segment_hover(track: Track, rng: np.random.Generator, noise: float):
    segs = track_segments(track)
    k, lap = segs[int(rng.integers(len(segs)))]
    g1, g2 = segment(track, k, lap)
    pos = 0.5 * (g1 + g2) + rng.uniform(-noise, noise, size=3)
    d = g2 - pos
    return hover_vector(pos, math.atan2(d[1], d[0])), k, lap


def sample_initial_state(track: Track, strategy: str, rng: np.random.Generator, cfg: EnvConfig,
                         replay: Optional[ReplayBuffer] = None):
    """Initial ``(state_vector, next_gate, lap)`` for one of the reset strategies."""
    if strategy == "start":
        return hover_vector(track.start_pos, track.start_yaw), 0, 0
    if strategy == "segment":
        return sample_segment_hover(track, rng, cfg.hover_noise)
    if strategy == "replay":
        if replay is not None and len(replay) > 0:
            return replay.sample(rng)
        return sample_segment_hover(track, rng, cfg.hover_noise)
    if strategy == "distributed":
        u = rng.uniform()
        if u < 0.1:
            return hover_vector(track.start_pos, track.start_yaw), 0, 0
        if u < 0.55 and replay is not None and len(replay) > 0:
            return replay.sample(rng)
        return sample_segment_hover(track, rng, cfg.hover_noise)
    raise ValueError(f"unknown reset strategy {strategy!r}")


@dataclass
class EnvSlot:
    """Per-environment Python state that lives outside the packed arrays."""

    source: TrackSource
    rng: np.random.Generator
    replay: ReplayBuffer
    track: Optional[Track] = None
    trajectory: list = field(default_factory=list)
    last_pass: int = 0
    ep_return: float = 0.0
    ep_len: int = 0

    def reset(self, core: RaceCore, e: int, strategy: str, complexity: float = 1.0) -> None:
        if self.track is None or self.source.resamples:
            self.track = self.source.sample(self.rng, complexity)
            core.set_track(e, self.track)
            self.replay.clear()
        x, k, lap = sample_initial_state(self.track, strategy, self.rng, core.cfg, self.replay)
        at_start = k == 0 and lap == 0 and np.array_equal(x, hover_vector(self.track.start_pos, self.track.start_yaw))
        core.set_state(e, x, k, lap, timed=at_start)
        self.trajectory = []
        self.last_pass = 0
        self.ep_return = 0.0
        self.ep_len = 0

    def record(self, x: np.ndarray, k: int, lap: int, passed: bool) -> None:
        self.trajectory.append((x.copy(), int(k), int(lap)))
        if passed:
            self.last_pass = len(self.trajectory)

    def flush(self) -> None:
        """Move the successful prefix of the finished episode into the replay buffer."""
        if self.last_pass:
            self.replay.add_many(self.trajectory[: self.last_pass])
        self.trajectory = []
        self.last_pass = 0


def actions_to_forces(actions: np.ndarray, params: QuadParams) -> np.ndarray:
    a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    return params.f_min + 0.5 * (a + 1.0) * (params.f_max - params.f_min)


def forces_to_actions(forces: np.ndarray, params: QuadParams) -> np.ndarray:
    return 2.0 * (np.asarray(forces) - params.f_min) / (params.f_max - params.f_min) - 1.0


def reward_arrays(out: np.ndarray, cfg: EnvConfig, b: float) -> np.ndarray:
    return out[:, C_RP] + cfg.a * out[:, C_RS] - b * out[:, C_WSQ] + out[:, C_RT]


class EpisodeFinishedError(RuntimeError):
    pass


class RacingEnv:
    """One racing environment with its own generator and track source."""

    def __init__(self, track, cfg: EnvConfig = EnvConfig(), params: QuadParams = QuadParams(),
                 norm: Optional[NormStats] = None, seed: int = 0, complexity: float = 1.0):
        self.cfg = cfg
        self.params = params
        self.norm = norm
        self.b = cfg.b
        self.complexity = complexity
        self.core = RaceCore(1, params, cfg)
        self.slot = EnvSlot(as_source(track), env_rng(seed, 0), ReplayBuffer(cfg.replay_capacity))
        self.done = True

    @property
    def track(self) -> Track:
        return self.slot.track

    @property
    def state(self) -> QuadState:
        return QuadState.from_vector(self.core.x[0])

    @property
    def time(self) -> float:
        return float(self.core.t[0])

    @property
    def next_gate(self) -> int:
        return int(self.core.nxt[0])

    def _obs(self) -> np.ndarray:
        obs = self.core.observe()[0].copy()
        return self.norm.normalize(obs) if self.norm is not None else obs

    def reset(self, strategy: Optional[str] = None, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.slot.rng = env_rng(seed, 0)
        self.slot.reset(self.core, 0, strategy or self.cfg.init_strategy, self.complexity)
        self.done = False
        return self._obs()

    def set_state(self, state: QuadState, next_idx: int = 0, lap: int = 0) -> None:
        self.core.set_state(0, state.to_vector(), next_idx, lap)

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinishedError("step() called on a finished episode; call reset()")
        forces = actions_to_forces(np.asarray(action).reshape(1, 4), self.params)
        row = self.core.step(forces)[0].copy()
        event = decode_event(row)
        self.done = done_code(row)
        terms = RewardTerms(float(row[C_RP]), float(row[C_RS]), -self.b * float(row[C_WSQ]),
                            float(row[C_RT]), self.cfg.a)
        x = self.core.x[0]
        info = {
            "lap": int(self.core.lap[0]),
            "next_gate": int(self.core.nxt[0]),
            "speed": float(np.linalg.norm(x[7:10])),
            "time": float(self.core.t[0]),
            "passes": gate_passes(row),
        }
        return StepResult(self._obs(), terms, self.done, event, info)


def env_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for environment ``index`` under a master seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


# ---------------------------------------------------------------------------
# batched deterministic rollouts


@dataclass
class EpisodeOutcome:
    event: Event
    steps: int
    lap_times: list
    margins: list
    gates_passed: int
    progress: float

    @property
    def crashed(self) -> bool:
        return isinstance(self.event, (GateCrash, OutOfBounds))

    @property
    def completed(self) -> bool:
        return isinstance(self.event, LapComplete) and self.event.final


Policy = Callable[[np.ndarray, RaceCore], np.ndarray]


def run_episodes(policy: Policy, tracks: list, cfg: EnvConfig, params: QuadParams,
                 norm: Optional[NormStats] = None, batch: int = 100, init_states=None,
                 on_step: Optional[Callable] = None, raw_obs_sink: Optional[Callable] = None) -> list[EpisodeOutcome]:
    """Roll ``policy`` out once per track from the start pose until every episode ends.

    ``policy(obs, core)`` receives (normalized) observations of the batch and the
    core; finished environments keep their last state and are ignored.
    ``init_states`` optionally overrides the start state per track.
    """
    outcomes: list[EpisodeOutcome] = []
    for b0 in range(0, len(tracks), batch):
        chunk = tracks[b0:b0 + batch]
        n = len(chunk)
        core = RaceCore(n, params, cfg, gate_capacity=max(len(t.gates) for t in chunk))
        for e, t in enumerate(chunk):
            core.set_track(e, t)
            x = hover_vector(t.start_pos, t.start_yaw) if init_states is None else init_states[b0 + e]
            core.set_state(e, x, 0, 0)
        active = np.ones(n, dtype=np.bool_)
        steps = np.zeros(n, dtype=np.int64)
        recs = [dict(lap_times=[], margins=[], passed=0, progress=0.0, event=None) for _ in range(n)]
        while active.any():
            raw = core.observe()
            if raw_obs_sink is not None:
                raw_obs_sink(raw[active])
            obs = norm.normalize(raw) if norm is not None else raw
            forces = actions_to_forces(policy(obs, core), params)
            out = core.step(forces, active)
            if on_step is not None:
                on_step(b0, core, forces, out, active)
            for e in np.flatnonzero(active):
                row = out[e]
                r = recs[e]
                steps[e] += 1
                r["progress"] += row[C_RP]
                for _, m in gate_passes(row):
                    r["margins"].append(m)
                    r["passed"] += 1
                if row[C_NLAPS] > 0:
                    r["lap_times"].append(float(row[C_LAPTIME]))
                if done_code(row):
                    r["event"] = decode_event(row)
                    active[e] = False
        for e in range(n):
            r = recs[e]
            outcomes.append(EpisodeOutcome(r["event"], int(steps[e]), r["lap_times"], r["margins"],
                                           r["passed"], float(r["progress"])))
    return outcomes


def compute_norm_stats(policy: Optional[Policy] = None, track_cfg: TrackGenConfig = TrackGenConfig(),
                       n_tracks: int = 1000, seed: int = 0, cfg: EnvConfig = EnvConfig(),
                       params: QuadParams = QuadParams(), complexity: float = 1.0) -> NormStats:
    """Observation mean/std over one deterministic rollout per random track.

    Without a policy the scripted center-line pilot flies the tracks.
    """
    if n_tracks < 1:
        raise ValueError("n_tracks must be >= 1")
    if policy is None:
        from gateracer.controller import ScriptedPilot

        policy = ScriptedPilot(params)
    rng = np.random.default_rng(seed)
    tracks = [generate_random_track(track_cfg, complexity, rng) for _ in range(n_tracks)]
    acc = _MomentAccumulator(cfg.obs_dim)
    run_episodes(policy, tracks, cfg, params, raw_obs_sink=acc.add)
    return acc.stats()


class _MomentAccumulator:
    """Streaming mean/variance via Chan's parallel update."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, batch: np.ndarray) -> None:
        if len(batch) == 0:
            return
        nb = batch.shape[0]
        mb = batch.mean(axis=0)
        m2b = ((batch - mb) ** 2).sum(axis=0)
        tot = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / tot
        self.m2 = self.m2 + m2b + delta ** 2 * self.n * nb / tot
        self.n = tot

    def stats(self) -> NormStats:
        return NormStats(self.mean.copy(), np.sqrt(self.m2 / max(self.n, 1)))

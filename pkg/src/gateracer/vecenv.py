"""Lock-step batch of independent racing environments with auto-reset."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from gateracer.dynamics import QuadParams
from gateracer.env import (
    EnvConfig, EnvSlot, Event, GateCrash, LapComplete, NormStats, OutOfBounds, ReplayBuffer,
    actions_to_forces, as_source, decode_event, env_rng,
)
from gateracer.envcore import C_CODE, C_NPASS, C_RP, C_RS, C_RT, C_WSQ, RaceCore
from gateracer.track import CurriculumState


@dataclass
class BatchStep:
    obs: np.ndarray
    rewards: np.ndarray
    r_p: np.ndarray
    r_s: np.ndarray
    omega_sq: np.ndarray
    r_T: np.ndarray
    dones: np.ndarray
    events: list
    next_gate: np.ndarray
    lap: np.ndarray


class VecEnv:
    """``n_envs`` environments stepped together.

    ``track`` is a single track or source shared by every environment, or a
    sequence with one entry per environment. Finished environments are reset
    automatically inside :meth:`step`; the returned observation for such an
    environment is the first one of its new episode while reward, done flag
    and event belong to the episode that just ended.
    """

    def __init__(self, track, n_envs: int = 100, cfg: EnvConfig = EnvConfig(),
                 params: QuadParams = QuadParams(), norm: Optional[NormStats] = None,
                 seed: int = 0, n_workers: int = 1, curriculum: Optional[CurriculumState] = None,
                 record_window: int = 10000):
        if n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        if isinstance(track, Sequence) and not isinstance(track, (str, bytes)):
            sources = [as_source(t) for t in track]
            if len(sources) != n_envs:
                raise ValueError("need one track source per environment")
        else:
            sources = [as_source(track)] * n_envs
        self.n_envs = n_envs
        self.cfg = cfg
        self.params = params
        self.norm = norm
        self.b = cfg.b
        self.curriculum = curriculum
        self.strategy = cfg.init_strategy
        self.core = RaceCore(n_envs, params, cfg, n_workers=n_workers)
        self.slots = [EnvSlot(s, env_rng(seed, i), ReplayBuffer(cfg.replay_capacity)) for i, s in enumerate(sources)]
        self.episodes = 0
        self.crashes = 0
        self.laps = 0
        self.steps = 0
        self.outcomes: deque = deque(maxlen=record_window)
        self.lap_times: deque = deque(maxlen=record_window)
        self.episode_returns: deque = deque(maxlen=record_window)
        self._iter_outcomes: list = []
        self._iter_lap_times: list = []
        self._iter_returns: list = []

    @property
    def complexity(self) -> float:
        return 1.0 if self.curriculum is None else self.curriculum.complexity

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    def _record_replay(self) -> bool:
        return self.strategy in ("replay", "distributed")

    def _observe(self) -> np.ndarray:
        obs = self.core.observe().copy()
        return self.norm.normalize(obs) if self.norm is not None else obs

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        """Reset every environment; with ``seed`` all generators are re-derived from it."""
        for i, slot in enumerate(self.slots):
            if seed is not None:
                slot.rng = env_rng(seed, i)
                slot.track = None
            slot.reset(self.core, i, self.strategy, self.complexity)
        return self._observe()

    def step(self, actions: np.ndarray) -> BatchStep:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, 4):
            raise ValueError(f"expected actions of shape ({self.n_envs}, 4), got {actions.shape}")
        out = self.core.step(actions_to_forces(actions, self.params))
        r_p, r_s, wsq, r_T = out[:, C_RP].copy(), out[:, C_RS].copy(), out[:, C_WSQ].copy(), out[:, C_RT].copy()
        rewards = r_p + self.cfg.a * r_s - self.b * wsq + r_T
        dones = out[:, C_CODE] != 0
        next_gate = self.core.nxt.copy()
        lap = self.core.lap.copy()
        self.steps += self.n_envs
        events: list[Event] = [None] * self.n_envs
        record = self._record_replay()
        for i in range(self.n_envs):
            row = out[i]
            slot = self.slots[i]
            slot.ep_return += rewards[i]
            slot.ep_len += 1
            if row[C_NPASS] > 0 or dones[i]:
                events[i] = decode_event(row)
            if record:
                slot.record(self.core.x[i], self.core.nxt[i], self.core.lap[i], row[C_NPASS] > 0)
            ev = events[i]
            if isinstance(ev, LapComplete):
                self.laps += 1
                if math.isfinite(ev.lap_time):
                    self.lap_times.append(ev.lap_time)
                    self._iter_lap_times.append(ev.lap_time)
            if dones[i]:
                crashed = isinstance(ev, (GateCrash, OutOfBounds))
                self.episodes += 1
                self.crashes += int(crashed)
                self.outcomes.append(crashed)
                self._iter_outcomes.append(crashed)
                self.episode_returns.append(slot.ep_return)
                self._iter_returns.append(slot.ep_return)
                if record:
                    slot.flush()
                slot.reset(self.core, i, self.strategy, self.complexity)
        obs = self._observe()
        return BatchStep(obs, rewards, r_p, r_s, wsq, r_T, dones, events, next_gate, lap)

    def crash_ratio(self, window: int = 100) -> float:
        if window < 1:
            raise ValueError("window must be >= 1")
        recent = list(self.outcomes)[-window:]
        return sum(recent) / len(recent) if recent else 0.0

    def pop_iteration_stats(self) -> dict:
        """Episode outcomes gathered since the previous call (one training iteration)."""
        outcomes, laps, rets = self._iter_outcomes, self._iter_lap_times, self._iter_returns
        self._iter_outcomes, self._iter_lap_times, self._iter_returns = [], [], []
        return {
            "episodes": len(outcomes),
            "crash_ratio": sum(outcomes) / len(outcomes) if outcomes else 0.0,
            "outcomes": outcomes,
            "avg_lap_time": float(np.mean(laps)) if laps else float("nan"),
            "mean_return": float(np.mean(rets)) if rets else float("nan"),
        }

    def close(self) -> None:
        self.core.close()

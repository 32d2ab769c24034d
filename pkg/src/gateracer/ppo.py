"""Actor-critic PPO: policy network, GAE, clipped updates, training loop and evaluation."""

from __future__ import annotations

import io
import json
import logging
import math
import pickle
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from gateracer.env import EnvConfig, NormStats, forces_to_actions, run_episodes
from gateracer.dynamics import QuadParams
from gateracer.track import Track, curriculum_update
from gateracer.vecenv import VecEnv

if TYPE_CHECKING:
    from gateracer.config import RunConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0


class CheckpointError(ValueError):
    """File is not a readable checkpoint of a supported version."""


class DivergenceError(RuntimeError):
    """Raised when a loss turns non-finite during an update."""


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.98
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    lr_decay: bool = True
    epochs: int = 10
    minibatch: int = 5120
    horizon: int = 250
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    iterations: int = 200
    time_budget_s: Optional[float] = None
    hidden: tuple[int, ...] = (256, 256)
    log_std_init: float = -0.5
    n_envs: int = 100
    n_workers: int = 1
    eval_every: int = 10
    eval_episodes: int = 10
    eval_jitter: float = 0.0
    val_tracks: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip < 0:
            raise ValueError("clip must be non-negative")
        if min(self.epochs, self.minibatch, self.horizon, self.iterations, self.n_envs) < 1:
            raise ValueError("epochs, minibatch, horizon, iterations and n_envs must be >= 1")


# ---------------------------------------------------------------------------
# networks


def _mlp(sizes: Sequence[int], dtype) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1], dtype=dtype))
        if i < len(sizes) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """Gaussian policy with a tanh-squashed mean and a state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int = 4, hidden: Sequence[int] = (256, 256),
                 log_std_init: float = -0.5, dtype=torch.float32, action_bias: float = 0.0):
        super().__init__()
        self.obs_dim, self.act_dim, self.hidden = obs_dim, act_dim, tuple(hidden)
        self.actor = _mlp([obs_dim, *hidden, act_dim], dtype)
        self.critic = _mlp([obs_dim, *hidden, 1], dtype)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std_init), dtype=dtype))
        if action_bias:
            # start near the given action (hover) with a nearly input-independent mean
            last = self.actor[-1]
            with torch.no_grad():
                last.weight.mul_(0.01)
                last.bias.fill_(math.atanh(max(min(action_bias, 0.999), -0.999)))

    def spec(self) -> dict:
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "hidden": list(self.hidden)}

    def forward(self, obs: torch.Tensor):
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation has {obs.shape[-1]} entries, policy expects {self.obs_dim}")
        mean = torch.tanh(self.actor(obs))
        std = torch.exp(self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)).expand_as(mean)
        value = self.critic(obs).squeeze(-1)
        return mean, std, value

    def log_prob(self, mean, std, actions):
        var = std * std
        return (-0.5 * (actions - mean) ** 2 / var - torch.log(std) - 0.5 * math.log(2 * math.pi)).sum(-1)

    @staticmethod
    def entropy(std):
        return (0.5 + 0.5 * math.log(2 * math.pi) + torch.log(std)).sum(-1)

    def act(self, obs: np.ndarray, generator: Optional[torch.Generator] = None, deterministic: bool = False):
        """Sample actions for a batch; returns (clamped actions, raw actions, log-prob, value)."""
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            mean, std, value = self(torch.as_tensor(obs, dtype=dtype))
            if deterministic:
                raw = mean
            else:
                raw = mean + std * torch.randn(mean.shape, generator=generator, dtype=dtype)
            logp = self.log_prob(mean, std, raw)
        return raw.clamp(-1.0, 1.0).numpy(), raw.numpy(), logp.numpy(), value.numpy()


def policy_forward(model: ActorCritic, obs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        mean, std, value = model(torch.as_tensor(np.asarray(obs), dtype=dtype))
    return mean.numpy(), std.numpy(), value.numpy()


class DeterministicPolicy:
    """Mean-action wrapper usable by :func:`gateracer.env.run_episodes`."""

    def __init__(self, model: ActorCritic):
        self.model = model

    def __call__(self, obs, core=None) -> np.ndarray:
        mean, _, _ = policy_forward(self.model, obs)
        return mean.astype(np.float64)


# ---------------------------------------------------------------------------
# advantages and losses


def gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalized advantage estimates over the leading (time) axis.

    ``dones[t]`` marks that the episode ended with transition ``t``;
    ``last_value`` bootstraps the value after the final transition.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have the same shape")
    last_value = np.broadcast_to(np.asarray(last_value, dtype=np.float64), rewards.shape[1:])
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(last_value)
    next_value = last_value
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    if adv.numel() < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)


@dataclass
class Batch:
    obs: torch.Tensor
    actions: torch.Tensor
    logp: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor

    def __len__(self):
        return self.obs.shape[0]

    def subset(self, idx) -> Batch:
        return Batch(self.obs[idx], self.actions[idx], self.logp[idx], self.advantages[idx], self.returns[idx])


def ppo_loss(model: ActorCritic, batch: Batch, cfg: PPOConfig, normalize: bool = True):
    """Clipped surrogate + value + entropy loss for one minibatch.

    Where the clipped and unclipped surrogates tie, the unclipped one is
    selected, so at the old parameters the gradient equals the plain policy
    gradient.
    """
    mean, std, value = model(batch.obs)
    logp = model.log_prob(mean, std, batch.actions)
    adv = normalize_advantages(batch.advantages) if normalize else batch.advantages
    ratio = torch.exp(logp - batch.logp)
    surr = ratio * adv
    clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    loss_pi = -torch.where(surr <= clipped, surr, clipped).mean()
    loss_v = ((value - batch.returns) ** 2).mean()
    entropy = model.entropy(std).mean()
    loss = loss_pi + cfg.vf_coef * loss_v - cfg.ent_coef * entropy
    with torch.no_grad():
        clip_frac = ((ratio - 1.0).abs() > cfg.clip).float().mean()
        approx_kl = ((ratio - 1.0) - torch.log(ratio)).mean()
    return loss, {"loss_pi": loss_pi.item(), "loss_v": loss_v.item(), "entropy": entropy.item(),
                  "clip_frac": clip_frac.item(), "approx_kl": approx_kl.item()}


def ppo_update(model: ActorCritic, optimizer: torch.optim.Optimizer, batch: Batch, cfg: PPOConfig,
               generator: torch.Generator) -> dict:
    """``cfg.epochs`` passes of shuffled minibatch updates; returns mean loss metrics."""
    n = len(batch)
    sums: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            loss, parts = ppo_loss(model, batch.subset(idx), cfg)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss.item()} ({parts})")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in sums.items()}


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    n_episodes: int
    completed: int
    crash_count: int
    timeouts: int
    avg_lap_time: float
    lap_time_std: float
    margin_mean: float
    margin_std: float
    n_margins: int
    episodes: list = field(default_factory=list)

    @property
    def crash_ratio(self) -> float:
        return self.crash_count / self.n_episodes if self.n_episodes else 0.0

    @property
    def completion_ratio(self) -> float:
        return self.completed / self.n_episodes if self.n_episodes else 0.0

    def selection_key(self) -> tuple:
        lap = self.avg_lap_time if math.isfinite(self.avg_lap_time) else math.inf
        return (self.crash_ratio, 1.0 - self.completion_ratio, lap)


def summarize(outcomes) -> EvalReport:
    laps = [o.lap_times[0] for o in outcomes if o.completed and o.lap_times]
    margins = [m for o in outcomes if o.margins for m in o.margins]
    episodes = [
        {
            "episode": i,
            "outcome": type(o.event).__name__,
            "crashed": bool(o.crashed),
            "completed": bool(o.completed),
            "lap_time": o.lap_times[0] if o.completed and o.lap_times else None,
            "gates_passed": o.gates_passed,
            "steps": o.steps,
            "mean_margin": float(np.mean(o.margins)) if o.margins else None,
        }
        for i, o in enumerate(outcomes)
    ]
    return EvalReport(
        n_episodes=len(outcomes),
        completed=sum(o.completed for o in outcomes),
        crash_count=sum(o.crashed for o in outcomes),
        timeouts=sum(type(o.event).__name__ == "Timeout" for o in outcomes),
        avg_lap_time=float(np.mean(laps)) if laps else float("nan"),
        lap_time_std=float(np.std(laps)) if laps else float("nan"),
        margin_mean=float(np.mean(margins)) if margins else float("nan"),
        margin_std=float(np.std(margins)) if margins else float("nan"),
        n_margins=len(margins),
        episodes=episodes,
    )


def jittered_starts(tracks: Sequence[Track], jitter: float, seed: int):
    if jitter <= 0:
        return None
    from gateracer.env import hover_vector

    rng = np.random.default_rng(seed)
    return [hover_vector(t.start_pos + rng.uniform(-jitter, jitter, size=3), t.start_yaw) for t in tracks]


def evaluate(policy, tracks, n_episodes: int = 1, cfg: EnvConfig = EnvConfig(),
             params: QuadParams = QuadParams(), norm: Optional[NormStats] = None,
             start_jitter: float = 0.0, seed: int = 0) -> EvalReport:
    """Deterministic rollouts from the start pose.

    ``policy`` is an :class:`ActorCritic` (mean action is used) or any callable
    ``policy(obs, core)``. ``tracks`` is one track, repeated ``n_episodes``
    times, or a list of tracks (one episode each).
    """
    if isinstance(policy, ActorCritic):
        policy = DeterministicPolicy(policy)
    if isinstance(tracks, Track):
        tracks = [tracks] * n_episodes
    tracks = list(tracks)
    inits = jittered_starts(tracks, start_jitter, seed)
    return summarize(run_episodes(policy, tracks, cfg, params, norm, init_states=inits))


# ---------------------------------------------------------------------------
# training


def _metrics_line(rec: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    return json.dumps({k: clean(v) for k, v in rec.items()})


class Trainer:
    """Owns every piece of state needed to continue training bit-for-bit."""

    def __init__(self, run: RunConfig, norm: Optional[NormStats] = None):
        from gateracer import config as cfgmod

        self.run = run
        pc = run.ppo
        torch.manual_seed(run.seed)
        self.generator = torch.Generator().manual_seed(run.seed)
        self.norm = norm if norm is not None else cfgmod.build_norm_stats(run)
        self.source = cfgmod.build_source(run)
        self.curriculum = cfgmod.build_curriculum(run)
        self.venv = VecEnv(self.source, pc.n_envs, run.env, run.quad, self.norm, seed=run.seed,
                           n_workers=pc.n_workers, curriculum=self.curriculum)
        hover = float(forces_to_actions(np.array([run.quad.hover_thrust]), run.quad)[0])
        self.model = ActorCritic(run.env.obs_dim, 4, pc.hidden, pc.log_std_init, action_bias=hover)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=pc.lr)
        self.val_tracks, self.val_jitter = cfgmod.build_validation(run)
        self.iteration = 0
        self.history: list[dict] = []
        self.best: Optional[dict] = None
        self.obs = self.venv.reset(seed=run.seed)
        self._t0 = time.perf_counter()
        self._elapsed_before = 0.0

    # -- one iteration -----------------------------------------------------

    def _lr(self) -> float:
        pc = self.run.ppo
        if not pc.lr_decay:
            return pc.lr
        return pc.lr * max(1.0 - self.iteration / pc.iterations, 0.05)

    def collect(self) -> tuple[Batch, dict]:
        pc = self.run.ppo
        H, N, D = pc.horizon, self.venv.n_envs, self.venv.obs_dim
        obs_buf = np.zeros((H, N, D), dtype=np.float32)
        act_buf = np.zeros((H, N, 4), dtype=np.float32)
        logp_buf = np.zeros((H, N))
        val_buf = np.zeros((H, N))
        rew_buf = np.zeros((H, N))
        done_buf = np.zeros((H, N))
        for t in range(H):
            actions, raw, logp, value = self.model.act(self.obs, self.generator)
            obs_buf[t] = self.obs
            act_buf[t] = raw
            logp_buf[t] = logp
            val_buf[t] = value
            step = self.venv.step(actions)
            rew_buf[t] = step.rewards
            done_buf[t] = step.dones
            self.obs = step.obs
        _, _, _, last_value = self.model.act(self.obs, self.generator, deterministic=True)
        adv, ret = gae(rew_buf, val_buf, done_buf, last_value, pc.gamma, pc.gae_lambda)
        dtype = next(self.model.parameters()).dtype
        batch = Batch(
            torch.as_tensor(obs_buf.reshape(H * N, D), dtype=dtype),
            torch.as_tensor(act_buf.reshape(H * N, 4), dtype=dtype),
            torch.as_tensor(logp_buf.reshape(-1), dtype=dtype),
            torch.as_tensor(adv.reshape(-1), dtype=dtype),
            torch.as_tensor(ret.reshape(-1), dtype=dtype),
        )
        return batch, {"mean_reward": float(rew_buf.mean())}

    def validate(self) -> EvalReport:
        run = self.run
        return evaluate(self.model, self.val_tracks, cfg=run.env, params=run.quad, norm=self.norm,
                        start_jitter=self.val_jitter, seed=run.seed + 7919)

    def step(self) -> dict:
        pc = self.run.ppo
        t_start = time.perf_counter()
        for group in self.optimizer.param_groups:
            group["lr"] = self._lr()
        batch, roll = self.collect()
        losses = ppo_update(self.model, self.optimizer, batch, pc, self.generator)
        stats = self.venv.pop_iteration_stats()
        if self.curriculum is not None:
            self.curriculum = curriculum_update(self.curriculum, stats["crash_ratio"], stats["outcomes"])
            self.venv.curriculum = self.curriculum
            if self.curriculum.complexity >= 1.0:
                self.venv.b = 0.0
        self.iteration += 1
        rec = {
            "iter": self.iteration,
            "steps": int(self.venv.steps),
            "crash_ratio": stats["crash_ratio"],
            "avg_lap_time": stats["avg_lap_time"],
            "mean_reward": roll["mean_reward"],
            "loss_pi": losses["loss_pi"],
            "loss_v": losses["loss_v"],
            "entropy": losses["entropy"],
            "clip_frac": losses["clip_frac"],
            "approx_kl": losses["approx_kl"],
            "lambda": self.venv.complexity,
            "episodes": stats["episodes"],
        }
        if pc.eval_every and self.iteration % pc.eval_every == 0:
            rep = self.validate()
            rec.update(val_crash_ratio=rep.crash_ratio, val_completion=rep.completion_ratio,
                       val_lap_time=rep.avg_lap_time)
            key = rep.selection_key()
            if self.best is None or key < tuple(self.best["key"]):
                self.best = {"iter": self.iteration, "key": list(key)}
                rec["best"] = True
        rec["iter_time_s"] = time.perf_counter() - t_start
        rec["wallclock_s"] = self.elapsed()
        self.history.append(rec)
        return rec

    def elapsed(self) -> float:
        return self._elapsed_before + time.perf_counter() - self._t0

    # -- checkpoints -----------------------------------------------------------

    def policy_payload(self) -> dict:
        return {
            "format": "gateracer-checkpoint",
            "version": CHECKPOINT_VERSION,
            "policy_spec": self.model.spec(),
            "model": self.model.state_dict(),
            "norm": self.norm.to_dict(),
            "env": asdict(self.run.env),
            "quad": asdict(self.run.quad),
            "curriculum_lambda": self.venv.complexity,
            "iteration": self.iteration,
        }

    def save(self, path) -> None:
        payload = self.policy_payload()
        payload["optimizer"] = self.optimizer.state_dict()
        payload["runtime"] = pickle.dumps({
            "run": self.run,
            "venv": self.venv,
            "obs": self.obs,
            "generator": self.generator.get_state(),
            "history": self.history,
            "best": self.best,
            "curriculum": self.curriculum,
            "val_tracks": self.val_tracks,
            "val_jitter": self.val_jitter,
            "elapsed": self.elapsed(),
        })
        buf = io.BytesIO()
        torch.save(payload, buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> Trainer:
        payload = load_checkpoint(path)
        rt = pickle.loads(payload["runtime"])
        self = cls.__new__(cls)
        self.run = rt["run"]
        self.norm = NormStats.from_dict(payload["norm"])
        self.venv = rt["venv"]
        self.source = self.venv.slots[0].source
        self.curriculum = rt["curriculum"]
        spec = payload["policy_spec"]
        self.model = ActorCritic(spec["obs_dim"], spec["act_dim"], spec["hidden"])
        self.model.load_state_dict(payload["model"])
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.run.ppo.lr)
        self.optimizer.load_state_dict(payload["optimizer"])
        self.generator = torch.Generator()
        self.generator.set_state(rt["generator"])
        self.val_tracks, self.val_jitter = rt["val_tracks"], rt["val_jitter"]
        self.iteration = payload["iteration"]
        self.history = rt["history"]
        self.best = rt["best"]
        self.obs = rt["obs"]
        self._elapsed_before = rt["elapsed"]
        self._t0 = time.perf_counter()
        return self


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    try:
        payload = torch.load(io.BytesIO(raw), weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path} is not a gateracer checkpoint ({exc.__class__.__name__})") from exc
    if not isinstance(payload, dict) or payload.get("format") != "gateracer-checkpoint":
        raise CheckpointError(f"{path} is not a gateracer checkpoint")
    if payload.get("version", 0) > CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
    return payload


def load_policy(path) -> tuple[ActorCritic, NormStats, dict]:
    """Policy network, observation statistics and the raw checkpoint payload."""
    payload = load_checkpoint(path)
    spec = payload["policy_spec"]
    model = ActorCritic(spec["obs_dim"], spec["act_dim"], spec["hidden"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, NormStats.from_dict(payload["norm"]), payload


def train(run: RunConfig, out_dir=None, trainer: Optional[Trainer] = None,
          callback: Optional[Callable[[Trainer, dict], bool]] = None) -> Trainer:
    """Run iterations until the iteration cap or time budget is hit.

    Writes ``metrics.jsonl``, ``last.pt`` and ``best.pt`` into ``out_dir``
    when given. ``callback(trainer, record)`` returning True stops early.
    """
    trainer = trainer or Trainer(run)
    pc = run.ppo
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_f = open(out / "metrics.jsonl", "a") if out is not None else None
    try:
        while trainer.iteration < pc.iterations:
            if pc.time_budget_s is not None and trainer.elapsed() >= pc.time_budget_s:
                break
            rec = trainer.step()
            logger.info("iter %d steps %d crash %.3f lap %.2f reward %.4f lambda %.2f", rec["iter"],
                        rec["steps"], rec["crash_ratio"], rec["avg_lap_time"], rec["mean_reward"], rec["lambda"])
            if metrics_f is not None:
                metrics_f.write(_metrics_line(rec) + "\n")
                metrics_f.flush()
                if rec.get("best"):
                    trainer.save(out / "best.pt")
            if callback is not None and callback(trainer, rec):
                break
    except KeyboardInterrupt:
        logger.warning("interrupted at iteration %d; writing checkpoint", trainer.iteration)
        if out is not None:
            trainer.save(out / "last.pt")
        raise
    finally:
        if metrics_f is not None:
            metrics_f.close()
    if out is not None:
        trainer.save(out / "last.pt")
        if not (out / "best.pt").exists():
            trainer.save(out / "best.pt")
    return trainer

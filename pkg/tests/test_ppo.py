import json
import math

import numpy as np
import pytest
import torch

from gateracer.config import load_config
from gateracer.controller import ScriptedPilot
from gateracer.dynamics import QuadParams
from gateracer.env import EpisodeOutcome, GateCrash, LapComplete, OutOfBounds, Timeout, run_episodes
from gateracer.ppo import (
    ActorCritic, Batch, DeterministicPolicy, DivergenceError, PPOConfig, Trainer, evaluate, gae, jittered_starts,
    normalize_advantages, policy_forward, ppo_loss, ppo_update, summarize, train,
)
from gateracer.track import Gate, Track, bundled_track, save_track


def gae_oracle(r, v, d, last, gamma, lam):
    """Exponentially weighted k-step advantages, summed explicitly."""
    T = len(r)
    adv = np.zeros(T)
    for t in range(T):
        K = T - t
        for j in range(t, T):
            if d[j]:
                K = j - t + 1
                break

        def a_k(k):
            ret = sum(gamma**l * r[t + l] for l in range(k))
            end = t + k
            if d[end - 1]:
                boot = 0.0
            else:
                boot = v[end] if end < T else last
            return ret + gamma**k * boot - v[t]

        total = sum((1 - lam) * lam ** (k - 1) * a_k(k) for k in range(1, K))
        adv[t] = total + lam ** (K - 1) * a_k(K)
    return adv


def test_gae_undiscounted_suffix_sums():
    adv, ret = gae([1, 1, 1], [0, 0, 0], [0, 0, 1], 0.0, 1.0, 1.0)
    np.testing.assert_allclose(adv, [3, 2, 1])
    np.testing.assert_allclose(ret, [3, 2, 1])


def test_gae_lambda_zero_is_td():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=8), rng.normal(size=8)
    d = np.array([0, 0, 1, 0, 0, 0, 1, 0])
    last = 0.7
    adv, _ = gae(r, v, d, last, 0.9, 0.0)
    nv = np.append(v[1:], last)
    np.testing.assert_allclose(adv, r + 0.9 * nv * (1 - d) - v, atol=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_gae_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=10), rng.normal(size=10)
    d = rng.uniform(size=10) < 0.2
    last = rng.normal()
    gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
    adv, ret = gae(r, v, d, last, gamma, lam)
    np.testing.assert_allclose(adv, gae_oracle(r, v, d, last, gamma, lam), atol=1e-9, rtol=0)
    np.testing.assert_allclose(ret, adv + v, atol=1e-12)


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(3)
    r, v = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    d = rng.uniform(size=(10, 4)) < 0.2
    last = rng.normal(size=4)
    adv, _ = gae(r, v, d, last, 0.98, 0.95)
    for i in range(4):
        np.testing.assert_allclose(adv[:, i], gae_oracle(r[:, i], v[:, i], d[:, i], last[i], 0.98, 0.95), atol=1e-9)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae([1, 2, 3], [0, 0], [0, 0, 0], 0.0, 0.9, 0.9)


def test_config_invariants():
    with pytest.raises(ValueError):
        PPOConfig(gamma=1.0)
    with pytest.raises(ValueError):
        PPOConfig(gae_lambda=1.5)
    with pytest.raises(ValueError):
        PPOConfig(clip=-0.1)


# --- policy ---------------------------------------------------------------------


def test_zero_weights_give_zero_mean():
    m = ActorCritic(26)
    with torch.no_grad():
        for p in m.actor.parameters():
            p.zero_()
    mean, std, _ = policy_forward(m, np.random.default_rng(0).normal(size=(5, 26)))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(std, math.exp(-0.5), rtol=1e-6)


def test_outputs_bounded():
    torch.manual_seed(0)
    m = ActorCritic(26)
    obs = np.random.default_rng(1).normal(scale=100.0, size=(100_000, 26))
    mean, _, _ = policy_forward(m, obs)
    assert np.all(np.abs(mean) <= 1.0)
    assert np.all(np.isfinite(mean))
    actions, raw, _, _ = m.act(obs[:1000], torch.Generator().manual_seed(0))
    assert np.all(np.abs(actions) <= 1.0)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        policy_forward(ActorCritic(26), np.zeros((2, 22)))


def test_value_linear_in_final_layer():
    torch.manual_seed(0)
    m = ActorCritic(10, hidden=(16, 16), dtype=torch.float64)
    obs = np.random.default_rng(0).normal(size=(20, 10))
    bias = m.critic[-1].bias.item()
    _, _, v1 = policy_forward(m, obs)
    with torch.no_grad():
        m.critic[-1].weight.mul_(2.0)
    _, _, v2 = policy_forward(m, obs)
    np.testing.assert_allclose(v2 - bias, 2 * (v1 - bias), atol=1e-12)


def test_log_std_clamped():
    m = ActorCritic(4, log_std_init=5.0)
    _, std, _ = policy_forward(m, np.zeros((1, 4)))
    np.testing.assert_allclose(std, math.exp(1.0), rtol=1e-6)
    m = ActorCritic(4, log_std_init=-9.0)
    _, std, _ = policy_forward(m, np.zeros((1, 4)))
    np.testing.assert_allclose(std, math.exp(-5.0), rtol=1e-6)


def test_log_prob_integrates_to_one():
    m = ActorCritic(3, act_dim=4, dtype=torch.float64)
    obs = torch.zeros(1, 3, dtype=torch.float64)
    mean, std, _ = m(obs)
    for dim in range(4):
        grid = torch.linspace(-8, 8, 20001, dtype=torch.float64)
        acts = mean.detach().repeat(grid.numel(), 1)
        acts[:, dim] = grid
        other = [i for i in range(4) if i != dim]
        lp = m.log_prob(mean.expand_as(acts), std.expand_as(acts), acts)
        # divide out the other dimensions evaluated at their means
        lp_other = (-torch.log(std[0, other]) - 0.5 * math.log(2 * math.pi)).sum()
        dens = torch.exp(lp - lp_other)
        assert torch.trapezoid(dens, grid).item() == pytest.approx(1.0, abs=1e-3)


def test_hover_bias_initialisation():
    m = ActorCritic(26, action_bias=-0.39)
    mean, _, _ = policy_forward(m, np.random.default_rng(0).normal(size=(50, 26)))
    np.testing.assert_allclose(mean, -0.39, atol=0.05)


# --- losses and updates ------------------------------------------------------------


def make_batch(model, n=64, seed=0, perturb=0.0):
    g = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    obs = torch.randn(n, model.obs_dim, generator=g, dtype=dtype)
    with torch.no_grad():
        mean, std, value = model(obs)
        acts = mean + std * torch.randn(mean.shape, generator=g, dtype=dtype)
        logp = model.log_prob(mean, std, acts) + perturb * torch.randn(n, generator=g, dtype=dtype)
    adv = torch.randn(n, generator=g, dtype=dtype)
    ret = value + torch.randn(n, generator=g, dtype=dtype)
    return Batch(obs, acts, logp, adv, ret)


def test_advantage_normalization():
    a = torch.randn(1000, dtype=torch.float64) * 7 + 3
    z = normalize_advantages(a)
    assert abs(z.mean().item()) < 1e-6
    assert 0.999 <= z.std(unbiased=False).item() <= 1.001


def test_zero_clip_gives_vanilla_gradient():
    torch.manual_seed(0)
    m = ActorCritic(6, hidden=(8, 8), dtype=torch.float64)
    batch = make_batch(m)
    cfg = PPOConfig(clip=0.0, vf_coef=0.0, ent_coef=0.0)
    loss, _ = ppo_loss(m, batch, cfg)
    g_ppo = torch.autograd.grad(loss, list(m.parameters()), allow_unused=True)
    mean, std, _ = m(batch.obs)
    lp = m.log_prob(mean, std, batch.actions)
    vanilla = -(lp * normalize_advantages(batch.advantages)).mean()
    g_pg = torch.autograd.grad(vanilla, list(m.parameters()), allow_unused=True)
    for a, b in zip(g_ppo, g_pg):
        if a is None or b is None:
            assert a is None or torch.all(a == 0)
            continue
        assert torch.allclose(a, b, atol=1e-6, rtol=0)


def test_update_scales_linearly_with_lr():
    changes = []
    for lr in (1e-8, 2e-8):
        torch.manual_seed(0)
        m = ActorCritic(6, hidden=(8, 8), dtype=torch.float64)
        batch = make_batch(m, n=32)
        before = torch.cat([p.detach().clone().ravel() for p in m.parameters()])
        cfg = PPOConfig(epochs=1, minibatch=32, lr=lr, max_grad_norm=1e9)
        opt = torch.optim.Adam(m.parameters(), lr=lr)
        ppo_update(m, opt, batch, cfg, torch.Generator().manual_seed(0))
        after = torch.cat([p.detach().ravel() for p in m.parameters()])
        changes.append((after - before).norm().item())
    assert changes[1] / changes[0] == pytest.approx(2.0, rel=0.05)


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(1)
    m = ActorCritic(2, act_dim=1, hidden=(1,), dtype=torch.float64, log_std_init=-0.3)
    n_params = sum(p.numel() for p in m.parameters())
    assert 10 <= n_params <= 12
    batch = make_batch(m, n=16, seed=2, perturb=0.1)
    cfg = PPOConfig(clip=0.2, ent_coef=0.01)
    params = list(m.parameters())
    loss, _ = ppo_loss(m, batch, cfg)
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            lp = ppo_loss(m, batch, cfg)[0].item()
            flat[i] = orig - h
            lm = ppo_loss(m, batch, cfg)[0].item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert fd == pytest.approx(gflat[i].item(), rel=1e-4, abs=1e-8)


def test_advantage_rescaling_invariance():
    torch.manual_seed(0)
    m = ActorCritic(6, hidden=(8,), dtype=torch.float64)
    batch = make_batch(m, perturb=0.2)
    scaled = Batch(batch.obs, batch.actions, batch.logp, 13.0 * batch.advantages, batch.returns)
    cfg = PPOConfig()
    l1, _ = ppo_loss(m, batch, cfg)
    l2, _ = ppo_loss(m, scaled, cfg)
    g1 = torch.autograd.grad(l1, list(m.parameters()))
    g2 = torch.autograd.grad(l2, list(m.parameters()))
    # equal up to the epsilon in the normalization denominator
    assert l1.item() == pytest.approx(l2.item(), abs=1e-8)
    for a, b in zip(g1, g2):
        assert torch.allclose(a, b, atol=1e-8)


def test_non_finite_loss_raises():
    m = ActorCritic(4, hidden=(8,), dtype=torch.float64)
    batch = make_batch(m, n=8)
    batch.returns[0] = float("nan")
    opt = torch.optim.Adam(m.parameters())
    with pytest.raises(DivergenceError):
        ppo_update(m, opt, batch, PPOConfig(epochs=1, minibatch=8), torch.Generator())


# --- evaluation ---------------------------------------------------------------------


def test_evaluate_crash_on_first_gate():
    t = Track((Gate([8, 0, 3], width=0.02), Gate([16, 0, 3])), start_pos=[0, 0, 3])
    rep = evaluate(ScriptedPilot(QuadParams()), t, 3)
    assert rep.crash_ratio == 1.0
    assert math.isnan(rep.avg_lap_time)
    assert all(e["gates_passed"] == 0 and e["outcome"] == "GateCrash" for e in rep.episodes)


def test_evaluate_scripted_pilot_easy_track():
    rep = evaluate(ScriptedPilot(QuadParams()), bundled_track("loop4"), 5, start_jitter=0.3, seed=1)
    assert rep.crash_ratio == 0.0
    assert rep.completion_ratio == 1.0
    assert rep.n_margins == 20


def test_summary_arithmetic():
    outcomes = [
        EpisodeOutcome(LapComplete(0, 10.0, final=True), 500, [10.0], [0.5, 0.3], 2, 20.0),
        EpisodeOutcome(LapComplete(0, 12.0, final=True), 600, [12.0], [0.1, 0.7], 2, 20.0),
        EpisodeOutcome(GateCrash(1, 0.9), 100, [], [0.2], 1, 8.0),
    ]
    rep = summarize(outcomes)
    assert rep.crash_count == 1 and rep.completed == 2
    assert rep.crash_ratio == pytest.approx(1 / 3)
    assert rep.avg_lap_time == pytest.approx(11.0)
    assert rep.lap_time_std == pytest.approx(1.0)
    margins = [0.5, 0.3, 0.1, 0.7, 0.2]
    assert rep.margin_mean == pytest.approx(np.mean(margins))
    assert rep.margin_std == pytest.approx(np.std(margins))
    assert rep.crash_count == sum(e["crashed"] for e in rep.episodes)


def test_summary_counts_out_of_bounds_as_crash():
    rep = summarize([EpisodeOutcome(OutOfBounds(), 10, [], [], 0, 0.0),
                     EpisodeOutcome(Timeout(), 10, [], [], 0, 0.0)])
    assert rep.crash_count == 1 and rep.timeouts == 1


# --- training -----------------------------------------------------------------------

SMOKE = ["ppo.n_envs=4", "ppo.horizon=32", "ppo.minibatch=64", "ppo.epochs=2", "ppo.iterations=2",
         "ppo.hidden=[32, 32]", "norm_tracks=4", "ppo.eval_every=1", "ppo.eval_episodes=2",
         "env.init_strategy=distributed"]


def _strip(rec):
    return {k: v for k, v in rec.items() if k not in ("wallclock_s", "iter_time_s")}


def _same(a, b):
    return json.dumps(_strip(a), sort_keys=True) == json.dumps(_strip(b), sort_keys=True)


def test_smoke_iteration_deterministic():
    cfg = load_config(None, SMOKE)
    a = Trainer(cfg).step()
    b = Trainer(cfg).step()
    assert _same(a, b)
    for key in ("iter", "steps", "crash_ratio", "avg_lap_time", "mean_reward", "loss_pi", "loss_v",
                "entropy", "lambda"):
        assert key in a


def test_resume_is_bit_identical(tmp_path):
    cfg = load_config(None, SMOKE + ["track.kind=random", "track.gen.gate_count=[5, 8]", "ppo.val_tracks=3"])
    ref = Trainer(cfg)
    ref.step()
    ref.save(tmp_path / "ck.pt")
    r_ref = ref.step()
    resumed = Trainer.load(tmp_path / "ck.pt")
    r_res = resumed.step()
    assert _same(r_ref, r_res)
    for p, q in zip(ref.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)
    for s1, s2 in zip(ref.optimizer.state.values(), resumed.optimizer.state.values()):
        assert torch.equal(s1["exp_avg"], s2["exp_avg"])
        assert torch.equal(s1["exp_avg_sq"], s2["exp_avg_sq"])
    np.testing.assert_array_equal(ref.obs, resumed.obs)
    np.testing.assert_array_equal(ref.venv.core.x, resumed.venv.core.x)


def test_train_writes_outputs(tmp_path):
    cfg = load_config(None, SMOKE)
    tr = train(cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and tr.iteration == 2
    assert (tmp_path / "last.pt").exists() and (tmp_path / "best.pt").exists()
    assert json.loads(lines[-1])["iter"] == 2


def test_curriculum_advances_and_anneals_rate_penalty():
    cfg = load_config(None, SMOKE + ["track.kind=random", "track.initial_complexity=0.9",
                                     "track.complexity_step=0.1", "track.advance_threshold=1.01",
                                     "ppo.val_tracks=2"])
    tr = Trainer(cfg)
    assert tr.venv.b == cfg.env.b
    rec = tr.step()
    assert rec["lambda"] == pytest.approx(1.0)
    assert tr.venv.b == 0.0


def test_buffer_is_on_policy():
    cfg = load_config(None, SMOKE)
    tr = Trainer(cfg)
    b1, _ = tr.collect()
    b2, _ = tr.collect()
    assert len(b1) == 4 * 32 == len(b2)
    assert not torch.equal(b1.obs, b2.obs)


def test_straight_track_progress_improves(tmp_path):
    """Deterministic progress after 20 iterations beats the first iterations in >= 9 of 10 seeds."""
    track = Track((Gate([6, 0, 3]), Gate([12, 0, 3])), start_pos=[0, 0, 3])
    save_track(track, tmp_path / "straight.yaml")
    improved = 0
    for seed in range(10):
        run = load_config(None, [
            f"seed={seed}", "track.kind=file", f"track.path={tmp_path / 'straight.yaml'}", "norm_tracks=20",
            "env.init_strategy=start", "quad.thrust_to_weight=3.3", "ppo.n_envs=16", "ppo.horizon=64",
            "ppo.minibatch=256", "ppo.epochs=4", "ppo.hidden=[32, 32]", "ppo.iterations=20",
            "ppo.eval_every=1000", "ppo.log_std_init=-1.6",
        ])
        tr = Trainer(run)
        tracks = [track] * 8
        inits = jittered_starts(tracks, 0.3, seed)
        progress = []
        for _ in range(20):
            tr.step()
            outs = run_episodes(DeterministicPolicy(tr.model), tracks, run.env, run.quad, tr.norm, init_states=inits)
            progress.append(np.mean([o.progress for o in outs]))
        improved += np.mean(progress[-3:]) > np.mean(progress[:3])
    assert improved >= 9

import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import SMALL
from gcrlab.critic import CriticConfig, init_critic
from gcrlab.data import pack_candidates, pack_slates
from gcrlab.env import Oracle, OracleConfig, generate_candidates, generate_logged
from gcrlab.policy import PolicyConfig, init_policy, rollout_batch, step_log_probs
from gcrlab.rl import (TrainConfig, clipped_surrogate, collect_batch, logged_buffer, ppo_update,
                       reinforce_update, returns_and_advantages, train_policy)

PCFG = PolicyConfig(embed_dim=4, hidden_dim=8, sg_dim=3)
CCFG = CriticConfig(embed_dim=4, hidden_dim=8, gru_dim=4)


def cands(count, schema=SMALL, seed=0):
    return pack_candidates(generate_candidates(Oracle(OracleConfig(seed=1), schema), count, seed), schema)


# returns and advantages ------------------------------------------------------

def test_two_step_hand_case():
    R, A = returns_and_advantages(np.array([0.1, 0.2]), np.array([1.0, 0.5]), gamma=1.0, c=1.0)
    assert R.tolist() == [0.1 + 0.2, 0.2]
    assert A.tolist() == [1.3, 0.7]


def test_bonus_off_gives_reward_to_go():
    r = np.array([[0.3, 0.1, 0.4]])
    R, A = returns_and_advantages(r, np.ones_like(r), gamma=1.0, c=0.0)
    np.testing.assert_array_equal(R, A)
    np.testing.assert_allclose(A[0], [0.8, 0.5, 0.4], rtol=0, atol=1e-15)


def test_matches_explicit_summation():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 12))
        r, d = rng.normal(size=k), rng.uniform(0, 2.5, size=k)
        gamma, c = float(rng.uniform(0, 1)), float(rng.uniform(0, 2))
        R, A = returns_and_advantages(r, d, gamma, c)
        for t in range(k):
            expected = math.fsum(gamma ** (j - t) * r[j] for j in range(t, k))
            assert abs(R[t] - expected) <= 1e-12
            assert abs(A[t] - (expected + c * d[t])) <= 1e-12


def test_batched_rows_independent():
    rng = np.random.default_rng(1)
    r, d = rng.normal(size=(5, 4)), rng.random((5, 4))
    R, A = returns_and_advantages(r, d, 0.9, 1.0)
    for i in range(5):
        Ri, Ai = returns_and_advantages(r[i], d[i], 0.9, 1.0)
        np.testing.assert_array_equal(R[i], Ri)
        np.testing.assert_array_equal(A[i], Ai)


# surrogate -------------------------------------------------------------------

def _surr(ratio, adv, eps):
    logp = torch.log(torch.tensor([ratio * 0.5], dtype=torch.float64))
    return clipped_surrogate(logp, np.array([0.5]), np.array([adv]), eps).item()


def test_clip_takes_pessimistic_side():
    assert _surr(1.5, 2.0, 0.2) == pytest.approx(1.2 * 2.0, rel=1e-12)
    assert _surr(1.5, -2.0, 0.2) == pytest.approx(1.5 * -2.0, rel=1e-12)
    assert _surr(0.5, -2.0, 0.2) == pytest.approx(0.8 * -2.0, rel=1e-12)
    assert _surr(0.5, 2.0, 0.2) == pytest.approx(0.5 * 2.0, rel=1e-12)
    assert _surr(1.1, 2.0, 0.2) == pytest.approx(1.1 * 2.0, rel=1e-12)


def test_surrogate_never_exceeds_unclipped():
    rng = np.random.default_rng(2)
    for _ in range(500):
        ratio, adv = float(rng.uniform(0.05, 3)), float(rng.normal())
        assert _surr(ratio, adv, 0.2) <= ratio * adv + 1e-12
        assert _surr(ratio, adv, math.inf) == pytest.approx(ratio * adv, rel=1e-12)


def test_unclipped_ppo_gradient_equals_reinforce():
    policy = init_policy(SMALL, PCFG, seed=0)
    cb = cands(8)
    ro = rollout_batch(policy, PCFG, cb, SMALL.k, "sample", np.random.default_rng(0))
    adv = np.random.default_rng(1).normal(size=ro.slates.shape)
    logp = step_log_probs(policy, PCFG, cb, ro.slates)
    surr = clipped_surrogate(logp, ro.probs, adv, math.inf)
    g_ppo = torch.autograd.grad(surr, policy.tensors(), allow_unused=True)
    logp = step_log_probs(policy, PCFG, cb, ro.slates)
    g_pg = torch.autograd.grad(-(torch.as_tensor(adv) * logp).mean(), policy.tensors(), allow_unused=True)
    for a, b in zip(g_ppo, g_pg):
        if a is None:
            assert b is None
            continue
        torch.testing.assert_close(a, -b, rtol=1e-9, atol=1e-12)


# training --------------------------------------------------------------------

def test_single_step_bandit_converges():
    schema = replace(SMALL, k=1)
    cb = cands(32, schema)
    policy = init_policy(schema, PCFG, seed=1)
    cfg = TrainConfig(m=32, lr=0.01, baseline=True)
    opt = torch.optim.Adam(policy.tensors(), lr=cfg.lr)
    rng = np.random.default_rng(0)
    # a fixed subset of the catalog pays off; the policy has to find it in each set
    good = cb.items.ids[..., 0] % 5 == 0

    def reward(_, slates):
        return good[np.arange(len(slates))[:, None], slates].astype(float)

    first = collect_batch(policy, PCFG, cb, 1, cfg, rng, reward).rewards.mean()
    for _ in range(150):
        buf = collect_batch(policy, PCFG, cb, 1, cfg, rng, reward)
        reinforce_update(buf, policy, PCFG, opt, baseline=True)
    greedy = rollout_batch(policy, PCFG, cb, 1, "greedy").slates
    reachable = good.any(1)
    assert first < 0.4
    assert reward(cb, greedy)[reachable].mean() >= 0.95


def test_ppo_update_moves_toward_positive_advantage():
    policy = init_policy(SMALL, PCFG, seed=2)
    cb = cands(16)
    cfg = TrainConfig(m=16, lr=0.01, c=0.0)
    rng = np.random.default_rng(3)
    buf = collect_batch(policy, PCFG, cb, SMALL.k, cfg, rng, lambda _, s: (s < 3).astype(float))
    before = step_log_probs(policy, PCFG, cb, buf.slates).detach()
    opt = torch.optim.Adam(policy.tensors(), lr=cfg.lr)
    ppo_update(buf, policy, PCFG, cfg, opt)
    after = step_log_probs(policy, PCFG, cb, buf.slates).detach()
    w = torch.as_tensor(buf.advantages)
    assert (w * after).mean() > (w * before).mean()
    assert len(buf.steps()) == 16 * SMALL.k


def test_empty_buffer_rejected():
    policy = init_policy(SMALL, PCFG, seed=0)
    cb = cands(4)
    buf = collect_batch(policy, PCFG, cb, SMALL.k, TrainConfig(), np.random.default_rng(0),
                        lambda _, s: np.zeros(s.shape))
    empty = replace(buf, slates=buf.slates[:0], rewards=buf.rewards[:0], d_norms=buf.d_norms[:0],
                    returns=buf.returns[:0], advantages=buf.advantages[:0], behavior_probs=buf.behavior_probs[:0])
    opt = torch.optim.Adam(policy.tensors())
    with pytest.raises(ValueError):
        reinforce_update(empty, policy, PCFG, opt)
    with pytest.raises(ValueError):
        ppo_update(empty, policy, PCFG, TrainConfig(), opt)


def test_logged_buffer_uses_atc_and_pay():
    o = Oracle(OracleConfig(seed=1), SMALL)
    cs, slates = generate_logged(o, 6, seed=0)
    policy = init_policy(SMALL, PCFG, seed=0)
    idx = np.array([s.slate_indices for s in slates])
    labels = pack_slates(slates, SMALL).labels
    buf = logged_buffer(policy, PCFG, pack_candidates(cs, SMALL), idx, labels, TrainConfig())
    np.testing.assert_array_equal(buf.rewards, (labels >= 2).astype(float))
    assert (buf.d_norms == 0).all()
    assert ((buf.behavior_probs > 0) & (buf.behavior_probs <= 1)).all()


@pytest.fixture(scope="module")
def tiny_run():
    cb = cands(64)
    critic = init_critic(SMALL, CCFG, seed=0)
    cfg = TrainConfig(m=16, n_batches=4, epochs_per_batch=2, lr=0.01, seed=5)
    return cb, critic, cfg


def test_ppo_exploration_without_bonus_is_ppo(tiny_run):
    cb, critic, cfg = tiny_run
    a = train_policy("ppo", cb, critic, CCFG, PCFG, cfg, SMALL.k, init_policy(SMALL, PCFG, 0), eval_cands=cb)
    b = train_policy("ppo-exploration", cb, critic, CCFG, PCFG, replace(cfg, c=0.0), SMALL.k,
                     init_policy(SMALL, PCFG, 0), eval_cands=cb)
    assert a.params.to_bytes() == b.params.to_bytes()
    assert a.curve == b.curve
    c = train_policy("ppo-exploration", cb, critic, CCFG, PCFG, cfg, SMALL.k, init_policy(SMALL, PCFG, 0))
    assert c.params.to_bytes() != a.params.to_bytes()


def test_training_deterministic(tiny_run):
    cb, critic, cfg = tiny_run
    runs = [train_policy("reinforce", cb, critic, CCFG, PCFG, cfg, SMALL.k, init_policy(SMALL, PCFG, 0),
                         eval_cands=cb) for _ in range(2)]
    assert runs[0].params.to_bytes() == runs[1].params.to_bytes()
    assert len(runs[0].curve) == cfg.n_batches


def test_unknown_algorithm(tiny_run):
    cb, critic, cfg = tiny_run
    with pytest.raises(ValueError):
        train_policy("a2c", cb, critic, CCFG, PCFG, cfg, SMALL.k, init_policy(SMALL, PCFG, 0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(c=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        TrainConfig(reward_mode="live")
    assert TrainConfig(clip_eps=math.inf).clip_eps == math.inf

import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import SMALL
from gcrlab.critic import CriticConfig, init_critic
from gcrlab.data import ItemFeatures, Schema, pack_candidates
from gcrlab.env import Oracle, OracleConfig, generate_candidates
from gcrlab.evaluation import (DEMO_PRICES, EvalReport, SupportError, UndefinedAUCError, attention_matrix, auc,
                               auc_triple, build_demo_slate, demo_slate, export_attention, ips, ips_estimate,
                               ips_stderr, read_attention_csv, replacement_ratio, replacement_ratio_from,
                               slate_entropy, table)
from gcrlab.policy import PolicyConfig, init_policy, slate_log_prob

# AUC -----------------------------------------------------------------------


def test_auc_examples():
    assert auc([0.1, 0.9, 0.5], [0, 1, 1]) == 1.0
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(0)
    assert abs(auc(rng.random(20000), rng.random(20000) < 0.3) - 0.5) < 0.02


def test_auc_single_class_rejected():
    with pytest.raises(UndefinedAUCError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedAUCError):
        auc_triple(np.full((3, 4), 0.2), np.zeros((3, 4), dtype=int))


@settings(max_examples=50, deadline=None)
# coarse grid so the transform stays strictly monotone in floating point
@given(st.lists(st.integers(-40, 40).map(lambda i: i / 8), min_size=4, max_size=40), st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_transform(scores, seed):
    s = np.array(scores)
    y = np.random.default_rng(seed).random(len(s)) < 0.5
    if y.all() or not y.any():
        y[0] = not y[0]
    # a brute-force pair count is the oracle
    pos, neg = s[y], s[~y]
    pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
    assert auc(s, y) == pytest.approx(pairs, abs=1e-12)
    assert auc(np.exp(s) * 3 + 1, y) == pytest.approx(pairs, abs=1e-12)


def test_auc_triple_views():
    probs = np.array([[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.2, 0.2]])
    labels = np.array([[3, 0, 1], [1, 3, 0], [0, 1, 0]])
    t = auc_triple(probs, labels)
    assert t.pv_pay == auc(probs.ravel(), (labels == 3).ravel())
    clicked = labels >= 1
    assert t.click_pay == auc(probs[clicked], (labels == 3)[clicked])
    assert t.slate_pay == 1.0


# replacement ratio -----------------------------------------------------------

def test_replacement_ratio_strict():
    s = np.array([0.2, 0.4, 0.5])
    assert replacement_ratio_from(s, s) == 0.0
    assert replacement_ratio_from(s + 1e-9, s) == 1.0
    assert replacement_ratio_from([0.3, 0.1], [0.2, 0.2]) == 0.5


def test_replacement_ratio_untrained_policy_runs():
    pcfg = PolicyConfig(embed_dim=4, hidden_dim=8, sg_dim=3)
    ccfg = CriticConfig(embed_dim=4, hidden_dim=8, gru_dim=4)
    cb = pack_candidates(generate_candidates(Oracle(OracleConfig(seed=1), SMALL), 20, 0), SMALL)
    r = replacement_ratio(init_policy(SMALL, pcfg, 0), pcfg, init_critic(SMALL, ccfg, 0), ccfg, cb, SMALL.k)
    assert 0.0 <= r <= 1.0


# IPS -------------------------------------------------------------------------

def test_ips_same_policy_is_mean_reward():
    rng = np.random.default_rng(0)
    lp = np.log(rng.uniform(1e-4, 1, size=5000))
    r = rng.poisson(0.7, size=5000).astype(float)
    assert abs(ips_estimate(lp, lp, r) - math.fsum(r) / len(r)) <= 1e-12
    assert abs(ips_estimate(lp, lp, r, weighted=True) - math.fsum(r) / len(r)) <= 1e-12
    assert ips_estimate(lp, lp, np.zeros(5000)) == 0.0


def test_wips_scale_invariant():
    rng = np.random.default_rng(1)
    t, b = np.log(rng.random(300)), np.log(rng.random(300))
    r = rng.random(300)
    base = ips_estimate(t, b, r, weighted=True)
    for c in (0.01, 3.0, 1e4):
        assert ips_estimate(t + math.log(c), b, r, weighted=True) == pytest.approx(base, rel=1e-12)
    assert ips_estimate(t + math.log(2.0), b, r) == pytest.approx(2 * ips_estimate(t, b, r), rel=1e-12)


def test_support_violation_lists_rows():
    b = np.array([-1.0, -np.inf, -2.0, -np.inf])
    with pytest.raises(SupportError) as info:
        ips_estimate(np.zeros(4), b, np.ones(4))
    assert info.value.rows == [1, 3]


def test_tiny_mdp_ips_matches_enumeration():
    schema = Schema(n_items=60, n_categories=6, n_brands=8, n_sellers=10, n_shops=10, n_queries=5, n_users=12,
                    max_session_len=5, n=3, k=2)
    oracle = Oracle(OracleConfig(seed=4, base_purchase_rate=0.25), schema)
    cs = oracle.sample_candidate_set(np.random.default_rng(2))
    uniform = init_policy(schema, PolicyConfig(embed_dim=4, hidden_dim=8, sg_dim=3), seed=0)
    with torch.no_grad():
        uniform["score.2.W"].zero_()
        uniform["score.2.b"].zero_()
    greedy = init_policy(schema, PolicyConfig(embed_dim=4, hidden_dim=8, sg_dim=3, beta=1e4), seed=1)

    slates = np.array(list(itertools.permutations(range(3), 2)))
    one = pack_candidates([cs], schema)
    all6 = one.take(np.zeros(6, dtype=int))
    p_target = np.exp(slate_log_prob(greedy, PolicyConfig(**greedy.meta["config"]), all6, slates).detach().numpy())
    p_behavior = np.exp(slate_log_prob(uniform, PolicyConfig(**uniform.meta["config"]), all6, slates).detach().numpy())
    np.testing.assert_allclose(p_behavior, 1 / 6, rtol=1e-12)
    assert p_target.max() > 1 - 1e-6
    expected_pay = np.array([oracle.slate_probs(cs.context, [cs.items[i] for i in s]).sum() for s in slates])
    truth = float(p_target @ expected_pay)

    m = 50_000
    rng = np.random.default_rng(7)
    pick = rng.integers(6, size=m)
    logged = slates[pick]
    # pay counts per episode from the oracle's own label sampler
    probs = np.array([oracle.slate_probs(cs.context, [cs.items[i] for i in s]) for s in slates])[pick]
    rewards = (oracle.labels_from_probs(probs, rng) == 3).sum(1).astype(float)
    batch = one.take(np.zeros(m, dtype=int))
    for weighted in (False, True):
        est = ips(uniform, greedy, batch, logged, rewards, weighted)
        t = slate_log_prob(greedy, PolicyConfig(**greedy.meta["config"]), batch, logged).detach().numpy()
        b = np.full(m, math.log(1 / 6))
        se = ips_stderr(t, b, rewards, weighted)
        assert abs(est - truth) < 3 * se, (weighted, est, truth, se)


# entropy ---------------------------------------------------------------------

def _brands(*brands):
    return [ItemFeatures(i, 0, b, 0, 0, 1 + i % 3, (0.0,) * 4) for i, b in enumerate(brands)]


def test_entropy_examples():
    assert slate_entropy([_brands(*[4] * 10)]) == 0.0
    assert slate_entropy([_brands(*range(10))]) == pytest.approx(math.log(10), abs=1e-12)
    assert slate_entropy([_brands(*[1] * 5, *[2] * 5)]) == pytest.approx(math.log(2), abs=1e-12)
    assert slate_entropy([_brands(*[4] * 10), _brands(*range(10))]) == pytest.approx(math.log(10) / 2, abs=1e-12)
    assert slate_entropy([_brands(0, 1, 2)], "price_bucket") == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(ValueError):
        slate_entropy([])
    with pytest.raises(ValueError):
        slate_entropy([_brands(1)], "colour")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 12), min_size=10, max_size=10), min_size=1, max_size=5))
def test_entropy_bounds(slates):
    e = slate_entropy([_brands(*s) for s in slates])
    assert 0.0 <= e <= math.log(10) + 1e-12


# attention -----------------------------------------------------------------

def test_demo_slate_resource_matches_builder():
    s = demo_slate()
    assert s == build_demo_slate()
    assert tuple(it.price_bucket for it in s.items) == DEMO_PRICES
    assert len({(it.category_id, it.brand_id, it.seller_id, it.shop_id, it.stats) for it in s.items}) == 1


def test_symmetric_critic_uniform_attention(tmp_path):
    cfg = CriticConfig(embed_dim=4, hidden_dim=8, gru_dim=4)
    critic = init_critic(Schema(), cfg, seed=0)
    with torch.no_grad():
        critic["pin.w"].zero_()
        critic["pin.b"].zero_()
    mat = attention_matrix(critic, cfg, demo_slate(), Schema())
    np.testing.assert_allclose(mat, 0.1, atol=1e-15)


def test_attention_csv_round_trip(tmp_path):
    cfg = CriticConfig(embed_dim=4, hidden_dim=8, gru_dim=4)
    critic = init_critic(Schema(), cfg, seed=3)
    path = tmp_path / "att.csv"
    mat = export_attention(critic, cfg, demo_slate(), Schema(), path)
    back = read_attention_csv(path)
    assert back.shape == (10, 10)
    np.testing.assert_array_equal(back, mat)
    assert np.max(np.abs(back.sum(0) - 1)) < 1e-6
    assert path.read_text().splitlines()[0].startswith("influencer,item1,")
    (tmp_path / "bad.csv").write_text("influencer,item1,item2\nitem1,0.5,0.5\n")
    with pytest.raises(ValueError):
        read_attention_csv(tmp_path / "bad.csv")


# report ----------------------------------------------------------------------

def test_report_json_and_table_agree():
    rep = EvalReport(0.71, 0.62, 0.8123456789, replacement_ratio=0.5, ips=1.5e-5, wips=None,
                     brand_entropy=1.2, price_entropy=0.0)
    doc = json.loads(rep.to_json())
    assert EvalReport.parse_table(rep.to_table()) == doc
    assert doc["wips"] is None


def test_table_renders_absent():
    text = table([{"a": 0.5, "b": None}, {"a": 1e-5, "b": "x"}], ["a", "b"])
    lines = text.splitlines()
    assert lines[0].split() == ["a", "b"]
    assert "absent" in lines[2]
    assert "1.000e-05" in lines[3]

"""Ground-truth user simulator.

A fixed catalog ("world") is drawn from ``OracleConfig.seed``. Queries
concentrate their candidate sets on a couple of categories, so the LTR top-k
tends to be repetitive. The purchase probability of a displayed item is

    p = propensity(context, item)
        * position_decay ** (position - 1)
        * max(0.05, (1 - similarity_penalty) ** matches_before)
        * (1 + price_outlier_boost  if price >= median + 2)

where ``matches_before`` counts earlier slate items sharing the brand or the
category. Session behaviour (clicked brands, viewed categories) raises the
point-wise propensity, which gives the session attention something to find.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import (CandidateSet, ItemFeatures, QueryContext, Schema, SessionBehavior,
                   SlateSample, LABELS)

PROB_MIN, PROB_MAX = 1e-6, 1.0 - 1e-6
SIMILARITY_FLOOR = 0.05


@dataclass(frozen=True)
class OracleConfig:
    position_decay: float = 0.92
    similarity_penalty: float = 0.15
    price_outlier_boost: float = -0.3
    base_purchase_rate: float = 0.03
    seed: int = 0
    # world shape
    concentration: float = 3.0
    brand_session_lift: float = 1.0
    category_session_lift: float = 0.4
    relevance_lift: float = 0.7
    intent_lift: float = 0.8
    ltr_noise: float = 0.3
    atc_ratio: float = 1.0
    click_ratio: float = 3.0
    logging_temperature: float = 6.0

    def __post_init__(self):
        if not 0 < self.position_decay <= 1:
            raise ValueError("position_decay must be in (0, 1]")
        if self.similarity_penalty < 0:
            raise ValueError("similarity_penalty must be >= 0")
        if not 0 < self.base_purchase_rate < 1:
            raise ValueError("base_purchase_rate must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class World:
    """Static catalog, query intents and user tastes."""

    def __init__(self, schema: Schema, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        s = schema
        self.schema = s
        n = s.n_items
        self.category = rng.integers(s.n_categories, size=n)
        # each category owns a couple of "home" brands; most items carry one of them
        brands_per_cat = max(1, s.n_brands // s.n_categories)
        home = (self.category * brands_per_cat + rng.integers(brands_per_cat, size=n)) % s.n_brands
        stray = rng.random(n) < 0.2
        self.brand = np.where(stray, rng.integers(s.n_brands, size=n), home)
        self.seller = rng.integers(s.n_sellers, size=n)
        self.shop = (self.seller + rng.integers(3, size=n)) % s.n_shops
        cat_price = rng.uniform(2, s.n_price - 1, size=s.n_categories)
        self.price = np.clip(np.rint(cat_price[self.category] + rng.normal(0, 1.5, size=n)),
                             1, s.n_price).astype(np.int64)
        self.quality = rng.normal(0, 1, size=n)
        ctr = 1 / (1 + np.exp(-(-3.0 + 0.6 * self.quality + rng.normal(0, 0.3, size=n))))
        cvr = 1 / (1 + np.exp(-(-4.0 + 0.6 * self.quality + rng.normal(0, 0.3, size=n))))
        rating = self.quality + rng.normal(0, 0.7, size=n)
        popularity = rng.normal(0, 1, size=n)
        extra = [rng.normal(0, 1, size=n) for _ in range(max(0, s.n_stats - 4))]
        self.stats = np.stack([ctr * 10, cvr * 10, rating, popularity, *extra], axis=1)[:, :s.n_stats]

        self.query_cats = np.stack([rng.choice(s.n_categories, size=2, replace=False)
                                    for _ in range(s.n_queries)])
        self.user_price = rng.uniform(1, s.n_price, size=s.n_users)
        self.user_quality = rng.uniform(0.2, 1.2, size=s.n_users)
        self.user_intent = rng.normal(0, 0.5, size=s.n_users)
        self.user_extra = rng.normal(0, 1, size=(s.n_users, max(0, s.user_pref_dim - 2)))

    def item(self, i: int, position_hint: int | None = None) -> ItemFeatures:
        return ItemFeatures(
            item_id=int(i), category_id=int(self.category[i]), brand_id=int(self.brand[i]),
            seller_id=int(self.seller[i]), shop_id=int(self.shop[i]),
            price_bucket=int(self.price[i]), stats=tuple(float(x) for x in self.stats[i]),
            position_hint=position_hint)

    def user_pref(self, u: int) -> tuple[float, ...]:
        vals = [self.user_price[u] / self.schema.n_price, self.user_quality[u], *self.user_extra[u]]
        return tuple(float(v) for v in vals[:self.schema.user_pref_dim])

    def query_weights(self, q: int, concentration: float) -> np.ndarray:
        rel = np.isin(self.category, self.query_cats[q])
        return concentration * rel + 0.5 * self.quality


class Oracle:
    """Generates candidate sets and user responses; also the exact slate value."""

    def __init__(self, config: OracleConfig | None = None, schema: Schema | None = None):
        self.config = config or OracleConfig()
        self.schema = schema or Schema()
        self.world = World(self.schema, self.config.seed)

    # contexts ------------------------------------------------------------

    def _draw_items(self, q: int, size: int, rng: np.random.Generator) -> np.ndarray:
        # Gumbel top-k == sampling without replacement proportional to exp(logw)
        logw = self.world.query_weights(q, self.config.concentration)
        g = logw + rng.gumbel(size=logw.shape)
        return np.argsort(-g, kind="stable")[:size]

    def sample_context(self, rng: np.random.Generator) -> QueryContext:
        s, w = self.schema, self.world
        q = int(rng.integers(s.n_queries))
        u = int(rng.integers(s.n_users))
        n_pv = int(rng.integers(0, s.max_session_len + 1))
        pv = self._draw_items(q, n_pv, rng)
        click = pv[rng.random(len(pv)) < 0.3]
        atc = click[rng.random(len(click)) < 0.35]
        pay = atc[rng.random(len(atc)) < 0.35]
        session = SessionBehavior(*(tuple(w.item(i) for i in ch) for ch in (pv, click, atc, pay)))
        return QueryContext(query_id=q, user_id=u, user_pref=w.user_pref(u), session=session)

    def propensity(self, context: QueryContext, item_ids) -> np.ndarray:
        """Point-wise purchase propensity of catalog items for this context."""
        c, w = self.config, self.world
        ids = np.asarray(item_ids, dtype=np.int64)
        u = context.user_id
        rel = np.isin(w.category[ids], w.query_cats[context.query_id])
        logm = (c.relevance_lift * rel
                + 0.8 * w.user_quality[u] * w.quality[ids]
                - 0.2 * np.abs(w.price[ids] - w.user_price[u])
                + w.user_intent[u]
                - 2.2)
        sess = context.session
        # engaged sessions convert more, whatever the item
        logm = logm + c.intent_lift * (bool(sess.atc_list) + bool(sess.pay_list) + 0.5 * bool(sess.click_list))
        hot_brands = {it.brand_id for it in sess.click_list + sess.atc_list + sess.pay_list}
        seen_cats = {it.category_id for it in sess.pv_list}
        if hot_brands:
            logm = logm + c.brand_session_lift * np.isin(w.brand[ids], list(hot_brands))
        if seen_cats:
            logm = logm + c.category_session_lift * np.isin(w.category[ids], list(seen_cats))
        return np.clip(c.base_purchase_rate * np.exp(logm), PROB_MIN, PROB_MAX)

    def sample_candidate_set(self, rng: np.random.Generator, context: QueryContext | None = None) -> CandidateSet:
        context = context or self.sample_context(rng)
        ids = self._draw_items(context.query_id, self.schema.n, rng)
        ltr = np.log(self.propensity(context, ids)) + rng.normal(0, self.config.ltr_noise, size=len(ids))
        order = np.argsort(-ltr, kind="stable")
        items = tuple(self.world.item(ids[j], position_hint=r + 1) for r, j in enumerate(order))
        return CandidateSet(context=context, items=items, scores=tuple(float(x) for x in ltr[order]))

    # slate response ------------------------------------------------------

    def slate_modifiers(self, brand: np.ndarray, category: np.ndarray, price: np.ndarray) -> np.ndarray:
        """Multiplicative position/similarity/price effects, batched over leading axes."""
        c = self.config
        k = brand.shape[-1]
        pos = c.position_decay ** np.arange(k)
        same = (brand[..., :, None] == brand[..., None, :]) | (category[..., :, None] == category[..., None, :])
        before = np.tril(np.ones((k, k), dtype=bool), -1)
        matches = (same & before).sum(-1)
        sim = np.maximum(SIMILARITY_FLOOR, (1.0 - c.similarity_penalty) ** matches)
        med = np.median(price, axis=-1, keepdims=True)
        outlier = np.where(price >= med + 2, 1.0 + c.price_outlier_boost, 1.0)
        return pos * sim * outlier

    def slate_probs(self, context: QueryContext, slate) -> np.ndarray:
        ids = np.array([it.item_id for it in slate], dtype=np.int64)
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("slate contains duplicate items")
        base = self.propensity(context, ids)
        brand = np.array([it.brand_id for it in slate])
        cat = np.array([it.category_id for it in slate])
        price = np.array([it.price_bucket for it in slate], dtype=float)
        return np.clip(base * self.slate_modifiers(brand, cat, price), PROB_MIN, PROB_MAX)

    def slate_value(self, context: QueryContext, slate) -> float:
        """Exact probability that at least one slate item is purchased."""
        p = self.slate_probs(context, slate)
        return float(1.0 - np.prod(1.0 - p))

    def labels_from_probs(self, p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Funnel labels as codes 0..3; pay implies atc-or-click implies impression."""
        c = self.config
        u = rng.random(p.shape)
        pay_hi = p
        atc_hi = np.minimum(1.0, p * (1 + c.atc_ratio))
        click_hi = np.minimum(1.0, p * (1 + c.atc_ratio + c.click_ratio))
        return np.where(u < pay_hi, 3, np.where(u < atc_hi, 2, np.where(u < click_hi, 1, 0)))

    def expected_binary(self, p: np.ndarray) -> np.ndarray:
        """P(label is atc or pay) for pay probabilities ``p``."""
        return np.minimum(1.0, p * (1 + self.config.atc_ratio))

    def slate_response(self, context: QueryContext, slate, rng: np.random.Generator) -> tuple[str, ...]:
        codes = self.labels_from_probs(self.slate_probs(context, slate), rng)
        return tuple(LABELS[c] for c in codes)

    # logging ---------------------------------------------------------------

    def logging_slate(self, cands: CandidateSet, rng: np.random.Generator) -> np.ndarray:
        """Plackett-Luce draw of k candidate indices favouring high LTR ranks."""
        n, k = cands.n, self.schema.k
        logw = -np.arange(n) / self.config.logging_temperature
        return np.argsort(-(logw + rng.gumbel(size=n)), kind="stable")[:k]

    def logged_sample(self, cands: CandidateSet, rng: np.random.Generator, ref: int | None = None) -> SlateSample:
        idx = self.logging_slate(cands, rng)
        items = tuple(cands.items[i] for i in idx)
        labels = self.slate_response(cands.context, items, rng)
        return SlateSample(context=cands.context, items=items, labels=labels,
                           candidate_ref=ref, slate_indices=tuple(int(i) for i in idx))


def sample_streams(seed: int, count: int) -> list[np.random.Generator]:
    """Independent per-sample generators split from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_candidates(oracle: Oracle, count: int, seed: int) -> list[CandidateSet]:
    return [oracle.sample_candidate_set(rng) for rng in sample_streams(seed, count)]


def generate_logged(oracle: Oracle, count: int, seed: int) -> tuple[list[CandidateSet], list[SlateSample]]:
    """Candidate sets plus one logged slate (with sampled labels) for each."""
    cands, slates = [], []
    for i, rng in enumerate(sample_streams(seed, count)):
        cs = oracle.sample_candidate_set(rng)
        cands.append(cs)
        slates.append(oracle.logged_sample(cs, rng, ref=i))
    return cands, slates


def top_k_indices(k: int) -> np.ndarray:
    return np.arange(k)

import numpy as np
import pytest
import torch
from hypothesis import strategies as st

from gcrlab.data import LABELS, ItemFeatures, QueryContext, Schema, SessionBehavior, SlateSample
from gcrlab.env import Oracle, OracleConfig

torch.set_num_threads(1)

SMALL = Schema(n_items=60, n_categories=6, n_brands=8, n_sellers=10, n_shops=10, n_price=10,
               n_queries=5, n_users=12, max_session_len=5, n=12, k=4)


@pytest.fixture
def small_schema():
    return SMALL


@pytest.fixture
def small_oracle():
    return Oracle(OracleConfig(seed=3), SMALL)


def items_st(schema: Schema = SMALL):
    return st.builds(
        ItemFeatures,
        item_id=st.integers(0, schema.n_items - 1),
        category_id=st.integers(0, schema.n_categories - 1),
        brand_id=st.integers(0, schema.n_brands - 1),
        seller_id=st.integers(0, schema.n_sellers - 1),
        shop_id=st.integers(0, schema.n_shops - 1),
        price_bucket=st.integers(1, schema.n_price),
        stats=st.tuples(*[st.floats(-5, 5, allow_nan=False)] * schema.n_stats),
        position_hint=st.none() | st.integers(1, schema.n),
    )


def contexts_st(schema: Schema = SMALL):
    lists = st.lists(items_st(schema), max_size=3).map(tuple)
    return st.builds(
        QueryContext,
        query_id=st.integers(0, schema.n_queries - 1),
        user_id=st.integers(0, schema.n_users - 1),
        user_pref=st.tuples(*[st.floats(-3, 3, allow_nan=False)] * schema.user_pref_dim),
        session=st.builds(SessionBehavior, lists, lists, lists, lists),
    )


def slates_st(schema: Schema = SMALL):
    k = schema.k
    return st.builds(
        SlateSample,
        context=contexts_st(schema),
        items=st.lists(items_st(schema), min_size=k, max_size=k).map(tuple),
        labels=st.lists(st.sampled_from(LABELS), min_size=k, max_size=k).map(tuple),
        candidate_ref=st.none() | st.integers(0, 10_000),
        slate_indices=st.none() | st.permutations(range(schema.n)).map(lambda p: tuple(p[:k])),
    )


def random_items(rng: np.random.Generator, count: int, schema: Schema = SMALL):
    return tuple(ItemFeatures(int(rng.integers(schema.n_items)), int(rng.integers(schema.n_categories)),
                              int(rng.integers(schema.n_brands)), int(rng.integers(schema.n_sellers)),
                              int(rng.integers(schema.n_shops)), int(rng.integers(1, schema.n_price + 1)),
                              tuple(rng.normal(size=schema.n_stats).tolist()))
                 for _ in range(count))

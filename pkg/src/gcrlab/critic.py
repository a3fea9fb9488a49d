"""Full Slate Critic and the two baselines it is compared against.

The critic only ever sees the k impressed items, in display order. Four
sub-networks add context to a per-item base representation:

* session attention: each slate item attends over the pv/click/atc/pay lists
* pair influence: attention-weighted pairwise influence of every slate item
* Bi-GRU: forward state of the previous item + backward state of the next
* feature compare: how each item's feature values sit within the slate

Disabled sub-networks contribute zeros of the same width, so the head keeps
its shape across the ablation grid.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy.optimize import brentq

from .data import LABEL_CODE, LABELS, CandidateBatch, ContextBlock, ItemBlock, Schema, SlateBatch
from .tensor import (DTYPE, NumericError, ParamStore, add_dense, add_gru, clamp_probs, dense,
                     gru_sequence, softmax, weighted_bce)

SUBNETS = ("fcn", "pin", "bigru", "san")


def default_loss_weights() -> dict[str, float]:
    return {"pay": 50.0, "atc": 4.0, "click": 1.0, "impression": 0.05}


@dataclass
class CriticConfig:
    embed_dim: int = 8
    hidden_dim: int = 32
    gru_dim: int = 16
    attention_beta: float = 1.0
    loss_weights: dict = field(default_factory=default_loss_weights)
    use_fcn: bool = True
    use_pin: bool = True
    use_bigru: bool = True
    use_san: bool = True

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.gru_dim) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.attention_beta <= 0:
            raise ValueError("attention_beta must be positive")
        if any(w < 0 for w in self.loss_weights.values()) or set(self.loss_weights) != set(LABELS):
            raise ValueError(f"loss_weights needs non-negative weights for {LABELS}")

    def label_weights(self) -> np.ndarray:
        return np.array([self.loss_weights[name] for name in LABELS])

    def enabled(self) -> tuple[str, ...]:
        return tuple(s for s in SUBNETS if getattr(self, f"use_{s}"))

    def variant(self, subnets) -> "CriticConfig":
        flags = {f"use_{s}": s in subnets for s in SUBNETS}
        return CriticConfig(**{**asdict(self), **flags})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    max_grad_norm: float = 10.0


@dataclass
class CriticOutput:
    item_probs: torch.Tensor       # [B, k]
    slate_prob: torch.Tensor       # [B]
    pair_attention: torch.Tensor   # [B, k(j), k(a)], columns sum to 1
    pair_influence: torch.Tensor   # [B, k, hidden]


# shared encoders -----------------------------------------------------------

def item_width(e: int) -> int:
    return 7 * e


def add_item_encoder(store: ParamStore, prefix: str, schema: Schema, e: int, rng) -> None:
    for name, size in zip(("item", "category", "brand", "seller", "shop"), schema.id_vocab()):
        store.add(f"{prefix}.emb_{name}", (size, e), rng)
    store.add(f"{prefix}.emb_price", (schema.n_price + 1, e), rng)
    # stats plus the LTR rank and a flag saying whether the rank is known
    add_dense(store, f"{prefix}.stats", schema.n_stats + 2, e, rng)


def t_long(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.long)


def t_float(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def encode_items(params: ParamStore, prefix: str, items: ItemBlock) -> torch.Tensor:
    ids = t_long(items.ids)
    parts = [params[f"{prefix}.emb_{name}"][ids[..., i]]
             for i, name in enumerate(("item", "category", "brand", "seller", "shop"))]
    parts.append(params[f"{prefix}.emb_price"][t_long(items.price.astype(np.int64))])
    rank = t_float(items.rank)[..., None]
    real = torch.cat([t_float(items.stats), rank, (rank > 0).to(DTYPE)], dim=-1)
    parts.append(dense(real, params.entries, f"{prefix}.stats", "tanh"))
    return torch.cat(parts, dim=-1)


def add_context_encoder(store: ParamStore, prefix: str, schema: Schema, e: int, h: int, rng) -> None:
    store.add(f"{prefix}.emb_query", (schema.n_queries, e), rng)
    store.add(f"{prefix}.emb_user", (schema.n_users, e), rng)
    add_dense(store, f"{prefix}.ctx", 2 * e + schema.user_pref_dim, h, rng)


def encode_context(params: ParamStore, prefix: str, ctx: ContextBlock) -> torch.Tensor:
    x = torch.cat([params[f"{prefix}.emb_query"][t_long(ctx.query)],
                   params[f"{prefix}.emb_user"][t_long(ctx.user)],
                   t_float(ctx.user_pref)], dim=-1)
    return dense(x, params.entries, f"{prefix}.ctx", "relu")


# FSC -----------------------------------------------------------------------

def init_critic(schema: Schema, config: CriticConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    e, h, g, k = config.embed_dim, config.hidden_dim, config.gru_dim, schema.k
    d = item_width(e)
    store = ParamStore("critic", {"config": config.to_dict(), "schema": asdict(schema)})
    add_item_encoder(store, "enc", schema, e, rng)
    add_context_encoder(store, "enc", schema, e, h, rng)
    store.add("pos_emb", (k, e), rng)
    # session attention, one q/k/v triple per behaviour channel
    for c in range(4):
        store.add(f"san.q{c}", (d, e), rng)
        store.add(f"san.k{c}", (d, e), rng)
        store.add(f"san.v{c}", (d, e), rng)
    # pair influence
    store.add("pin.rel_emb", (2 * k - 1, e), rng)
    add_dense(store, "pin.pair", 2 * (d + e) + e, h, rng)
    store.add("pin.w", (k, h), rng)
    store.add("pin.b", (k,), init="zeros")
    add_gru(store, "gru_f", d, g, rng)
    add_gru(store, "gru_b", d, g, rng)
    add_dense(store, "fcn", 6 + 1 + schema.n_stats, h, rng)
    head_in = d + e + h + 4 * e + h + 2 * g + h
    add_dense(store, "head.1", head_in, h, rng)
    add_dense(store, "head.2", h, 1, rng)
    return store


def su_attention_forward(params: ParamStore, items_enc: torch.Tensor, ctx: ContextBlock,
                         session_enc: torch.Tensor | None = None) -> torch.Tensor:
    """Per-channel attention of each slate item over the session lists.

    Returns [B, k, 4e]; a channel with no events yields zeros.
    """
    if session_enc is None:
        session_enc = encode_items(params, "enc", ctx.session)         # [B, 4, L, d]
    mask = torch.as_tensor(ctx.session_mask)                             # [B, 4, L]
    outs = []
    for c in range(4):
        q = items_enc @ params[f"san.q{c}"]                             # [B, k, e]
        keys = session_enc[:, c] @ params[f"san.k{c}"]                   # [B, L, e]
        vals = session_enc[:, c] @ params[f"san.v{c}"]
        m = mask[:, c]                                                   # [B, L]
        scores = q @ keys.transpose(1, 2) / math.sqrt(q.shape[-1])       # [B, k, L]
        has_any = m.any(-1)                                              # [B]
        safe = m | ~has_any[:, None]
        att = softmax(scores, 1.0, dim=-1, mask=safe[:, None, :].expand_as(scores))
        out = att @ vals
        outs.append(out * has_any[:, None, None].to(DTYPE))
    return torch.cat(outs, dim=-1)


def pair_influence_forward(params: ParamStore, states: torch.Tensor, beta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """I_a = sum_j alpha_ja V_ja with alpha_ja = softmax_j(beta * (w_j . V_ja + b_j)).

    ``states`` is [B, k, D] and already carries the absolute position code.
    Returns (I [B, k, h], alpha [B, k(j), k(a)]).
    """
    B, k, D = states.shape
    idx = torch.arange(k)
    rel = params["pin.rel_emb"][(idx[:, None] - idx[None, :]) + k - 1]  # [k(j), k(a), e]
    sj = states[:, :, None, :].expand(B, k, k, D)
    sa = states[:, None, :, :].expand(B, k, k, D)
    pair = torch.cat([sj, sa, rel.expand(B, k, k, rel.shape[-1])], dim=-1)
    V = dense(pair, params.entries, "pin.pair", "tanh")                  # [B, j, a, h]
    logits = (V * params["pin.w"][None, :, None, :]).sum(-1) + params["pin.b"][None, :, None]
    alpha = softmax(logits, beta, dim=1)
    I = (alpha[..., None] * V).sum(1)
    return I, alpha


def bigru_forward(params: ParamStore, states: torch.Tensor) -> torch.Tensor:
    """out_a = [forward h after item a-1, backward h after item a+1]; zeros at the ends."""
    B, k, _ = states.shape
    g = params["gru_f.U_z"].shape[0]
    zero = torch.zeros(B, g, dtype=DTYPE)
    fwd = gru_sequence(states, zero, params.sub("gru_f"))
    bwd = gru_sequence(states, zero, params.sub("gru_b"), reverse=True)
    before = [zero] + fwd[:-1]          # forward state after item a-1
    after = bwd[1:] + [zero]            # backward state after item a+1
    return torch.cat([torch.stack(before, 1), torch.stack(after, 1)], dim=-1)


def feature_compare_inputs(items: ItemBlock) -> np.ndarray:
    """[B, k, 6 + 1 + S]: share of other items with the same discrete value,
    then z-scores of price and stats within the slate."""
    disc = np.concatenate([items.ids, items.price[..., None].astype(np.int64)], axis=-1)  # [B,k,6]
    k = disc.shape[-2]
    same = (disc[..., :, None, :] == disc[..., None, :, :]).sum(-2) - 1
    frac = same / max(k - 1, 1)
    real = np.concatenate([items.price[..., None], items.stats], axis=-1)
    mu = real.mean(-2, keepdims=True)
    sd = np.maximum(real.std(-2, keepdims=True), 1e-6)
    return np.concatenate([frac, (real - mu) / sd], axis=-1)


def feature_compare_forward(params: ParamStore, items: ItemBlock) -> torch.Tensor:
    return dense(t_float(feature_compare_inputs(items)), params.entries, "fcn", "relu")


def slate_conversion(item_probs: torch.Tensor) -> torch.Tensor:
    """Probability that at least one item converts, items treated as independent."""
    return 1.0 - torch.prod(1.0 - item_probs, dim=-1)


def fsc_forward(params: ParamStore, config: CriticConfig, ctx: ContextBlock,
                items: ItemBlock) -> CriticOutput:
    """Score a batch of k-item slates. Raises if a slate is not exactly k long."""
    k = params["pos_emb"].shape[0]
    if items.ids.shape[-2] != k:
        raise ValueError(f"the critic scores exactly k={k} impressed items, got {items.ids.shape[-2]}")
    enc = encode_items(params, "enc", items)                             # [B, k, d]
    B = enc.shape[0]
    pos = params["pos_emb"][None].expand(B, k, -1)
    ctx_vec = encode_context(params, "enc", ctx)[:, None, :].expand(B, k, -1)
    e, h = pos.shape[-1], ctx_vec.shape[-1]
    g = params["gru_f.U_z"].shape[0]

    def zeros(w):
        return torch.zeros(B, k, w, dtype=DTYPE)

    san = su_attention_forward(params, enc, ctx) if config.use_san else zeros(4 * e)
    states = torch.cat([enc, pos], dim=-1)
    if config.use_pin:
        I, alpha = pair_influence_forward(params, states, config.attention_beta)
    else:
        I, alpha = zeros(h), torch.full((B, k, k), 1.0 / k, dtype=DTYPE)
    gru = bigru_forward(params, enc) if config.use_bigru else zeros(2 * g)
    fcn = feature_compare_forward(params, items) if config.use_fcn else zeros(h)
    x = torch.cat([enc, pos, ctx_vec, san, I, gru, fcn], dim=-1)
    logit = dense(dense(x, params.entries, "head.1", "relu"), params.entries, "head.2")[..., 0]
    p = clamp_probs(torch.sigmoid(logit))
    return CriticOutput(item_probs=p, slate_prob=slate_conversion(p), pair_attention=alpha, pair_influence=I)


def fsc_loss(item_probs: torch.Tensor, labels: np.ndarray, config: CriticConfig) -> torch.Tensor:
    """Label-weighted binary cross-entropy summed over items (atc/pay count as positive)."""
    labels = np.asarray(labels)
    targets = (labels >= LABEL_CODE["atc"]).astype(np.float64)
    weights = config.label_weights()[labels]
    return weighted_bce(item_probs, targets, weights)


# baselines -----------------------------------------------------------------

def init_pointwise(schema: Schema, config: CriticConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    e, h = config.embed_dim, config.hidden_dim
    store = ParamStore("pointwise", {"config": config.to_dict(), "schema": asdict(schema)})
    add_item_encoder(store, "enc", schema, e, rng)
    add_context_encoder(store, "enc", schema, e, h, rng)
    add_dense(store, "head.1", item_width(e) + h, h, rng)
    add_dense(store, "head.2", h, 1, rng)
    return store


def pointwise_forward(params: ParamStore, ctx: ContextBlock, items: ItemBlock) -> torch.Tensor:
    """Independent per-item purchase probability from item and user features only."""
    enc = encode_items(params, "enc", items)
    c = encode_context(params, "enc", ctx)
    c = c.reshape(c.shape[0], *([1] * (enc.dim() - 2)), c.shape[-1]).expand(*enc.shape[:-1], -1)
    x = torch.cat([enc, c], dim=-1)
    return clamp_probs(torch.sigmoid(
        dense(dense(x, params.entries, "head.1", "relu"), params.entries, "head.2")[..., 0]))


def init_ncand(schema: Schema, config: CriticConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    e, h, g = config.embed_dim, config.hidden_dim, config.gru_dim
    store = ParamStore("ncand", {"config": config.to_dict(), "schema": asdict(schema)})
    add_item_encoder(store, "enc", schema, e, rng)
    add_context_encoder(store, "enc", schema, e, h, rng)
    add_gru(store, "gru", item_width(e) + h, g, rng)
    add_dense(store, "head", g, 1, rng)
    return store


def baseline_ncand_scorer(params: ParamStore, ctx: ContextBlock, items: ItemBlock) -> torch.Tensor:
    """One GRU pass over all n LTR-ordered candidates; returns [B, n] probabilities.

    The scorer never learns which k of the n were shown, nor where.
    """
    enc = encode_items(params, "enc", items)
    B, n, _ = enc.shape
    c = encode_context(params, "enc", ctx)[:, None, :].expand(B, n, -1)
    x = torch.cat([enc, c], dim=-1)
    gp = params.sub("gru")
    H = torch.stack(gru_sequence(x, torch.zeros(B, gp["U_z"].shape[0], dtype=DTYPE), gp), 1)
    return clamp_probs(torch.sigmoid(dense(H, params.entries, "head")[..., 0]))


# training ------------------------------------------------------------------

@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0


def train_model(params: ParamStore, batch_probs: Callable[[np.ndarray], torch.Tensor],
                labels: np.ndarray, config: CriticConfig, opt: OptimizerConfig,
                max_steps: int | None = None, log: Callable[[str], None] | None = None) -> TrainLog:
    """Mini-batch SGD with momentum on the weighted item cross-entropy.

    ``batch_probs(idx)`` returns [b, k] item probabilities for rows ``idx``
    of the training set; ``labels`` is [N, k] label codes.
    """
    N = len(labels)
    if N == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(opt.seed)
    optim = torch.optim.SGD(params.tensors(), lr=opt.lr, momentum=opt.momentum)
    out = TrainLog()
    epoch = 0
    while epoch < opt.epochs:
        order = rng.permutation(N)
        total, seen = 0.0, 0
        for start in range(0, N, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            probs = batch_probs(idx)
            loss = fsc_loss(probs, labels[idx], config) / len(idx)
            if not torch.isfinite(loss):
                raise NumericError(f"critic loss became non-finite at epoch {epoch} step {out.steps}")
            optim.zero_grad()
            loss.backward()
            if opt.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params.tensors(), opt.max_grad_norm)
            optim.step()
            params.bump()
            total += loss.item() * len(idx)
            seen += len(idx)
            out.steps += 1
            if max_steps is not None and out.steps >= max_steps:
                break
        out.epoch_loss.append(total / seen)
        if log:
            log(f"epoch {epoch + 1}: loss {total / seen:.5f}")
        epoch += 1
        if max_steps is not None and out.steps >= max_steps:
            break
    if not params.all_finite():
        raise NumericError("critic parameters became non-finite")
    return out


def train_critic(data: SlateBatch, schema: Schema, config: CriticConfig, opt: OptimizerConfig,
                 params: ParamStore | None = None, **kw) -> tuple[ParamStore, TrainLog]:
    params = params or init_critic(schema, config, opt.seed)

    def probs(idx):
        return fsc_forward(params, config, data.context.take(idx), data.items.take(idx)).item_probs

    return params, train_model(params, probs, data.labels, config, opt, **kw)


def train_pointwise(data: SlateBatch, schema: Schema, config: CriticConfig, opt: OptimizerConfig,
                    **kw) -> tuple[ParamStore, TrainLog]:
    params = init_pointwise(schema, config, opt.seed)

    def probs(idx):
        return pointwise_forward(params, data.context.take(idx), data.items.take(idx))

    return params, train_model(params, probs, data.labels, config, opt, **kw)


def train_ncand(cands: CandidateBatch, slate_indices: np.ndarray, labels: np.ndarray, schema: Schema,
                config: CriticConfig, opt: OptimizerConfig, **kw) -> tuple[ParamStore, TrainLog]:
    """Fit the n-input scorer; only the impressed positions enter the loss."""
    params = init_ncand(schema, config, opt.seed)

    def probs(idx):
        scores = baseline_ncand_scorer(params, cands.context.take(idx), cands.items.take(idx))
        return scores.gather(1, t_long(slate_indices[idx]))

    return params, train_model(params, probs, labels, config, opt, **kw)


@torch.no_grad()
def predict(fn: Callable[[np.ndarray], torch.Tensor], N: int, batch: int = 512) -> np.ndarray:
    return np.concatenate([fn(np.arange(s, min(N, s + batch))).numpy() for s in range(0, N, batch)])


def critic_item_probs(params: ParamStore, config: CriticConfig, ctx: ContextBlock, items: ItemBlock,
                      batch: int = 512) -> np.ndarray:
    return predict(lambda i: fsc_forward(params, config, ctx.take(i), items.take(i)).item_probs,
                   len(items.ids), batch)


def calibrate(probs, shift: float):
    """sigmoid(logit(p) - shift), written so p in {0, 1} stays put."""
    if isinstance(probs, torch.Tensor):
        return probs / (probs + (1 - probs) * math.exp(shift))
    probs = np.asarray(probs, dtype=np.float64)
    return probs / (probs + (1 - probs) * math.exp(shift))


def fit_calibration(probs: np.ndarray, targets: np.ndarray, slate_weights: np.ndarray | None = None) -> float:
    """Logit shift that makes the weighted mean probability match the weighted positive rate.

    The label weights and negative subsampling inflate the odds by a roughly
    constant factor; one shift undoes it without touching any ranking.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    w = np.ones(len(probs)) if slate_weights is None else np.asarray(slate_weights, dtype=np.float64)
    w = np.broadcast_to(w.reshape(-1, *([1] * (probs.ndim - 1))), probs.shape)
    goal = float((w * targets).sum() / w.sum())
    if not 0 < goal < 1:
        return 0.0

    def gap(shift):
        return float((w * calibrate(probs, shift)).sum() / w.sum()) - goal

    return float(brentq(gap, -60.0, 60.0, xtol=1e-12))


def config_from_params(params: ParamStore) -> CriticConfig:
    return CriticConfig(**params.meta["config"])

"""Slate generation as a k-step MDP and the generator policy network.

A state is (context, candidates, selected prefix). The network scores every
candidate from the query/user encoding, a session summary, the mean
candidate encoding, the candidate's own encoding and the Sg cell output,
then samples from a softmax restricted to unselected candidates.

Candidate indices are 0-based positions in the LTR-sorted candidate list.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .critic import (add_context_encoder, add_item_encoder, encode_context, encode_items,
                     item_width, t_float, t_long)
from .data import CandidateBatch, CandidateSet, QueryContext, Schema, pack_candidates
from .tensor import DTYPE, ParamStore, add_dense, dense, log_softmax

SG_FEATURES = ("brand", "category", "price", "seller", "shop")
# column of each Sg feature inside the packed (ids..., price) matrix
_SG_COLUMNS = {"brand": 2, "category": 1, "seller": 3, "shop": 4, "price": 5}


class StateError(ValueError):
    pass


@dataclass
class PolicyConfig:
    embed_dim: int = 8
    hidden_dim: int = 32
    sg_dim: int = 4
    beta: float = 1.0
    use_sg: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MdpState:
    context: QueryContext
    candidates: CandidateSet
    selected: tuple[int, ...] = ()
    k: int = 10

    @property
    def step(self) -> int:
        return len(self.selected) + 1

    @property
    def done(self) -> bool:
        return self.step > self.k


@dataclass
class SgOutput:
    encoding: torch.Tensor    # [k, p * sg_dim], rows past the prefix are zero
    diversity: torch.Tensor   # [n, p + 1]


@dataclass
class PolicyOutput:
    weights: torch.Tensor     # [n]
    probs: torch.Tensor       # [n]
    mask: np.ndarray          # [n] True where the candidate is still available


def initial_state(cands: CandidateSet, k: int) -> MdpState:
    if cands.n < k:
        raise StateError(f"need at least k={k} candidates, got {cands.n}")
    return MdpState(context=cands.context, candidates=cands, selected=(), k=k)


def step(state: MdpState, action: int) -> MdpState:
    """Append ``action`` to the selected prefix."""
    if state.done:
        raise StateError("episode already finished")
    if not 0 <= action < state.candidates.n:
        raise StateError(f"action {action} outside 0..{state.candidates.n - 1}")
    if action in state.selected:
        raise StateError(f"candidate {action} already selected")
    return MdpState(state.context, state.candidates, state.selected + (int(action),), state.k)


def init_policy(schema: Schema, config: PolicyConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    e, h, s = config.embed_dim, config.hidden_dim, config.sg_dim
    d = item_width(e)
    p = len(SG_FEATURES)
    store = ParamStore("policy", {"config": config.to_dict(), "schema": asdict(schema)})
    add_item_encoder(store, "enc", schema, e, rng)
    add_context_encoder(store, "enc", schema, e, h, rng)
    add_dense(store, "su", 4 * d, h, rng)
    vocab = {"brand": schema.n_brands, "category": schema.n_categories, "price": schema.n_price + 1,
             "seller": schema.n_sellers, "shop": schema.n_shops}
    for f in SG_FEATURES:
        store.add(f"sg.emb_{f}", (vocab[f], s), rng)
    add_dense(store, "sg.E", schema.k * p * s, h, rng)
    add_dense(store, "score.1", h + h + d + d + 1 + h + p + 1, h, rng)
    add_dense(store, "score.2", h, 1, rng)
    return store


@dataclass
class Prepared:
    """Step-independent encodings for a batch of candidate sets."""

    base: torch.Tensor        # [B, n, F]
    sg_emb: torch.Tensor      # [B, n, p * sg_dim]
    sg_disc: np.ndarray       # [B, n, p]
    k: int
    use_sg: bool


def prepare(params: ParamStore, config: PolicyConfig, cands: CandidateBatch) -> Prepared:
    items = cands.items
    enc = encode_items(params, "enc", items)                          # [B, n, d]
    B, n, d = enc.shape
    ctx = encode_context(params, "enc", cands.context)
    sess = encode_items(params, "enc", cands.context.session)         # [B, 4, L, d]
    m = t_float(cands.context.session_mask)[..., None]
    sess_mean = (sess * m).sum(2) / m.sum(2).clamp(min=1.0)            # [B, 4, d]
    su = dense(sess_mean.reshape(B, 4 * d), params.entries, "su", "relu")
    sc = enc.mean(1)
    rank = t_float(np.arange(n) / n)[None, :, None].expand(B, n, 1)
    base = torch.cat([ctx[:, None].expand(B, n, -1), su[:, None].expand(B, n, -1),
                      sc[:, None].expand(B, n, -1), enc, rank], dim=-1)
    disc = np.concatenate([items.ids, items.price[..., None].astype(np.int64)], axis=-1)
    cols = [_SG_COLUMNS[f] for f in SG_FEATURES]
    sg_disc = disc[..., cols]
    sg_emb = torch.cat([params[f"sg.emb_{f}"][t_long(sg_disc[..., i])]
                        for i, f in enumerate(SG_FEATURES)], dim=-1)
    k = params["sg.E.W"].shape[0] // (len(SG_FEATURES) * params["sg.emb_brand"].shape[1])
    return Prepared(base, sg_emb, sg_disc, k, config.use_sg)


def sg_cell(prep: Prepared, selected: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Encoding of the selected prefix and per-candidate diversity.

    ``selected`` is [B, t]. Returns (E [B, k, p*s] zero-padded past t,
    D [B, n, p+1]). D holds one novelty indicator per feature (1 if no
    selected item shares the value) and the normalised encoding distance to
    the nearest selected item (1 with nothing selected).
    """
    B, n, P = prep.sg_emb.shape
    t = selected.shape[1]
    E = torch.zeros(B, prep.k, P, dtype=DTYPE)
    if t == 0:
        return E, torch.ones(B, n, len(SG_FEATURES) + 1, dtype=DTYPE)
    sel = t_long(selected)
    rows = torch.arange(B)[:, None]
    sel_emb = prep.sg_emb[rows, sel]                                   # [B, t, P]
    E = torch.cat([sel_emb, E[:, t:]], dim=1)
    sel_disc = prep.sg_disc[np.arange(B)[:, None], selected]           # [B, t, p]
    shared = (prep.sg_disc[:, :, None, :] == sel_disc[:, None, :, :]).any(2)
    novelty = t_float(~shared)
    diff = prep.sg_emb[:, :, None, :] - sel_emb[:, None, :, :]         # [B, n, t, P]
    dist = torch.sqrt((diff * diff).sum(-1) + 1e-12)
    norms = torch.sqrt((prep.sg_emb * prep.sg_emb).sum(-1) + 1e-12)
    denom = norms[:, :, None] + torch.sqrt((sel_emb * sel_emb).sum(-1) + 1e-12)[:, None, :]
    nearest = (dist / denom).amin(-1).clamp(max=1.0)
    return E, torch.cat([novelty, nearest[..., None]], dim=-1)


def step_scores(params: ParamStore, prep: Prepared, selected: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Candidate weights w [B, n] and diversity D [B, n, p+1] for one step."""
    E, D = sg_cell(prep, selected)
    B, n, _ = prep.base.shape
    e_vec = dense(E.reshape(B, -1), params.entries, "sg.E", "relu")
    d_in = D
    if not prep.use_sg:
        e_vec, d_in = torch.zeros_like(e_vec), torch.zeros_like(D)
    x = torch.cat([prep.base, e_vec[:, None].expand(B, n, -1), d_in], dim=-1)
    w = dense(dense(x, params.entries, "score.1", "relu"), params.entries, "score.2")[..., 0]
    return w, D


def available(selected: np.ndarray, n: int) -> np.ndarray:
    mask = np.ones((selected.shape[0], n), dtype=bool)
    if selected.shape[1]:
        np.put_along_axis(mask, selected, False, axis=1)
    return mask


def _batch_of(state: MdpState, schema: Schema) -> CandidateBatch:
    return pack_candidates([state.candidates], schema)


def schema_of(params: ParamStore) -> Schema:
    return Schema(**params.meta["schema"])


def config_of(params: ParamStore) -> PolicyConfig:
    return PolicyConfig(**params.meta["config"])


def sg_cell_state(state: MdpState, params: ParamStore) -> SgOutput:
    cfg, schema = config_of(params), schema_of(params)
    prep = prepare(params, cfg, _batch_of(state, schema))
    E, D = sg_cell(prep, np.array([state.selected], dtype=np.int64).reshape(1, -1))
    return SgOutput(encoding=E[0], diversity=D[0])


def policy_forward(state: MdpState, params: ParamStore, beta: float | None = None) -> PolicyOutput:
    """Action distribution at a single state."""
    cfg, schema = config_of(params), schema_of(params)
    beta = cfg.beta if beta is None else beta
    if len(state.selected) >= state.candidates.n:
        raise StateError("no unselected candidates left")
    prep = prepare(params, cfg, _batch_of(state, schema))
    sel = np.array([state.selected], dtype=np.int64).reshape(1, -1)
    w, _ = step_scores(params, prep, sel)
    mask = available(sel, state.candidates.n)
    probs = torch.exp(log_softmax(w, beta, mask=torch.as_tensor(mask)))
    return PolicyOutput(weights=w[0], probs=probs[0], mask=mask[0])


@dataclass
class Rollout:
    slates: np.ndarray        # [B, k] candidate indices in pick order
    probs: np.ndarray         # [B, k] probability of each pick when it was made
    d_norms: np.ndarray       # [B, k] ||D|| of each picked item


@torch.no_grad()
def rollout_batch(params: ParamStore, config: PolicyConfig, cands: CandidateBatch, k: int,
                  mode: str = "sample", rng: np.random.Generator | None = None) -> Rollout:
    """Generate one slate per candidate set; ``greedy`` takes the arg-max weight."""
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    prep = prepare(params, config, cands)
    B, n = cands.scores.shape
    if n < k:
        raise StateError(f"need n >= k, got n={n}, k={k}")
    selected = np.zeros((B, 0), dtype=np.int64)
    probs = np.zeros((B, k))
    dn = np.zeros((B, k))
    rows = np.arange(B)
    for t in range(k):
        w, D = step_scores(params, prep, selected)
        mask = available(selected, n)
        p = torch.exp(log_softmax(w, config.beta, mask=torch.as_tensor(mask))).numpy()
        if mode == "greedy":
            a = np.where(mask, w.numpy(), -np.inf).argmax(1)
        else:
            cdf = np.cumsum(p, axis=1)
            u = rng.random(B) * cdf[:, -1]
            a = (cdf <= u[:, None]).sum(1)
            a = np.minimum(a, n - 1)
            # guard against landing on a zero-probability (masked) slot at the cdf edge
            bad = ~mask[rows, a]
            if bad.any():
                a[bad] = np.where(mask[bad], p[bad], -1).argmax(1)
        probs[:, t] = p[rows, a]
        dn[:, t] = torch.linalg.vector_norm(D[rows, a], dim=-1).numpy()
        selected = np.concatenate([selected, a[:, None]], axis=1)
    return Rollout(selected, probs, dn)


def rollout(context: QueryContext, candidates: CandidateSet, params: ParamStore, mode: str = "sample",
            rng: np.random.Generator | None = None) -> Rollout:
    del context  # carried by the candidate set
    cfg, schema = config_of(params), schema_of(params)
    return rollout_batch(params, cfg, pack_candidates([candidates], schema), schema.k, mode, rng)


def step_log_probs(params: ParamStore, config: PolicyConfig, cands: CandidateBatch,
                   slates: np.ndarray, prep: Prepared | None = None) -> torch.Tensor:
    """log pi(a_t | s_t) along each given slate, [B, k], differentiable in ``params``."""
    slates = np.asarray(slates, dtype=np.int64)
    B, k = slates.shape
    n = cands.scores.shape[1]
    for row in slates:
        if len(set(row.tolist())) != k or row.min() < 0 or row.max() >= n:
            raise StateError(f"infeasible slate {row.tolist()}")
    prep = prep or prepare(params, config, cands)
    out = []
    for t in range(k):
        sel = slates[:, :t]
        w, _ = step_scores(params, prep, sel)
        lp = log_softmax(w, config.beta, mask=torch.as_tensor(available(sel, n)))
        out.append(lp.gather(1, t_long(slates[:, t:t + 1]))[:, 0])
    return torch.stack(out, 1)


def slate_log_prob(params: ParamStore, config: PolicyConfig, cands: CandidateBatch,
                   slates: np.ndarray) -> torch.Tensor:
    """log of the probability that the policy emits exactly this ordered slate."""
    return step_log_probs(params, config, cands, slates).sum(1)

"""Offline evaluation: AUC triple, replacement ratio, (w)IPS, slate entropy,
and export of the pair-influence attention matrix."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .critic import CriticConfig, fsc_forward
from .data import (LABEL_CODE, CandidateBatch, ItemFeatures, QueryContext, SlateSample,
                   pack_slates, read_all, Schema)
from .policy import PolicyConfig, rollout_batch, slate_log_prob
from .rl import critic_slate_scores, slate_entropy_rows
from .tensor import ParamStore


class UndefinedAUCError(ValueError):
    pass


class SupportError(ValueError):
    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"behaviour policy gives zero probability to logged samples {self.rows[:20]}"
                         + (" ..." if len(self.rows) > 20 else ""))


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class AucTriple:
    pv_pay: float
    click_pay: float
    slate_pay: float


def auc_triple(item_probs: np.ndarray, labels: np.ndarray, slate_scores: np.ndarray | None = None) -> AucTriple:
    """pv-pay over every shown item, click-pay over clicked items, slate-pay per slate."""
    item_probs = np.asarray(item_probs)
    labels = np.asarray(labels)
    pay = labels == LABEL_CODE["pay"]
    clicked = labels >= LABEL_CODE["click"]
    if slate_scores is None:
        slate_scores = 1.0 - np.prod(1.0 - item_probs, axis=-1)
    return AucTriple(pv_pay=auc(item_probs, pay), click_pay=auc(item_probs[clicked], pay[clicked]),
                     slate_pay=auc(slate_scores, pay.any(-1)))


def eval_critic(critic: ParamStore, config: CriticConfig, test: list[SlateSample] | object,
                schema: Schema | None = None, batch: int = 512) -> AucTriple:
    data = pack_slates(test, schema) if isinstance(test, list) else test
    probs, slates = [], []
    with torch.no_grad():
        for s in range(0, len(data), batch):
            sub = data.take(np.arange(s, min(len(data), s + batch)))
            out = fsc_forward(critic, config, sub.context, sub.items)
            probs.append(out.item_probs.numpy())
            slates.append(out.slate_prob.numpy())
    return auc_triple(np.concatenate(probs), data.labels, np.concatenate(slates))


def replacement_ratio(policy: ParamStore, policy_cfg: PolicyConfig, critic: ParamStore,
                      critic_cfg: CriticConfig, cands: CandidateBatch, k: int) -> float:
    """Share of contexts where the critic strictly prefers the greedy slate over the LTR top-k."""
    gen = rollout_batch(policy, policy_cfg, cands, k, "greedy").slates
    top = np.tile(np.arange(k), (len(cands), 1))
    return replacement_ratio_from(critic_slate_scores(critic, critic_cfg, cands, gen),
                                  critic_slate_scores(critic, critic_cfg, cands, top))


def replacement_ratio_from(generated: np.ndarray, original: np.ndarray) -> float:
    return float(np.mean(np.asarray(generated) > np.asarray(original)))


# importance sampling -----------------------------------------------------------

def _ratios(target_logp, behavior_logp) -> np.ndarray:
    b = np.asarray(behavior_logp, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(b))
    if len(bad):
        raise SupportError(bad.tolist())
    return np.exp(np.asarray(target_logp, dtype=np.float64) - b)


def ips_estimate(target_logp, behavior_logp, rewards, weighted: bool = False) -> float:
    """(1/m) sum ratio_i r_i, or sum ratio_i r_i / sum ratio_i when ``weighted``."""
    w = _ratios(target_logp, behavior_logp)
    r = np.asarray(rewards, dtype=np.float64)
    num = math.fsum((w * r).tolist())
    if weighted:
        den = math.fsum(w.tolist())
        return num / den if den > 0 else 0.0
    return num / len(r)


def ips_stderr(target_logp, behavior_logp, rewards, weighted: bool = False) -> float:
    w = _ratios(target_logp, behavior_logp)
    r = np.asarray(rewards, dtype=np.float64)
    m = len(r)
    if weighted:
        v = ips_estimate(target_logp, behavior_logp, rewards, weighted=True)
        wn = w / w.mean()
        return float(np.sqrt(np.mean((wn * (r - v)) ** 2) / m))
    return float(np.std(w * r, ddof=1) / np.sqrt(m))


@torch.no_grad()
def ips(behavior: ParamStore, target: ParamStore, cands: CandidateBatch, slates: np.ndarray,
        rewards: np.ndarray, weighted: bool = False) -> float:
    """Estimate the target policy's reward from slates logged under ``behavior``."""
    b = slate_log_prob(behavior, PolicyConfig(**behavior.meta["config"]), cands, slates).numpy()
    t = slate_log_prob(target, PolicyConfig(**target.meta["config"]), cands, slates).numpy()
    return ips_estimate(t, b, rewards, weighted)


# diversity ---------------------------------------------------------------

FEATURE_COLUMN = {"brand": 2, "category": 1, "price_bucket": None}


def slate_entropy(slates, feature: str = "brand") -> float:
    """Mean within-slate Shannon entropy (nats) of a feature.

    ``slates`` is a list of item sequences or an ItemBlock-like object with
    ``ids``/``price`` arrays of shape [B, k].
    """
    if feature not in FEATURE_COLUMN:
        raise ValueError(f"unknown feature {feature!r}")
    if hasattr(slates, "ids"):
        vals = slates.price if feature == "price_bucket" else slates.ids[..., FEATURE_COLUMN[feature]]
    else:
        attr = "price_bucket" if feature == "price_bucket" else f"{feature}_id"
        vals = np.array([[getattr(it, attr) for it in s] for s in slates])
    if len(vals) == 0:
        raise ValueError("no slates")
    return float(slate_entropy_rows(np.asarray(vals)).mean())


# attention export ----------------------------------------------------------

def attention_matrix(critic: ParamStore, config: CriticConfig, sample: SlateSample,
                     schema: Schema) -> np.ndarray:
    """alpha[j, a]: weight of influencing item j on item a (columns sum to 1)."""
    data = pack_slates([sample], schema)
    with torch.no_grad():
        return fsc_forward(critic, config, data.context, data.items).pair_attention[0].numpy()


def write_attention_csv(matrix: np.ndarray, path) -> None:
    k = matrix.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["influencer"] + [f"item{a + 1}" for a in range(k)])
        for j in range(k):
            w.writerow([f"item{j + 1}"] + [repr(float(x)) for x in matrix[j]])


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    mat = np.array([[float(x) for x in r[1:]] for r in body])
    if mat.shape != (len(head) - 1, len(head) - 1):
        raise ValueError(f"attention CSV is not square: {mat.shape}")
    return mat


def export_attention(critic: ParamStore, config: CriticConfig, sample: SlateSample,
                     schema: Schema, path) -> np.ndarray:
    mat = attention_matrix(critic, config, sample, schema)
    write_attention_csv(mat, path)
    return mat


DEMO_PRICES = (4, 3, 5, 5, 5, 5, 5, 5, 4, 5)


def demo_slate() -> SlateSample:
    """Ten items identical except for item id and price (4,3,5,5,5,5,5,5,4,5)."""
    path = resources.files("gcrlab").joinpath("resources/attention_demo.jsonl")
    with resources.as_file(path) as p:
        records, _ = read_all(p, expect="slate")
    return records[0]


def build_demo_slate() -> SlateSample:
    items = tuple(ItemFeatures(item_id=100 + i, category_id=3, brand_id=7, seller_id=11, shop_id=12,
                               price_bucket=price, stats=(0.5, 0.2, 0.0, 0.0))
                  for i, price in enumerate(DEMO_PRICES))
    ctx = QueryContext(query_id=0, user_id=0, user_pref=(0.5, 0.7, 0.0, 0.0))
    return SlateSample(context=ctx, items=items, labels=("impression",) * len(items))


# report ------------------------------------------------------------------

@dataclass
class EvalReport:
    pv_pay_auc: float
    click_pay_auc: float
    slate_pay_auc: float
    replacement_ratio: float | None = None
    ips: float | None = None
    wips: float | None = None
    brand_entropy: float | None = None
    price_entropy: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = ["metric                value", "-------------------   ------------"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name:<21} {'absent' if v is None else repr(float(v))}")
        return "\n".join(lines)

    @staticmethod
    def parse_table(text: str) -> dict:
        out = {}
        for line in text.splitlines()[2:]:
            name, value = line.split()
            out[name] = None if value == "absent" else float(value)
        return out


def table(rows: list[dict], columns: list[str]) -> str:
    """Plain fixed-width table of dict rows."""
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns}
    buf = io.StringIO()
    buf.write("  ".join(c.ljust(widths[c]) for c in columns) + "\n")
    buf.write("  ".join("-" * widths[c] for c in columns) + "\n")
    for r in rows:
        buf.write("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in columns) + "\n")
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
    return str(v)


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
